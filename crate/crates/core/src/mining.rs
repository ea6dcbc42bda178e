//! Training tuple construction: easiest positives, geographic negatives,
//! k-reciprocal difficult positives and per-negative hardest regions.

use rand::seq::index::sample;
use rand::Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::regions::{candidate_descriptors, RegionMode};
use crate::synth::{NEGATIVE_RADIUS, POSITIVE_RADIUS};
use crate::tensor::dot;
use crate::vlad::{Descriptor, VladParams};

/// Only the most similar images beyond the negative radius are sampled from.
pub const NEGATIVE_POOL_CAP: usize = 1000;

/// Gallery descriptors with their reported positions; `ids[i]` is the
/// dataset id of row `i`.
#[derive(Clone, Debug, Default)]
pub struct GallerySet {
    pub ids: Vec<usize>,
    pub positions: Vec<f64>,
    pub descriptors: Vec<Descriptor>,
}

impl GallerySet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One mined training example, as dataset ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub query: usize,
    pub easiest_positive: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Index of the maximum, ties to the lowest index.
pub fn argmax(values: &[f64]) -> Option<(usize, f64)> {
    values.iter().copied().enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((i, v)),
    })
}

/// Most similar gallery row within [`POSITIVE_RADIUS`] of the query;
/// `None` tells the caller to skip the query.
pub fn easiest_positive(query_pos: f64, query: &[f64], gallery: &GallerySet) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (pos, desc)) in gallery.positions.iter().zip(&gallery.descriptors).enumerate() {
        if (pos - query_pos).abs() > POSITIVE_RADIUS {
            continue;
        }
        let s = dot(query, desc);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub rows: Vec<usize>,
    /// The pool held fewer than the requested number of images.
    pub short: bool,
}

/// Uniform sample without replacement from the most similar gallery images
/// farther than [`NEGATIVE_RADIUS`] from the query.
pub fn sample_negatives<R: Rng + ?Sized>(
    query_pos: f64,
    query: &[f64],
    gallery: &GallerySet,
    n: usize,
    rng: &mut R,
) -> NegativeSample {
    let mut pool: Vec<(usize, f64)> = gallery
        .positions
        .iter()
        .zip(&gallery.descriptors)
        .enumerate()
        .filter(|(_, (pos, _))| (*pos - query_pos).abs() > NEGATIVE_RADIUS)
        .map(|(i, (_, d))| (i, dot(query, d)))
        .collect();
    pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pool.truncate(NEGATIVE_POOL_CAP);
    if pool.len() <= n {
        return NegativeSample {
            rows: pool.iter().map(|p| p.0).collect(),
            short: pool.len() < n,
        };
    }
    let rows = sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].0)
        .collect();
    NegativeSample { rows, short: false }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery rows that are mutual top-k neighbors of the query under
/// Euclidean distance, nearest first, padded with the query's nearest
/// non-reciprocal neighbors up to length `k`.
///
/// When ranking a gallery item's own neighbors the query wins distance
/// ties; gallery ties go to the lower row.
pub fn k_reciprocal(query: &[f64], gallery: &[Descriptor], k: usize) -> Result<Vec<usize>> {
    if k == 0 || gallery.len() <= k {
        return Err(Error::Parameter(format!(
            "k-reciprocal needs 0 < k < gallery size, got k={k} with {} images",
            gallery.len()
        )));
    }
    let dq: Vec<f64> = gallery.iter().map(|g| sq_dist(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dq[a].total_cmp(&dq[b]).then(a.cmp(&b)));
    let top = &order[..k];

    let mut reciprocal = Vec::with_capacity(k);
    let mut plain = Vec::new();
    for &g in top {
        let to_query = dq[g];
        let closer = gallery
            .iter()
            .enumerate()
            .filter(|&(j, other)| j != g && sq_dist(&gallery[g], other) < to_query)
            .take(k)
            .count();
        if closer < k {
            reciprocal.push(g);
        } else {
            plain.push(g);
        }
    }
    reciprocal.extend(plain);
    Ok(reciprocal)
}

/// Plain Euclidean top-k, nearest first.
pub fn top_k(query: &[f64], gallery: &[Descriptor], k: usize) -> Result<Vec<usize>> {
    if k == 0 || gallery.len() < k {
        return Err(Error::Parameter(format!("top-{k} from {} images", gallery.len())));
    }
    let dq: Vec<f64> = gallery.iter().map(|g| sq_dist(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dq[a].total_cmp(&dq[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Similarities closer than this count as ties when picking regions, so
/// rounding noise between equal candidates cannot move the choice off the
/// lowest id.
pub const REGION_TIE_EPS: f64 = 1e-12;

/// Index of the most similar candidate; later candidates must win by more
/// than [`REGION_TIE_EPS`].
pub fn pick_region(sims: &[f64]) -> Option<(usize, f64)> {
    sims.iter().copied().enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv + REGION_TIE_EPS => best,
        _ => Some((i, v)),
    })
}

/// Candidate (full image or sub-region) of a negative most similar to the
/// query. Returns the region id, its descriptor and the similarity.
pub fn hardest_negative_region(
    query: &[f64],
    negative: &FeatureMap,
    params: &VladParams,
    mode: RegionMode,
) -> Result<(u8, Descriptor, f64)> {
    let mut candidates = candidate_descriptors(negative, params, mode)?;
    let sims: Vec<f64> = candidates.iter().map(|c| dot(query, c)).collect();
    let (best, sim) = pick_region(&sims).expect("at least the full image");
    Ok((mode.ids()[best], candidates.swap_remove(best), sim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::decompose;
    use crate::vlad::aggregate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gallery(positions: &[f64], sims: &[f64]) -> GallerySet {
        // 2-D unit descriptors whose dot with [1, 0] is the requested sim
        GallerySet {
            ids: (0..positions.len()).map(|i| 100 + i).collect(),
            positions: positions.to_vec(),
            descriptors: sims.iter().map(|s| vec![*s, (1.0 - s * s).sqrt()]).collect(),
        }
    }

    #[test]
    fn easiest_positive_cases() {
        let q = [1.0, 0.0];
        assert_eq!(easiest_positive(0.0, &q, &gallery(&[5.0, 40.0], &[0.1, 0.9])), Some(0));
        assert_eq!(easiest_positive(0.0, &q, &gallery(&[5.0, -3.0], &[0.7, 0.9])), Some(1));
        assert_eq!(easiest_positive(0.0, &q, &gallery(&[30.0, -40.0], &[0.7, 0.9])), None);
        // ties go to the lower row
        assert_eq!(easiest_positive(0.0, &q, &gallery(&[1.0, 2.0], &[0.5, 0.5])), Some(0));
    }

    #[test]
    fn negatives_exact_pool() {
        let g = gallery(&[0.0, 30.0, 40.0, 50.0], &[0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_negatives(0.0, &[1.0, 0.0], &g, 3, &mut rng);
        assert_eq!(s.rows, vec![3, 2, 1]);
        assert!(!s.short);
        let s = sample_negatives(0.0, &[1.0, 0.0], &g, 5, &mut rng);
        assert!(s.short);
        assert_eq!(s.rows.len(), 3);
    }

    #[test]
    fn negatives_deterministic_and_far() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let positions: Vec<f64> = (0..80).map(|_| rng.random_range(0.0..200.0)).collect();
        let sims: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = gallery(&positions, &sims);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            sample_negatives(100.0, &[1.0, 0.0], &g, 10, &mut r)
        };
        assert_eq!(run(4), run(4));
        let s = run(4);
        assert_eq!(s.rows.len(), 10);
        let mut uniq = s.rows.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        for r in s.rows {
            assert!((positions[r] - 100.0).abs() > NEGATIVE_RADIUS);
        }
    }

    fn pts(v: &[f64]) -> Vec<Descriptor> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn k_reciprocal_examples() {
        assert_eq!(k_reciprocal(&[0.0], &pts(&[1.0, 2.0, 10.0, 11.0]), 2).unwrap(), vec![0, 1]);
        assert_eq!(k_reciprocal(&[0.0], &pts(&[1.0, 1.5, 2.5]), 1).unwrap(), vec![0]);
        let dup = pts(&[3.0; 4]);
        assert_eq!(k_reciprocal(&[3.0], &dup, 3).unwrap(), vec![0, 1, 2]);
        assert!(k_reciprocal(&[0.0], &pts(&[1.0, 2.0]), 2).is_err());
    }

    #[test]
    fn reciprocal_neighbors_come_before_padding() {
        // query 0: top-2 is {1.0, -1.02}; 1.0 has 1.05 and 1.1 closer than the
        // query, -1.02 has the query as its nearest neighbor
        let g = pts(&[1.0, 1.05, 1.1, -1.02]);
        assert_eq!(k_reciprocal(&[0.0], &g, 2).unwrap(), vec![3, 0]);
        let g = pts(&[1.0, 1.2, 1.3]);
        assert_eq!(k_reciprocal(&[0.0], &g, 1).unwrap(), vec![0]);
    }

    #[test]
    fn hardest_region_constant_negative_is_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = VladParams::from_centers((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), 4, 3, 2.0).unwrap();
        let col = [0.2, -0.5, 0.7];
        let fm = FeatureMap::new(3, 4, 6, col.iter().flat_map(|v| std::iter::repeat_n(*v, 24)).collect()).unwrap();
        let q = aggregate(fm.view(), &params).unwrap();
        let (id, _, _) = hardest_negative_region(&q, &fm, &params, RegionMode::All).unwrap();
        assert_eq!(id, 0);
    }

    #[test]
    fn hardest_region_finds_matching_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = VladParams::from_centers((0..24).map(|_| rng.random_range(-1.0..1.0)).collect(), 6, 4, 3.0).unwrap();
        let mut fm = FeatureMap::new(4, 4, 6, (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // top-left quarter carries a distinctive constant texture
        for c in 0..4 {
            for y in 0..2 {
                for x in 0..3 {
                    fm.data[c * 24 + y * 6 + x] = 2.0 * ((c % 2) as f64) - 1.0;
                }
            }
        }
        let set = decompose(&fm).unwrap();
        let q = aggregate(fm.window(set.window(5)), &params).unwrap();
        let (id, desc, sim) = hardest_negative_region(&q, &fm, &params, RegionMode::All).unwrap();
        // exhaustive 9-way comparison
        let sims: Vec<f64> = (0..9u8)
            .map(|r| dot(&q, &aggregate(fm.window(set.window(r)), &params).unwrap()))
            .collect();
        let (best, best_sim) = argmax(&sims).unwrap();
        assert_eq!(id, 5);
        assert_eq!(best as u8, id);
        assert_eq!(sim, best_sim);
        assert_eq!(dot(&q, &desc), sim);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some((1, 3.0)));
        assert_eq!(argmax(&[]), None);
    }
}
