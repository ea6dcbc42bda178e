#![allow(dead_code)]

use geoloc::encoder::FeatureMap;
use geoloc::tensor::Window;
use geoloc::vlad::{aggregate, VladParams};
use rand::Rng;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mutual-neighbor check by fully sorting every neighborhood, with the
/// query inserted as an extra point that wins distance ties.
pub fn brute_k_reciprocal(query: &[f64], gallery: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = gallery.len();
    let mut by_query: Vec<(f64, usize)> = (0..n).map(|i| (sq_dist(query, &gallery[i]), i)).collect();
    by_query.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let top: Vec<usize> = by_query[..k].iter().map(|p| p.1).collect();

    // neighbor lists over gallery + query; the query is point `n`
    let neighbors_of = |g: usize| -> Vec<usize> {
        let mut others: Vec<(f64, usize, usize)> = (0..=n)
            .filter(|&j| j != g)
            .map(|j| {
                let p = if j == n { query } else { &gallery[j][..] };
                let tie_rank = if j == n { 0 } else { 1 + j };
                (sq_dist(&gallery[g], p), tie_rank, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        others.into_iter().take(k).map(|o| o.2).collect()
    };
    let (mut mutual, mut rest) = (Vec::new(), Vec::new());
    for g in top {
        if neighbors_of(g).contains(&n) {
            mutual.push(g);
        } else {
            rest.push(g);
        }
    }
    mutual.extend(rest);
    mutual
}

/// Region windows written out by hand: halves of odd extents share the
/// middle row or column.
pub fn region_windows(h: usize, w: usize) -> Vec<Window> {
    let (t, b) = ((0, h.div_ceil(2)), (h / 2, h));
    let (l, r) = ((0, w.div_ceil(2)), (w / 2, w));
    let all_r = (0, h);
    let all_c = (0, w);
    [
        (all_r, all_c),
        (all_r, l),
        (all_r, r),
        (t, all_c),
        (b, all_c),
        (t, l),
        (t, r),
        (b, l),
        (b, r),
    ]
    .into_iter()
    .map(|((top, bottom), (left, right))| Window {
        top,
        bottom,
        left,
        right,
    })
    .collect()
}

/// Exhaustive 9-way search over physically cropped regions.
pub fn brute_hardest_region(query: &[f64], fm: &FeatureMap, params: &VladParams) -> (u8, f64) {
    let mut best = (0u8, f64::NEG_INFINITY);
    for (id, w) in region_windows(fm.height, fm.width).into_iter().enumerate() {
        let crop = fm.crop(w).unwrap();
        let d = aggregate(crop.view(), params).unwrap();
        let s: f64 = d.iter().zip(query).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (id as u8, s);
        }
    }
    best
}

pub fn random_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v = random_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_map<R: Rng>(rng: &mut R, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(d, h, w, random_vec(rng, d * h * w)).unwrap()
}

/// Loss written directly as a negative log-likelihood of the positive
/// against each negative.
pub fn hard_loss_direct(q: &[f64], p: &[f64], negs: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sp = dot(q, p);
    negs.iter()
        .map(|n| {
            let sn = dot(q, n);
            -(sp.exp() / (sp.exp() + sn.exp())).ln()
        })
        .sum()
}

/// Random orthogonal matrix by Gram-Schmidt on uniform random rows.
pub fn random_rotation<R: Rng>(rng: &mut R, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = random_vec(rng, d);
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn rotate(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}
