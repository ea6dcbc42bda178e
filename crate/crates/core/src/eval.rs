//! PCA whitening and recall@k on geo-tagged retrieval.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::mining::GallerySet;
use crate::tensor::{dot, l2_normalize};
use crate::vlad::Descriptor;

/// Eigenvalue floor added before the inverse square root.
pub const WHITENING_EPS: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest count as rank-deficient.
pub const RANK_TOL: f64 = 1e-10;
/// A retrieval is correct when a top-k image lies within this many meters.
pub const RECALL_RADIUS: f64 = 25.0;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningModel {
    pub mean: Vec<f64>,
    /// `out_dim x in_dim`, row-major.
    pub projection: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
}

pub fn fit_whitening(train: &[Descriptor], out_dim: usize) -> Result<WhiteningModel> {
    fit(train, out_dim, false)
}

/// Like [`fit_whitening`], but keeps only as many components as the
/// covariance has numerically non-zero eigenvalues when that is fewer
/// than `max_dim`.
pub fn fit_whitening_capped(train: &[Descriptor], max_dim: usize) -> Result<WhiteningModel> {
    fit(train, max_dim, true)
}

fn fit(train: &[Descriptor], out_dim: usize, cap: bool) -> Result<WhiteningModel> {
    let n = train.len();
    let in_dim = train.first().map(Vec::len).unwrap_or(0);
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::Parameter(format!(
            "whitening to {out_dim} dims from {in_dim}"
        )));
    }
    if n <= out_dim {
        return Err(Error::Fit(format!("{n} samples cannot fit {out_dim} components")));
    }
    if train.iter().any(|d| d.len() != in_dim) {
        return shape_err("descriptors differ in length");
    }
    let mut mean = vec![0.0; in_dim];
    for d in train {
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(in_dim, in_dim);
    let mut centered = vec![0.0; in_dim];
    for d in train {
        for (c, (v, m)) in centered.iter_mut().zip(d.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..in_dim {
            let ci = centered[i];
            for j in i..in_dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..in_dim {
        for j in i..in_dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..in_dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let largest = eig.eigenvalues[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * largest.max(0.0) && eig.eigenvalues[i] > 0.0)
        .count();
    let out_dim = if cap { out_dim.min(rank) } else { out_dim };
    if rank == 0 || rank < out_dim {
        return Err(Error::Fit(format!(
            "covariance rank {rank} below requested {out_dim} dims"
        )));
    }
    let mut projection = Vec::with_capacity(out_dim * in_dim);
    for &i in &order[..out_dim] {
        let scale = 1.0 / (eig.eigenvalues[i] + WHITENING_EPS).sqrt();
        projection.extend(eig.eigenvectors.column(i).iter().map(|v| v * scale));
    }
    Ok(WhiteningModel {
        mean,
        projection,
        out_dim,
        in_dim,
    })
}

impl WhiteningModel {
    /// Centered projection without the final normalization.
    pub fn project(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.in_dim {
            return shape_err(format!(
                "whitening expects {} dims, got {}",
                self.in_dim,
                d.len()
            ));
        }
        let centered: Vec<f64> = d.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self
            .projection
            .chunks(self.in_dim)
            .map(|row| dot(row, &centered))
            .collect())
    }

    /// Projection followed by L2 normalization.
    pub fn apply(&self, d: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(&self.project(d)?)
    }
}

pub fn apply_whitening(model: &WhiteningModel, d: &[f64]) -> Result<Vec<f64>> {
    model.apply(d)
}

/// Sample covariance (1/n normalization) of a set of vectors.
pub fn covariance(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut mean = vec![0.0; d];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    cov
}

/// Gallery rows ranked by descending similarity, ties to the lower row.
pub fn rank_gallery(query: &[f64], gallery: &[Descriptor]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| dot(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Fraction of queries with at least one of their top-k retrieved gallery
/// images within `radius` meters, for each `k` in `ks`.
pub fn recall_at_k(
    query_positions: &[f64],
    queries: &[Descriptor],
    gallery: &GallerySet,
    ks: &[usize],
    radius: f64,
) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(Error::Parameter("empty gallery".into()));
    }
    if queries.is_empty() || queries.len() != query_positions.len() {
        return Err(Error::Parameter("queries and positions must be non-empty and aligned".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k == 0 || max_k > gallery.len() {
        return Err(Error::Parameter(format!(
            "k up to {max_k} with {} gallery images",
            gallery.len()
        )));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, &qpos) in queries.iter().zip(query_positions) {
        let ranked = rank_gallery(q, &gallery.descriptors);
        let first_hit = ranked
            .iter()
            .take(max_k)
            .position(|&r| (gallery.positions[r] - qpos).abs() <= radius);
        if let Some(pos) = first_hit {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / queries.len() as f64)
        .collect())
}

/// Ranks starting at 0; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Parameter("spearman needs two aligned samples of length >= 2".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("constant sample has no rank correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}
