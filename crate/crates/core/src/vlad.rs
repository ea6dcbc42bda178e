//! Learnable VLAD aggregation: soft-assign every spatial column of a
//! feature map to K centers, sum the weighted residuals, intra-normalize
//! each center's row and L2-normalize the flattened result.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{FeatureMap, FeatureMapView};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Graph, Tensor, Var, Window, NORM_EPS};

/// Assignment sharpness used when deriving projections from centers.
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const KMEANS_ITERS: usize = 25;
/// Cap on columns fed to k-means.
pub const KMEANS_MAX_COLUMNS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct VladParams {
    /// `[K, D]` assignment projection.
    pub weight: Tensor,
    /// `[K]` assignment bias.
    pub bias: Tensor,
    /// `[K, D]` cluster centers.
    pub centers: Tensor,
}

/// Unit-norm descriptor of length `K * D`.
pub type Descriptor = Vec<f64>;

impl VladParams {
    pub fn clusters(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn descriptor_len(&self) -> usize {
        self.clusters() * self.dim()
    }

    pub fn from_centers(centers: Vec<f64>, k: usize, d: usize, alpha: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Parameter(format!("need at least 2 clusters, got {k}")));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Init("non-finite cluster center".into()));
        }
        let weight: Vec<f64> = centers.iter().map(|c| 2.0 * alpha * c).collect();
        let bias: Vec<f64> = centers
            .chunks(d)
            .map(|c| -alpha * tensor::dot(c, c))
            .collect();
        Ok(Self {
            weight: Tensor::new(vec![k, d], weight)?,
            bias: Tensor::new(vec![k], bias)?,
            centers: Tensor::new(vec![k, d], centers)?,
        })
    }
}

/// Soft-assignment residual sums over `window`. Returns the `[K, D]`
/// residual matrix and the `[P, K]` assignment matrix (positions in
/// row-major window order).
pub(crate) fn residuals(
    fm: &[f64],
    (d, h, w): (usize, usize, usize),
    window: Window,
    weight: &[f64],
    bias: &[f64],
    centers: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = bias.len();
    let plane = h * w;
    let mut v = vec![0.0; k * d];
    let mut assign = Vec::with_capacity(window.area() * k);
    let mut x = vec![0.0; d];
    let mut scores = vec![0.0; k];
    for y in window.top..window.bottom {
        for xc in window.left..window.right {
            let pos = y * w + xc;
            for (c, xv) in x.iter_mut().enumerate() {
                *xv = fm[c * plane + pos];
            }
            for (j, s) in scores.iter_mut().enumerate() {
                *s = tensor::dot(&weight[j * d..(j + 1) * d], &x) + bias[j];
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let a = s / z;
                assign.push(a);
                let row = &mut v[j * d..(j + 1) * d];
                let cen = &centers[j * d..(j + 1) * d];
                for c in 0..d {
                    row[c] += a * (x[c] - cen[c]);
                }
            }
        }
    }
    (v, assign)
}

pub(crate) struct ResidualGrads {
    pub fm: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub centers: Vec<f64>,
}

pub(crate) fn residuals_backward(
    fm: &[f64],
    (d, h, w): (usize, usize, usize),
    window: Window,
    weight: &[f64],
    centers: &[f64],
    assign: &[f64],
    gv: &[f64],
) -> ResidualGrads {
    let k = centers.len() / d;
    let plane = h * w;
    let mut g = ResidualGrads {
        fm: vec![0.0; fm.len()],
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; k],
        centers: vec![0.0; centers.len()],
    };
    let mut mass = vec![0.0; k];
    let mut x = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut ga = vec![0.0; k];
    let mut p = 0;
    for y in window.top..window.bottom {
        for xc in window.left..window.right {
            let pos = y * w + xc;
            for (c, xv) in x.iter_mut().enumerate() {
                *xv = fm[c * plane + pos];
            }
            let a = &assign[p * k..(p + 1) * k];
            gx.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..k {
                mass[j] += a[j];
                let grow = &gv[j * d..(j + 1) * d];
                let cen = &centers[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for c in 0..d {
                    acc += grow[c] * (x[c] - cen[c]);
                    gx[c] += a[j] * grow[c];
                }
                ga[j] = acc;
            }
            let mean: f64 = a.iter().zip(&ga).map(|(ai, gi)| ai * gi).sum();
            for j in 0..k {
                let gs = a[j] * (ga[j] - mean);
                g.bias[j] += gs;
                let wrow = &weight[j * d..(j + 1) * d];
                let gwrow = &mut g.weight[j * d..(j + 1) * d];
                for c in 0..d {
                    gwrow[c] += gs * x[c];
                    gx[c] += gs * wrow[c];
                }
            }
            for c in 0..d {
                g.fm[c * plane + pos] += gx[c];
            }
            p += 1;
        }
    }
    for j in 0..k {
        for c in 0..d {
            g.centers[j * d + c] = -mass[j] * gv[j * d + c];
        }
    }
    g
}

fn check_channels(fm: &FeatureMap, params: &VladParams) -> Result<()> {
    if fm.channels != params.dim() {
        return shape_err(format!(
            "feature map has {} channels, VLAD expects {}",
            fm.channels,
            params.dim()
        ));
    }
    Ok(())
}

/// Descriptor of the columns visible through `view`.
pub fn aggregate(view: FeatureMapView<'_>, params: &VladParams) -> Result<Descriptor> {
    let fm = view.map;
    check_channels(fm, params)?;
    let w = view.window;
    if w.bottom > fm.height || w.right > fm.width || w.area() == 0 {
        return shape_err(format!("window {w:?} outside {}x{} map", fm.height, fm.width));
    }
    let d = params.dim();
    let (mut v, _) = residuals(
        &fm.data,
        (fm.channels, fm.height, fm.width),
        w,
        params.weight.data(),
        params.bias.data(),
        params.centers.data(),
    );
    for row in v.chunks_mut(d) {
        let n = tensor::norm(row).max(NORM_EPS);
        row.iter_mut().for_each(|x| *x /= n);
    }
    tensor::l2_normalize(&v)
}

/// Graph handles for the VLAD parameters.
#[derive(Clone, Copy, Debug)]
pub struct VladVars {
    pub weight: Var,
    pub bias: Var,
    pub centers: Var,
}

impl VladVars {
    pub fn register(g: &mut Graph, params: &VladParams, trainable: bool) -> Self {
        let mut add = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            weight: add(&params.weight),
            bias: add(&params.bias),
            centers: add(&params.centers),
        }
    }
}

/// Differentiable counterpart of [`aggregate`]; produces bitwise the same
/// values.
pub fn aggregate_var(g: &mut Graph, fm: Var, window: Window, vars: VladVars) -> Result<Var> {
    let v = g.vlad(fm, window, vars.weight, vars.bias, vars.centers)?;
    let rn = g.row_normalize(v)?;
    g.normalize(rn)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means over the spatial columns of `sample_maps`.
pub fn kmeans_columns(sample_maps: &[FeatureMap], k: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let first = sample_maps
        .first()
        .ok_or_else(|| Error::Init("no sample feature maps".into()))?;
    let d = first.channels;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for fm in sample_maps {
        if fm.channels != d {
            return shape_err("sample maps disagree on channel count");
        }
        columns.extend(fm.columns());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if columns.len() > KMEANS_MAX_COLUMNS {
        let mut picked = sample(&mut rng, columns.len(), KMEANS_MAX_COLUMNS).into_vec();
        picked.sort_unstable();
        columns = picked.into_iter().map(|i| columns[i].clone()).collect();
    }
    let mut distinct = columns.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Init(format!(
            "{} distinct columns, need at least {k}",
            distinct.len()
        )));
    }

    // k-means++ seeding
    let n = columns.len();
    let mut centers: Vec<Vec<f64>> = vec![columns[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = columns.iter().map(|c| sq_dist(c, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // every column coincides with a center; take a distinct one
            let taken = &centers;
            columns
                .iter()
                .position(|c| taken.iter().all(|t| t != c))
                .unwrap_or(0)
        };
        let c = columns[next].clone();
        for (i, col) in columns.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(col, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, col) in columns.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.iter().enumerate() {
                let dist = sq_dist(col, c);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            labels[i] = best.1;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (col, &l) in columns.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(col).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok((centers.concat(), d))
}

/// Centers from seeded k-means; projections derived from the centers with
/// sharpness [`DEFAULT_ALPHA`].
pub fn init_vlad(sample_maps: &[FeatureMap], k: usize, seed: u64) -> Result<VladParams> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 clusters, got {k}")));
    }
    let (centers, d) = kmeans_columns(sample_maps, k, seed)?;
    VladParams::from_centers(centers, k, d, DEFAULT_ALPHA)
}
