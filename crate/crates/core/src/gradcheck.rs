//! Finite-difference checks of every differentiable operation used in
//! training, on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{init_encoder, EncoderParams, EncoderVars, LayerSpec};
use crate::error::Result;
use crate::supervision::{hard_loss_var, soft_loss_var, total_loss_var, LabelEntry, SoftLabelRecord};
use crate::tensor::{grad_check, Graph, Tensor, Var, Window};
use crate::vlad::{aggregate_var, VladVars};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

fn probe(g: &mut Graph, x: Var, weights: &[f64]) -> Result<Var> {
    let n = g.value(x).len();
    let p = g.constant(Tensor::vector(weights[..n].to_vec()));
    g.dot(x, p)
}

fn encoder_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = LayerSpec {
        channels: vec![3, 4, 4],
        freeze_all_but_last: false,
        ..LayerSpec::default()
    };
    let params: EncoderParams = init_encoder(rng.random(), &spec)?;
    let image = random(rng, vec![1, 12, 16]);
    let weights = random(rng, vec![64]).into_data();
    let tensors: Vec<Tensor> = params
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect();
    grad_check(
        |g, v| {
            let vars = EncoderVars {
                layers: v.chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            let input = g.constant(image.clone());
            let out = params.forward_var(g, input, 0, &vars)?;
            probe(g, out, &weights)
        },
        &tensors,
        STEP,
    )
}

fn vlad_aggregate(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (k, d) = (3, 4);
    let fm = random(rng, vec![d, 3, 4]);
    let weight = random(rng, vec![k, d]);
    let bias = random(rng, vec![k]);
    let centers = random(rng, vec![k, d]);
    let weights = random(rng, vec![k * d]).into_data();
    let window = Window {
        top: 0,
        bottom: 3,
        left: 1,
        right: 4,
    };
    grad_check(
        |g, v| {
            let vars = VladVars {
                weight: v[1],
                bias: v[2],
                centers: v[3],
            };
            let out = aggregate_var(g, v[0], window, vars)?;
            probe(g, out, &weights)
        },
        &[fm, weight, bias, centers],
        STEP,
    )
}

fn softmax_temperature(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = Tensor::vector(random(rng, vec![9]).into_data().iter().map(|v| v * 0.2).collect());
    let weights = random(rng, vec![9]).into_data();
    let mut worst = 0.0f64;
    for tau in [1.0, 0.07, 0.05] {
        let e = grad_check(
            |g, v| {
                let p = g.softmax(v[0], tau)?;
                probe(g, p, &weights)
            },
            std::slice::from_ref(&logits),
            STEP * tau,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn soft_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = random(rng, vec![9]);
    let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let target: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    grad_check(
        |g, v| {
            let p = g.softmax(v[0], 1.0)?;
            g.cross_entropy(p, &target)
        },
        &[logits],
        STEP,
    )
}

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Tensor> {
    (0..n).map(|_| random(rng, vec![d])).collect()
}

fn hard_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let vecs = random_vectors(rng, 6, 8);
    grad_check(
        |g, v| {
            let n: Vec<Var> = v[2..]
                .iter()
                .map(|&x| g.normalize(x))
                .collect::<Result<_>>()?;
            let q = g.normalize(v[0])?;
            let p = g.normalize(v[1])?;
            hard_loss_var(g, q, p, &n)
        },
        &vecs,
        STEP,
    )
}

fn label_record(rng: &mut ChaCha8Rng, keys: &[(usize, u8)]) -> SoftLabelRecord {
    let raw: Vec<f64> = keys.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    SoftLabelRecord {
        query: 0,
        generation: 2,
        tau: 0.07,
        entries: keys
            .iter()
            .zip(&raw)
            .map(|(&(gallery, region), w)| LabelEntry {
                gallery,
                region,
                weight: w / sum,
            })
            .collect(),
    }
}

fn total_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let vecs = random_vectors(rng, 8, 6);
    let keys: Vec<(usize, u8)> = (0..4).map(|i| (10 + i / 2, (i % 2) as u8)).collect();
    let record = label_record(rng, &keys);
    grad_check(
        |g, v| {
            let d: Vec<Var> = v.iter().map(|&x| g.normalize(x)).collect::<Result<_>>()?;
            let hard = hard_loss_var(g, d[0], d[1], &d[2..4])?;
            let soft = soft_loss_var(g, d[0], &d[4..8], &keys, &record)?;
            total_loss_var(g, hard, soft, 0.5)
        },
        &vecs,
        STEP,
    )
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks: [(&'static str, Check); 6] = [
        ("encoder_conv_stack", encoder_stack),
        ("vlad_aggregate", vlad_aggregate),
        ("softmax_temp", softmax_temperature),
        ("soft_cross_entropy", soft_cross_entropy),
        ("hard_loss", hard_loss),
        ("total_loss", total_loss),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            Ok(CheckResult {
                name,
                max_rel_error: f(&mut rng)?,
            })
        })
        .collect()
}
