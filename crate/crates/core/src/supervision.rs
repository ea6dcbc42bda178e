//! Soft similarity labels and the loss terms built on them.
//!
//! Labels are produced by a frozen previous-generation network: for each
//! query, the dot products with every candidate (a difficult positive's full
//! image followed by its sub-regions) are divided by a temperature and
//! pushed through a softmax. The student reproduces the same candidate list
//! at temperature 1 and is trained with soft cross-entropy against it.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::regions::RegionMode;
use crate::tensor::{self, dot, softmax_temp, softplus, Graph, Var};
use crate::vlad::Descriptor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelEntry {
    /// Dataset id of the gallery image.
    pub gallery: usize,
    /// 0 for the full image, 1..=8 for sub-regions.
    pub region: u8,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelRecord {
    pub query: usize,
    /// Generation of the network that produced the record.
    pub generation: u32,
    pub tau: f64,
    pub entries: Vec<LabelEntry>,
}

impl SoftLabelRecord {
    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn keys(&self) -> Vec<(usize, u8)> {
        self.entries.iter().map(|e| (e.gallery, e.region)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        if self.entries.is_empty() || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Integrity(format!(
                "record for query {} has weights summing to {total}",
                self.query
            )));
        }
        Ok(())
    }

    /// One line: `query generation tau` then `gallery region weight` triples.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {}", self.query, self.generation, self.tau);
        for e in &self.entries {
            let _ = write!(s, " {} {} {:.8e}", e.gallery, e.region, e.weight);
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed label line {line:?}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 6 || !(fields.len() - 3).is_multiple_of(3) {
            return Err(bad());
        }
        let query = fields[0].parse().map_err(|_| bad())?;
        let generation = fields[1].parse().map_err(|_| bad())?;
        let tau = fields[2].parse().map_err(|_| bad())?;
        let entries = fields[3..]
            .chunks(3)
            .map(|c| {
                Ok(LabelEntry {
                    gallery: c[0].parse().map_err(|_| bad())?,
                    region: c[1].parse().map_err(|_| bad())?,
                    weight: c[2].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.iter().any(|e| e.region > 8) {
            return Err(bad());
        }
        Ok(Self {
            query,
            generation,
            tau,
            entries,
        })
    }
}

pub fn write_labels(records: &[SoftLabelRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<SoftLabelRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(SoftLabelRecord::parse_line)
        .collect()
}

/// Content hash of a label set (over its exact dump text).
pub fn labels_hash(records: &[SoftLabelRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.query.to_le_bytes());
        h.update(r.generation.to_le_bytes());
        h.update(r.tau.to_bits().to_le_bytes());
        for e in &r.entries {
            h.update(e.gallery.to_le_bytes());
            h.update([e.region]);
            h.update(e.weight.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Temperatures for generations 2, 3, ...
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub taus: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if taus.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("temperatures must strictly decrease".into()));
        }
        Ok(Self { taus })
    }

    /// Same temperature for every generation (annealing ablation).
    pub fn constant(tau: f64, len: usize) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(Self {
            taus: vec![tau; len],
        })
    }

    /// Temperature of the labels that supervise `generation` (>= 2).
    pub fn for_generation(&self, generation: u32) -> Result<f64> {
        generation
            .checked_sub(2)
            .and_then(|i| self.taus.get(i as usize))
            .copied()
            .ok_or_else(|| Error::Sequencing(format!("no temperature for generation {generation}")))
    }
}

/// A difficult positive as seen by the teacher: its dataset id and the
/// candidate descriptors in wire order (full image first).
#[derive(Clone, Debug)]
pub struct PositiveCandidates {
    pub gallery: usize,
    pub descriptors: Vec<Descriptor>,
}

/// Softmax at `tau` over the image-level similarities to each positive.
pub fn image_soft_labels(query: &[f64], positives: &[Descriptor], tau: f64) -> Result<Vec<f64>> {
    if positives.is_empty() {
        return Err(Error::Parameter("need at least one positive".into()));
    }
    let sims: Vec<f64> = positives.iter().map(|p| dot(query, p)).collect();
    softmax_temp(&sims, tau)
}

/// Softmax at `tau` over all candidates (full images and regions) of all
/// positives, in wire order.
pub fn region_soft_labels(
    query_id: usize,
    query: &[f64],
    positives: &[PositiveCandidates],
    mode: RegionMode,
    tau: f64,
    generation: u32,
) -> Result<SoftLabelRecord> {
    if positives.is_empty() {
        return Err(Error::Parameter("need at least one positive".into()));
    }
    let ids = mode.ids();
    let mut keys = Vec::with_capacity(positives.len() * ids.len());
    let mut sims = Vec::with_capacity(keys.capacity());
    for p in positives {
        if p.descriptors.len() != ids.len() {
            return Err(Error::Integrity(format!(
                "positive {} has {} candidates, mode needs {}",
                p.gallery,
                p.descriptors.len(),
                ids.len()
            )));
        }
        for (&r, d) in ids.iter().zip(&p.descriptors) {
            keys.push((p.gallery, r));
            sims.push(dot(query, d));
        }
    }
    let weights = softmax_temp(&sims, tau)?;
    Ok(SoftLabelRecord {
        query: query_id,
        generation,
        tau,
        entries: keys
            .into_iter()
            .zip(weights)
            .map(|((gallery, region), weight)| LabelEntry {
                gallery,
                region,
                weight,
            })
            .collect(),
    })
}

/// Softmax-ratio hard loss in its stable form:
/// `sum_j softplus(<q,n_j> - <q,p>)`.
pub fn hard_loss(query: &[f64], positive: &[f64], negatives: &[Descriptor]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Parameter("hard loss needs at least one negative".into()));
    }
    let sp = dot(query, positive);
    Ok(negatives.iter().map(|n| softplus(dot(query, n) - sp)).sum())
}

/// Differentiable hard loss over descriptor nodes.
pub fn hard_loss_var(g: &mut Graph, query: Var, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Parameter("hard loss needs at least one negative".into()));
    }
    let sp = g.dot(query, positive)?;
    let mut margins = Vec::with_capacity(negatives.len());
    for &n in negatives {
        let sn = g.dot(query, n)?;
        let m = g.sub(sn, sp)?;
        margins.push(g.softplus(m));
    }
    let all = g.concat(&margins)?;
    Ok(g.sum(all))
}

/// Checks that the student's candidate list is the record's entry list.
pub fn check_entry_order(record: &SoftLabelRecord, keys: &[(usize, u8)]) -> Result<()> {
    if record.keys() != keys {
        return Err(Error::Integrity(format!(
            "student candidates disagree with stored labels for query {}",
            record.query
        )));
    }
    Ok(())
}

/// Soft cross-entropy of the student's temperature-1 distribution against
/// the stored record. `student_sims` follows `keys`.
pub fn soft_loss(student_sims: &[f64], keys: &[(usize, u8)], record: &SoftLabelRecord) -> Result<f64> {
    check_entry_order(record, keys)?;
    let probs = softmax_temp(student_sims, 1.0)?;
    tensor::soft_cross_entropy(&probs, &record.weights())
}

/// Differentiable soft loss; `candidates` are descriptor nodes in `keys`
/// order. The target is a constant.
pub fn soft_loss_var(
    g: &mut Graph,
    query: Var,
    candidates: &[Var],
    keys: &[(usize, u8)],
    record: &SoftLabelRecord,
) -> Result<Var> {
    check_entry_order(record, keys)?;
    let mut sims = Vec::with_capacity(candidates.len());
    for &c in candidates {
        sims.push(g.dot(query, c)?);
    }
    let logits = g.concat(&sims)?;
    let probs = g.softmax(logits, 1.0)?;
    g.cross_entropy(probs, &record.weights())
}

pub fn total_loss(hard: f64, soft: f64, lambda: f64) -> f64 {
    hard + lambda * soft
}

pub fn total_loss_var(g: &mut Graph, hard: Var, soft: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(soft, lambda);
    g.add(hard, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{entropy, grad_check, l2_normalize, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        l2_normalize(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    fn with_sim(s: f64) -> Vec<f64> {
        vec![s, (1.0 - s * s).sqrt()]
    }

    #[test]
    fn image_label_examples() {
        let q = [1.0, 0.0];
        // 1 / (1 + exp(-0.2 / 0.07)) = 0.945692...
        let w = image_soft_labels(&q, &[with_sim(0.9), with_sim(0.7)], 0.07).unwrap();
        assert!((w[0] - 0.9457).abs() < 1e-4 && (w[1] - 0.0543).abs() < 1e-4);
        let w = image_soft_labels(&q, &vec![with_sim(0.4); 5], 0.07).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-12));
        assert_eq!(image_soft_labels(&q, &[with_sim(0.3)], 0.07).unwrap(), vec![1.0]);
    }

    #[test]
    fn region_labels_uniform_on_equal_sims() {
        let q = [1.0, 0.0];
        let p = PositiveCandidates {
            gallery: 7,
            descriptors: vec![with_sim(0.5); 9],
        };
        let r = region_soft_labels(3, &q, &[p], RegionMode::All, 0.07, 1).unwrap();
        assert_eq!(r.entries.len(), 9);
        for (i, e) in r.entries.iter().enumerate() {
            assert_eq!((e.gallery, e.region), (7, i as u8));
            assert!((e.weight - 1.0 / 9.0).abs() < 1e-12);
        }
        r.validate().unwrap();
    }

    #[test]
    fn region_labels_peak_on_dominant_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = unit(&mut rng, 6);
        let mut positives: Vec<PositiveCandidates> = (0..2)
            .map(|i| PositiveCandidates {
                gallery: i,
                descriptors: (0..9).map(|_| unit(&mut rng, 6)).collect(),
            })
            .collect();
        positives[1].descriptors[6] = q.clone();
        let r = region_soft_labels(0, &q, &positives, RegionMode::All, 0.07, 1).unwrap();
        let w = r.weights();
        let (best, _) = crate::mining::argmax(&w).unwrap();
        assert_eq!(best, 9 + 6);
        assert_eq!((r.entries[best].gallery, r.entries[best].region), (1, 6));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn region_labels_reject_wrong_arity() {
        let p = PositiveCandidates {
            gallery: 0,
            descriptors: vec![with_sim(0.5); 5],
        };
        assert!(region_soft_labels(0, &[1.0, 0.0], &[p], RegionMode::All, 0.07, 1).is_err());
    }

    #[test]
    fn hard_loss_examples() {
        let q = [1.0, 0.0];
        let negs = vec![with_sim(0.3); 10];
        let l = hard_loss(&q, &with_sim(0.3), &negs).unwrap();
        assert!((l - 6.9315).abs() < 1e-4);
        let l = hard_loss(&q, &[1.0, 0.0], &[vec![0.0, 1.0]]).unwrap();
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(hard_loss(&q, &[1.0, 0.0], &[]).is_err());
        // large margin drives the loss to zero
        let l = hard_loss(&[50.0, 0.0], &[1.0, 0.0], &[vec![-1.0, 0.0]]).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(6.9315, 1.3863, 0.0), 6.9315);
        assert!((total_loss(6.9315, 1.3863, 0.5) - 7.62465).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_cases() {
        let keys = vec![(1, 0), (1, 1), (2, 0)];
        let rec = SoftLabelRecord {
            query: 0,
            generation: 1,
            tau: 0.07,
            entries: keys
                .iter()
                .zip([0.2, 0.5, 0.3])
                .map(|(&(gallery, region), weight)| LabelEntry {
                    gallery,
                    region,
                    weight,
                })
                .collect(),
        };
        // student logits whose softmax is the target
        let logits: Vec<f64> = rec.weights().iter().map(|w| w.ln()).collect();
        let l = soft_loss(&logits, &keys, &rec).unwrap();
        assert!((l - entropy(&rec.weights())).abs() < 1e-12);
        assert!(matches!(soft_loss(&logits, &keys[..2], &rec), Err(Error::Integrity(_))));
        let mut one_hot = rec.clone();
        one_hot.entries.iter_mut().enumerate().for_each(|(i, e)| e.weight = (i == 1) as u8 as f64);
        let l = soft_loss(&[0.1, 0.4, -0.3], &keys, &one_hot).unwrap();
        let p = softmax_temp(&[0.1, 0.4, -0.3], 1.0).unwrap();
        assert!((l + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_gradient_is_student_minus_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..18).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(logits.clone()));
        let p = g.softmax(x, 1.0).unwrap();
        let l = g.cross_entropy(p, &target).unwrap();
        g.backward(l).unwrap();
        let student = softmax_temp(&logits, 1.0).unwrap();
        for ((gv, s), t) in g.grad(x).unwrap().iter().zip(&student).zip(&target) {
            assert!((gv - (s - t)).abs() < 1e-12);
        }
        // independent two-step oracle for the value
        let two_step: f64 = -target.iter().zip(&student).map(|(t, s)| t * s.ln()).sum::<f64>();
        assert!((g.item(l) - two_step).abs() < 1e-12);
    }

    #[test]
    fn loss_vars_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vecs: Vec<Tensor> = (0..6).map(|_| Tensor::vector(unit(&mut rng, 5))).collect();
        let keys: Vec<(usize, u8)> = (0..3).map(|i| (i, 0)).collect();
        let rec = SoftLabelRecord {
            query: 0,
            generation: 1,
            tau: 0.1,
            entries: keys
                .iter()
                .zip([0.6, 0.3, 0.1])
                .map(|(&(gallery, region), weight)| LabelEntry {
                    gallery,
                    region,
                    weight,
                })
                .collect(),
        };
        let err = grad_check(
            |g, v| {
                let q = g.normalize(v[0])?;
                let hard = hard_loss_var(g, q, v[1], &v[2..4])?;
                let soft = soft_loss_var(g, q, &v[3..6], &keys, &rec)?;
                total_loss_var(g, hard, soft, 0.5)
            },
            &vecs,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn dump_round_trip() {
        let rec = SoftLabelRecord {
            query: 12,
            generation: 1,
            tau: 0.07,
            entries: vec![
                LabelEntry {
                    gallery: 40,
                    region: 0,
                    weight: 0.123456789012,
                },
                LabelEntry {
                    gallery: 40,
                    region: 5,
                    weight: 0.876543210988,
                },
            ],
        };
        let line = rec.to_line();
        assert_eq!(line, "12 1 0.07 40 0 1.23456789e-1 40 5 8.76543211e-1");
        let back = SoftLabelRecord::parse_line(&line).unwrap();
        assert_eq!(back.keys(), rec.keys());
        assert_eq!(back.tau, 0.07);
        assert!(SoftLabelRecord::parse_line("1 2").is_err());
        assert!(SoftLabelRecord::parse_line("1 1 0.07 4 9 1.0").is_err());
    }

    #[test]
    fn schedule_rules() {
        let s = TemperatureSchedule::new(vec![0.07, 0.06, 0.05]).unwrap();
        assert_eq!(s.for_generation(2).unwrap(), 0.07);
        assert_eq!(s.for_generation(4).unwrap(), 0.05);
        assert!(s.for_generation(1).is_err());
        assert!(s.for_generation(5).is_err());
        assert!(TemperatureSchedule::new(vec![0.05, 0.06]).is_err());
        assert!(TemperatureSchedule::new(vec![0.07, -0.01]).is_err());
    }
}
