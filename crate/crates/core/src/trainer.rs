//! Generation training: SGD over mined tuples, re-initialization from the
//! base seed, and once-per-generation soft labels from the previous model.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{EncoderVars, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::{fit_whitening_capped, recall_at_k, DEFAULT_KS, RECALL_RADIUS};
use crate::mining::{
    easiest_positive, k_reciprocal, sample_negatives, top_k, GallerySet, TrainingTuple,
};
use crate::model::Model;
use crate::regions::{candidate_descriptors, decompose_dims, RegionMode};
use crate::supervision::{
    hard_loss_var, region_soft_labels, soft_loss_var, total_loss_var, PositiveCandidates,
    SoftLabelRecord,
};
use crate::synth::{generate_world, Dataset, Split, POSITIVE_RADIUS};
use crate::tensor::{Graph, Tensor, Var, Window};
use crate::vlad::{aggregate, aggregate_var, Descriptor, VladVars};

/// Gallery images whose feature maps seed the VLAD centers.
const VLAD_INIT_IMAGES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- m*v + (g + wd*p); p <- p - lr*v` for every trainable tensor.
/// Frozen tensors and their buffers are left alone.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    trainable: &[bool],
    grads: &[Vec<f64>],
    velocity: &mut [Tensor],
    opt: Sgd,
) -> Result<()> {
    let n = params.len();
    if trainable.len() != n || grads.len() != n || velocity.len() != n {
        return Err(Error::Shape(format!(
            "sgd over {n} tensors with {} flags, {} grads, {} buffers",
            trainable.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for i in 0..n {
        if params[i].len() != grads[i].len() || params[i].shape() != velocity[i].shape() {
            return Err(Error::Shape(format!("sgd tensor {i} shape mismatch")));
        }
    }
    for (((p, &t), g), v) in params.iter_mut().zip(trainable).zip(grads).zip(velocity.iter_mut()) {
        if !t {
            continue;
        }
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.data_mut()) {
            *vv = opt.momentum * *vv + (gv + opt.weight_decay * *pv);
            *pv -= opt.lr * *vv;
        }
    }
    Ok(())
}

/// Loads the dataset named by the config, or generates its world.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data_path {
        Some(p) => Dataset::load(p),
        None => generate_world(&config.world),
    }
}

/// Everything that stays fixed across generations: split ids, the initial
/// model, and activations after its frozen layers.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub train_queries: Vec<usize>,
    pub train_gallery: Vec<usize>,
    pub test_queries: Vec<usize>,
    pub test_gallery: Vec<usize>,
    pub init: Model,
    prefix_len: usize,
    prefix: Vec<Tensor>,
}

impl<'a> TrainData<'a> {
    pub fn prepare(dataset: &'a Dataset, config: &RunConfig) -> Result<Self> {
        let train_gallery = dataset.ids(Split::TrainGallery);
        let samples: Vec<_> = train_gallery
            .iter()
            .take(VLAD_INIT_IMAGES)
            .map(|&id| &dataset.image(id).image)
            .collect();
        let mut init = Model::init(config.seed, &config.encoder, config.clusters, &samples)?;
        init.round_to_f32();
        let prefix_len = init.encoder.frozen_prefix();
        let prefix = dataset
            .images
            .par_iter()
            .map(|g| init.encoder.encode_prefix(&g.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            train_queries: dataset.ids(Split::TrainQuery),
            train_gallery,
            test_queries: dataset.ids(Split::TestQuery),
            test_gallery: dataset.ids(Split::TestGallery),
            init,
            prefix_len,
            prefix,
        })
    }

    fn cache_valid(&self, model: &Model) -> bool {
        model.encoder.layers[..self.prefix_len] == self.init.encoder.layers[..self.prefix_len]
    }

    /// Feature map of dataset image `id` under `model`.
    pub fn feature_map(&self, model: &Model, id: usize) -> Result<FeatureMap> {
        if self.cache_valid(model) {
            let out = model
                .encoder
                .run_layers(&self.prefix[id], self.prefix_len, model.encoder.layers.len())?;
            FeatureMap::from_tensor(&out)
        } else {
            model.feature_map(&self.dataset.image(id).image)
        }
    }

    pub fn feature_maps(&self, model: &Model, ids: &[usize]) -> Result<Vec<FeatureMap>> {
        ids.par_iter().map(|&id| self.feature_map(model, id)).collect()
    }

    pub fn descriptors(&self, model: &Model, ids: &[usize]) -> Result<Vec<Descriptor>> {
        ids.par_iter()
            .map(|&id| aggregate(self.feature_map(model, id)?.view(), &model.vlad))
            .collect()
    }

    pub fn gallery_set(&self, ids: &[usize], descriptors: Vec<Descriptor>) -> GallerySet {
        GallerySet {
            ids: ids.to_vec(),
            positions: ids.iter().map(|&i| self.dataset.image(i).reported_x).collect(),
            descriptors,
        }
    }
}

/// Difficult positives of one query with the labels that supervise them.
#[derive(Clone, Debug)]
pub struct QueryLabels {
    /// Dataset ids, nearest first.
    pub positives: Vec<usize>,
    pub record: SoftLabelRecord,
}

/// Labels of one generation, looked up by query id.
#[derive(Clone, Debug, Default)]
pub struct LabelSet {
    pub labels: Vec<QueryLabels>,
    by_query: HashMap<usize, usize>,
}

impl LabelSet {
    pub fn new(labels: Vec<QueryLabels>) -> Self {
        let by_query = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.record.query, i))
            .collect();
        Self { labels, by_query }
    }

    pub fn get(&self, query: usize) -> Option<&QueryLabels> {
        self.by_query.get(&query).map(|&i| &self.labels[i])
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn records(&self) -> Vec<SoftLabelRecord> {
        self.labels.iter().map(|l| l.record.clone()).collect()
    }
}

/// Gallery rows within the positive radius of `query_pos`, ranked as
/// difficult positives: k-reciprocal neighbors inside that pool (or the
/// plain top-k when `reciprocal` is false). Pools of `k` or fewer images
/// are returned whole, nearest first.
pub fn difficult_positives(
    query_pos: f64,
    query: &[f64],
    gallery: &GallerySet,
    k: usize,
    reciprocal: bool,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..gallery.len())
        .filter(|&r| (gallery.positions[r] - query_pos).abs() <= POSITIVE_RADIUS)
        .collect();
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let descs: Vec<Descriptor> = pool.iter().map(|&r| gallery.descriptors[r].clone()).collect();
    let picked = if reciprocal && pool.len() > k {
        k_reciprocal(query, &descs, k)?
    } else {
        top_k(query, &descs, k.min(pool.len()))?
    };
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// Computes difficult positives and soft labels for every train query
/// with the frozen `teacher`. Queries with no gallery image in range get
/// no labels.
pub fn compute_labels(
    data: &TrainData<'_>,
    teacher: &Model,
    config: &RunConfig,
    generation: u32,
) -> Result<LabelSet> {
    let tau = config.schedule()?.for_generation(generation)?;
    let mode = config.ablation.positive_mode();
    let queries = data.descriptors(teacher, &data.train_queries)?;
    let gallery_maps = data.feature_maps(teacher, &data.train_gallery)?;
    let descriptors: Vec<Descriptor> = gallery_maps
        .par_iter()
        .map(|m| aggregate(m.view(), &teacher.vlad))
        .collect::<Result<_>>()?;
    let gallery = data.gallery_set(&data.train_gallery, descriptors);
    let labels = data
        .train_queries
        .par_iter()
        .zip(&queries)
        .map(|(&qid, q)| {
            let qpos = data.dataset.image(qid).reported_x;
            let rows = difficult_positives(qpos, q, &gallery, config.positives, !config.ablation.naive_topk)?;
            if rows.is_empty() {
                return Ok(None);
            }
            let candidates = rows
                .iter()
                .map(|&r| {
                    Ok(PositiveCandidates {
                        gallery: gallery.ids[r],
                        descriptors: candidate_descriptors(&gallery_maps[r], &teacher.vlad, mode)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let record = region_soft_labels(qid, q, &candidates, mode, tau, generation)?;
            Ok(Some(QueryLabels {
                positives: rows.iter().map(|&r| gallery.ids[r]).collect(),
                record,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSet::new(labels.into_iter().flatten().collect()))
}

/// Mines one epoch of tuples with the current model; queries without a
/// usable positive or negative are skipped.
pub fn mine_tuples(
    data: &TrainData<'_>,
    model: &Model,
    labels: Option<&LabelSet>,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingTuple>> {
    let queries = data.descriptors(model, &data.train_queries)?;
    let gallery = data.gallery_set(&data.train_gallery, data.descriptors(model, &data.train_gallery)?);
    let mut tuples = Vec::with_capacity(queries.len());
    for (&qid, q) in data.train_queries.iter().zip(&queries) {
        let qpos = data.dataset.image(qid).reported_x;
        let (easiest, positives) = match labels {
            Some(set) => match set.get(qid) {
                Some(l) => (l.positives[0], l.positives.clone()),
                None => continue,
            },
            None => match easiest_positive(qpos, q, &gallery) {
                Some(row) => (gallery.ids[row], Vec::new()),
                None => continue,
            },
        };
        let neg = sample_negatives(qpos, q, &gallery, negatives, rng);
        if neg.rows.is_empty() {
            continue;
        }
        tuples.push(TrainingTuple {
            query: qid,
            easiest_positive: easiest,
            positives,
            negatives: neg.rows.iter().map(|&r| gallery.ids[r]).collect(),
        });
    }
    Ok(tuples)
}

struct TupleGraph<'m> {
    g: Graph,
    model: &'m Model,
    enc: EncoderVars,
    vlad: VladVars,
}

impl TupleGraph<'_> {
    fn feature_map(&mut self, data: &TrainData<'_>, id: usize) -> Result<Var> {
        let (input, start) = if data.cache_valid(self.model) {
            (data.prefix[id].clone(), data.prefix_len)
        } else {
            (data.dataset.image(id).image.to_tensor(), 0)
        };
        let x = self.g.constant(input);
        self.model.encoder.forward_var(&mut self.g, x, start, &self.enc)
    }

    fn descriptor(&mut self, fm: Var, window: Window) -> Result<Var> {
        aggregate_var(&mut self.g, fm, window, self.vlad)
    }

    fn candidates(&mut self, fm: Var, mode: RegionMode) -> Result<Vec<Var>> {
        let s = self.g.value(fm).shape().to_vec();
        let set = decompose_dims(s[1], s[2])?;
        mode.ids()
            .iter()
            .map(|&id| self.descriptor(fm, set.window(id)))
            .collect()
    }

    fn full(&mut self, data: &TrainData<'_>, id: usize) -> Result<Var> {
        let fm = self.feature_map(data, id)?;
        let s = self.g.value(fm).shape().to_vec();
        self.descriptor(fm, Window::full(s[1], s[2]))
    }
}

/// Loss of one tuple and its gradient for every model tensor (zeros for
/// frozen ones), in model order.
pub fn tuple_gradient(
    data: &TrainData<'_>,
    model: &Model,
    tuple: &TrainingTuple,
    record: Option<&SoftLabelRecord>,
    config: &RunConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let enc = EncoderVars::register(&mut g, &model.encoder);
    let vlad = VladVars::register(&mut g, &model.vlad, true);
    let mut t = TupleGraph { g, model, enc, vlad };
    let q = t.full(data, tuple.query)?;
    let p = t.full(data, tuple.easiest_positive)?;
    // without labels this is the generation-1 baseline: image-level negatives
    let neg_mode = record.map_or(RegionMode::None, |_| config.ablation.negative_mode());
    let mut negatives = Vec::with_capacity(tuple.negatives.len());
    for &n in &tuple.negatives {
        let fm = t.feature_map(data, n)?;
        let cands = t.candidates(fm, neg_mode)?;
        let qv = t.g.value(q).data().to_vec();
        let sims: Vec<f64> = cands
            .iter()
            .map(|&c| crate::tensor::dot(&qv, t.g.value(c).data()))
            .collect();
        let (best, _) = crate::mining::pick_region(&sims).expect("at least one candidate");
        negatives.push(cands[best]);
    }
    let mut loss = hard_loss_var(&mut t.g, q, p, &negatives)?;
    if let Some(record) = record {
        if config.ablation.uses_soft_loss() {
            let mode = config.ablation.positive_mode();
            let mut cands = Vec::new();
            for &pid in &tuple.positives {
                let fm = t.feature_map(data, pid)?;
                cands.extend(t.candidates(fm, mode)?);
            }
            let soft = soft_loss_var(&mut t.g, q, &cands, &record.keys(), record)?;
            loss = total_loss_var(&mut t.g, loss, soft, config.lambda)?;
        } else if config.ablation.naive_topk {
            let mut terms = Vec::with_capacity(tuple.positives.len());
            for &pid in &tuple.positives {
                let pi = t.full(data, pid)?;
                terms.push(hard_loss_var(&mut t.g, q, pi, &negatives)?);
            }
            // each top-k image is one more positive sample, on par with p*
            let all = t.g.concat(&terms)?;
            let sum = t.g.sum(all);
            loss = t.g.add(loss, sum)?;
        }
    }
    t.g.backward(loss)?;
    let mut vars: Vec<Var> = Vec::new();
    for &(w, b) in &t.enc.layers {
        vars.push(w);
        vars.push(b);
    }
    vars.extend([t.vlad.weight, t.vlad.bias, t.vlad.centers]);
    let grads = vars
        .iter()
        .map(|&v| {
            t.g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.g.value(v).len()])
        })
        .collect();
    Ok((t.g.item(loss), grads))
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub checkpoint: Checkpoint,
    /// Soft labels supervising this generation (empty for generation 1).
    pub labels: LabelSet,
    /// Hash of the parameters the generation started from.
    pub start_hash: String,
    /// Mean tuple loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn epoch_rng(seed: u64, generation: u32, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | epoch as u64);
    rng
}

pub fn train_generation(
    generation: u32,
    previous: Option<&Checkpoint>,
    data: &TrainData<'_>,
    config: &RunConfig,
) -> Result<GenerationOutput> {
    if generation == 0 || generation > config.generations {
        return Err(Error::Sequencing(format!(
            "generation {generation} outside 1..={}",
            config.generations
        )));
    }
    let labels = if generation >= 2 {
        let prev = previous.ok_or_else(|| {
            Error::Sequencing(format!("generation {generation} needs the previous checkpoint"))
        })?;
        if prev.generation != generation - 1 {
            return Err(Error::Sequencing(format!(
                "generation {generation} given checkpoint of generation {}",
                prev.generation
            )));
        }
        prev.check_config(&config.hash())?;
        compute_labels(data, &prev.model, config, generation)?
    } else {
        LabelSet::default()
    };
    let mut model = data.init.clone();
    let start_hash = model.hash();
    let mask = model.trainable_mask();
    let mut velocity: Vec<Tensor> = model
        .tensors()
        .iter()
        .map(|(_, t, _)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let opt = Sgd {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let label_ref = (generation >= 2).then_some(&labels);
    let mut epoch_losses = Vec::with_capacity(config.epochs as usize);
    for epoch in 1..=config.epochs {
        let mut rng = epoch_rng(config.seed, generation, epoch);
        let mut tuples = mine_tuples(data, &model, label_ref, config.negatives, &mut rng)?;
        tuples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in tuples.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|t| {
                    let record = label_ref.and_then(|l| l.get(t.query)).map(|l| &l.record);
                    tuple_gradient(data, &model, t, record, config)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for (loss, g) in &results {
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            sgd_step(&mut model.tensors_mut(), &mask, &grads, &mut velocity, opt)?;
        }
        epoch_losses.push(loss_sum / tuples.len().max(1) as f64);
    }
    model.round_to_f32();
    let momentum = velocity
        .into_iter()
        .zip(&mask)
        .filter(|(_, &t)| t)
        .map(|(mut v, _)| {
            v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
            v
        })
        .collect();
    Ok(GenerationOutput {
        checkpoint: Checkpoint {
            model,
            generation,
            epoch: config.epochs,
            seed: config.seed,
            momentum,
            config_hash: config.hash(),
        },
        labels,
        start_hash,
        epoch_losses,
    })
}

/// Recall@{1,5,10} on the test split after whitening fitted on train
/// descriptors (skipped when the whitening dimension is 0). A collapsed
/// model whitens to the rank its train descriptors still span.
pub fn evaluate(data: &TrainData<'_>, model: &Model, config: &RunConfig) -> Result<[f64; 3]> {
    let mut queries = data.descriptors(model, &data.test_queries)?;
    let mut gallery = data.descriptors(model, &data.test_gallery)?;
    if config.whitening_dim > 0 {
        let mut train_ids = data.train_queries.clone();
        train_ids.extend(&data.train_gallery);
        let train = data.descriptors(model, &train_ids)?;
        let w = fit_whitening_capped(&train, config.whitening_dim)?;
        queries = queries.iter().map(|d| w.apply(d)).collect::<Result<_>>()?;
        gallery = gallery.iter().map(|d| w.apply(d)).collect::<Result<_>>()?;
    }
    let gallery = data.gallery_set(&data.test_gallery, gallery);
    let positions: Vec<f64> = data
        .test_queries
        .iter()
        .map(|&q| data.dataset.image(q).reported_x)
        .collect();
    let r = recall_at_k(&positions, &queries, &gallery, &DEFAULT_KS, RECALL_RADIUS)?;
    Ok([r[0], r[1], r[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub generation: u32,
    pub recall: [f64; 3],
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("generation,recall1,recall5,recall10\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3}\n",
            r.generation, r.recall[0], r.recall[1], r.recall[2]
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub generations: Vec<GenerationOutput>,
    pub metrics: Vec<MetricsRow>,
}

impl PipelineReport {
    pub fn checkpoints(&self) -> impl Iterator<Item = &Checkpoint> {
        self.generations.iter().map(|g| &g.checkpoint)
    }

    pub fn recall1(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.recall[0]).collect()
    }
}

/// Runs generations `1..=Ω`, evaluating after each, inside a worker pool of
/// the configured size.
pub fn run_pipeline(config: &RunConfig, dataset: &Dataset) -> Result<PipelineReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let data = TrainData::prepare(dataset, config)?;
        let mut generations: Vec<GenerationOutput> = Vec::new();
        let mut metrics = Vec::new();
        for generation in 1..=config.generations {
            let previous = generations.last().map(|g| &g.checkpoint);
            let out = train_generation(generation, previous, &data, config)?;
            if let Some(first) = generations.first() {
                if first.start_hash != out.start_hash {
                    return Err(Error::Integrity(format!(
                        "generation {generation} started from different parameters"
                    )));
                }
            }
            metrics.push(MetricsRow {
                generation,
                recall: evaluate(&data, &out.checkpoint.model, config)?,
            });
            generations.push(out);
        }
        Ok(PipelineReport {
            generations,
            metrics,
        })
    })
}
