//! Run configuration with flat dotted keys.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::encoder::LayerSpec;
use crate::error::{Error, Result};
use crate::regions::RegionMode;
use crate::supervision::TemperatureSchedule;
use crate::synth::WorldSpec;

/// Switches for the ablation variants. All off is the full method.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Image-level soft labels and image-level negatives only.
    pub no_regions: bool,
    /// Halves but no quarters.
    pub no_quarters: bool,
    /// Negatives compared at image level.
    pub no_neg_regions: bool,
    /// Drop the soft loss.
    pub no_soft: bool,
    /// Keep the first temperature for every generation.
    pub const_tau: bool,
    /// Plain top-k positives as extra hard positives, no soft loss.
    pub naive_topk: bool,
}

impl Ablation {
    pub fn positive_mode(&self) -> RegionMode {
        if self.no_regions {
            RegionMode::None
        } else if self.no_quarters {
            RegionMode::HalvesOnly
        } else {
            RegionMode::All
        }
    }

    pub fn negative_mode(&self) -> RegionMode {
        if self.no_regions || self.no_neg_regions || self.naive_topk {
            RegionMode::None
        } else if self.no_quarters {
            RegionMode::HalvesOnly
        } else {
            RegionMode::All
        }
    }

    pub fn uses_soft_loss(&self) -> bool {
        !(self.no_soft || self.naive_topk)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub generations: u32,
    pub epochs: u32,
    pub batch_size: usize,
    /// Difficult positives per query.
    pub positives: usize,
    /// Negatives per query.
    pub negatives: usize,
    pub lambda: f64,
    /// Teacher temperatures for generations 2..=Ω.
    pub taus: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Base seed for initialization, shuffling and negative sampling.
    pub seed: u64,
    pub encoder: LayerSpec,
    pub clusters: usize,
    pub whitening_dim: usize,
    /// Worker pool size; 0 uses all cores.
    pub workers: usize,
    pub ablation: Ablation,
    /// Dataset directory; when absent the world is generated from `world`.
    pub data_path: Option<PathBuf>,
    pub world: WorldSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generations: 4,
            epochs: 5,
            batch_size: 4,
            positives: 10,
            negatives: 10,
            lambda: 0.5,
            taus: vec![0.07, 0.06, 0.05],
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 1,
            encoder: LayerSpec::default(),
            clusters: 8,
            whitening_dim: 64,
            workers: 0,
            ablation: Ablation::default(),
            data_path: None,
            world: WorldSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|v| parse(key, v)).collect()
}

fn list_text<T: ToString>(xs: &[T]) -> String {
    let parts: Vec<String> = xs.iter().map(ToString::to_string).collect();
    format!("[{}]", parts.join(", "))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        let w = &mut self.world;
        match key {
            "train.generations" => self.generations = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.positives" => self.positives = parse(key, v)?,
            "train.negatives" => self.negatives = parse(key, v)?,
            "train.lambda" => self.lambda = parse(key, v)?,
            "train.taus" => self.taus = parse_list(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "model.channels" => self.encoder.channels = parse_list(key, v)?,
            "model.stride" => self.encoder.stride = parse(key, v)?,
            "model.freeze_all_but_last" => self.encoder.freeze_all_but_last = parse(key, v)?,
            "model.clusters" => self.clusters = parse(key, v)?,
            "eval.whitening_dim" => self.whitening_dim = parse(key, v)?,
            "run.workers" => self.workers = parse(key, v)?,
            "ablation.no_regions" => self.ablation.no_regions = parse(key, v)?,
            "ablation.no_quarters" => self.ablation.no_quarters = parse(key, v)?,
            "ablation.no_neg_regions" => self.ablation.no_neg_regions = parse(key, v)?,
            "ablation.no_soft" => self.ablation.no_soft = parse(key, v)?,
            "ablation.const_tau" => self.ablation.const_tau = parse(key, v)?,
            "ablation.naive_topk" => self.ablation.naive_topk = parse(key, v)?,
            "data.path" => self.data_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "world.seed" => w.seed = parse(key, v)?,
            "world.street_length" => w.street_length = parse(key, v)?,
            "world.window_width" => w.window_width = parse(key, v)?,
            "world.image_height" => w.image_height = parse(key, v)?,
            "world.image_width" => w.image_width = parse(key, v)?,
            "world.train_queries" => w.train_queries = parse(key, v)?,
            "world.train_gallery" => w.train_gallery = parse(key, v)?,
            "world.test_queries" => w.test_queries = parse(key, v)?,
            "world.test_gallery" => w.test_gallery = parse(key, v)?,
            "world.forward_fraction" => w.forward_fraction = parse(key, v)?,
            "world.gps_noise" => w.gps_noise = parse(key, v)?,
            "world.building_min" => w.building_min = parse(key, v)?,
            "world.building_max" => w.building_max = parse(key, v)?,
            "world.styles" => w.styles = parse(key, v)?,
            "world.stripes_per_style" => w.stripes_per_style = parse(key, v)?,
            "world.glyphs_per_100m" => w.glyphs_per_100m = parse(key, v)?,
            "world.query_gain" => w.query_gain = parse(key, v)?,
            "world.query_offset" => w.query_offset = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its value as TOML literal text, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let w = &self.world;
        let a = &self.ablation;
        let mut m = BTreeMap::new();
        m.insert("train.generations", self.generations.to_string());
        m.insert("train.epochs", self.epochs.to_string());
        m.insert("train.batch_size", self.batch_size.to_string());
        m.insert("train.positives", self.positives.to_string());
        m.insert("train.negatives", self.negatives.to_string());
        m.insert("train.lambda", format!("{:?}", self.lambda));
        m.insert("train.taus", list_text(&self.taus.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>()));
        m.insert("train.lr", format!("{:?}", self.lr));
        m.insert("train.momentum", format!("{:?}", self.momentum));
        m.insert("train.weight_decay", format!("{:?}", self.weight_decay));
        m.insert("train.seed", self.seed.to_string());
        m.insert("model.channels", list_text(&self.encoder.channels));
        m.insert("model.stride", self.encoder.stride.to_string());
        m.insert("model.freeze_all_but_last", self.encoder.freeze_all_but_last.to_string());
        m.insert("model.clusters", self.clusters.to_string());
        m.insert("eval.whitening_dim", self.whitening_dim.to_string());
        m.insert("run.workers", self.workers.to_string());
        m.insert("ablation.no_regions", a.no_regions.to_string());
        m.insert("ablation.no_quarters", a.no_quarters.to_string());
        m.insert("ablation.no_neg_regions", a.no_neg_regions.to_string());
        m.insert("ablation.no_soft", a.no_soft.to_string());
        m.insert("ablation.const_tau", a.const_tau.to_string());
        m.insert("ablation.naive_topk", a.naive_topk.to_string());
        let path = self
            .data_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        m.insert("data.path", format!("{path:?}"));
        m.insert("world.seed", w.seed.to_string());
        m.insert("world.street_length", format!("{:?}", w.street_length));
        m.insert("world.window_width", format!("{:?}", w.window_width));
        m.insert("world.image_height", w.image_height.to_string());
        m.insert("world.image_width", w.image_width.to_string());
        m.insert("world.train_queries", w.train_queries.to_string());
        m.insert("world.train_gallery", w.train_gallery.to_string());
        m.insert("world.test_queries", w.test_queries.to_string());
        m.insert("world.test_gallery", w.test_gallery.to_string());
        m.insert("world.forward_fraction", format!("{:?}", w.forward_fraction));
        m.insert("world.gps_noise", format!("{:?}", w.gps_noise));
        m.insert("world.building_min", format!("{:?}", w.building_min));
        m.insert("world.building_max", format!("{:?}", w.building_max));
        m.insert("world.styles", w.styles.to_string());
        m.insert("world.stripes_per_style", w.stripes_per_style.to_string());
        m.insert("world.glyphs_per_100m", format!("{:?}", w.glyphs_per_100m));
        m.insert("world.query_gain", format!("{:?}", w.query_gain));
        m.insert("world.query_offset", format!("{:?}", w.query_offset));
        m
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text, excluding the worker count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        hex::encode(Sha256::digest(c.to_text().as_bytes()))
    }

    /// Parses a TOML document; tables and dotted keys both flatten to
    /// `section.key`. Unset keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        if self.ablation.const_tau {
            let first = *self
                .taus
                .first()
                .ok_or_else(|| Error::Config("constant tau needs a first temperature".into()))?;
            TemperatureSchedule::constant(first, self.taus.len())
        } else {
            TemperatureSchedule::new(self.taus.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.generations == 0 {
            return bad("train.generations must be at least 1".into());
        }
        if self.taus.len() != self.generations as usize - 1 {
            return bad(format!(
                "{} generations need {} temperatures, got {}",
                self.generations,
                self.generations - 1,
                self.taus.len()
            ));
        }
        if !self.taus.is_empty() {
            TemperatureSchedule::new(self.taus.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.epochs == 0 || self.batch_size == 0 || self.positives == 0 || self.negatives == 0 {
            return bad("epochs, batch size, positives and negatives must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need lr > 0, momentum in [0, 1), weight decay >= 0".into());
        }
        if !(self.lambda >= 0.0) {
            return bad("train.lambda must be non-negative".into());
        }
        if self.clusters < 2 {
            return bad("model.clusters must be at least 2".into());
        }
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data_path.is_none() {
            self.world.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts = items
                .iter()
                .map(scalar_text)
                .collect::<Result<Vec<_>>>()?;
            out.push((prefix.to_string(), format!("[{}]", parts.join(","))));
        }
        other => out.push((prefix.to_string(), scalar_text(other)?)),
    }
    Ok(())
}

fn scalar_text(v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format!("{f:?}"),
        toml::Value::Boolean(b) => b.to_string(),
        other => return Err(Error::Config(format!("unsupported config value {other}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.schedule().unwrap().for_generation(2).unwrap(), 0.07);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.lr", "0.01").unwrap();
        c.set("ablation.no_quarters", "true").unwrap();
        c.set("data.path", "some/dir").unwrap();
        let back = RunConfig::from_toml(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = RunConfig::from_toml("train.generations = 2\ntrain.taus = [0.07]\n").unwrap();
        let b = RunConfig::from_toml("[train]\ngenerations = 2\ntaus = [0.07]\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.generations, 2);
    }

    #[test]
    fn schedule_length_must_match() {
        assert!(matches!(
            RunConfig::from_toml("train.generations = 2\n"),
            Err(Error::Config(_))
        ));
        let one = RunConfig::from_toml("train.generations = 1\ntrain.taus = []\n").unwrap();
        assert_eq!(one.generations, 1);
    }

    #[test]
    fn bad_keys_and_values() {
        assert!(RunConfig::from_toml("train.bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("train.epochs = \"many\"\n").is_err());
        assert!(RunConfig::from_toml("train = [\n").is_err());
    }

    #[test]
    fn hash_ignores_workers_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn const_tau_schedule() {
        let mut c = RunConfig::default();
        c.ablation.const_tau = true;
        let s = c.schedule().unwrap();
        assert_eq!(s.for_generation(4).unwrap(), 0.07);
    }

    #[test]
    fn modes_follow_flags() {
        let mut a = Ablation::default();
        assert_eq!(a.positive_mode(), RegionMode::All);
        a.no_neg_regions = true;
        assert_eq!(a.negative_mode(), RegionMode::None);
        assert_eq!(a.positive_mode(), RegionMode::All);
        let b = Ablation { naive_topk: true, ..Default::default() };
        assert!(!b.uses_soft_loss());
    }
}
