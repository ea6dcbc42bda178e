//! Checkpoint container: a text header followed by little-endian f32
//! payloads in header order.

use std::fs;
use std::path::Path;

use crate::encoder::{ConvLayer, EncoderParams};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vlad::VladParams;

const MAGIC: &str = "geoloc-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub generation: u32,
    pub epoch: u32,
    pub seed: u64,
    /// Momentum buffers of the trainable tensors, in model order.
    pub momentum: Vec<Tensor>,
    pub config_hash: String,
}

fn shape_text(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let trainable: Vec<(String, &Tensor)> = self
            .model
            .tensors()
            .into_iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, t, _)| (n, t))
            .collect();
        if trainable.len() != self.momentum.len() {
            return Err(Error::Shape(format!(
                "{} momentum buffers for {} trainable tensors",
                self.momentum.len(),
                trainable.len()
            )));
        }
        let mut header = format!(
            "{MAGIC}\ngeneration {}\nepoch {}\nseed {}\nconfig_hash {}\n",
            self.generation, self.epoch, self.seed, self.config_hash
        );
        for (i, l) in self.model.encoder.layers.iter().enumerate() {
            header.push_str(&format!(
                "layer {i} stride {} frozen {} relu {}\n",
                l.stride, l.frozen as u8, l.relu as u8
            ));
        }
        let mut payload: Vec<&Tensor> = Vec::new();
        for (name, t, _) in self.model.tensors() {
            header.push_str(&format!("tensor {name} {}\n", shape_text(t)));
            payload.push(t);
        }
        for ((name, t), m) in trainable.iter().zip(&self.momentum) {
            if m.shape() != t.shape() {
                return Err(Error::Shape(format!("momentum for {name} has the wrong shape")));
            }
            header.push_str(&format!("tensor momentum.{name} {}\n", shape_text(m)));
            payload.push(m);
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(4)
            .position(|w| w == b"end\n")
            .ok_or_else(|| fmt_err("checkpoint header has no end marker"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("header is not UTF-8"))?;
        let mut payload = &bytes[end + 4..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("not a checkpoint (bad magic line)"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| fmt_err(format!("missing {name}")))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| fmt_err(format!("expected {name}, found {line:?}")))
        };
        let num = |s: String, what: &str| -> Result<u64> {
            s.parse().map_err(|_| fmt_err(format!("bad {what} {s:?}")))
        };
        let generation = num(field("generation")?, "generation")? as u32;
        let epoch = num(field("epoch")?, "epoch")? as u32;
        let seed = num(field("seed")?, "seed")?;
        let config_hash = field("config_hash")?;
        let mut layer_meta = Vec::new();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["layer", _, "stride", s, "frozen", f, "relu", r] => {
                    let p = |v: &str| v.parse::<usize>().map_err(|_| fmt_err(format!("bad layer line {line:?}")));
                    layer_meta.push((p(s)?, p(f)? == 1, p(r)? == 1));
                }
                ["tensor", name, dims @ ..] => {
                    let shape = dims
                        .iter()
                        .map(|d| d.parse::<usize>().map_err(|_| fmt_err(format!("bad shape in {line:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    if payload.len() < 4 * n {
                        return Err(fmt_err(format!("payload truncated at {name}")));
                    }
                    let data = payload[..4 * n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    payload = &payload[4 * n..];
                    tensors.push((name.to_string(), Tensor::new(shape, data)?));
                }
                _ => return Err(fmt_err(format!("unexpected header line {line:?}"))),
            }
        }
        if !payload.is_empty() {
            return Err(fmt_err(format!("{} trailing payload bytes", payload.len())));
        }
        let mut take = |name: &str| -> Result<Tensor> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| fmt_err(format!("missing tensor {name}")))?;
            Ok(tensors.remove(i).1)
        };
        let mut layers = Vec::with_capacity(layer_meta.len());
        for (i, (stride, frozen, relu)) in layer_meta.into_iter().enumerate() {
            layers.push(ConvLayer {
                weight: take(&format!("encoder.{i}.weight"))?,
                bias: take(&format!("encoder.{i}.bias"))?,
                stride,
                frozen,
                relu,
            });
        }
        let vlad = VladParams {
            weight: take("vlad.weight")?,
            bias: take("vlad.bias")?,
            centers: take("vlad.centers")?,
        };
        let model = Model {
            encoder: EncoderParams { layers },
            vlad,
        };
        let momentum = model
            .tensors()
            .into_iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, _, _)| take(&format!("momentum.{n}")))
            .collect::<Result<Vec<_>>>()?;
        if let Some((n, _)) = tensors.first() {
            return Err(fmt_err(format!("unexpected tensor {n}")));
        }
        Ok(Self {
            model,
            generation,
            epoch,
            seed,
            momentum,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rejects checkpoints written under a different configuration.
    pub fn check_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Integrity(format!(
                "checkpoint config {} does not match run config {config_hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}
