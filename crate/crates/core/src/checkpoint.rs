//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every tensor's values as little-endian floats in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{Graph, Var};
use crate::discriminator::{CnnClassifier, CnnConfig, Discriminator, LmConfig, StyleClassifier};
use crate::error::{format_err, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 8] = b"STYLFRG\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: DType,
    meta: Value,
    groups: Vec<(String, Vec<TensorEntry>)>,
}

/// Named groups of tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub kind: String,
    pub meta: Value,
    pub groups: Vec<(String, ParamSet<T>)>,
}

fn err(msg: impl Into<String>) -> crate::error::Error {
    format_err("checkpoint", msg)
}

impl<T: Float> Container<T> {
    pub fn group(&self, name: &str) -> Result<&ParamSet<T>> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| err(format!("missing group {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            dtype: T::DTYPE,
            meta: self.meta.clone(),
            groups: self
                .groups
                .iter()
                .map(|(g, p)| {
                    let entries = p
                        .names
                        .iter()
                        .zip(&p.tensors)
                        .map(|(n, t)| TensorEntry {
                            name: n.clone(),
                            rows: t.rows,
                            cols: t.cols,
                        })
                        .collect();
                    (g.clone(), entries)
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in &self.groups {
            out.extend_from_slice(&p.to_bytes());
        }
        Ok(out)
    }

    /// Parses a container; values stored in another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a styleforge checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut groups = Vec::with_capacity(header.groups.len());
        for (g, entries) in header.groups {
            let mut p = ParamSet::default();
            for e in entries {
                let t = match header.dtype {
                    DType::F32 => read_tensor::<f32>(bytes, &mut pos, &e)?.cast(),
                    DType::F64 => read_tensor::<f64>(bytes, &mut pos, &e)?.cast(),
                };
                p.names.push(e.name);
                p.tensors.push(t);
            }
            groups.push((g, p));
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            groups,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(err(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

fn read_tensor<U: Float>(bytes: &[u8], pos: &mut usize, e: &TensorEntry) -> Result<Tensor<U>> {
    let size = U::DTYPE.size();
    let n = e.rows * e.cols;
    let end = *pos + n * size;
    let raw = bytes.get(*pos..end).ok_or_else(|| err(format!("truncated tensor {}", e.name)))?;
    let data = raw.chunks_exact(size).map(U::read_le).collect();
    *pos = end;
    Ok(Tensor::from_vec(e.rows, e.cols, data))
}

fn meta_field<D: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<D> {
    let v = meta.get(key).ok_or_else(|| err(format!("missing {key}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub const SEQ2SEQ_KIND: &str = "seq2seq";
pub const LM_PAIR_KIND: &str = "lm_pair";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

/// Generator weights with everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub model: Seq2Seq<T>,
    pub optimizer: Option<Adam<T>>,
    pub epoch: usize,
    /// Hash of the merge table the vocabulary came from.
    pub merge_hash: String,
}

impl<T: Float> ModelCheckpoint<T> {
    pub fn to_container(&self) -> Container<T> {
        let mut meta = serde_json::json!({
            "config": self.model.config,
            "epoch": self.epoch,
            "merge_hash": self.merge_hash,
        });
        let mut groups = vec![("params".to_string(), self.model.params.clone())];
        if let Some(opt) = &self.optimizer {
            meta["adam"] = serde_json::to_value(AdamMeta {
                config: opt.config.clone(),
                step: opt.step,
            })
            .expect("plain data");
            let names = self.model.params.names.clone();
            groups.push((
                "adam.m".into(),
                ParamSet {
                    names: names.clone(),
                    tensors: opt.m.clone(),
                },
            ));
            groups.push(("adam.v".into(), ParamSet { names, tensors: opt.v.clone() }));
        }
        Container {
            kind: SEQ2SEQ_KIND.into(),
            meta,
            groups,
        }
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        c.expect_kind(SEQ2SEQ_KIND)?;
        let config: ModelConfig = meta_field(&c.meta, "config")?;
        let model = Seq2Seq::from_params(config, c.group("params")?.clone())?;
        let optimizer = match c.meta.get("adam") {
            Some(Value::Null) | None => None,
            Some(_) => {
                let a: AdamMeta = meta_field(&c.meta, "adam")?;
                Some(Adam {
                    config: a.config,
                    step: a.step,
                    m: c.group("adam.m")?.tensors.clone(),
                    v: c.group("adam.v")?.tensors.clone(),
                })
            }
        };
        Ok(ModelCheckpoint {
            model,
            optimizer,
            epoch: meta_field(&c.meta, "epoch")?,
            merge_hash: meta_field(&c.meta, "merge_hash")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Both language models of a discriminator with their training flags.
pub fn disc_to_container<T: Float>(d: &Discriminator<T>, merge_hash: &str) -> Container<T> {
    use crate::discriminator::StyleClassifier;
    Container {
        kind: LM_PAIR_KIND.into(),
        meta: serde_json::json!({
            "config": d.config(),
            "pretrained": d.is_pretrained(),
            "frozen": d.is_frozen(),
            "merge_hash": merge_hash,
        }),
        groups: vec![
            ("source".into(), d.lms[0].params.clone()),
            ("target".into(), d.lms[1].params.clone()),
        ],
    }
}

/// Returns the discriminator and the merge-table hash it was trained with.
pub fn disc_from_container<T: Float>(c: &Container<T>) -> Result<(Discriminator<T>, String)> {
    c.expect_kind(LM_PAIR_KIND)?;
    let config: LmConfig = meta_field(&c.meta, "config")?;
    let d = Discriminator::from_parts(
        config,
        [c.group("source")?.clone(), c.group("target")?.clone()],
        meta_field(&c.meta, "pretrained")?,
        meta_field(&c.meta, "frozen")?,
    )?;
    Ok((d, meta_field(&c.meta, "merge_hash")?))
}

pub fn save_discriminator<T: Float>(d: &Discriminator<T>, merge_hash: &str, path: &Path) -> Result<()> {
    disc_to_container(d, merge_hash).save(path)
}

pub fn load_discriminator<T: Float>(path: &Path) -> Result<(Discriminator<T>, String)> {
    disc_from_container(&Container::load(path)?)
}

const CNN_KIND: &str = "cnn";

pub fn cnn_to_container<T: Float>(c: &CnnClassifier<T>, merge_hash: &str) -> Container<T> {
    Container {
        kind: CNN_KIND.into(),
        meta: serde_json::json!({
            "config": c.config,
            "pretrained": c.is_pretrained(),
            "frozen": c.is_frozen(),
            "merge_hash": merge_hash,
        }),
        groups: vec![("cnn".into(), c.params.clone())],
    }
}

pub fn cnn_from_container<T: Float>(c: &Container<T>) -> Result<(CnnClassifier<T>, String)> {
    c.expect_kind(CNN_KIND)?;
    let config: CnnConfig = meta_field(&c.meta, "config")?;
    let cnn = CnnClassifier::from_parts(config, c.group("cnn")?.clone(), meta_field(&c.meta, "pretrained")?, meta_field(&c.meta, "frozen")?)?;
    Ok((cnn, meta_field(&c.meta, "merge_hash")?))
}

/// Either saved discriminator kind.
#[derive(Clone, Debug)]
pub enum Classifier<T> {
    LmPair(Discriminator<T>),
    Cnn(CnnClassifier<T>),
}

macro_rules! both {
    ($s:expr, $c:ident => $e:expr) => {
        match $s {
            Classifier::LmPair($c) => $e,
            Classifier::Cnn($c) => $e,
        }
    };
}

impl<T: Float> StyleClassifier<T> for Classifier<T> {
    fn is_pretrained(&self) -> bool {
        both!(self, c => c.is_pretrained())
    }

    fn is_frozen(&self) -> bool {
        both!(self, c => c.is_frozen())
    }

    fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        both!(self, c => c.bind_frozen(g))
    }

    fn soft_logit(&self, g: &mut Graph<T>, v: &[Var], probs: Var, width: usize, lens: &[usize]) -> Result<Var> {
        both!(self, c => c.soft_logit(g, v, probs, width, lens))
    }

    fn logits(&self, xs: &[&[u32]]) -> Result<Vec<f64>> {
        both!(self, c => c.logits(xs))
    }

    fn hash(&self) -> String {
        both!(self, c => c.hash())
    }
}

impl<T: Float> Classifier<T> {
    pub fn to_container(&self, merge_hash: &str) -> Container<T> {
        match self {
            Classifier::LmPair(d) => disc_to_container(d, merge_hash),
            Classifier::Cnn(c) => cnn_to_container(c, merge_hash),
        }
    }

    pub fn from_container(c: &Container<T>) -> Result<(Self, String)> {
        if c.kind == CNN_KIND {
            cnn_from_container(c).map(|(x, h)| (Classifier::Cnn(x), h))
        } else {
            disc_from_container(c).map(|(x, h)| (Classifier::LmPair(x), h))
        }
    }

    pub fn save(&self, merge_hash: &str, path: &Path) -> Result<()> {
        self.to_container(merge_hash).save(path)
    }

    /// Returns the classifier and the merge-table hash it was trained with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_container(&Container::load(path)?)
    }
}
