//! Checkpoint archive: a tar file with a text manifest, the run config, and
//! one raw little-endian f32 member per parameter (and per Adam moment).
//! Headers carry fixed metadata so equal content gives equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::nn::{Adam, ParamStore};
use crate::train::config::RunConfig;

const FORMAT: &str = "mused-checkpoint 1";
const MANIFEST: &str = "manifest.txt";
const RUN_CONFIG: &str = "run_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub run: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub epoch: usize,
    pub best_metric: f64,
}

fn to_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn from_bytes(member: &str, bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f32>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Checkpoint {
            member: member.into(),
            detail: format!("{} bytes for shape {:?}", bytes.len(), shape),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("size checked"))
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(data.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    builder
        .append_data(&mut h, name, data)
        .map_err(|e| Error::Checkpoint { member: name.into(), detail: e.to_string() })
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        &self.run.model
    }

    /// Rebuilds the model, checking the parameter table against the config.
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_store(self.run.model.clone(), self.stage, self.params.clone())
    }

    /// Like [`Checkpoint::model`], but first insists on an expected config.
    pub fn model_matching(&self, expected: &ModelConfig) -> Result<Model<f32>> {
        if &self.run.model != expected {
            let mismatch = expected
                .to_pairs()
                .into_iter()
                .zip(self.run.model.to_pairs())
                .find(|(a, b)| a != b)
                .map(|((k, want), (_, got))| format!("model.{k}: expected {want}, checkpoint has {got}"))
                .unwrap_or_default();
            return Err(Error::ParamMismatch { name: "<config>".into(), detail: mismatch });
        }
        self.model()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let _ = writeln!(manifest, "format = {FORMAT}");
        let _ = writeln!(manifest, "stage = {}", self.stage);
        let _ = writeln!(manifest, "epoch = {}", self.epoch);
        let _ = writeln!(manifest, "best_metric = {}", self.best_metric);
        match &self.optimizer {
            Some(opt) => {
                let _ = writeln!(manifest, "optimizer = adam");
                let _ = writeln!(manifest, "optimizer.step = {}", opt.step);
                let c = opt.cfg;
                let _ = writeln!(
                    manifest,
                    "optimizer.hyper = {} {} {} {} {}",
                    c.lr, c.beta1, c.beta2, c.eps, c.weight_decay
                );
            }
            None => {
                let _ = writeln!(manifest, "optimizer = none");
            }
        }
        for (k, v) in self.run.model.to_pairs() {
            let _ = writeln!(manifest, "model.{k} = {v}");
        }
        let mut members: Vec<(String, Vec<u8>)> = Vec::new();
        for (id, p) in self.params.iter() {
            let bytes = to_bytes(&p.value);
            let shape = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                manifest,
                "param {} {} f32 {} {}",
                p.name,
                shape,
                if p.trainable { "train" } else { "buffer" },
                sha_hex(&bytes)
            );
            members.push((format!("params/{}.f32", p.name), bytes));
            if let Some(opt) = &self.optimizer {
                let i = id.index();
                members.push((format!("optim/m/{}.f32", p.name), to_bytes(&opt.m[i])));
                members.push((format!("optim/v/{}.f32", p.name), to_bytes(&opt.v[i])));
            }
        }
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        append(&mut builder, MANIFEST, manifest.as_bytes())?;
        append(&mut builder, RUN_CONFIG, self.run.to_text().as_bytes())?;
        for (name, bytes) in &members {
            append(&mut builder, name, bytes)?;
        }
        builder
            .into_inner()
            .map_err(|e| Error::Checkpoint { member: "<archive>".into(), detail: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |member: &str, detail: String| Error::Checkpoint { member: member.into(), detail };
        let mut members: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut archive = tar::Archive::new(bytes);
        let entries = archive.entries().map_err(|e| bad("<archive>", e.to_string()))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| bad("<archive>", e.to_string()))?;
            let name =
                entry.path().map_err(|e| bad("<archive>", e.to_string()))?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| bad(&name, e.to_string()))?;
            members.insert(name, data);
        }
        let take = |name: &str| -> Result<&Vec<u8>> {
            members.get(name).ok_or_else(|| bad(name, "member missing".into()))
        };
        let manifest =
            String::from_utf8(take(MANIFEST)?.clone()).map_err(|e| bad(MANIFEST, e.to_string()))?;
        let run_text =
            String::from_utf8(take(RUN_CONFIG)?.clone()).map_err(|e| bad(RUN_CONFIG, e.to_string()))?;
        let run = RunConfig::parse(&run_text).map_err(|e| bad(RUN_CONFIG, e.to_string()))?;

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut param_lines = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("param ") {
                param_lines.push(rest);
            } else if let Some((k, v)) = line.split_once(" = ") {
                fields.insert(k, v);
            }
        }
        let field = |k: &str| -> Result<&str> {
            fields.get(k).copied().ok_or_else(|| bad(MANIFEST, format!("missing `{k}`")))
        };
        if field("format")? != FORMAT {
            return Err(bad(MANIFEST, format!("unsupported format `{}`", field("format")?)));
        }
        let num = |k: &str| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|e| bad(MANIFEST, format!("`{k}`: {e}")))
        };
        let stage: Stage = field("stage")?.parse().map_err(|e: Error| bad(MANIFEST, e.to_string()))?;
        let epoch = field("epoch")?.parse::<usize>().map_err(|e| bad(MANIFEST, format!("`epoch`: {e}")))?;
        let best_metric = num("best_metric")?;
        for (k, v) in run.model.to_pairs() {
            let key = format!("model.{k}");
            if field(&key)? != v.to_string() {
                return Err(bad(MANIFEST, format!("`{key}` disagrees with the run config")));
            }
        }

        let mut params = ParamStore::new();
        for line in param_lines {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 || parts[2] != "f32" {
                return Err(bad(MANIFEST, format!("malformed parameter line `{line}`")));
            }
            let name = parts[0];
            let shape = if parts[1].is_empty() {
                Vec::new()
            } else {
                parts[1]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(MANIFEST, format!("{name}: {e}")))?
            };
            let member = format!("params/{name}.f32");
            let data = take(&member)?;
            if sha_hex(data) != parts[4] {
                return Err(bad(&member, "checksum mismatch".into()));
            }
            params.insert(name.to_string(), from_bytes(&member, data, &shape)?, parts[3] == "train");
        }

        let optimizer = match field("optimizer")? {
            "none" => None,
            "adam" => {
                let step = field("optimizer.step")?
                    .parse::<u64>()
                    .map_err(|e| bad(MANIFEST, format!("`optimizer.step`: {e}")))?;
                let hyper: Vec<f64> = field("optimizer.hyper")?
                    .split(' ')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(MANIFEST, format!("`optimizer.hyper`: {e}")))?;
                if hyper.len() != 5 {
                    return Err(bad(MANIFEST, "`optimizer.hyper` needs 5 values".into()));
                }
                let mut opt = Adam::new(
                    crate::nn::AdamConfig {
                        lr: hyper[0],
                        beta1: hyper[1],
                        beta2: hyper[2],
                        eps: hyper[3],
                        weight_decay: hyper[4],
                    },
                    &params,
                );
                opt.step = step;
                for (id, p) in params.iter() {
                    let shape = p.value.shape();
                    let i = id.index();
                    for (which, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                        let member = format!("optim/{which}/{}.f32", p.name);
                        *slot = from_bytes(&member, take(&member)?, shape)?;
                    }
                }
                Some(opt)
            }
            other => return Err(bad(MANIFEST, format!("unknown optimizer `{other}`"))),
        };
        let ckpt = Self { stage, run, params, optimizer, epoch, best_metric };
        // the parameter table must fit the declared architecture
        ckpt.model().map_err(|e| bad(MANIFEST, e.to_string()))?;
        Ok(ckpt)
    }
}
