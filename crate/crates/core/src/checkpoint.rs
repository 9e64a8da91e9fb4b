//! `AFMCKPT1` binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "AFMCKPT1"
//! meta_len   u32      followed by meta_len bytes of `key=value` lines
//! count      u32      number of tensors
//! per tensor u32 name_len, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Tensors are the model parameters, batch-norm running statistics (as
//! `1 × n` rows) and Adam moments (`adam.m.<param>`, `adam.v.<param>`).
//! The contrastive support set is not stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, HeadKind};
use crate::model::Model;
use crate::optim::{AdamConfig, OptimizerState, Parameterized};
use crate::tensor::Matrix;
use crate::train::{Metric, ModelCheckpoint};

pub const MAGIC: &[u8; 8] = b"AFMCKPT1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn meta_of(ckpt: &ModelCheckpoint) -> Vec<(String, String)> {
    let c = ckpt.model.config();
    let a = &ckpt.optimizer.config;
    let mut m: Vec<(String, String)> = vec![
        ("phase".into(), ckpt.phase.clone()),
        ("step".into(), ckpt.optimizer.step.to_string()),
        ("encoder.window_len".into(), c.window_len.to_string()),
        ("encoder.patch_len".into(), c.patch_len.to_string()),
        ("encoder.d_model".into(), c.d_model.to_string()),
        ("encoder.num_blocks".into(), c.num_blocks.to_string()),
        ("encoder.num_heads".into(), c.num_heads.to_string()),
        ("encoder.ffn_expansion".into(), c.ffn_expansion.to_string()),
        ("encoder.proj_dim".into(), c.proj_dim.to_string()),
        ("encoder.dropout_prob".into(), format!("{:?}", c.dropout_prob)),
        ("encoder.layernorm_eps".into(), format!("{:?}", c.layernorm_eps)),
        ("adam.lr".into(), format!("{:?}", a.lr)),
        ("adam.beta1".into(), format!("{:?}", a.beta1)),
        ("adam.beta2".into(), format!("{:?}", a.beta2)),
        ("adam.eps".into(), format!("{:?}", a.eps)),
    ];
    match &ckpt.model.head {
        None => m.push(("head.kind".into(), "none".into())),
        Some(h) => {
            m.push(("head.kind".into(), h.kind().to_string()));
            m.push(("head.classes".into(), h.num_classes().to_string()));
            m.push(("head.hidden".into(), h.hidden().to_string()));
        }
    }
    m.push((
        "metrics".into(),
        serde_json::to_string(&ckpt.metrics).expect("metrics serialize"),
    ));
    m.push(("support_set_persisted".into(), "false".into()));
    m
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, rows)?;
    put_u32(out, cols)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let meta: String = meta_of(ckpt)
        .into_iter()
        .map(|(k, v)| {
            if v.contains('\n') {
                return Err(bad(format!("metadata value for `{k}` contains a newline")));
            }
            Ok(format!("{k}={v}\n"))
        })
        .collect::<Result<_>>()?;

    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    ckpt.model.visit_params(&mut |name, m| {
        tensors.push((name.to_string(), m.rows(), m.cols(), m.data().to_vec()));
    });
    ckpt.model.visit_stats(&mut |name, v| {
        tensors.push((name.to_string(), 1, v.len(), v.to_vec()));
    });
    for (name, (m, v)) in &ckpt.optimizer.moments {
        tensors.push((format!("adam.m.{name}"), m.rows(), m.cols(), m.data().to_vec()));
        tensors.push((format!("adam.v.{name}"), v.rows(), v.cols(), v.data().to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, tensors.len())?;
    for (name, r, c, data) in &tensors {
        put_tensor(&mut out, name, *r, *c, data)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| bad(format!("missing metadata `{key}`")))?;
    raw.parse()
        .map_err(|_| bad(format!("metadata `{key}` has unparseable value `{raw}`")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not an AFMCKPT1 file"));
    }
    let meta_len = r.u32()?;
    let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }

    let config = EncoderConfig {
        window_len: field(&meta, "encoder.window_len")?,
        patch_len: field(&meta, "encoder.patch_len")?,
        d_model: field(&meta, "encoder.d_model")?,
        num_blocks: field(&meta, "encoder.num_blocks")?,
        num_heads: field(&meta, "encoder.num_heads")?,
        ffn_expansion: field(&meta, "encoder.ffn_expansion")?,
        proj_dim: field(&meta, "encoder.proj_dim")?,
        dropout_prob: field(&meta, "encoder.dropout_prob")?,
        layernorm_eps: field(&meta, "encoder.layernorm_eps")?,
    };
    let mut model = Model::new(config, 0)?;
    let kind: String = field(&meta, "head.kind")?;
    if kind != "none" {
        let kind: HeadKind = kind.parse()?;
        let classes: usize = field(&meta, "head.classes")?;
        let hidden: usize = field(&meta, "head.hidden")?;
        model.head = Some(ClassifierHead::new(kind, model.d_model(), hidden.max(1), classes, 0));
    }
    let adam = AdamConfig {
        lr: field(&meta, "adam.lr")?,
        beta1: field(&meta, "adam.beta1")?,
        beta2: field(&meta, "adam.beta2")?,
        eps: field(&meta, "adam.eps")?,
    };
    let metrics: Vec<Metric> = serde_json::from_str(meta.get("metrics").map_or("[]", |s| s))
        .map_err(|e| bad(format!("metrics: {e}")))?;

    let count = r.u32()?;
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let mut problem: Option<Error> = None;
    model.visit_params_mut(&mut |name, m| match tensors.remove(name) {
        Some(t) if t.shape() == m.shape() => *m = t,
        Some(t) => {
            problem.get_or_insert(bad(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), m.shape())));
        }
        None => {
            problem.get_or_insert(bad(format!("missing tensor `{name}`")));
        }
    });
    model.visit_stats_mut(&mut |name, v| match tensors.remove(name) {
        Some(t) if t.len() == v.len() => *v = t.into_data(),
        _ => {
            problem.get_or_insert(bad(format!("missing or misshapen statistics `{name}`")));
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }

    let mut moments = BTreeMap::new();
    let names: Vec<String> = tensors.keys().cloned().collect();
    for name in names {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let m = tensors.remove(&name).unwrap();
            let v = tensors
                .remove(&format!("adam.v.{param}"))
                .ok_or_else(|| bad(format!("first moment of `{param}` without a second")))?;
            moments.insert(param.to_string(), (m, v));
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }

    Ok(ModelCheckpoint {
        model,
        optimizer: OptimizerState {
            config: adam,
            step: field(&meta, "step")?,
            moments,
        },
        phase: meta.get("phase").cloned().unwrap_or_default(),
        metrics,
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let cfg = EncoderConfig {
            window_len: 48,
            patch_len: 12,
            d_model: 8,
            num_blocks: 2,
            num_heads: 2,
            proj_dim: 16,
            ..Default::default()
        };
        let mut model = Model::new(cfg, 9).unwrap();
        model.head = Some(ClassifierHead::new(HeadKind::Mlp, 8, 5, 3, 2));
        model.projection.bn1.running_mean[0] = 0.123;
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step = 17;
        opt.moments.insert(
            "head.fc2.bias".into(),
            (Matrix::filled(1, 3, 0.5), Matrix::filled(1, 3, 0.25)),
        );
        ModelCheckpoint {
            model,
            optimizer: opt,
            phase: "head:mlp".into(),
            metrics: vec![Metric {
                phase: "pretrain".into(),
                epoch: 0,
                loss: 1.0 / 3.0,
            }],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = to_bytes(&c).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/model.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        let text = String::from_utf8_lossy(&fs::read(&p).unwrap()).to_string();
        assert!(text.contains("support_set_persisted=false"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
