//! Backbone, projection head and optional classifier bundled together.

use rayon::prelude::*;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, ProjectionHead};
use crate::optim::Parameterized;
use crate::signal::{normalize_values, SignalWindow};
use crate::tensor::Matrix;

/// Windows are embedded in fixed-size chunks so results never depend on the
/// number of worker threads.
pub const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub projection: ProjectionHead,
    pub head: Option<ClassifierHead>,
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config, seed)?;
        let projection = ProjectionHead::new(encoder.config.d_model, encoder.config.proj_dim, seed);
        Ok(Self {
            encoder,
            projection,
            head: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn d_model(&self) -> usize {
        self.encoder.config.d_model
    }

    /// Every running statistic (batch-norm buffers), by name.
    pub fn visit_stats(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.projection.visit_stats(f);
        if let Some(h) = &self.head {
            h.visit_stats(f);
        }
    }

    pub fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.projection.visit_stats_mut(f);
        if let Some(h) = &mut self.head {
            h.visit_stats_mut(f);
        }
    }

    /// FNV-1a over encoder parameter names and value bits.
    pub fn backbone_hash(&self) -> u64 {
        let mut h = Fnv::default();
        self.encoder.visit(&mut |name, m| {
            h.write(name.as_bytes());
            for v in m.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        });
        h.0
    }

    /// Eval-mode embeddings of z-scored raw windows, one row per window.
    pub fn embed_windows(&self, windows: &[&[f64]]) -> Result<Matrix> {
        let normalized: Vec<Vec<f64>> = windows.iter().map(|w| normalize_values(w)).collect();
        let refs: Vec<&[f64]> = normalized.iter().map(|v| v.as_slice()).collect();
        self.embed_prepared(&refs)
    }

    /// Eval-mode embeddings of windows that are already normalized (and
    /// possibly augmented).
    pub fn embed_prepared(&self, windows: &[&[f64]]) -> Result<Matrix> {
        let d = self.d_model();
        let chunks: Vec<Matrix> = windows
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| self.encoder.embed(chunk))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(windows.len() * d);
        for c in chunks {
            data.extend(c.into_data());
        }
        Matrix::from_vec(windows.len(), d, data)
    }

    pub fn embed(&self, windows: &[SignalWindow]) -> Result<Matrix> {
        let refs: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
        self.embed_windows(&refs)
    }

    pub fn head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no classifier head".into()))
    }

    /// Class probabilities (rows) for raw windows.
    pub fn predict_proba(&self, windows: &[SignalWindow]) -> Result<Matrix> {
        let head = self.head()?;
        let e = self.embed(windows)?;
        head_proba(head, &e)
    }

    pub fn predict(&self, windows: &[SignalWindow]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(windows)?))
    }
}

/// Eval-mode head probabilities over embedding rows, chunked like
/// [`Model::embed_windows`].
pub fn head_proba(head: &ClassifierHead, embeddings: &Matrix) -> Result<Matrix> {
    let d = embeddings.cols();
    let rows: Vec<usize> = (0..embeddings.rows()).collect();
    let parts: Vec<Matrix> = rows
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &r in chunk {
                data.extend_from_slice(embeddings.row(r));
            }
            head.predict_proba(&Matrix::from_vec(chunk.len(), d, data)?)
        })
        .collect::<Result<_>>()?;
    let c = head.num_classes();
    let mut data = Vec::with_capacity(embeddings.rows() * c);
    for p in parts {
        data.extend(p.into_data());
    }
    Matrix::from_vec(embeddings.rows(), c, data)
}

/// Index of the largest entry per row (earliest on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl Parameterized for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.encoder.visit(f);
        self.projection.visit(f);
        if let Some(h) = &self.head {
            h.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_mut(f);
        self.projection.visit_mut(f);
        if let Some(h) = &mut self.head {
            h.visit_mut(f);
        }
    }
}

impl Parameterized for ClassifierHead {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_mut(f);
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}
