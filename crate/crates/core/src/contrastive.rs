//! Contrastive objectives and the nearest-neighbour support set.
//!
//! `nt_xent_loss` is the classic two-view objective over all `2N` views.
//! `nnclr_loss` replaces the anchor view with its nearest neighbour in a
//! FIFO support set of past projections:
//!
//! ```text
//! l(i) = −log  exp(sim(NN(z_i, S), z⁺_i)/τ) / Σ_{k≠i} exp(sim(NN(z_i, S), z⁺_k)/τ)
//! ```
//!
//! averaged over the batch and symmetrized over the two view orderings.
//! Nearest neighbours are looked up on detached values, so no gradient ever
//! reaches the support set.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

pub use crate::heads::Projection;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_SUPPORT_CAPACITY: usize = 1024;
const UNIT_TOL: f64 = 1e-6;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `⟨u, v⟩ / (‖u‖‖v‖)`
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine_sim of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Two aligned lists of views plus the softmax temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z_a: Vec<Projection>,
    pub z_b: Vec<Projection>,
    pub temperature: f64,
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} anchor views vs {b} positive views")));
    }
    if a < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 pairs, got {a}"
        )));
    }
    Ok(())
}

/// `−log(exp(s_pos/τ) / Σ_{k∈denominator} exp(s_k/τ))`, stabilized.
fn neg_log_softmax(scores: &[f64], pos: usize, skip: usize, tau: f64) -> f64 {
    let max = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != skip)
        .map(|(_, s)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != skip)
        .map(|(_, s)| (s / tau - max).exp())
        .sum();
    max + sum.ln() - scores[pos] / tau
}

/// Per-view losses `l(i, j)` of NT-Xent, in view order
/// `[a_0 .. a_{N-1}, b_0 .. b_{N-1}]`.
pub fn nt_xent_terms(batch: &ContrastiveBatch) -> Result<Vec<f64>> {
    check_temperature(batch.temperature)?;
    check_pairs(batch.z_a.len(), batch.z_b.len())?;
    let n = batch.z_a.len();
    let views: Vec<&[f64]> = batch
        .z_a
        .iter()
        .chain(&batch.z_b)
        .map(|p| p.values.as_slice())
        .collect();
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let scores = views
            .iter()
            .map(|v| cosine_sim(views[i], v))
            .collect::<Result<Vec<f64>>>()?;
        let pos = if i < n { i + n } else { i - n };
        terms.push(neg_log_softmax(&scores, pos, i, batch.temperature));
    }
    Ok(terms)
}

/// Symmetric NT-Xent: mean over pairs of `(l(i,j) + l(j,i)) / 2`.
pub fn nt_xent_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let terms = nt_xent_terms(batch)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Bounded FIFO queue of unit-norm projections.
#[derive(Debug, Clone)]
pub struct SupportSet {
    capacity: usize,
    entries: VecDeque<(u64, Projection)>,
    inserted: u64,
}

impl SupportSet {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("support set capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of projections ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Entries oldest-first.
    pub fn entries(&self) -> impl Iterator<Item = &Projection> {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Entries with their insertion indices, oldest-first.
    pub fn indexed_entries(&self) -> impl Iterator<Item = (u64, &Projection)> {
        self.entries.iter().map(|(i, p)| (*i, p))
    }

    /// Append a batch in order, evicting the oldest entries beyond capacity.
    /// The whole batch is rejected if any entry is not unit-norm.
    pub fn push(&mut self, batch: &[Projection]) -> Result<()> {
        for p in batch {
            let norm = p.norm();
            if (norm - 1.0).abs() > UNIT_TOL || !norm.is_finite() {
                return Err(Error::NotNormalized(norm));
            }
        }
        for p in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((self.inserted, Projection::unit(p.values.clone())));
            self.inserted += 1;
        }
        Ok(())
    }

    /// Push the rows of a matrix of unit-norm projections.
    pub fn push_rows(&mut self, m: &Matrix) -> Result<()> {
        let batch: Vec<Projection> = (0..m.rows()).map(|r| Projection::unit(m.row(r).to_vec())).collect();
        self.push(&batch)
    }

    /// Position (0 = oldest) of the entry closest to `z`; ties go to the
    /// earliest insertion.
    pub fn nearest_position(&self, z: &[f64]) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(Error::EmptySupportSet);
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (pos, (_, p)) in self.entries.iter().enumerate() {
            let d = sq_dist(z, &p.values);
            if d < best_d {
                best_d = d;
                best = pos;
            }
        }
        Ok(best)
    }

    pub fn get(&self, pos: usize) -> Option<&Projection> {
        self.entries.get(pos).map(|(_, p)| p)
    }

    /// Entries as a `len × dim` matrix, oldest first.
    pub fn as_matrix(&self) -> Matrix {
        let dim = self.entries.front().map_or(0, |(_, p)| p.dim());
        let mut data = Vec::with_capacity(self.entries.len() * dim);
        for (_, p) in &self.entries {
            data.extend_from_slice(&p.values);
        }
        Matrix::from_vec(self.entries.len(), dim, data).expect("support matrix")
    }
}

pub fn support_push(s: &mut SupportSet, batch: &[Projection]) -> Result<()> {
    s.push(batch)
}

/// `argmin_{s ∈ S} ‖z − s‖`, earliest insertion on ties.
pub fn nearest_neighbor<'a>(z: &Projection, s: &'a SupportSet) -> Result<&'a Projection> {
    let pos = s.nearest_position(&z.values)?;
    Ok(s.get(pos).expect("position in range"))
}

/// One direction of the NNCLR objective with anchors already resolved to
/// their neighbours.
fn nnclr_direction(anchors: &[&Projection], positives: &[Projection], tau: f64) -> Result<f64> {
    let n = positives.len();
    let mut total = 0.0;
    for i in 0..n {
        let scores = positives
            .iter()
            .map(|p| cosine_sim(&anchors[i].values, &p.values))
            .collect::<Result<Vec<f64>>>()?;
        total += neg_log_softmax(&scores, i, i, tau);
    }
    Ok(total / n as f64)
}

/// Symmetrized NNCLR loss.
pub fn nnclr_loss(z_a: &[Projection], z_b: &[Projection], s: &SupportSet, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_pairs(z_a.len(), z_b.len())?;
    if s.is_empty() {
        return Err(Error::EmptySupportSet);
    }
    let nn_a = z_a.iter().map(|z| nearest_neighbor(z, s)).collect::<Result<Vec<_>>>()?;
    let nn_b = z_b.iter().map(|z| nearest_neighbor(z, s)).collect::<Result<Vec<_>>>()?;
    let ab = nnclr_direction(&nn_a, z_b, tau)?;
    let ba = nnclr_direction(&nn_b, z_a, tau)?;
    Ok(0.5 * (ab + ba))
}

// ── Graph versions used for training ────────────────────────────────────────

/// Symmetric NT-Xent over unit-norm rows of `z_a` and `z_b` (N × D each).
pub fn nt_xent_graph(g: &mut Graph, z_a: Var, z_b: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let n = g.value(z_a).rows();
    check_pairs(n, g.value(z_b).rows())?;
    let z = g.concat_rows(&[z_a, z_b]);
    let sims = g.matmul_nt(z, z);
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    let excluded: Vec<Option<usize>> = (0..2 * n).map(Some).collect();
    Ok(g.nll(logits, &targets, &excluded))
}

/// Symmetrized NNCLR loss over unit-norm rows of `z_a`, `z_b` with the
/// support set given as a `len × D` node. Neighbour rows are copied out as
/// constants, so the support node never receives gradient.
pub fn nnclr_graph(g: &mut Graph, z_a: Var, z_b: Var, support: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let n = g.value(z_a).rows();
    check_pairs(n, g.value(z_b).rows())?;
    if g.value(support).rows() == 0 {
        return Err(Error::EmptySupportSet);
    }
    let nn_a = nearest_rows(g.value(z_a), g.value(support));
    let nn_b = nearest_rows(g.value(z_b), g.value(support));
    let anchors_a = g.constant(gather_rows(g.value(support), &nn_a));
    let anchors_b = g.constant(gather_rows(g.value(support), &nn_b));
    let targets: Vec<usize> = (0..n).collect();
    let excluded: Vec<Option<usize>> = (0..n).map(Some).collect();

    let sims = g.matmul_nt(anchors_a, z_b);
    let logits = g.scale(sims, 1.0 / tau);
    let ab = g.nll(logits, &targets, &excluded);
    let sims = g.matmul_nt(anchors_b, z_a);
    let logits = g.scale(sims, 1.0 / tau);
    let ba = g.nll(logits, &targets, &excluded);
    let sum = g.add(ab, ba);
    Ok(g.scale(sum, 0.5))
}

/// For each row of `z`, the index of the closest row of `support`
/// (Euclidean; earliest row on ties).
pub fn nearest_rows(z: &Matrix, support: &Matrix) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let zr = z.row(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for s in 0..support.rows() {
                let d = sq_dist(zr, support.row(s));
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            best
        })
        .collect()
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("gather shape")
}
