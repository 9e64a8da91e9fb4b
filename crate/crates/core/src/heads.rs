//! Heads that sit on top of the pooled embedding: the contrastive
//! projection head, the prediction MLP used as classifier, and the linear
//! probe.

use crate::encoder::{bind, EmbeddingVector, Linear, Mode};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Matrix;

pub const PROJECTION_SCOPE: &str = "projection";
pub const HEAD_SCOPE: &str = "head";

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        name: &str,
        trainable: bool,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let gamma = bind(g, &format!("{name}.gamma"), &self.gamma, trainable);
        let beta = bind(g, &format!("{name}.beta"), &self.beta, trainable);
        match mode {
            Mode::Train => {
                if g.value(x).rows() < 2 {
                    return Err(Error::InvalidArgument(
                        "train-mode batch norm needs a batch of at least 2".into(),
                    ));
                }
                let (y, s) = g.batch_norm(x, gamma, beta, BN_EPS);
                stats.push(s);
                Ok(y)
            }
            Mode::Eval => Ok(g.column_affine(
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                BN_EPS,
            )),
        }
    }

    /// `running ← momentum · running + (1 − momentum) · batch`
    pub fn update_running(&mut self, s: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&s.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&s.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{name}.gamma"), &self.gamma);
        f(&format!("{name}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{name}.gamma"), &mut self.gamma);
        f(&format!("{name}.beta"), &mut self.beta);
    }

    fn visit_stats(&self, name: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{name}.running_mean"), &self.running_mean);
        f(&format!("{name}.running_var"), &self.running_var);
    }

    fn visit_stats_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&format!("{name}.running_mean"), &mut self.running_mean);
        f(&format!("{name}.running_var"), &mut self.running_var);
    }
}

/// A point in contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    pub unit_normalized: bool,
}

impl Projection {
    /// Wrap a vector that is already unit-norm.
    pub fn unit(values: Vec<f64>) -> Self {
        Self {
            values,
            unit_normalized: true,
        }
    }

    /// Normalize `values` onto the unit sphere (zero maps to the first basis
    /// vector).
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            values.fill(0.0);
            if let Some(v) = values.first_mut() {
                *v = 1.0;
            }
        }
        Self::unit(values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// FC + BN + ReLU → FC + BN → L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

impl ProjectionHead {
    pub fn new(d_model: usize, proj_dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, &[0x9E0_1EC7]);
        Self {
            fc1: Linear::new(d_model, proj_dim, &mut rng),
            bn1: BatchNorm::new(proj_dim),
            fc2: Linear::new(proj_dim, proj_dim, &mut rng),
            bn2: BatchNorm::new(proj_dim),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.fc2.weight.cols()
    }

    /// Record the head; output rows are unit-norm.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, x, "projection.fc1", trainable);
        let h = self.bn1.forward(g, h, "projection.bn1", trainable, mode, stats)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h, "projection.fc2", trainable);
        let h = self.bn2.forward(g, h, "projection.bn2", trainable, mode, stats)?;
        Ok(g.l2_normalize_rows(h))
    }

    /// Fold batch statistics recorded by a train-mode forward.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        if let [s1, s2] = stats {
            self.bn1.update_running(s1);
            self.bn2.update_running(s2);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.fc1.visit("projection.fc1", f);
        self.bn1.visit("projection.bn1", f);
        self.fc2.visit("projection.fc2", f);
        self.bn2.visit("projection.bn2", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.fc1.visit_mut("projection.fc1", f);
        self.bn1.visit_mut("projection.bn1", f);
        self.fc2.visit_mut("projection.fc2", f);
        self.bn2.visit_mut("projection.bn2", f);
    }

    pub fn visit_stats(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.bn1.visit_stats("projection.bn1", f);
        self.bn2.visit_stats("projection.bn2", f);
    }

    pub fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.bn1.visit_stats_mut("projection.bn1", f);
        self.bn2.visit_stats_mut("projection.bn2", f);
    }
}

/// Project a batch of embeddings. Train mode uses (and reports) batch
/// statistics and rejects batches of one.
pub fn project(
    embeddings: &[EmbeddingVector],
    head: &ProjectionHead,
    mode: Mode,
) -> Result<(Vec<Projection>, Vec<BatchStats>)> {
    if embeddings.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.0.clone()).collect();
    let x = Matrix::from_rows(&rows)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut stats = Vec::new();
    let out = head.forward(&mut g, xv, false, mode, &mut stats)?;
    let m = g.value(out);
    let projections = (0..m.rows()).map(|r| Projection::unit(m.row(r).to_vec())).collect();
    Ok((projections, stats))
}

/// Single dense layer from embedding to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub fc: Linear,
}

/// Hidden FC + BN + ReLU, then FC to class logits (softmax applied by the
/// loss and by prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMlp {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Probe,
    Mlp,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(HeadKind::Probe),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::InvalidArgument(format!(
                "unknown head kind `{other}` (expected probe or mlp)"
            ))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Probe => "probe",
            HeadKind::Mlp => "mlp",
        })
    }
}

/// The trainable classifier on top of the frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Probe(LinearProbe),
    Mlp(PredictionMlp),
}

impl ClassifierHead {
    pub fn new(kind: HeadKind, d_model: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, &[0x4EAD, num_classes as u64]);
        match kind {
            HeadKind::Probe => ClassifierHead::Probe(LinearProbe {
                fc: Linear::new(d_model, num_classes, &mut rng),
            }),
            HeadKind::Mlp => ClassifierHead::Mlp(PredictionMlp {
                fc1: Linear::new(d_model, hidden, &mut rng),
                bn1: BatchNorm::new(hidden),
                fc2: Linear::new(hidden, num_classes, &mut rng),
            }),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            ClassifierHead::Probe(_) => HeadKind::Probe,
            ClassifierHead::Mlp(_) => HeadKind::Mlp,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierHead::Probe(p) => p.fc.weight.cols(),
            ClassifierHead::Mlp(m) => m.fc2.weight.cols(),
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            ClassifierHead::Probe(_) => 0,
            ClassifierHead::Mlp(m) => m.fc1.weight.cols(),
        }
    }

    /// Record the head; returns logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        match self {
            ClassifierHead::Probe(p) => Ok(p.fc.forward(g, x, "head.fc", trainable)),
            ClassifierHead::Mlp(m) => {
                let h = m.fc1.forward(g, x, "head.fc1", trainable);
                let h = m.bn1.forward(g, h, "head.bn1", trainable, mode, stats)?;
                let h = g.relu(h);
                Ok(m.fc2.forward(g, h, "head.fc2", trainable))
            }
        }
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        if let (ClassifierHead::Mlp(m), [s]) = (self, stats) {
            m.bn1.update_running(s);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            ClassifierHead::Probe(p) => p.fc.visit("head.fc", f),
            ClassifierHead::Mlp(m) => {
                m.fc1.visit("head.fc1", f);
                m.bn1.visit("head.bn1", f);
                m.fc2.visit("head.fc2", f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            ClassifierHead::Probe(p) => p.fc.visit_mut("head.fc", f),
            ClassifierHead::Mlp(m) => {
                m.fc1.visit_mut("head.fc1", f);
                m.bn1.visit_mut("head.bn1", f);
                m.fc2.visit_mut("head.fc2", f);
            }
        }
    }

    pub fn visit_stats(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let ClassifierHead::Mlp(m) = self {
            m.bn1.visit_stats("head.bn1", f);
        }
    }

    pub fn visit_stats_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let ClassifierHead::Mlp(m) = self {
            m.bn1.visit_stats_mut("head.bn1", f);
        }
    }

    /// Eval-mode class probabilities for a batch of embeddings (rows).
    pub fn predict_proba(&self, embeddings: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone());
        let logits = self.forward(&mut g, x, false, Mode::Eval, &mut Vec::new())?;
        let mut p = g.value(logits).clone();
        crate::graph::softmax_rows_in_place(&mut p);
        Ok(p)
    }
}

/// Logits of a linear probe for one embedding.
pub fn probe(e: &EmbeddingVector, p: &LinearProbe) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Matrix::row_vector(e.0.clone()));
    let y = p.fc.forward(&mut g, x, "probe", false);
    g.value(y).data().to_vec()
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut m = Matrix::row_vector(logits.to_vec());
    crate::graph::softmax_rows_in_place(&mut m);
    m.into_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embeddings(n: usize, d: usize, seed: u64) -> Vec<EmbeddingVector> {
        let mut rng = RngStream::new(seed);
        (0..n)
            .map(|_| EmbeddingVector((0..d).map(|_| rng.normal()).collect()))
            .collect()
    }

    #[test]
    fn projections_are_unit_norm() {
        let head = ProjectionHead::new(8, 16, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let (p, _) = project(&embeddings(5, 8, 2), &head, mode).unwrap();
            for z in p {
                assert!((z.norm() - 1.0).abs() < 1e-6);
                assert!(z.unit_normalized);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let head = ProjectionHead::new(8, 16, 1);
        let e = embeddings(3, 8, 3);
        assert_eq!(
            project(&e, &head, Mode::Eval).unwrap().0,
            project(&e, &head, Mode::Eval).unwrap().0
        );
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let head = ProjectionHead::new(8, 16, 1);
        assert!(project(&embeddings(1, 8, 3), &head, Mode::Train).is_err());
    }

    #[test]
    fn zero_embedding_maps_to_first_basis_vector() {
        let mut head = ProjectionHead::new(4, 6, 1);
        head.fc1.bias = Matrix::zeros(1, 6);
        head.fc2.bias = Matrix::zeros(1, 6);
        let (p, _) = project(&[EmbeddingVector(vec![0.0; 4])], &head, Mode::Eval).unwrap();
        assert_eq!(p[0].values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn probe_examples() {
        let mut rng = RngStream::new(1);
        let p = LinearProbe { fc: Linear::zeros(5, 3) };
        let e = EmbeddingVector((0..5).map(|_| rng.normal()).collect());
        let logits = probe(&e, &p);
        assert_eq!(logits.len(), 3);
        for v in softmax(&logits) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = LinearProbe { fc: Linear::new(5, 4, &mut rng) };
        let logits = probe(&e, &p);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.5).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::new(2);
        bn.update_running(&BatchStats {
            mean: vec![1.0, -1.0],
            var: vec![3.0, 1.0],
        });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-15);
        assert_eq!(bn.running_var[1], 1.0);
    }
}
