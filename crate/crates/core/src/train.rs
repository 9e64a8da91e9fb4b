//! Contrastive pretraining, frozen-backbone head training and the
//! incremental active-learning loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{
    al_round, random_baseline_round, ALConfig, ClassDistribution, LabelingState, Oracle, RoundLog,
};
use crate::augment::{classification_augment, contrastive_augment, AugmentConfig};
use crate::contrastive::{nnclr_graph, SupportSet, DEFAULT_SUPPORT_CAPACITY, DEFAULT_TEMPERATURE};
use crate::encoder::{EncoderConfig, Mode, ENCODER_SCOPE};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::graph::Graph;
use crate::heads::{ClassifierHead, HeadKind, HEAD_SCOPE, PROJECTION_SCOPE};
use crate::model::{argmax_rows, head_proba, Model};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng::RngStream;
use crate::signal::{normalize_values, stratified_sample, LabeledDataset, SignalWindow};
use crate::tensor::Matrix;

const PRETRAIN_ORDER: u64 = 0x5052_4554;
const PRETRAIN_VIEW: u64 = 0x5649_4557;
const PRETRAIN_DROPOUT: u64 = 0x4452_4f50;
const HEAD_VIEW: u64 = 0x4856_4957;
const HEAD_ORDER: u64 = 0x484f_5244;
const HEAD_INIT: u64 = 0x4849_4e49;
const RANDOM_ARM: u64 = 0x5241_4e44;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub head_epochs: usize,
    /// Head training runs at least this many optimizer steps, adding epochs
    /// when the labeled set is small.
    pub head_min_steps: usize,
    /// Number of mildly augmented copies of each window whose embeddings
    /// are precomputed for head training; epoch `e` uses copy `e % views`.
    pub head_views: usize,
    pub head_hidden: usize,
    pub head_kind: HeadKind,
    pub seed: u64,
    pub adam: AdamConfig,
    pub temperature: f64,
    pub support_capacity: usize,
    pub warmup_batches: usize,
    pub strong: AugmentConfig,
    pub mild: AugmentConfig,
    pub frozen_scopes: BTreeSet<String>,
    /// Continue contrastive training of the backbone between AL rounds.
    pub retrain_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            pretrain_epochs: 10,
            head_epochs: 30,
            head_min_steps: 200,
            head_views: 4,
            head_hidden: 256,
            head_kind: HeadKind::Mlp,
            seed: 0,
            adam: AdamConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            support_capacity: DEFAULT_SUPPORT_CAPACITY,
            warmup_batches: 1,
            strong: AugmentConfig::STRONG,
            mild: AugmentConfig::MILD,
            frozen_scopes: BTreeSet::new(),
            retrain_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.pretrain_epochs == 0 || self.head_epochs == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if self.head_views == 0 || self.head_hidden == 0 {
            return bad("head_views and head_hidden must be positive".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad(format!("learning rate {}", self.adam.lr));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {}", self.temperature));
        }
        if self.support_capacity == 0 {
            return bad("support_capacity must be positive".into());
        }
        Ok(())
    }
}

/// One entry of a checkpoint's metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub phase: String,
    pub metrics: Vec<Metric>,
}

impl ModelCheckpoint {
    pub fn fresh(model: Model, adam: AdamConfig) -> Self {
        Self {
            model,
            optimizer: OptimizerState::new(adam),
            phase: "init".into(),
            metrics: Vec::new(),
        }
    }

    pub fn losses(&self, phase: &str) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|m| m.phase == phase)
            .map(|m| m.loss)
            .collect()
    }
}

/// Mean of `−ln softmax(logits)[label]` over rows.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        if l >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: row.len(),
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / labels.len() as f64)
}

/// Shuffled batches for one epoch, dropping a trailing batch of one.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn stack(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
}

fn with_scope(frozen: &BTreeSet<String>, extra: &[&str]) -> BTreeSet<String> {
    let mut f = frozen.clone();
    f.extend(extra.iter().map(|s| s.to_string()));
    f
}

/// Pretrain a fresh encoder + projection head with the NNCLR objective.
pub fn pretrain_backbone(
    windows: &[SignalWindow],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    let model = Model::new(encoder.clone(), cfg.seed)?;
    continue_pretraining(ModelCheckpoint::fresh(model, cfg.adam), windows, cfg)
}

/// Run `cfg.pretrain_epochs` more contrastive epochs on `ckpt`. The support
/// set is not part of the checkpoint; it is rebuilt by a warm-up pass.
pub fn continue_pretraining(
    mut ckpt: ModelCheckpoint,
    windows: &[SignalWindow],
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let window_len = ckpt.model.config().window_len;
    cfg.strong.validate(window_len)?;
    if windows.len() < 2 * cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "pretraining needs at least {} windows, got {}",
            2 * cfg.batch_size,
            windows.len()
        )));
    }
    let prepared: Vec<SignalWindow> = windows
        .iter()
        .map(|w| w.with_values(normalize_values(&w.values)))
        .collect();
    let frozen = with_scope(&cfg.frozen_scopes, &[HEAD_SCOPE]);
    let epoch0 = ckpt.metrics.iter().filter(|m| m.phase == "pretrain").count();
    let mut support = SupportSet::new(cfg.support_capacity)?;

    let view = |epoch: usize, b: usize, batch: &[usize], v: u64| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng =
                    RngStream::keyed(cfg.seed, &[PRETRAIN_VIEW, epoch as u64, b as u64, j as u64, v]);
                contrastive_augment(&prepared[i], &cfg.strong, &mut rng).values
            })
            .collect();
        stack(&rows)
    };

    for e in 0..cfg.pretrain_epochs {
        let epoch = epoch0 + e;
        let mut rng = RngStream::keyed(cfg.seed, &[PRETRAIN_ORDER, epoch as u64]);
        let batches = epoch_batches(prepared.len(), cfg.batch_size, &mut rng);

        if support.is_empty() {
            for (b, batch) in batches.iter().take(cfg.warmup_batches.max(1)).enumerate() {
                let a = view(epoch, b, batch, 0)?;
                let mut g = Graph::new();
                let h = ckpt.model.encoder.forward(&mut g, &a, false, None)?;
                let z = ckpt
                    .model
                    .projection
                    .forward(&mut g, h, false, Mode::Train, &mut Vec::new())?;
                support.push_rows(g.value(z))?;
            }
        }

        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let a = view(epoch, b, batch, 0)?;
            let bm = view(epoch, b, batch, 1)?;
            let mut g = Graph::new();
            let mut drop_rng = RngStream::keyed(cfg.seed, &[PRETRAIN_DROPOUT, epoch as u64, b as u64]);
            let model = &ckpt.model;
            let ha = model.encoder.forward(&mut g, &a, true, Some(&mut drop_rng))?;
            let hb = model.encoder.forward(&mut g, &bm, true, Some(&mut drop_rng))?;
            let mut stats_a = Vec::new();
            let mut stats_b = Vec::new();
            let za = model.projection.forward(&mut g, ha, true, Mode::Train, &mut stats_a)?;
            let zb = model.projection.forward(&mut g, hb, true, Mode::Train, &mut stats_b)?;
            let s = g.constant(support.as_matrix());
            let loss = nnclr_graph(&mut g, za, zb, s, cfg.temperature)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}, batch {b}")));
            }
            let grads = g.backward(loss)?.by_name();
            adam_step(&mut ckpt.model, &grads, &mut ckpt.optimizer, &frozen)?;
            ckpt.model.projection.update_running(&stats_a);
            ckpt.model.projection.update_running(&stats_b);
            support.push_rows(g.value(za))?;
            total += value;
        }
        ckpt.metrics.push(Metric {
            phase: "pretrain".into(),
            epoch,
            loss: total / batches.len() as f64,
        });
    }
    ckpt.phase = "pretrained".into();
    Ok(ckpt)
}

/// NNCLR loss of one pair of view batches through encoder and projection
/// head (train-mode batch norm, no dropout), with gradients by parameter
/// name. `support` rows must be unit-norm.
pub fn nnclr_batch_loss(
    model: &Model,
    a: &Matrix,
    b: &Matrix,
    support: &Matrix,
    tau: f64,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new();
    let ha = model.encoder.forward(&mut g, a, true, None)?;
    let hb = model.encoder.forward(&mut g, b, true, None)?;
    let za = model.projection.forward(&mut g, ha, true, Mode::Train, &mut Vec::new())?;
    let zb = model.projection.forward(&mut g, hb, true, Mode::Train, &mut Vec::new())?;
    let s = g.constant(support.clone());
    let loss = nnclr_graph(&mut g, za, zb, s, tau)?;
    Ok((g.scalar(loss), g.backward(loss)?.by_name()))
}

/// Backbone embeddings of `head_views` mildly augmented copies of each
/// window. Augmentation randomness is keyed by (view, window index).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub views: Vec<Matrix>,
}

impl EmbeddingBank {
    pub fn build(model: &Model, windows: &[SignalWindow], cfg: &TrainConfig) -> Result<Self> {
        cfg.mild.validate(model.config().window_len)?;
        let prepared: Vec<SignalWindow> = windows
            .iter()
            .map(|w| w.with_values(normalize_values(&w.values)))
            .collect();
        let views = (0..cfg.head_views)
            .map(|v| {
                let aug: Vec<Vec<f64>> = prepared
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let mut rng = RngStream::keyed(cfg.seed, &[HEAD_VIEW, v as u64, i as u64]);
                        classification_augment(w, &cfg.mild, &mut rng).values
                    })
                    .collect();
                let refs: Vec<&[f64]> = aug.iter().map(|a| a.as_slice()).collect();
                model.embed_prepared(&refs)
            })
            .collect::<Result<_>>()?;
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.first().map_or(0, |m| m.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("gathered shape")
}

/// Train a freshly initialized head on bank rows `rows` with `labels`.
/// `key` separates head initializations (e.g. per AL round).
pub fn fit_head(
    bank: &EmbeddingBank,
    rows: &[usize],
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    key: u64,
) -> Result<(ClassifierHead, OptimizerState, Vec<Metric>)> {
    cfg.validate()?;
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("a classifier needs at least 2 classes".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label: l, num_classes });
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "head training needs at least 2 labeled windows, got {}",
            rows.len()
        )));
    }
    let d = bank.views[0].cols();
    let init = crate::rng::derive_seed(cfg.seed, &[HEAD_INIT, key]);
    let mut head = ClassifierHead::new(cfg.head_kind, d, cfg.head_hidden, num_classes, init);
    let mut opt = OptimizerState::new(cfg.adam);
    let frozen = BTreeSet::new();
    let per_epoch = rows.len().div_ceil(cfg.batch_size);
    let epochs = cfg.head_epochs.max(cfg.head_min_steps.div_ceil(per_epoch));
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = RngStream::keyed(cfg.seed, &[HEAD_ORDER, key, epoch as u64]);
        let batches = epoch_batches(rows.len(), cfg.batch_size, &mut rng);
        let view = &bank.views[epoch % bank.views.len()];
        let mut total = 0.0;
        for batch in &batches {
            let idx: Vec<usize> = batch.iter().map(|&j| rows[j]).collect();
            let targets: Vec<usize> = batch.iter().map(|&j| labels[j]).collect();
            let mut g = Graph::new();
            let x = g.constant(gather(view, &idx));
            let mut stats = Vec::new();
            let logits = head.forward(&mut g, x, true, Mode::Train, &mut stats)?;
            let loss = g.nll(logits, &targets, &vec![None; targets.len()]);
            total += g.scalar(loss);
            let grads = g.backward(loss)?.by_name();
            adam_step(&mut head, &grads, &mut opt, &frozen)?;
            head.update_running(&stats);
        }
        metrics.push(Metric {
            phase: format!("head:{}", cfg.head_kind),
            epoch,
            loss: total / batches.len() as f64,
        });
    }
    Ok((head, opt, metrics))
}

fn labels_of(windows: &[SignalWindow]) -> Result<Vec<usize>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| w.label.ok_or(Error::MissingLabel(i)))
        .collect()
}

fn attach_head(
    ckpt: &ModelCheckpoint,
    head: ClassifierHead,
    opt: OptimizerState,
    metrics: Vec<Metric>,
    phase: String,
) -> ModelCheckpoint {
    let mut out = ckpt.clone();
    out.model.head = Some(head);
    out.optimizer.reset_scope(HEAD_SCOPE);
    out.optimizer.moments.extend(opt.moments);
    out.optimizer.step = out.optimizer.step.max(opt.step);
    out.metrics.extend(metrics);
    out.phase = phase;
    out
}

/// Train a new classifier head on labeled windows with the backbone frozen.
pub fn train_head(
    ckpt: &ModelCheckpoint,
    windows: &[SignalWindow],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    let labels = labels_of(windows)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label: l, num_classes });
    }
    let bank = EmbeddingBank::build(&ckpt.model, windows, cfg)?;
    let rows: Vec<usize> = (0..windows.len()).collect();
    let (head, opt, metrics) = fit_head(&bank, &rows, &labels, num_classes, cfg, 0)?;
    Ok(attach_head(ckpt, head, opt, metrics, format!("head:{}", cfg.head_kind)))
}

/// `⌈fraction · n⌉`, clamped to `[1, n]`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Fine-tune a fresh head, sized to the task, on a stratified `fraction` of
/// `task_train`.
pub fn finetune_for_task(
    ckpt: &ModelCheckpoint,
    task_train: &LabeledDataset,
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = fraction_count(fraction, task_train.len());
    let picked = stratified_sample(&task_train.labels(), count, cfg.seed)?;
    let subset = task_train.subset(&picked);
    let mut out = train_head(ckpt, &subset.windows, task_train.num_classes, cfg)?;
    out.phase = format!("finetune:{fraction}");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Active,
    Random,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "al" | "active" => Ok(Strategy::Active),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::InvalidArgument(format!("unknown strategy `{s}` (al|random)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Active => "al",
            Strategy::Random => "random",
        })
    }
}

/// One point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub label_fraction: f64,
    pub labeled: usize,
    pub oracle_count: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// A learning curve as JSON lines, one point per line.
pub fn curve_to_jsonl(curve: &[CurvePoint]) -> String {
    let mut out = String::new();
    for p in curve {
        out.push_str(&serde_json::to_string(p).expect("curve point serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone)]
pub struct ALRun {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<CurvePoint>,
    pub rounds: Vec<RoundLog>,
    /// Seconds elapsed at each curve point.
    pub wall_seconds: Vec<f64>,
}

struct Frozen {
    bank: EmbeddingBank,
    train: Matrix,
    val: Matrix,
    test: Matrix,
}

impl Frozen {
    fn build(model: &Model, splits: &Splits, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            bank: EmbeddingBank::build(model, &splits.train.windows, cfg)?,
            train: model.embed(&splits.train.windows)?,
            val: model.embed(&splits.val.windows)?,
            test: model.embed(&splits.test.windows)?,
        })
    }
}

/// Seed phase plus `alcfg.rounds` rounds of selection and head re-training.
/// The seed set depends only on `alcfg.seed`, so both strategies share it.
pub fn al_training_loop(
    backbone: &ModelCheckpoint,
    splits: &Splits,
    alcfg: &ALConfig,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<ALRun> {
    alcfg.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let train = &splits.train;
    let n = train.len();
    let c = train.num_classes;
    let labels = train.labels();
    let mut oracle = Oracle::new(labels.clone());
    let seed = stratified_sample(&labels, alcfg.seed_size(n), alcfg.seed)?;
    let mut state = LabelingState::seeded(n, &seed, &mut oracle)?;
    let mut ckpt = backbone.clone();
    ckpt.model.head = None;
    let mut frozen = Frozen::build(&ckpt.model, splits, cfg)?;
    let val_labels = splits.val.labels();
    let test_labels = splits.test.labels();

    let score = |head: &ClassifierHead, m: &Matrix, truth: &[usize]| -> Result<f64> {
        accuracy(&argmax_rows(&head_proba(head, m)?), truth)
    };

    let fit = |frozen: &Frozen, state: &LabelingState, round: usize| {
        fit_head(&frozen.bank, &state.labeled_indices(), &state.labels(), c, cfg, round as u64)
    };

    let (mut head, mut opt, mut metrics) = fit(&frozen, &state, 0)?;
    let mut curve = vec![CurvePoint {
        round: 0,
        label_fraction: state.label_fraction(),
        labeled: state.labeled.len(),
        oracle_count: oracle.queries(),
        val_accuracy: score(&head, &frozen.val, &val_labels)?,
        test_accuracy: score(&head, &frozen.test, &test_labels)?,
    }];
    let mut wall = vec![start.elapsed().as_secs_f64()];
    let mut logs = Vec::new();

    for round in 1..=alcfg.rounds {
        if state.pool.is_empty() {
            break;
        }
        let (next, mut log) = match strategy {
            Strategy::Active => {
                let predict = |idx: &[usize]| -> Result<Vec<ClassDistribution>> {
                    let p = head_proba(&head, &gather(&frozen.train, idx))?;
                    (0..p.rows())
                        .map(|r| ClassDistribution::new(p.row(r).to_vec()))
                        .collect()
                };
                al_round(predict, state, &mut oracle, alcfg, round)?
            }
            Strategy::Random => {
                let mut rng = RngStream::keyed(alcfg.seed, &[RANDOM_ARM, round as u64]);
                random_baseline_round(state, &mut oracle, alcfg, &mut rng, round)?
            }
        };
        state = next;
        if cfg.retrain_backbone {
            ckpt = continue_pretraining(ckpt, &train.windows, cfg)?;
            frozen = Frozen::build(&ckpt.model, splits, cfg)?;
        }
        let fitted = fit(&frozen, &state, round)?;
        head = fitted.0;
        opt = fitted.1;
        metrics.extend(fitted.2);
        let val_accuracy = score(&head, &frozen.val, &val_labels)?;
        log.val_accuracy = Some(val_accuracy);
        logs.push(log);
        curve.push(CurvePoint {
            round,
            label_fraction: state.label_fraction(),
            labeled: state.labeled.len(),
            oracle_count: oracle.queries(),
            val_accuracy,
            test_accuracy: score(&head, &frozen.test, &test_labels)?,
        });
        wall.push(start.elapsed().as_secs_f64());
    }

    let checkpoint = attach_head(&ckpt, head, opt, metrics, format!("al:{strategy}"));
    Ok(ALRun {
        checkpoint,
        curve,
        rounds: logs,
        wall_seconds: wall,
    })
}

/// Parameter groups of the backbone.
pub fn backbone_scopes() -> BTreeSet<String> {
    [ENCODER_SCOPE, PROJECTION_SCOPE]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_generate, SyntheticSpec};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            window_len: 48,
            patch_len: 12,
            d_model: 8,
            num_blocks: 1,
            num_heads: 2,
            proj_dim: 16,
            ..Default::default()
        }
    }

    fn tiny_data(per_class: usize, seed: u64) -> LabeledDataset {
        let spec = SyntheticSpec {
            windows_per_class: per_class,
            window_len: 48,
            ..SyntheticSpec::default()
        };
        synth_generate(&spec, seed).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            pretrain_epochs: 2,
            head_epochs: 2,
            head_min_steps: 10,
            head_views: 2,
            head_hidden: 8,
            support_capacity: 64,
            strong: AugmentConfig {
                zero_seg_len: 4,
                ..AugmentConfig::STRONG
            },
            mild: AugmentConfig {
                zero_seg_len: 4,
                ..AugmentConfig::MILD
            },
            ..Default::default()
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::zeros(1, 4);
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = Matrix::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap();
        assert!(cross_entropy_loss(&sure, &[1]).unwrap() < 1e-300);
        let one = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let two = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.3, -1.2, 2.0]]).unwrap();
        assert_eq!(
            cross_entropy_loss(&one, &[0]).unwrap(),
            cross_entropy_loss(&two, &[0, 0]).unwrap()
        );
    }

    #[test]
    fn cross_entropy_matches_graph_nll() {
        let logits = Matrix::from_rows(&[vec![0.1, 2.0, -1.0], vec![3.0, 0.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = g.nll(x, &[1, 2], &[None, None]);
        let direct = cross_entropy_loss(&logits, &[1, 2]).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-14);
    }

    #[test]
    fn pretraining_rejects_small_datasets() {
        let ds = tiny_data(5, 1);
        let err = pretrain_backbone(&ds.windows, &tiny_encoder(), &tiny_cfg()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn pretraining_is_deterministic_and_freezes_nothing_else() {
        let ds = tiny_data(20, 2);
        let a = pretrain_backbone(&ds.windows, &tiny_encoder(), &tiny_cfg()).unwrap();
        let b = pretrain_backbone(&ds.windows, &tiny_encoder(), &tiny_cfg()).unwrap();
        assert_eq!(a.losses("pretrain"), b.losses("pretrain"));
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses("pretrain").len(), 2);
        let init = Model::new(tiny_encoder(), 0).unwrap();
        assert_ne!(init.backbone_hash(), a.model.backbone_hash());
    }

    #[test]
    fn head_training_keeps_backbone_bits() {
        let ds = tiny_data(10, 3);
        let ckpt = ModelCheckpoint::fresh(Model::new(tiny_encoder(), 4).unwrap(), AdamConfig::default());
        let before = ckpt.model.backbone_hash();
        let out = train_head(&ckpt, &ds.windows, 4, &tiny_cfg()).unwrap();
        assert_eq!(out.model.backbone_hash(), before);
        assert_eq!(out.model.encoder, ckpt.model.encoder);
        assert_eq!(out.model.projection, ckpt.model.projection);
        assert_eq!(out.model.head.as_ref().unwrap().num_classes(), 4);
    }

    #[test]
    fn head_rejects_bad_labels() {
        let ds = tiny_data(4, 3);
        let ckpt = ModelCheckpoint::fresh(Model::new(tiny_encoder(), 4).unwrap(), AdamConfig::default());
        assert!(matches!(
            train_head(&ckpt, &ds.windows, 3, &tiny_cfg()),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn single_class_dataset_is_fit_perfectly() {
        let ds = tiny_data(12, 5);
        let only: Vec<SignalWindow> = ds.windows.iter().filter(|w| w.label == Some(2)).cloned().collect();
        let ckpt = ModelCheckpoint::fresh(Model::new(tiny_encoder(), 4).unwrap(), AdamConfig::default());
        // One configured epoch; the step floor still applies.
        let cfg = TrainConfig {
            head_epochs: 1,
            head_min_steps: 1000,
            head_kind: HeadKind::Probe,
            ..tiny_cfg()
        };
        let out = train_head(&ckpt, &only, 4, &cfg).unwrap();
        let pred = out.model.predict(&only).unwrap();
        assert!(pred.iter().all(|&p| p == 2), "{pred:?}");
    }

    #[test]
    fn finetune_output_width_follows_task() {
        let ds = tiny_data(10, 6);
        let ckpt = ModelCheckpoint::fresh(Model::new(tiny_encoder(), 4).unwrap(), AdamConfig::default());
        let binary = LabeledDataset::new(
            ds.windows
                .iter()
                .map(|w| SignalWindow {
                    label: w.label.map(|l| usize::from(l > 0)),
                    ..w.clone()
                })
                .collect(),
            2,
            LabeledDataset::default_names(2),
        )
        .unwrap();
        let two = finetune_for_task(&ckpt, &binary, 0.5, &tiny_cfg()).unwrap();
        assert_eq!(two.model.head.as_ref().unwrap().num_classes(), 2);
        assert_eq!(two.model.encoder, ckpt.model.encoder);
    }

    #[test]
    fn fraction_count_is_a_ceiling() {
        assert_eq!(fraction_count(0.05, 100), 5);
        assert_eq!(fraction_count(0.05, 101), 6);
        assert_eq!(fraction_count(0.001, 10), 1);
        assert_eq!(fraction_count(1.0, 7), 7);
    }

    #[test]
    fn al_loop_curve_shape() {
        let ds = tiny_data(40, 7);
        let (train, val, test) = crate::signal::split_dataset(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        let splits = Splits { train, val, test };
        let ckpt = ModelCheckpoint::fresh(Model::new(tiny_encoder(), 4).unwrap(), AdamConfig::default());
        let cfg = tiny_cfg();
        for rounds in [0, 2] {
            let alcfg = ALConfig {
                rounds,
                ..Default::default()
            };
            let run = al_training_loop(&ckpt, &splits, &alcfg, &cfg, Strategy::Active).unwrap();
            assert_eq!(run.curve.len(), rounds + 1);
            let k = alcfg.round_size(splits.train.len());
            let seed = alcfg.seed_size(splits.train.len());
            for (r, p) in run.curve.iter().enumerate() {
                assert_eq!(p.oracle_count, seed + r * 2 * k);
                assert_eq!(p.labeled, seed + r * k);
            }
            let rnd = al_training_loop(&ckpt, &splits, &alcfg, &cfg, Strategy::Random).unwrap();
            assert_eq!(rnd.curve[0], run.curve[0]);
            for (r, p) in rnd.curve.iter().enumerate() {
                assert_eq!(p.oracle_count, seed + r * k);
            }
        }
    }
}
