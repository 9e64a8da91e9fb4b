//! Entropy screening, KL re-ranking and the incremental labeling protocol.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Floor applied to `p(L)` before taking its log.
pub const KL_CLAMP: f64 = 1e-12;

const DIST_TOL: f64 = 1e-9;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    p: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {v}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { p })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            p: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn num_classes(&self) -> usize {
        self.p.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.p.iter().enumerate() {
            if *v > self.p[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    pub class: usize,
    pub num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes,
            });
        }
        Ok(Self { class, num_classes })
    }

    pub fn distribution(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.num_classes];
        q[self.class] = 1.0;
        q
    }
}

/// `H(p) = −Σ p ln p`, natural log, `0 ln 0 = 0`.
pub fn shannon_entropy(p: &ClassDistribution) -> f64 {
    -p.p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `D_KL(q‖p)` for a one-hot `q`, i.e. `−ln p(L)` with `p(L)` clamped.
pub fn class_kl(q: &OneHotLabel, p: &ClassDistribution) -> f64 {
    -p.p[q.class].max(KL_CLAMP).ln()
}

/// General `Σ q(c) ln(q(c)/p(c))` over two vectors, skipping `q(c) = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qc, _)| **qc > 0.0)
        .map(|(qc, pc)| qc * (qc / pc.max(KL_CLAMP)).ln())
        .sum()
}

/// Sort `(index, score)` by descending score, then ascending index.
fn rank_desc(mut scored: Vec<(usize, f64)>) -> Vec<usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Indices of the `count` highest-entropy distributions, highest first.
pub fn select_by_entropy(pool_probs: &[ClassDistribution], count: usize) -> Result<Vec<usize>> {
    if count > pool_probs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot screen {count} of {} pool items",
            pool_probs.len()
        )));
    }
    let scored = pool_probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, shannon_entropy(p)))
        .collect();
    let mut ranked = rank_desc(scored);
    ranked.truncate(count);
    Ok(ranked)
}

/// Re-rank candidates (indices into `pool_probs`) by KL between their oracle
/// label and the prediction; keep the `count` largest.
pub fn rerank_by_kl(
    candidates: &[usize],
    labels: &BTreeMap<usize, usize>,
    pool_probs: &[ClassDistribution],
    count: usize,
) -> Result<Vec<usize>> {
    if count > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {count} of {} candidates",
            candidates.len()
        )));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let label = *labels.get(&c).ok_or(Error::MissingLabel(c))?;
        let p = pool_probs.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("candidate {c} outside pool of {}", pool_probs.len()))
        })?;
        let q = OneHotLabel::new(label, p.num_classes())?;
        scored.push((c, class_kl(&q, p)));
    }
    let mut ranked = rank_desc(scored);
    ranked.truncate(count);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub seed_fraction: f64,
    pub round_fraction: f64,
    pub screen_multiplier: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            seed_fraction: 0.15,
            round_fraction: 0.05,
            screen_multiplier: 2,
            rounds: 5,
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("seed_fraction", self.seed_fraction),
            ("round_fraction", self.round_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {f} outside (0, 1]")));
            }
        }
        if self.screen_multiplier < 1 {
            return Err(Error::InvalidArgument("screen_multiplier must be at least 1".into()));
        }
        Ok(())
    }

    /// Windows admitted per round, `K`.
    pub fn round_size(&self, total: usize) -> usize {
        ((self.round_fraction * total as f64).round() as usize).max(1)
    }

    /// Size of the stratified seed set.
    pub fn seed_size(&self, total: usize) -> usize {
        ((self.seed_fraction * total as f64).round() as usize).clamp(1, total)
    }
}

/// Ground-truth labels behind a query counter.
#[derive(Debug, Clone)]
pub struct Oracle {
    labels: Vec<usize>,
    queries: usize,
}

impl Oracle {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, queries: 0 }
    }

    pub fn label(&mut self, index: usize) -> Result<usize> {
        let l = *self.labels.get(index).ok_or(Error::MissingLabel(index))?;
        self.queries += 1;
        Ok(l)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }
}

/// Who is labeled, who is not, and which pool labels are already paid for.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingState {
    /// `(dataset index, label)` in admission order.
    pub labeled: Vec<(usize, usize)>,
    /// Unlabeled dataset indices, ascending.
    pub pool: Vec<usize>,
    /// Pool items whose oracle label was revealed but not yet admitted.
    pub revealed: BTreeMap<usize, usize>,
    pub total: usize,
}

impl LabelingState {
    /// Label `seed` through the oracle; everything else forms the pool.
    pub fn seeded(total: usize, seed: &[usize], oracle: &mut Oracle) -> Result<Self> {
        let chosen: BTreeSet<usize> = seed.iter().copied().collect();
        if chosen.len() != seed.len() || chosen.iter().any(|&i| i >= total) {
            return Err(Error::InvalidArgument("seed indices must be distinct and in range".into()));
        }
        let labeled = seed
            .iter()
            .map(|&i| Ok((i, oracle.label(i)?)))
            .collect::<Result<Vec<_>>>()?;
        let pool = (0..total).filter(|i| !chosen.contains(i)).collect();
        Ok(Self {
            labeled,
            pool,
            revealed: BTreeMap::new(),
            total,
        })
    }

    pub fn label_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.total as f64
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|(i, _)| *i).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|(_, l)| *l).collect()
    }

    fn admit(&mut self, admitted: &[usize], labels: &BTreeMap<usize, usize>) {
        let set: BTreeSet<usize> = admitted.iter().copied().collect();
        for &i in admitted {
            self.labeled.push((i, labels[&i]));
            self.revealed.remove(&i);
        }
        self.pool.retain(|i| !set.contains(i));
    }
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub strategy: String,
    pub oracle_count: usize,
    pub screened: usize,
    pub admitted: usize,
    pub admitted_from_cache: usize,
    pub cached: usize,
    pub mean_entropy: f64,
    pub max_entropy: f64,
    pub mean_kl: Option<f64>,
    pub max_kl: Option<f64>,
    pub labeled_fraction: f64,
    pub val_accuracy: Option<f64>,
    pub shrunk: bool,
}

impl RoundLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("round log serializes")
    }
}

fn stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, max)
}

/// One active-learning round.
///
/// `predict` maps dataset indices to class distributions under the current
/// model. `2K` fresh pool items are screened by entropy and labeled; they
/// are pooled with previously revealed but unadmitted items, re-ranked by
/// KL, and the top `K` are admitted. The rest stay in the pool with their
/// labels cached, so the oracle never pays twice for the same window.
pub fn al_round<F>(
    predict: F,
    state: LabelingState,
    oracle: &mut Oracle,
    cfg: &ALConfig,
    round: usize,
) -> Result<(LabelingState, RoundLog)>
where
    F: Fn(&[usize]) -> Result<Vec<ClassDistribution>>,
{
    cfg.validate()?;
    let mut state = state;
    if state.pool.is_empty() {
        return Err(Error::InsufficientData("active-learning pool is empty".into()));
    }
    let probs = predict(&state.pool)?;
    if probs.len() != state.pool.len() {
        return Err(Error::Shape(format!(
            "{} predictions for a pool of {}",
            probs.len(),
            state.pool.len()
        )));
    }
    let entropies: Vec<f64> = probs.iter().map(shannon_entropy).collect();
    let (mean_entropy, max_entropy) = stats(&entropies);

    let mult = cfg.screen_multiplier;
    let mut k = cfg.round_size(state.total);
    // Positions (into `state.pool`) of items never shown to the oracle.
    let fresh: Vec<usize> = (0..state.pool.len())
        .filter(|&p| !state.revealed.contains_key(&state.pool[p]))
        .collect();
    let mut screen = mult * k;
    let shrunk = fresh.len() < screen;
    if shrunk {
        k = (fresh.len() / mult).max(1);
        screen = (mult * k).min(fresh.len());
    }
    let fresh_probs: Vec<ClassDistribution> = fresh.iter().map(|&p| probs[p].clone()).collect();
    let screened: Vec<usize> = select_by_entropy(&fresh_probs, screen)?
        .into_iter()
        .map(|j| fresh[j])
        .collect();
    for &p in &screened {
        let idx = state.pool[p];
        let l = oracle.label(idx)?;
        state.revealed.insert(idx, l);
    }

    let mut candidates: Vec<usize> = (0..state.pool.len())
        .filter(|&p| state.revealed.contains_key(&state.pool[p]))
        .collect();
    candidates.sort_unstable();
    let by_position: BTreeMap<usize, usize> = candidates
        .iter()
        .map(|&p| (p, state.revealed[&state.pool[p]]))
        .collect();
    let k = k.min(candidates.len());
    let kls: Vec<f64> = candidates
        .iter()
        .map(|&p| {
            let q = OneHotLabel::new(by_position[&p], probs[p].num_classes())?;
            Ok(class_kl(&q, &probs[p]))
        })
        .collect::<Result<_>>()?;
    let (mean_kl, max_kl) = stats(&kls);
    let chosen = rerank_by_kl(&candidates, &by_position, &probs, k)?;

    let screened_set: BTreeSet<usize> = screened.iter().copied().collect();
    let from_cache = chosen.iter().filter(|p| !screened_set.contains(p)).count();
    let admitted: Vec<usize> = chosen.iter().map(|&p| state.pool[p]).collect();
    let labels = state.revealed.clone();
    state.admit(&admitted, &labels);

    let log = RoundLog {
        round,
        strategy: "al".into(),
        oracle_count: oracle.queries(),
        screened: screened.len(),
        admitted: admitted.len(),
        admitted_from_cache: from_cache,
        cached: state.revealed.len(),
        mean_entropy,
        max_entropy,
        mean_kl: Some(mean_kl),
        max_kl: Some(max_kl),
        labeled_fraction: state.label_fraction(),
        val_accuracy: None,
        shrunk,
    };
    Ok((state, log))
}

/// Comparison arm: label `K` pool items drawn uniformly without replacement.
pub fn random_baseline_round(
    state: LabelingState,
    oracle: &mut Oracle,
    cfg: &ALConfig,
    rng: &mut RngStream,
    round: usize,
) -> Result<(LabelingState, RoundLog)> {
    cfg.validate()?;
    let mut state = state;
    let k = cfg.round_size(state.total).min(state.pool.len());
    let mut order = state.pool.clone();
    rng.shuffle(&mut order);
    let mut admitted = order[..k].to_vec();
    admitted.sort_unstable();
    let mut labels = BTreeMap::new();
    for &i in &admitted {
        labels.insert(i, oracle.label(i)?);
    }
    state.admit(&admitted, &labels);
    let log = RoundLog {
        round,
        strategy: "random".into(),
        oracle_count: oracle.queries(),
        screened: 0,
        admitted: k,
        admitted_from_cache: 0,
        cached: 0,
        mean_entropy: 0.0,
        max_entropy: 0.0,
        mean_kl: None,
        max_kl: None,
        labeled_fraction: state.label_fraction(),
        val_accuracy: None,
        shrunk: false,
    };
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_unit_values() {
        assert!((shannon_entropy(&ClassDistribution::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(shannon_entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        assert!((shannon_entropy(&dist(&[0.5, 0.5, 0.0, 0.0])) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_values() {
        let q = OneHotLabel::new(0, 3).unwrap();
        assert_eq!(class_kl(&q, &dist(&[1.0, 0.0, 0.0])), 0.0);
        assert!((class_kl(&q, &dist(&[0.5, 0.25, 0.25])) - 2f64.ln()).abs() < 1e-12);
        let q = OneHotLabel::new(1, 3).unwrap();
        assert!((class_kl(&q, &dist(&[0.7, 0.1, 0.2])) - 10f64.ln()).abs() < 1e-12);
        // Clamped rather than infinite.
        assert!((class_kl(&q, &dist(&[1.0, 0.0, 0.0])) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
        assert!(ClassDistribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn entropy_selection_examples() {
        let pool = [dist(&[1.0, 0.0]), dist(&[0.5, 0.5]), dist(&[0.6, 0.4])];
        assert_eq!(select_by_entropy(&pool, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_by_entropy(&pool, 3).unwrap(), vec![1, 2, 0]);
        let tie = [dist(&[0.3, 0.7]), dist(&[0.7, 0.3])];
        assert_eq!(select_by_entropy(&tie, 1).unwrap(), vec![0]);
        assert!(select_by_entropy(&pool, 4).is_err());
    }

    #[test]
    fn kl_rerank_examples() {
        // KL values 0.1, 2.3, 0.7 via p(L) = e^-kl on class 0.
        let probs: Vec<ClassDistribution> = [0.1f64, 2.3, 0.7]
            .iter()
            .map(|kl| {
                let p = (-kl).exp();
                dist(&[p, 1.0 - p])
            })
            .collect();
        let labels: BTreeMap<usize, usize> = [(0, 0), (1, 0), (2, 0)].into();
        assert_eq!(rerank_by_kl(&[0, 1, 2], &labels, &probs, 2).unwrap(), vec![1, 2]);
        assert_eq!(rerank_by_kl(&[0, 1, 2], &labels, &probs, 3).unwrap(), vec![1, 2, 0]);

        let confident = vec![dist(&[1.0, 0.0]); 3];
        assert_eq!(rerank_by_kl(&[2, 0, 1], &labels, &confident, 3).unwrap(), vec![0, 1, 2]);

        let partial: BTreeMap<usize, usize> = [(0, 0)].into();
        assert!(matches!(
            rerank_by_kl(&[0, 1], &partial, &probs, 1),
            Err(Error::MissingLabel(1))
        ));
    }

    fn varied_predictor(num_classes: usize) -> impl Fn(&[usize]) -> Result<Vec<ClassDistribution>> {
        move |idx: &[usize]| {
            Ok(idx
                .iter()
                .map(|&i| {
                    let mut p: Vec<f64> = (0..num_classes)
                        .map(|c| 1.0 + ((i * 7 + c * 13) % 11) as f64)
                        .collect();
                    let s: f64 = p.iter().sum();
                    p.iter_mut().for_each(|v| *v /= s);
                    ClassDistribution::new(p).unwrap()
                })
                .collect())
        }
    }

    #[test]
    fn round_accounting() {
        let total = 200;
        let labels: Vec<usize> = (0..total).map(|i| i % 4).collect();
        let mut oracle = Oracle::new(labels);
        let seed: Vec<usize> = (0..100).collect();
        let state = LabelingState::seeded(total, &seed, &mut oracle).unwrap();
        assert_eq!(state.pool.len(), 100);
        let cfg = ALConfig {
            round_fraction: 0.05,
            ..Default::default()
        };
        let (next, log) = al_round(varied_predictor(4), state, &mut oracle, &cfg, 1).unwrap();
        assert_eq!(oracle.queries(), 100 + 20);
        assert_eq!(next.labeled.len(), 110);
        assert_eq!(next.pool.len(), 90);
        assert_eq!(next.revealed.len(), 10);
        assert_eq!(log.screened, 20);
        assert_eq!(log.admitted, 10);
    }

    #[test]
    fn multiplier_one_admits_all_screened() {
        let total = 100;
        let mut oracle = Oracle::new((0..total).map(|i| i % 3).collect());
        let state = LabelingState::seeded(total, &[0, 1, 2], &mut oracle).unwrap();
        let cfg = ALConfig {
            round_fraction: 0.1,
            screen_multiplier: 1,
            ..Default::default()
        };
        let before = state.pool.clone();
        let (next, log) = al_round(varied_predictor(3), state, &mut oracle, &cfg, 1).unwrap();
        let probs = varied_predictor(3)(&before).unwrap();
        let mut want: Vec<usize> = select_by_entropy(&probs, 10)
            .unwrap()
            .into_iter()
            .map(|p| before[p])
            .collect();
        let mut got = next.labeled_indices()[3..].to_vec();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, want);
        assert_eq!(log.cached, 0);
    }

    #[test]
    fn cached_labels_are_not_recharged() {
        let total = 100;
        let mut oracle = Oracle::new((0..total).map(|i| i % 2).collect());
        let mut state = LabelingState::seeded(total, &[0, 1], &mut oracle).unwrap();
        let cfg = ALConfig {
            round_fraction: 0.1,
            ..Default::default()
        };
        for r in 1..=4 {
            let (next, _) = al_round(varied_predictor(2), state, &mut oracle, &cfg, r).unwrap();
            state = next;
            assert_eq!(oracle.queries(), 2 + r * 20);
            assert_eq!(state.labeled.len(), 2 + r * 10);
            let labeled: BTreeSet<usize> = state.labeled_indices().into_iter().collect();
            assert!(state.pool.iter().all(|i| !labeled.contains(i)));
            assert_eq!(labeled.len() + state.pool.len(), total);
            assert!(state.revealed.keys().all(|i| state.pool.contains(i)));
        }
    }

    #[test]
    fn small_pool_shrinks_round() {
        let total = 100;
        let mut oracle = Oracle::new((0..total).map(|i| i % 2).collect());
        let seed: Vec<usize> = (0..95).collect();
        let state = LabelingState::seeded(total, &seed, &mut oracle).unwrap();
        let cfg = ALConfig {
            round_fraction: 0.05,
            ..Default::default()
        };
        let (next, log) = al_round(varied_predictor(2), state, &mut oracle, &cfg, 1).unwrap();
        assert!(log.shrunk);
        assert_eq!(log.screened, 4);
        assert_eq!(log.admitted, 2);
        assert_eq!(next.pool.len(), 3);
    }

    #[test]
    fn al_round_is_deterministic() {
        let run = || {
            let mut oracle = Oracle::new((0..60).map(|i| i % 3).collect());
            let state = LabelingState::seeded(60, &[0, 1, 2], &mut oracle).unwrap();
            al_round(varied_predictor(3), state, &mut oracle, &ALConfig::default(), 1).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_round_examples() {
        let total = 40;
        let cfg = ALConfig {
            round_fraction: 0.25,
            ..Default::default()
        };
        let run = |seed| {
            let mut oracle = Oracle::new((0..total).map(|i| i % 2).collect());
            let state = LabelingState::seeded(total, &[0, 1], &mut oracle).unwrap();
            let mut rng = RngStream::new(seed);
            let out = random_baseline_round(state, &mut oracle, &cfg, &mut rng, 1).unwrap();
            (out, oracle.queries())
        };
        let ((a, log), q) = run(3);
        assert_eq!(a.labeled.len(), 12);
        assert_eq!(log.admitted, 10);
        assert_eq!(q, 12);
        assert_eq!(run(3).0 .0, a);

        let mut oracle = Oracle::new(vec![0; 10]);
        let state = LabelingState::seeded(10, &[0], &mut oracle).unwrap();
        let all = ALConfig {
            round_fraction: 1.0,
            ..Default::default()
        };
        let (s, _) =
            random_baseline_round(state, &mut oracle, &all, &mut RngStream::new(1), 1).unwrap();
        assert!(s.pool.is_empty());
        assert_eq!(s.labeled.len(), 10);
    }

    #[test]
    fn round_log_serializes_as_one_line() {
        let mut oracle = Oracle::new((0..30).map(|i| i % 3).collect());
        let state = LabelingState::seeded(30, &[0, 1, 2], &mut oracle).unwrap();
        let (_, log) = al_round(varied_predictor(3), state, &mut oracle, &ALConfig::default(), 1).unwrap();
        let line = log.to_json_line();
        assert!(!line.contains('\n'));
        let back: RoundLog = serde_json::from_str(&line).unwrap();
        assert_eq!(back, log);
    }
}
