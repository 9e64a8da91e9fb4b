//! Jitter and random-zeros augmentations.
//!
//! The contrastive augmenter applies strong settings to produce the two
//! views of a window; the classification augmenter applies mild settings
//! while the classifier head trains.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::signal::SignalWindow;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Std of the additive Gaussian noise, in units of the normalized signal.
    pub jitter_sigma: f64,
    /// Probability that the zero mask is applied at all.
    pub zero_prob: f64,
    pub zero_seg_len: usize,
    pub zero_num_segs: usize,
}

impl AugmentConfig {
    pub const STRONG: Self = Self {
        jitter_sigma: 0.2,
        zero_prob: 0.8,
        zero_seg_len: 16,
        zero_num_segs: 2,
    };

    pub const MILD: Self = Self {
        jitter_sigma: 0.05,
        zero_prob: 0.2,
        zero_seg_len: 8,
        zero_num_segs: 1,
    };

    pub const IDENTITY: Self = Self {
        jitter_sigma: 0.0,
        zero_prob: 0.0,
        zero_seg_len: 0,
        zero_num_segs: 0,
    };

    pub fn validate(&self, window_len: usize) -> Result<()> {
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "jitter_sigma {}",
                self.jitter_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(Error::InvalidArgument(format!(
                "zero_prob {} outside [0, 1]",
                self.zero_prob
            )));
        }
        if self.zero_seg_len * self.zero_num_segs > window_len {
            return Err(Error::InvalidArgument(format!(
                "{} zero segments of length {} exceed window length {window_len}",
                self.zero_num_segs, self.zero_seg_len
            )));
        }
        Ok(())
    }
}

/// Add i.i.d. `Normal(0, sigma^2)` noise to every sample.
pub fn jitter(w: &SignalWindow, sigma: f64, rng: &mut RngStream) -> SignalWindow {
    if sigma == 0.0 {
        return w.clone();
    }
    w.with_values(w.values.iter().map(|v| v + sigma * rng.normal()).collect())
}

/// With probability `zero_prob`, zero `zero_num_segs` segments whose start
/// offsets are drawn uniformly (segments may overlap).
pub fn random_zeros(w: &SignalWindow, cfg: &AugmentConfig, rng: &mut RngStream) -> SignalWindow {
    let len = w.len();
    if cfg.zero_num_segs == 0 || cfg.zero_seg_len == 0 || cfg.zero_seg_len > len {
        return w.clone();
    }
    if cfg.zero_prob <= 0.0 || rng.uniform() >= cfg.zero_prob {
        return w.clone();
    }
    let mut values = w.values.clone();
    for _ in 0..cfg.zero_num_segs {
        let start = rng.below(len - cfg.zero_seg_len + 1);
        values[start..start + cfg.zero_seg_len].fill(0.0);
    }
    w.with_values(values)
}

/// `jitter ∘ random_zeros`: mask first, then add noise everywhere.
pub fn augment(w: &SignalWindow, cfg: &AugmentConfig, rng: &mut RngStream) -> SignalWindow {
    let masked = random_zeros(w, cfg, rng);
    jitter(&masked, cfg.jitter_sigma, rng)
}

pub fn contrastive_augment(w: &SignalWindow, cfg_strong: &AugmentConfig, rng: &mut RngStream) -> SignalWindow {
    augment(w, cfg_strong, rng)
}

pub fn classification_augment(w: &SignalWindow, cfg_mild: &AugmentConfig, rng: &mut RngStream) -> SignalWindow {
    augment(w, cfg_mild, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Origin;

    fn window(values: Vec<f64>) -> SignalWindow {
        SignalWindow::new(
            values,
            Some(2),
            Origin {
                source_id: "t".into(),
                start: 0,
            },
        )
        .unwrap()
    }

    fn ones(n: usize) -> SignalWindow {
        window(vec![1.0; n])
    }

    #[test]
    fn zero_sigma_is_identity() {
        let w = window((0..192).map(|i| (i as f64).sin()).collect());
        let mut rng = RngStream::new(1);
        assert_eq!(jitter(&w, 0.0, &mut rng), w);
    }

    #[test]
    fn jitter_std_monte_carlo() {
        let w = window(vec![0.5; 100_000]);
        let mut rng = RngStream::new(11);
        let out = jitter(&w, 0.1, &mut rng);
        let d: Vec<f64> = out.values.iter().zip(&w.values).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.098..=0.102).contains(&std), "std {std}");
        // Unbiased: mean within 3 sigma / sqrt(N).
        assert!(mean.abs() < 3.0 * 0.1 / n.sqrt(), "mean {mean}");
        assert_eq!(out.label, Some(2));
    }

    #[test]
    fn jitter_is_reproducible() {
        let w = ones(192);
        let a = jitter(&w, 0.3, &mut RngStream::new(5));
        let b = jitter(&w, 0.3, &mut RngStream::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zeros_examples() {
        let w = ones(192);
        let mut rng = RngStream::new(2);
        let cfg = AugmentConfig {
            zero_prob: 0.0,
            ..AugmentConfig::STRONG
        };
        assert_eq!(random_zeros(&w, &cfg, &mut rng), w);

        let full = AugmentConfig {
            jitter_sigma: 0.0,
            zero_prob: 1.0,
            zero_seg_len: 192,
            zero_num_segs: 1,
        };
        assert!(random_zeros(&w, &full, &mut rng).values.iter().all(|&v| v == 0.0));

        let one = AugmentConfig {
            zero_seg_len: 16,
            ..full
        };
        for seed in 0..50 {
            let out = random_zeros(&w, &one, &mut RngStream::new(seed));
            let zeros: Vec<usize> = (0..192).filter(|&i| out.values[i] == 0.0).collect();
            assert_eq!(zeros.len(), 16);
            assert_eq!(zeros[15] - zeros[0], 15, "one contiguous run");
        }
    }

    #[test]
    fn all_zero_config_is_identity() {
        let w = window((0..192).map(|i| i as f64).collect());
        let mut rng = RngStream::new(3);
        assert_eq!(contrastive_augment(&w, &AugmentConfig::IDENTITY, &mut rng), w);
        assert_eq!(classification_augment(&w, &AugmentConfig::IDENTITY, &mut rng), w);
    }

    #[test]
    fn successive_calls_differ() {
        let w = window((0..192).map(|i| (i as f64 * 0.1).sin()).collect());
        for cfg in [AugmentConfig::STRONG, AugmentConfig::MILD] {
            let mut rng = RngStream::new(4);
            let mut seen = std::collections::HashSet::new();
            for _ in 0..1000 {
                let out = augment(&w, &cfg, &mut rng);
                assert_eq!(out.len(), w.len());
                let key: Vec<u64> = out.values.iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key), "collision");
            }
        }
    }

    #[test]
    fn validate_rejects_oversized_mask() {
        let cfg = AugmentConfig {
            zero_seg_len: 100,
            zero_num_segs: 2,
            ..AugmentConfig::STRONG
        };
        assert!(cfg.validate(192).is_err());
        assert!(AugmentConfig::STRONG.validate(192).is_ok());
        assert!(AugmentConfig::MILD.validate(192).is_ok());
    }
}
