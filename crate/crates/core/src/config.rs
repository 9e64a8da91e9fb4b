//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key has a default; unknown sections or keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::active::ALConfig;
use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::signal::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    /// Data manifest; synthetic data is generated when unset.
    pub manifest: Option<PathBuf>,
    pub stride: usize,
    pub split: (f64, f64, f64),
    pub synth: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub al: ALConfig,
    pub fractions: Vec<f64>,
    pub condition: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("afm-out"),
            threads: 0,
            manifest: None,
            stride: synth.window_len,
            split: (0.6, 0.2, 0.2),
            synth,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            al: ALConfig::default(),
            fractions: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            condition: "synthetic".into(),
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(num)
        .collect()
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Copy of the training config carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn al_config(&self) -> ALConfig {
        ALConfig {
            seed: self.seed,
            ..self.al.clone()
        }
    }

    /// Synthetic spec with the encoder's window length.
    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            window_len: self.encoder.window_len,
            ..self.synth.clone()
        }
    }

    /// `(section, key, value)` for every setting, in print order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let t = &self.train;
        let e = &self.encoder;
        let s = &self.synth;
        let aug = |c: &AugmentConfig| {
            [
                c.jitter_sigma.to_string(),
                c.zero_prob.to_string(),
                c.zero_seg_len.to_string(),
                c.zero_num_segs.to_string(),
            ]
        };
        let [sj, sp, sl, sn] = aug(&t.strong);
        let [mj, mp, ml, mn] = aug(&t.mild);
        vec![
            ("run", "seed", self.seed.to_string()),
            ("run", "out_dir", self.out_dir.display().to_string()),
            ("run", "threads", self.threads.to_string()),
            (
                "signal",
                "manifest",
                self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("signal", "stride", self.stride.to_string()),
            ("signal", "split", show_list(&[self.split.0, self.split.1, self.split.2])),
            ("signal", "classes", s.num_classes().to_string()),
            ("signal", "windows_per_class", s.windows_per_class.to_string()),
            ("signal", "noise_sigma", format!("{:?}", s.noise_sigma)),
            ("signal", "sample_rate", format!("{:?}", s.sample_rate)),
            ("signal", "max_offset", s.max_offset.to_string()),
            ("signal", "speed_jitter", format!("{:?}", s.speed_jitter)),
            ("signal", "resonance_hz", format!("{:?}", s.resonance_hz)),
            ("signal", "impulse_decay", format!("{:?}", s.impulse_decay)),
            ("signal", "severity_spread", format!("{:?}", s.severity_spread)),
            ("augment", "strong_jitter_sigma", sj),
            ("augment", "strong_zero_prob", sp),
            ("augment", "strong_zero_seg_len", sl),
            ("augment", "strong_zero_num_segs", sn),
            ("augment", "mild_jitter_sigma", mj),
            ("augment", "mild_zero_prob", mp),
            ("augment", "mild_zero_seg_len", ml),
            ("augment", "mild_zero_num_segs", mn),
            ("encoder", "window_len", e.window_len.to_string()),
            ("encoder", "patch_len", e.patch_len.to_string()),
            ("encoder", "d_model", e.d_model.to_string()),
            ("encoder", "num_blocks", e.num_blocks.to_string()),
            ("encoder", "num_heads", e.num_heads.to_string()),
            ("encoder", "ffn_expansion", e.ffn_expansion.to_string()),
            ("encoder", "proj_dim", e.proj_dim.to_string()),
            ("encoder", "dropout_prob", format!("{:?}", e.dropout_prob)),
            ("encoder", "layernorm_eps", format!("{:?}", e.layernorm_eps)),
            ("contrastive", "temperature", format!("{:?}", t.temperature)),
            ("contrastive", "support_capacity", t.support_capacity.to_string()),
            ("contrastive", "warmup_batches", t.warmup_batches.to_string()),
            ("al", "seed_fraction", format!("{:?}", self.al.seed_fraction)),
            ("al", "round_fraction", format!("{:?}", self.al.round_fraction)),
            ("al", "screen_multiplier", self.al.screen_multiplier.to_string()),
            ("al", "rounds", self.al.rounds.to_string()),
            ("training", "batch_size", t.batch_size.to_string()),
            ("training", "pretrain_epochs", t.pretrain_epochs.to_string()),
            ("training", "head_epochs", t.head_epochs.to_string()),
            ("training", "head_min_steps", t.head_min_steps.to_string()),
            ("training", "head_views", t.head_views.to_string()),
            ("training", "head_hidden", t.head_hidden.to_string()),
            ("training", "head_kind", t.head_kind.to_string()),
            ("training", "lr", format!("{:?}", t.adam.lr)),
            ("training", "beta1", format!("{:?}", t.adam.beta1)),
            ("training", "beta2", format!("{:?}", t.adam.beta2)),
            ("training", "adam_eps", format!("{:?}", t.adam.eps)),
            (
                "training",
                "frozen_scopes",
                t.frozen_scopes.iter().cloned().collect::<Vec<_>>().join(", "),
            ),
            ("training", "retrain_backbone", t.retrain_backbone.to_string()),
            ("eval", "fractions", show_list(&self.fractions)),
            ("eval", "condition", self.condition.clone()),
        ]
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let e = &mut self.encoder;
        let s = &mut self.synth;
        match (section, key) {
            ("run", "seed") => self.seed = num(v)?,
            ("run", "out_dir") => self.out_dir = PathBuf::from(v),
            ("run", "threads") => self.threads = num(v)?,
            ("signal", "manifest") => {
                self.manifest = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            ("signal", "stride") => self.stride = num(v)?,
            ("signal", "split") => match list(v)?.as_slice() {
                [a, b, c] => self.split = (*a, *b, *c),
                _ => return Err("split needs three fractions".into()),
            },
            ("signal", "classes") => {
                let n: usize = num(v)?;
                s.classes = SyntheticSpec::with_classes(n).classes;
            }
            ("signal", "windows_per_class") => s.windows_per_class = num(v)?,
            ("signal", "noise_sigma") => s.noise_sigma = num(v)?,
            ("signal", "sample_rate") => s.sample_rate = num(v)?,
            ("signal", "max_offset") => s.max_offset = num(v)?,
            ("signal", "speed_jitter") => s.speed_jitter = num(v)?,
            ("signal", "resonance_hz") => s.resonance_hz = num(v)?,
            ("signal", "impulse_decay") => s.impulse_decay = num(v)?,
            ("signal", "severity_spread") => s.severity_spread = num(v)?,
            ("augment", "strong_jitter_sigma") => t.strong.jitter_sigma = num(v)?,
            ("augment", "strong_zero_prob") => t.strong.zero_prob = num(v)?,
            ("augment", "strong_zero_seg_len") => t.strong.zero_seg_len = num(v)?,
            ("augment", "strong_zero_num_segs") => t.strong.zero_num_segs = num(v)?,
            ("augment", "mild_jitter_sigma") => t.mild.jitter_sigma = num(v)?,
            ("augment", "mild_zero_prob") => t.mild.zero_prob = num(v)?,
            ("augment", "mild_zero_seg_len") => t.mild.zero_seg_len = num(v)?,
            ("augment", "mild_zero_num_segs") => t.mild.zero_num_segs = num(v)?,
            ("encoder", "window_len") => e.window_len = num(v)?,
            ("encoder", "patch_len") => e.patch_len = num(v)?,
            ("encoder", "d_model") => e.d_model = num(v)?,
            ("encoder", "num_blocks") => e.num_blocks = num(v)?,
            ("encoder", "num_heads") => e.num_heads = num(v)?,
            ("encoder", "ffn_expansion") => e.ffn_expansion = num(v)?,
            ("encoder", "proj_dim") => e.proj_dim = num(v)?,
            ("encoder", "dropout_prob") => e.dropout_prob = num(v)?,
            ("encoder", "layernorm_eps") => e.layernorm_eps = num(v)?,
            ("contrastive", "temperature") => t.temperature = num(v)?,
            ("contrastive", "support_capacity") => t.support_capacity = num(v)?,
            ("contrastive", "warmup_batches") => t.warmup_batches = num(v)?,
            ("al", "seed_fraction") => self.al.seed_fraction = num(v)?,
            ("al", "round_fraction") => self.al.round_fraction = num(v)?,
            ("al", "screen_multiplier") => self.al.screen_multiplier = num(v)?,
            ("al", "rounds") => self.al.rounds = num(v)?,
            ("training", "batch_size") => t.batch_size = num(v)?,
            ("training", "pretrain_epochs") => t.pretrain_epochs = num(v)?,
            ("training", "head_epochs") => t.head_epochs = num(v)?,
            ("training", "head_min_steps") => t.head_min_steps = num(v)?,
            ("training", "head_views") => t.head_views = num(v)?,
            ("training", "head_hidden") => t.head_hidden = num(v)?,
            ("training", "head_kind") => {
                t.head_kind = v.parse::<HeadKind>().map_err(|e| e.to_string())?
            }
            ("training", "lr") => t.adam.lr = num(v)?,
            ("training", "beta1") => t.adam.beta1 = num(v)?,
            ("training", "beta2") => t.adam.beta2 = num(v)?,
            ("training", "adam_eps") => t.adam.eps = num(v)?,
            ("training", "frozen_scopes") => {
                t.frozen_scopes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            ("training", "retrain_backbone") => t.retrain_backbone = boolean(v)?,
            ("eval", "fractions") => self.fractions = list(v)?,
            ("eval", "condition") => self.condition = v.to_string(),
            _ => return Err(format!("unknown key `{key}` in section [{section}]")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |message: String| Error::Config {
                line: line_no,
                message,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                const SECTIONS: [&str; 8] =
                    ["run", "signal", "augment", "encoder", "contrastive", "al", "training", "eval"];
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            if section.is_empty() {
                return Err(err("key outside of any section".into()));
            }
            cfg.set(&section, k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.train.strong.validate(self.encoder.window_len)?;
        self.train.mild.validate(self.encoder.window_len)?;
        self.al.validate()?;
        self.synth_spec().validate()?;
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "fine-tune fractions {:?} must lie in (0, 1]",
                self.fractions
            )));
        }
        Ok(())
    }

    /// The configuration as a parseable document.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        let text = d.to_ini();
        assert_eq!(RunConfig::parse(&text).unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn defaults_match_module_defaults() {
        let d = RunConfig::default();
        assert_eq!(d.train, TrainConfig::default());
        assert_eq!(d.encoder, EncoderConfig::default());
        assert_eq!(d.al, ALConfig::default());
        assert_eq!(d.synth, SyntheticSpec::default());
        assert_eq!(d.train.adam.lr, 0.001);
    }

    #[test]
    fn values_are_applied() {
        let c = RunConfig::parse(
            "# tuned\n[run]\nseed = 7\n\n[signal]\nclasses = 2\nnoise_sigma=0.5\n[training]\nhead_kind = probe\nfrozen_scopes = encoder, projection\n[eval]\nfractions = 0.1, 0.2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.synth.num_classes(), 2);
        assert_eq!(c.synth.noise_sigma, 0.5);
        assert_eq!(c.train.head_kind, HeadKind::Probe);
        assert_eq!(c.train.frozen_scopes.len(), 2);
        assert_eq!(c.fractions, vec![0.1, 0.2]);
        assert_eq!(c.train_config().seed, 7);
        assert_eq!(RunConfig::parse(&c.to_ini()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        match RunConfig::parse("[run]\nseed = 1\nsed = 2\n") {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("sed"));
            }
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = x\n").is_err());
        assert!(RunConfig::parse("[training]\nbatch_size = 1\n").is_err());
    }
}
