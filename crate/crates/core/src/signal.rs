//! Recordings, fixed-length windows, labeled datasets and the synthetic
//! fault-signature generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const DEFAULT_WINDOW_LEN: usize = 192;

const SPLIT_KEY: u64 = 0x5911_7000;
const SAMPLE_KEY: u64 = 0x5a3b_1e00;

/// A raw single-channel vibration recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub source_id: String,
    pub class_label: Option<usize>,
}

impl RawRecording {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: f64,
        source_id: impl Into<String>,
        class_label: Option<usize>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "recording `{source_id}` has no samples"
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "recording `{source_id}` has sample rate {sample_rate}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id,
            class_label,
        })
    }
}

/// Where a window was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub source_id: String,
    pub start: usize,
}

/// A fixed-length segment of a recording; the model's atomic input.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub values: Vec<f64>,
    pub label: Option<usize>,
    pub origin: Origin,
}

impl SignalWindow {
    pub fn new(values: Vec<f64>, label: Option<usize>, origin: Origin) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty window".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "window {}@{}",
                origin.source_id, origin.start
            )));
        }
        Ok(Self {
            values,
            label,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same window with new values; label and origin are carried over.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            label: self.label,
            origin: self.origin.clone(),
        }
    }
}

/// Windows with labels present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub windows: Vec<SignalWindow>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        windows: Vec<SignalWindow>,
        num_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a labeled dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if class_names.len() != num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        for w in &windows {
            match w.label {
                Some(l) if l < num_classes => {}
                Some(l) => {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes,
                    })
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "window {}@{} has no label",
                        w.origin.source_id, w.origin.start
                    )))
                }
            }
        }
        Ok(Self {
            windows,
            num_classes,
            class_names,
        })
    }

    /// Default names `class0`, `class1`, ...
    pub fn default_names(num_classes: usize) -> Vec<String> {
        (0..num_classes).map(|c| format!("class{c}")).collect()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.windows[i].label.expect("labeled dataset invariant")
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in 0..self.len() {
            counts[self.label(i)] += 1;
        }
        counts
    }

    /// Sub-dataset with the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    /// Indices grouped by class, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for i in 0..self.len() {
            groups[self.label(i)].push(i);
        }
        groups
    }
}

/// Cut a recording into windows of `window_len` samples every `stride` samples.
pub fn window_signal(
    recording: &RawRecording,
    window_len: usize,
    stride: usize,
) -> Result<Vec<SignalWindow>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window_len and stride must be positive".into(),
        ));
    }
    let len = recording.samples.len();
    if len < window_len {
        return Err(Error::RecordingTooShort {
            source_id: recording.source_id.clone(),
            len,
            window_len,
        });
    }
    let count = (len - window_len) / stride + 1;
    (0..count)
        .map(|k| {
            let start = k * stride;
            SignalWindow::new(
                recording.samples[start..start + window_len].to_vec(),
                recording.class_label,
                Origin {
                    source_id: recording.source_id.clone(),
                    start,
                },
            )
        })
        .collect()
}

/// Z-score a window with the population standard deviation. Constant
/// windows map to all zeros.
pub fn normalize_window(w: &SignalWindow) -> SignalWindow {
    w.with_values(normalize_values(&w.values))
}

pub fn normalize_values(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Per-class signature of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub name: String,
    pub base_freq_hz: f64,
    /// Samples between impulses; 0 disables the impulse train.
    pub impulse_period: usize,
    pub impulse_amplitude: f64,
}

/// Sinusoidal carrier + periodic damped impacts + Gaussian noise per class.
///
/// Each window starts at a random offset in `[0, max_offset)` samples of its
/// class signal and its time axis is stretched by a random factor in
/// `[1 - speed_jitter, 1 + speed_jitter]`, which emulates windows cut from
/// long recordings at slightly varying shaft speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSignature>,
    pub windows_per_class: usize,
    pub noise_sigma: f64,
    pub sample_rate: f64,
    pub window_len: usize,
    pub max_offset: usize,
    pub speed_jitter: f64,
    /// Ringing frequency excited by each impact.
    pub resonance_hz: f64,
    /// Exponential decay constant of the ringing, in samples.
    pub impulse_decay: f64,
    /// Per-window fault severity: impulse amplitude is scaled by a factor
    /// drawn uniformly from `[1 - severity_spread, 1 + severity_spread]`.
    pub severity_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_classes(4)
    }
}

impl SyntheticSpec {
    /// Default signature table truncated or extended to `num_classes`.
    pub fn with_classes(num_classes: usize) -> Self {
        let table = [
            ("healthy", 250.0, 0, 0.0),
            ("inner_race", 375.0, 23, 2.5),
            ("outer_race", 375.0, 37, 2.5),
            ("misalignment", 500.0, 0, 0.0),
        ];
        let classes = (0..num_classes)
            .map(|c| match table.get(c) {
                Some(&(name, f, p, a)) => ClassSignature {
                    name: name.to_string(),
                    base_freq_hz: f,
                    impulse_period: p,
                    impulse_amplitude: a,
                },
                None => ClassSignature {
                    name: format!("class{c}"),
                    base_freq_hz: 250.0 + 125.0 * c as f64,
                    impulse_period: 19 + 6 * c,
                    impulse_amplitude: 1.5,
                },
            })
            .collect();
        Self {
            classes,
            windows_per_class: 500,
            noise_sigma: 0.35,
            sample_rate: 12_000.0,
            window_len: DEFAULT_WINDOW_LEN,
            max_offset: 960,
            speed_jitter: 0.05,
            resonance_hz: 1_500.0,
            impulse_decay: 6.0,
            severity_spread: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes.len() < 2 {
            return bad(format!("{} classes; need at least 2", self.classes.len()));
        }
        if self.windows_per_class == 0 || self.window_len == 0 || self.max_offset == 0 {
            return bad("windows_per_class, window_len and max_offset must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample_rate {}", self.sample_rate));
        }
        if !(self.impulse_decay > 0.0 && self.resonance_hz.is_finite()) {
            return bad(format!(
                "impulse_decay {} / resonance_hz {}",
                self.impulse_decay, self.resonance_hz
            ));
        }
        if !(0.0..=1.0).contains(&self.severity_spread) {
            return bad(format!("severity_spread {} outside [0, 1]", self.severity_spread));
        }
        if !(0.0..1.0).contains(&self.speed_jitter) {
            return bad(format!("speed_jitter {} outside [0, 1)", self.speed_jitter));
        }
        for c in &self.classes {
            if !(c.base_freq_hz.is_finite() && c.impulse_amplitude.is_finite()) {
                return bad(format!("class `{}` has non-finite parameters", c.name));
            }
        }
        Ok(())
    }
}

fn synth_window(sig: &ClassSignature, spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<f64> {
    let offset = rng.below(spec.max_offset) as f64;
    let speed = 1.0 + spec.speed_jitter * (2.0 * rng.uniform() - 1.0);
    let omega = 2.0 * std::f64::consts::PI * sig.base_freq_hz * speed / spec.sample_rate;
    let period = sig.impulse_period as f64;
    let omega_r = 2.0 * std::f64::consts::PI * spec.resonance_hz / spec.sample_rate;
    let severity = 1.0 + spec.severity_spread * (2.0 * rng.uniform() - 1.0);
    let amplitude = sig.impulse_amplitude * severity;
    let mut out = Vec::with_capacity(spec.window_len);
    for n in 0..spec.window_len {
        let t = offset + n as f64;
        let mut v = (omega * t).sin();
        if sig.impulse_period > 0 {
            // Damped ringing since the most recent impact; impacts repeat
            // every `period` samples of stretched time.
            let since = (t * speed).rem_euclid(period) / speed;
            v += amplitude * (-since / spec.impulse_decay).exp() * (omega_r * since).sin();
        }
        if spec.noise_sigma > 0.0 {
            v += spec.noise_sigma * rng.normal();
        }
        out.push(v);
    }
    out
}

/// Generate a balanced labeled dataset. Deterministic given `seed`.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut windows = Vec::with_capacity(spec.num_classes() * spec.windows_per_class);
    for (c, sig) in spec.classes.iter().enumerate() {
        let source_id = format!("synth/{}", sig.name);
        for k in 0..spec.windows_per_class {
            let mut rng = RngStream::keyed(seed, &[c as u64, k as u64]);
            let values = synth_window(sig, spec, &mut rng);
            windows.push(SignalWindow::new(
                values,
                Some(c),
                Origin {
                    source_id: source_id.clone(),
                    start: k * spec.window_len,
                },
            )?);
        }
    }
    LabeledDataset::new(
        windows,
        spec.num_classes(),
        spec.classes.iter().map(|c| c.name.clone()).collect(),
    )
}

/// Split `total` into integer parts proportional to `fractions`
/// (largest-remainder rounding, ties to the earlier part).
pub(crate) fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut parts: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - parts[a] as f64;
        let rb = raw[b] - parts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        parts[i] += 1;
        rest -= 1;
    }
    parts
}

/// Stratified train/validation/test split.
pub fn split_dataset(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(*f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fr:?} must be positive and sum to 1"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut members) in ds.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < fr.len() {
            return Err(Error::ClassTooSmall {
                class,
                available: members.len(),
                parts: fr.len(),
            });
        }
        let mut counts = apportion(members.len(), &fr);
        // Every part receives at least one window of each present class.
        for i in 0..counts.len() {
            if counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
        RngStream::keyed(seed, &[SPLIT_KEY, class as u64]).shuffle(&mut members);
        let mut at = 0;
        for (part, &n) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&members[at..at + n]);
            at += n;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok((ds.subset(&parts[0]), ds.subset(&parts[1]), ds.subset(&parts[2])))
}


/// Draw exactly `count` indices stratified by label, proportional to class
/// frequency. When `count >= number of present classes` every present class
/// gets at least one index. Result is sorted ascending.
pub fn stratified_sample(labels: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} of {} items",
            labels.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = groups.keys().copied().collect();
    let sizes: Vec<usize> = classes.iter().map(|c| groups[c].len()).collect();
    let fr: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 / labels.len() as f64)
        .collect();
    let mut counts = apportion(count, &fr);
    if count >= classes.len() {
        for i in 0..counts.len() {
            if counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
    }
    // Clamp to availability, pushing any overflow to classes with room.
    let mut overflow = 0;
    for i in 0..counts.len() {
        if counts[i] > sizes[i] {
            overflow += counts[i] - sizes[i];
            counts[i] = sizes[i];
        }
    }
    for i in 0..counts.len() {
        let room = sizes[i] - counts[i];
        let take = room.min(overflow);
        counts[i] += take;
        overflow -= take;
    }
    let mut out = Vec::with_capacity(count);
    for (k, c) in classes.iter().enumerate() {
        let mut members = groups[c].clone();
        RngStream::keyed(seed, &[SAMPLE_KEY, *c as u64]).shuffle(&mut members);
        out.extend_from_slice(&members[..counts[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

fn read_signal_file(path: &Path) -> std::result::Result<Vec<f64>, String> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("f32") => {
            let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            if bytes.len() % 4 != 0 {
                return Err(format!(
                    "{} has {} bytes, not a whole number of f32 values",
                    path.display(),
                    bytes.len()
                ));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        Some("txt") => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| {
                    l.trim().parse::<f64>().map_err(|e| {
                        format!("{} line {}: `{}`: {e}", path.display(), n + 1, l.trim())
                    })
                })
                .collect()
        }
        _ => Err(format!(
            "{}: unsupported signal file extension (expected .f32 or .txt)",
            path.display()
        )),
    }
}

/// Read a tab-separated manifest: `signal_path<TAB>label<TAB>sample_rate`.
/// Relative signal paths resolve against the manifest's directory. A label
/// of `-` or an empty label marks an unlabeled recording.
pub fn load_manifest(path: &Path) -> Result<Vec<RawRecording>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let row = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            row,
            message,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let label = match fields[1].trim() {
            "" | "-" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|e| err(format!("bad label `{s}`: {e}")))?,
            ),
        };
        let rate: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| err(format!("bad sample rate `{}`: {e}", fields[2].trim())))?;
        let signal_path = PathBuf::from(fields[0].trim());
        let resolved = if signal_path.is_absolute() {
            signal_path
        } else {
            base.join(signal_path)
        };
        let samples = read_signal_file(&resolved).map_err(err)?;
        let rec = RawRecording::new(samples, rate, fields[0].trim(), label)
            .map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Write a labeled dataset as one `.f32` recording per class (windows
/// concatenated in dataset order) plus `manifest.tsv`. Reading it back with
/// [`load_manifest`] and windowing with stride = window length recovers the
/// windows up to f32 rounding.
pub fn write_dataset(ds: &LabeledDataset, dir: &Path, sample_rate: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = String::from("# signal_path\tlabel\tsample_rate\n");
    for (class, members) in ds.indices_by_class().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let name = format!("class{class}_{}.f32", sanitize(&ds.class_names[class]));
        let mut bytes = Vec::new();
        for &i in members {
            for v in &ds.windows[i].values {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let file = dir.join(&name);
        fs::write(&file, bytes).map_err(|e| Error::io(format!("writing {}", file.display()), e))?;
        manifest.push_str(&format!("{name}\t{class}\t{sample_rate}\n"));
    }
    let mut f = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(format!("creating {}", manifest_path.display()), e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

/// Window every labeled recording of a manifest into a dataset.
pub fn dataset_from_recordings(
    recordings: &[RawRecording],
    window_len: usize,
    stride: usize,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let mut windows = Vec::new();
    for rec in recordings.iter().filter(|r| r.class_label.is_some()) {
        windows.extend(window_signal(rec, window_len, stride)?);
    }
    let inferred = windows.iter().filter_map(|w| w.label).max().map_or(0, |m| m + 1);
    let num_classes = num_classes.unwrap_or(inferred).max(2);
    LabeledDataset::new(windows, num_classes, LabeledDataset::default_names(num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize) -> RawRecording {
        RawRecording::new((0..len).map(|i| i as f64).collect(), 1000.0, "ramp", Some(1)).unwrap()
    }

    #[test]
    fn window_counts() {
        let w = window_signal(&ramp(1000), 192, 96).unwrap();
        assert_eq!(w.len(), 9);
        for (k, win) in w.iter().enumerate() {
            assert_eq!(win.values[0], (k * 96) as f64);
            assert_eq!(win.label, Some(1));
            assert_eq!(win.origin.start, k * 96);
        }
    }

    #[test]
    fn window_identity_and_partition() {
        let rec = ramp(192);
        let w = window_signal(&rec, 192, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].values, rec.samples);

        let rec = ramp(384);
        let w = window_signal(&rec, 192, 192).unwrap();
        assert_eq!(w.len(), 2);
        let joined: Vec<f64> = w.iter().flat_map(|x| x.values.clone()).collect();
        assert_eq!(joined, rec.samples);
    }

    #[test]
    fn short_recording_is_an_error() {
        assert!(matches!(
            window_signal(&ramp(100), 192, 1),
            Err(Error::RecordingTooShort { len: 100, .. })
        ));
        assert!(window_signal(&ramp(300), 192, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_values(&[1.0; 10]), vec![0.0; 10]);
        assert_eq!(normalize_values(&[0.0, 2.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = synth_generate(&spec, 3).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a.class_counts(), vec![500; 4]);
        let b = synth_generate(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&spec, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_counts() {
        let mut spec = SyntheticSpec::with_classes(3);
        spec.windows_per_class = 100;
        let ds = synth_generate(&spec, 1).unwrap();
        let (tr, va, te) = split_dataset(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(tr.class_counts(), vec![60; 3]);
        assert_eq!(va.class_counts(), vec![20; 3]);
        assert_eq!(te.class_counts(), vec![20; 3]);
    }

    #[test]
    fn split_rejects_tiny_class_and_bad_fractions() {
        let mut spec = SyntheticSpec::with_classes(2);
        spec.windows_per_class = 2;
        let ds = synth_generate(&spec, 1).unwrap();
        assert!(matches!(
            split_dataset(&ds, (0.6, 0.2, 0.2), 0),
            Err(Error::ClassTooSmall { available: 2, .. })
        ));
        assert!(split_dataset(&ds, (0.6, 0.2, 0.3), 0).is_err());
    }

    #[test]
    fn stratified_sample_exact_count() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let s = stratified_sample(&labels, 20, 5).unwrap();
        assert_eq!(s.len(), 20);
        let mut per = [0; 4];
        for &i in &s {
            per[labels[i]] += 1;
        }
        assert_eq!(per, [5; 4]);
        // Every class appears even when its share rounds to zero.
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 98)).collect();
        let s = stratified_sample(&labels, 5, 1).unwrap();
        assert!(s.iter().any(|&i| labels[i] == 1));
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(100, &[0.6, 0.2, 0.2]), vec![60, 20, 20]);
        assert_eq!(apportion(10, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 10);
    }
}
