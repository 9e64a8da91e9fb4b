//! Target tasks, accuracy, confusion matrices and report tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::signal::{LabeledDataset, SignalWindow};

/// Relabeling of a dataset into a target task. `mapping[original]` is the
/// task class, or `None` to drop windows of that class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
    pub mapping: Vec<Option<usize>>,
    pub class_names: Vec<String>,
}

impl TaskSpec {
    pub fn new(
        name: &str,
        description: &str,
        mapping: Vec<Option<usize>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("task `{name}` has fewer than 2 classes")));
        }
        for t in 0..k {
            if !mapping.contains(&Some(t)) {
                return Err(Error::InvalidArgument(format!(
                    "task `{name}`: no original class maps to task class {t}"
                )));
            }
        }
        if let Some(t) = mapping.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "task `{name}`: target class {t} outside [0, {k})"
            )));
        }
        Ok(Self {
            name: name.into(),
            description: description.into(),
            mapping,
            class_names,
        })
    }

    pub fn identity(name: &str, class_names: Vec<String>) -> Result<Self> {
        let mapping = (0..class_names.len()).map(Some).collect();
        Self::new(name, "all classes", mapping, class_names)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Hierarchical tasks over the four synthetic classes
/// (healthy, inner race, outer race, misalignment).
pub fn synthetic_tasks() -> Vec<TaskSpec> {
    let h = None;
    vec![
        TaskSpec::new(
            "detect",
            "healthy vs faulty",
            vec![Some(0), Some(1), Some(1), Some(1)],
            names(&["healthy", "faulty"]),
        ),
        TaskSpec::new(
            "diagnose",
            "bearing fault vs misalignment (faulty windows only)",
            vec![h, Some(0), Some(0), Some(1)],
            names(&["bearing", "misalignment"]),
        ),
        TaskSpec::new(
            "locate",
            "inner race vs outer race",
            vec![h, Some(0), Some(1), h],
            names(&["inner_race", "outer_race"]),
        ),
        TaskSpec::new(
            "multiclass",
            "healthy vs bearing fault vs misalignment",
            vec![Some(0), Some(1), Some(1), Some(2)],
            names(&["healthy", "bearing", "misalignment"]),
        ),
        TaskSpec::identity(
            "full",
            names(&["healthy", "inner_race", "outer_race", "misalignment"]),
        ),
    ]
    .into_iter()
    .map(|t| t.expect("built-in task specs are valid"))
    .collect()
}

pub fn task_by_name(name: &str) -> Result<TaskSpec> {
    let tasks = synthetic_tasks();
    let known = tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ");
    tasks
        .iter()
        .find(|t| t.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownTask {
            name: name.into(),
            known,
        })
}

/// Relabel `ds` under `spec`, dropping classes mapped to `None`.
pub fn build_task(ds: &LabeledDataset, spec: &TaskSpec) -> Result<LabeledDataset> {
    let mut windows = Vec::new();
    for (i, w) in ds.windows.iter().enumerate() {
        let l = w.label.ok_or(Error::MissingLabel(i))?;
        match spec.mapping.get(l) {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "task `{}` has no rule for label {l}",
                    spec.name
                )))
            }
            Some(None) => {}
            Some(Some(t)) => windows.push(SignalWindow {
                label: Some(*t),
                ..w.clone()
            }),
        }
    }
    LabeledDataset::new(windows, spec.num_classes(), spec.class_names.clone())
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(l),
                num_classes,
            });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub condition: String,
    pub label_fraction: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
}

impl EvalResult {
    pub fn from_predictions(
        task: &str,
        condition: &str,
        label_fraction: f64,
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let confusion = confusion_matrix(predictions, labels, num_classes)?;
        let trace: usize = (0..num_classes).map(|i| confusion[i][i]).sum();
        if labels.is_empty() {
            return Err(Error::InsufficientData("empty evaluation set".into()));
        }
        Ok(Self {
            task: task.into(),
            condition: condition.into(),
            label_fraction,
            accuracy: trace as f64 / labels.len() as f64,
            confusion,
            seed,
        })
    }
}

/// Eval-mode accuracy and confusion matrix of `model` on `test`.
pub fn evaluate(
    model: &Model,
    test: &LabeledDataset,
    task: &str,
    label_fraction: f64,
    seed: u64,
) -> Result<EvalResult> {
    let head = model.head()?;
    if head.num_classes() != test.num_classes {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, task `{task}` has {}",
            head.num_classes(),
            test.num_classes
        )));
    }
    let pred = model.predict(&test.windows)?;
    EvalResult::from_predictions(task, "synthetic", label_fraction, &pred, &test.labels(), test.num_classes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format `{s}` (csv|markdown)"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "markdown",
        })
    }
}

pub const MISSING_CELL: &str = "—";

fn fraction_label(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round())
    } else {
        format!("{pct:.1}%")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Table with one row per (task, condition) and one column per label
/// fraction. Cells hold the mean accuracy (in percent) over all results
/// that fall in them.
pub fn emit_report(results: &[EvalResult], format: ReportFormat) -> Result<String> {
    if results.is_empty() {
        return Err(Error::InsufficientData("no results to report".into()));
    }
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in results {
        let key = (r.task.clone(), r.condition.clone());
        let ri = match rows.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                rows.push(key);
                rows.len() - 1
            }
        };
        if !fractions.iter().any(|f| (f - r.label_fraction).abs() < 1e-12) {
            fractions.push(r.label_fraction);
        }
        let _ = ri;
    }
    fractions.sort_by(f64::total_cmp);
    for r in results {
        let ri = rows
            .iter()
            .position(|k| k.0 == r.task && k.1 == r.condition)
            .unwrap();
        let ci = fractions
            .iter()
            .position(|f| (f - r.label_fraction).abs() < 1e-12)
            .unwrap();
        let e = cells.entry((ri, ci)).or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    let cell = |ri: usize, ci: usize| match cells.get(&(ri, ci)) {
        Some((sum, n)) => format!("{:.2}", 100.0 * sum / *n as f64),
        None => MISSING_CELL.to_string(),
    };
    let mut header = vec!["task".to_string(), "condition".to_string()];
    header.extend(fractions.iter().map(|f| fraction_label(*f)));

    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
            out.push('\n');
            for (ri, (task, cond)) in rows.iter().enumerate() {
                let mut line = vec![csv_field(task), csv_field(cond)];
                line.extend((0..fractions.len()).map(|ci| cell(ri, ci)));
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let esc = |s: &str| s.replace('|', "\\|");
            out.push_str(&format!("| {} |\n", header.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for (ri, (task, cond)) in rows.iter().enumerate() {
                let mut line = vec![esc(task), esc(cond)];
                line.extend((0..fractions.len()).map(|ci| cell(ri, ci)));
                out.push_str(&format!("| {} |\n", line.join(" | ")));
            }
        }
    }
    Ok(out)
}

/// Append one result to a line-delimited JSON store.
pub fn append_result(store: &Path, result: &EvalResult) -> Result<()> {
    if let Some(dir) = store.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(store)
        .map_err(|e| Error::io(format!("opening {}", store.display()), e))?;
    let line = serde_json::to_string(result).expect("eval result serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", store.display()), e))
}

pub fn load_results(store: &Path) -> Result<Vec<EvalResult>> {
    let text = fs::read_to_string(store).map_err(|e| Error::io(format!("reading {}", store.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::InvalidArgument(format!("{} line {}: {e}", store.display(), i + 1))
            })
        })
        .collect()
}
