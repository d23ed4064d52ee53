//! Before/after-forgetting evaluation, the MIA score, class splits,
//! hyperparameter sweeps and the component ablation grid.
//!
//! The MIA score is `(BF_forget - AF_forget) - (BF_retain - AF_retain)`.
//! It is reported as a raw number with no better/worse reading attached.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{self, accuracy, argmax, LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::projection::{
    ablation_matrix, ccup_matrix, partial_projector, project_features, Components,
    ProjectionMatrix, Provenance, RegularizationConfig,
};
use crate::store::{ClassManifest, EmbeddingMatrix, LabeledDataset, Partition};

pub fn mia(bf_forget: f64, af_forget: f64, bf_retain: f64, af_retain: f64) -> f64 {
    (bf_forget - af_forget) - (bf_retain - af_retain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub bf_forget: f64,
    pub af_forget: f64,
    pub bf_retain: f64,
    pub af_retain: f64,
    pub mia: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvaluationReport {
    pub fn new(
        dataset: impl Into<String>,
        (bf_forget, af_forget, bf_retain, af_retain): (f64, f64, f64, f64),
        provenance: Provenance,
        seed: Option<u64>,
    ) -> Self {
        EvaluationReport {
            dataset: dataset.into(),
            bf_forget,
            af_forget,
            bf_retain,
            af_retain,
            mia: mia(bf_forget, af_forget, bf_retain, af_retain),
            provenance,
            seed,
        }
    }
}

/// Evaluation context with the before-forgetting accuracies computed once.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    dataset: &'a LabeledDataset,
    texts_t: DMatrix<f64>,
    features: EmbeddingMatrix,
    forget: Vec<usize>,
    retain: Vec<usize>,
    bf_forget: f64,
    bf_retain: f64,
    name: String,
    seed: Option<u64>,
    exec: Exec,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        dataset: &'a LabeledDataset,
        manifest: &ClassManifest,
        class_texts: &EmbeddingMatrix,
    ) -> Result<Self> {
        Self::with_exec(dataset, manifest, class_texts, Exec::default())
    }

    pub fn with_exec(
        dataset: &'a LabeledDataset,
        manifest: &ClassManifest,
        class_texts: &EmbeddingMatrix,
        exec: Exec,
    ) -> Result<Self> {
        if class_texts.count() != manifest.len() {
            return Err(Error::ManifestMismatch {
                header: class_texts.count(),
                manifest: manifest.len(),
            });
        }
        if let Some((position, &label)) = dataset
            .labels()
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= manifest.len())
        {
            return Err(Error::LabelOutOfRange {
                position,
                label,
                classes: manifest.len(),
            });
        }
        let names: Vec<String> = manifest.classes().iter().map(|c| c.name.clone()).collect();
        let scores = classify::classify_with(dataset.features(), class_texts, Some(&names), exec)?;
        let texts_t = classify::unit_texts(class_texts, Some(&names))?.transpose();
        let (forget, retain) = (manifest.forget_indices(), manifest.retain_indices());
        let labels = dataset.labels();
        for (idx, part) in [(&forget, Partition::Forget), (&retain, Partition::Retain)] {
            if !labels.iter().any(|l| idx.contains(l)) {
                return Err(Error::EmptySubset(format!("dataset has no {part} images")));
            }
        }
        let bf_forget = accuracy(&scores.predictions, labels, Some(&forget))?;
        let bf_retain = accuracy(&scores.predictions, labels, Some(&retain))?;
        Ok(Evaluator {
            dataset,
            texts_t,
            features: dataset.features().ensure_normalized()?,
            forget,
            retain,
            bf_forget,
            bf_retain,
            name: String::from("dataset"),
            seed: None,
            exec,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn bf_forget(&self) -> f64 {
        self.bf_forget
    }

    pub fn bf_retain(&self) -> f64 {
        self.bf_retain
    }

    /// Predictions after applying `proj`. Features whose projection
    /// collapses to zero get `None` and count as misclassified.
    pub fn predictions_after(&self, proj: &ProjectionMatrix) -> Result<Vec<Option<usize>>> {
        let projected = project_features(proj, &self.features, self.exec)?;
        let x = &projected.values;
        let degenerate = &projected.degenerate;
        Ok(self.exec.map(x.ncols(), |j| {
            if degenerate.binary_search(&j).is_ok() {
                None
            } else {
                let scores = (&self.texts_t * x.column(j)) * LOGIT_SCALE;
                Some(argmax(scores.iter().copied()))
            }
        }))
    }

    pub fn evaluate(&self, proj: &ProjectionMatrix) -> Result<EvaluationReport> {
        let predictions: Vec<usize> = self
            .predictions_after(proj)?
            .into_iter()
            .map(|p| p.unwrap_or(usize::MAX))
            .collect();
        let labels = self.dataset.labels();
        let af_forget = accuracy(&predictions, labels, Some(&self.forget))?;
        let af_retain = accuracy(&predictions, labels, Some(&self.retain))?;
        Ok(EvaluationReport::new(
            self.name.clone(),
            (self.bf_forget, af_forget, self.bf_retain, af_retain),
            *proj.provenance(),
            self.seed,
        ))
    }
}

pub fn evaluate_unlearning(
    dataset: &LabeledDataset,
    manifest: &ClassManifest,
    class_texts: &EmbeddingMatrix,
    proj: &ProjectionMatrix,
) -> Result<EvaluationReport> {
    Evaluator::new(dataset, manifest, class_texts)?.evaluate(proj)
}

/// How to choose the forget classes.
#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    /// Seeded shuffle, then the first `ceil(fraction * K)` classes are forgotten.
    Fraction(f64),
    /// Exactly these classes are forgotten.
    Named(Vec<String>),
}

pub fn split_classes(manifest: &ClassManifest, split: &Split, seed: u64) -> Result<ClassManifest> {
    let k = manifest.len();
    if k < 2 {
        return Err(Error::InvalidParameter(
            "need at least two classes to split".into(),
        ));
    }
    let mut partitions = vec![Partition::Retain; k];
    match split {
        Split::Fraction(fraction) => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "forget fraction must lie in (0, 1), got {fraction}"
                )));
            }
            let n_forget = forget_count(*fraction, k);
            if n_forget == 0 || n_forget == k {
                return Err(Error::Infeasible(format!(
                    "fraction {fraction} of {k} classes leaves one side empty"
                )));
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for &i in &order[..n_forget] {
                partitions[i] = Partition::Forget;
            }
        }
        Split::Named(names) => {
            for name in names {
                let i = manifest
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownClass(name.clone()))?;
                partitions[i] = Partition::Forget;
            }
            if !partitions.contains(&Partition::Forget) || !partitions.contains(&Partition::Retain) {
                return Err(Error::Infeasible(
                    "named split leaves the forget or retain side empty".into(),
                ));
            }
        }
    }
    manifest.with_partitions(&partitions)
}

/// `ceil(fraction * k)`, ignoring float noise such as `0.4 * 100 = 40.000000000000004`.
pub fn forget_count(fraction: f64, k: usize) -> usize {
    let raw = fraction * k as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Mu,
    Alpha,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" => Ok(SweepAxis::Lambda),
            "mu" => Ok(SweepAxis::Mu),
            "alpha" => Ok(SweepAxis::Alpha),
            _ => Err(Error::InvalidParameter(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn reports(&self) -> Vec<EvaluationReport> {
        self.points.iter().map(|p| p.report.clone()).collect()
    }
}

/// Rebuilds the projection for each value and evaluates it. Points come
/// back sorted ascending by value. `lambda`/`mu` sweeps use CCUP with the
/// other parameter from `fixed`; `alpha` sweeps use the partial projector.
pub fn sweep(
    evaluator: &Evaluator<'_>,
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    axis: SweepAxis,
    values: &[f64],
    fixed: RegularizationConfig,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sweep values must be finite and non-negative, got {v}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let reports = evaluator.exec.try_map(sorted.len(), |i| {
        let value = sorted[i];
        let proj = match axis {
            SweepAxis::Lambda => {
                ccup_matrix(t_f, t_r, RegularizationConfig { lambda: value, ..fixed })?
            }
            SweepAxis::Mu => ccup_matrix(t_f, t_r, RegularizationConfig { mu: value, ..fixed })?,
            SweepAxis::Alpha => partial_projector(t_f, value)?,
        };
        evaluator.evaluate(&proj)
    })?;
    Ok(SweepResult {
        axis,
        points: sorted
            .into_iter()
            .zip(reports)
            .map(|(value, report)| SweepPoint { value, report })
            .collect(),
    })
}

pub const ABLATION_VARIANTS: [Components; 3] = [
    Components::IDENTITY_FORGET,
    Components::FORGET_RETAIN,
    Components::ALL,
];

/// Evaluates `{C1,C2}`, `{C2,C3}` and `{C1,C2,C3}` in that order.
pub fn ablation_grid(
    evaluator: &Evaluator<'_>,
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
) -> Result<Vec<(Components, EvaluationReport)>> {
    let reports = evaluator.exec.try_map(ABLATION_VARIANTS.len(), |i| {
        let proj = ablation_matrix(t_f, t_r, config, ABLATION_VARIANTS[i])?;
        evaluator.evaluate(&proj)
    })?;
    Ok(ABLATION_VARIANTS.into_iter().zip(reports).collect())
}

/// Percentages (`false`) or fractions in `[0, 1]` (`true`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Scale {
    pub fraction: bool,
}

impl Scale {
    fn fmt(&self, v: f64) -> String {
        if self.fraction {
            format!("{:.4}", v / 100.0)
        } else {
            format!("{v:.2}")
        }
    }
}

pub const CSV_COLUMNS: [&str; 10] = [
    "dataset",
    "method",
    "lambda",
    "mu",
    "components",
    "bf_forget",
    "af_forget",
    "bf_retain",
    "af_retain",
    "mia",
];

fn row(r: &EvaluationReport, scale: Scale) -> [String; 10] {
    let p = &r.provenance;
    [
        r.dataset.clone(),
        p.method.to_string(),
        p.lambda.to_string(),
        p.mu.to_string(),
        p.components.to_string(),
        scale.fmt(r.bf_forget),
        scale.fmt(r.af_forget),
        scale.fmt(r.bf_retain),
        scale.fmt(r.af_retain),
        scale.fmt(r.mia),
    ]
}

pub fn write_csv<W: Write>(reports: &[EvaluationReport], sink: W, scale: Scale) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(row(r, scale))?;
    }
    w.flush()?;
    Ok(())
}

/// Full-precision JSON array, one object per report.
pub fn write_json<W: Write>(reports: &[EvaluationReport], mut sink: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut sink, reports)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: std::io::Read>(source: R) -> Result<Vec<EvaluationReport>> {
    Ok(serde_json::from_reader(source)?)
}

/// Fixed-width text table.
pub fn format_table(reports: &[EvaluationReport], scale: Scale) -> String {
    let rows: Vec<[String; 10]> = reports.iter().map(|r| row(r, scale)).collect();
    let widths: Vec<usize> = (0..CSV_COLUMNS.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([CSV_COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| {
                if c < 5 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&CSV_COLUMNS.map(String::from));
    for r in &rows {
        line(r);
    }
    out
}
