//! Evaluation: confusion-matrix metrics with "abandoned" as the positive
//! class, per-dataset comparison tables, and cross-scene generalization
//! reports.
//!
//! Rates with a zero denominator are reported as not-applicable rather than
//! 0 or NaN; a silent zero would fabricate perfect scores on degenerate
//! splits.

use std::collections::BTreeSet;
use std::fmt;

use crate::dataset::{self, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{self, BackboneParams, HeadParams};
use crate::train::CurvePoint;

/// Batch size used when sweeping a split for evaluation.
const EVAL_BATCH: usize = 100;

/// Raw confusion tallies; positive class = abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Tally predictions against ground truth.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            expected: format!("{} truths", predictions.len()),
            actual: format!("{} truths", truths.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "confusion counts need at least one (prediction, truth) pair".into(),
        ));
    }
    let mut counts = ConfusionCounts {
        true_positives: 0,
        false_positives: 0,
        true_negatives: 0,
        false_negatives: 0,
    };
    for (pred, truth) in predictions.iter().zip(truths) {
        match (pred, truth) {
            (Label::Abandoned, Label::Abandoned) => counts.true_positives += 1,
            (Label::Abandoned, Label::Background) => counts.false_positives += 1,
            (Label::Background, Label::Background) => counts.true_negatives += 1,
            (Label::Background, Label::Abandoned) => counts.false_negatives += 1,
        }
    }
    Ok(counts)
}

/// A rate that may be undefined on a degenerate denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Value(f64),
    NotApplicable,
}

impl Rate {
    fn of(numerator: u64, denominator: u64) -> Rate {
        if denominator == 0 {
            Rate::NotApplicable
        } else {
            Rate::Value(numerator as f64 / denominator as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Value(v) => Some(*v),
            Rate::NotApplicable => None,
        }
    }

    pub fn parse(s: &str) -> Result<Rate> {
        if s == "n/a" {
            return Ok(Rate::NotApplicable);
        }
        s.parse()
            .map(Rate::Value)
            .map_err(|_| Error::InvalidArgument(format!("bad rate {s:?}")))
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Value(v) => write!(f, "{v}"),
            Rate::NotApplicable => f.write_str("n/a"),
        }
    }
}

/// (accuracy, fpr, fnr) from raw counts.
pub fn metrics_from_confusion(counts: &ConfusionCounts) -> Result<(f64, Rate, Rate)> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cannot compute metrics over zero frames".into(),
        ));
    }
    let accuracy = (counts.true_positives + counts.true_negatives) as f64 / total as f64;
    let fpr = Rate::of(counts.false_positives, counts.false_positives + counts.true_negatives);
    let fnr = Rate::of(counts.false_negatives, counts.false_negatives + counts.true_positives);
    Ok((accuracy, fpr, fnr))
}

/// One dataset/split evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset_name: String,
    pub split: Split,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub fpr: Rate,
    pub fnr: Rate,
    pub mean_loss: f64,
}

impl MetricsReport {
    /// Line-oriented key=value form for scripting. Floats keep full
    /// round-trip precision.
    pub fn to_kv(&self) -> String {
        format!(
            "dataset={}\nsplit={}\ntp={}\nfp={}\ntn={}\nfn={}\naccuracy={}\nfpr={}\nfnr={}\nmean_loss={}\n",
            self.dataset_name,
            self.split,
            self.counts.true_positives,
            self.counts.false_positives,
            self.counts.true_negatives,
            self.counts.false_negatives,
            self.accuracy,
            self.fpr,
            self.fnr,
            self.mean_loss
        )
    }

    pub fn parse_kv(text: &str) -> Result<MetricsReport> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad report line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("report missing field {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad integer for {k}")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad float for {k}")))
        };
        Ok(MetricsReport {
            dataset_name: get("dataset")?.clone(),
            split: Split::parse(get("split")?)
                .ok_or_else(|| Error::InvalidArgument("bad split in report".into()))?,
            counts: ConfusionCounts {
                true_positives: int("tp")?,
                false_positives: int("fp")?,
                true_negatives: int("tn")?,
                false_negatives: int("fn")?,
            },
            accuracy: float("accuracy")?,
            fpr: Rate::parse(get("fpr")?)?,
            fnr: Rate::parse(get("fnr")?)?,
            mean_loss: float("mean_loss")?,
        })
    }
}

/// Run the model over every frame of a split (keep-last batching) and
/// aggregate counts and mean cross-entropy.
pub fn evaluate(
    backbone: &BackboneParams,
    head: &HeadParams,
    manifest: &Manifest,
    split: Split,
    dataset_name: &str,
) -> Result<MetricsReport> {
    let records = manifest.records_of(split);
    if records.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let batches = dataset::batch_count(records.len(), split, EVAL_BATCH);
    let mut predictions = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for b in 0..batches.max(1) {
        let batch = dataset::load_batch(manifest, split, b, EVAL_BATCH)?;
        for (image, truth) in batch.images.iter().zip(&batch.labels) {
            let embedding = model::embed(backbone, image)?;
            let trace = model::head_forward(head, &embedding)?;
            loss_sum += model::cross_entropy(&trace.probabilities, *truth);
            predictions.push(model::decide(&trace.probabilities).0);
            truths.push(*truth);
        }
    }
    let counts = confusion(&predictions, &truths)?;
    let (accuracy, fpr, fnr) = metrics_from_confusion(&counts)?;
    Ok(MetricsReport {
        dataset_name: dataset_name.to_string(),
        split,
        counts,
        accuracy,
        fpr,
        fnr,
        mean_loss: loss_sum / truths.len() as f64,
    })
}

/// Final train/val curve values backing a comparison-table row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSummary {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl CurveSummary {
    /// Summary from the final curve point of a run.
    pub fn from_curves(curves: &[CurvePoint]) -> Option<CurveSummary> {
        curves.last().map(|p| CurveSummary {
            train_loss: p.train_loss,
            val_loss: p.val_loss,
            train_accuracy: p.train_accuracy,
            val_accuracy: p.val_accuracy,
        })
    }
}

pub const TABLE_COLUMNS: [&str; 6] = [
    "Dataset",
    "Train Loss",
    "Validation Loss",
    "Train Accuracy",
    "Validation Accuracy",
    "Test Accuracy",
];

/// One row of the per-dataset comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub dataset: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// The comparison table, renderable as aligned text (2 decimals) or CSV
/// (full precision).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![TABLE_COLUMNS.iter().map(|s| s.to_string()).collect()];
        for row in &self.rows {
            cells.push(vec![
                row.dataset.clone(),
                format!("{:.2}", row.train_loss),
                format!("{:.2}", row.val_loss),
                format!("{:.2}", row.train_accuracy),
                format!("{:.2}", row.val_accuracy),
                format!("{:.2}", row.test_accuracy),
            ]);
        }
        let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = TABLE_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.dataset,
                row.train_loss,
                row.val_loss,
                row.train_accuracy,
                row.val_accuracy,
                row.test_accuracy
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<ComparisonTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty table".into()))?;
        if header != TABLE_COLUMNS.join(",") {
            return Err(Error::InvalidArgument(format!("bad table header {header:?}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::InvalidArgument(format!("bad table row {line:?}")));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad float {s:?}")))
            };
            rows.push(TableRow {
                dataset: fields[0].to_string(),
                train_loss: f(fields[1])?,
                val_loss: f(fields[2])?,
                train_accuracy: f(fields[3])?,
                val_accuracy: f(fields[4])?,
                test_accuracy: f(fields[5])?,
            });
        }
        Ok(ComparisonTable { rows })
    }
}

/// Assemble the comparison table from per-dataset test reports and their
/// training-curve summaries (matched by position).
pub fn comparison_table(
    reports: &[MetricsReport],
    summaries: &[CurveSummary],
) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("need at least one report".into()));
    }
    if reports.len() != summaries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reports but {} curve summaries",
            reports.len(),
            summaries.len()
        )));
    }
    let rows = reports
        .iter()
        .zip(summaries)
        .map(|(report, summary)| TableRow {
            dataset: report.dataset_name.clone(),
            train_loss: summary.train_loss,
            val_loss: summary.val_loss,
            train_accuracy: summary.train_accuracy,
            val_accuracy: summary.val_accuracy,
            test_accuracy: report.accuracy,
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// The scene identity of a video: the part of the video_id before the first
/// '-' (generated ids are "<scene_id>-e<NN>").
pub fn scene_prefix(video_id: &str) -> &str {
    video_id.split('-').next().unwrap_or(video_id)
}

/// Same model, home test split vs. a foreign scene's test split.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSceneReport {
    pub home: MetricsReport,
    pub foreign: MetricsReport,
    /// home accuracy − foreign accuracy; evidence, not a pass/fail.
    pub delta: f64,
}

impl CrossSceneReport {
    pub fn to_kv(&self) -> String {
        let prefixed = |tag: &str, report: &MetricsReport| -> String {
            report
                .to_kv()
                .lines()
                .map(|line| format!("{tag}.{line}\n"))
                .collect()
        };
        format!(
            "{}{}delta={}\n",
            prefixed("home", &self.home),
            prefixed("foreign", &self.foreign),
            self.delta
        )
    }
}

/// Evaluate the model on its home test split and on a foreign manifest's
/// test split. Scene contamination — any scene prefix shared between the
/// home train/val videos and the foreign manifest — is an error unless
/// `allow_overlap` is set (used for identity checks).
pub fn cross_scene_report(
    backbone: &BackboneParams,
    head: &HeadParams,
    home: &Manifest,
    foreign: &Manifest,
    allow_overlap: bool,
) -> Result<CrossSceneReport> {
    if !allow_overlap {
        let training_scenes: BTreeSet<&str> = home
            .assignment
            .iter()
            .filter(|(_, split)| **split != Split::Test)
            .map(|(video, _)| scene_prefix(video))
            .collect();
        let mut shared: Vec<&str> = foreign
            .assignment
            .keys()
            .map(|video| scene_prefix(video))
            .filter(|prefix| training_scenes.contains(prefix))
            .collect();
        shared.sort();
        shared.dedup();
        if !shared.is_empty() {
            return Err(Error::Contamination(format!(
                "foreign manifest shares scene(s) {} with the training scenes",
                shared.join(", ")
            )));
        }
    }
    let home_report = evaluate(backbone, head, home, Split::Test, "home")?;
    let foreign_report = evaluate(backbone, head, foreign, Split::Test, "foreign")?;
    let delta = home_report.accuracy - foreign_report.accuracy;
    Ok(CrossSceneReport {
        home: home_report,
        foreign: foreign_report,
        delta,
    })
}
