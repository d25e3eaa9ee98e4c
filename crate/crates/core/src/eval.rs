//! Test-set metrics, confusion matrices and comparison tables.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::charts::{self, BarSeries};
use crate::dataset::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::scalar::Scalar;
use crate::zoo::Backbone;

/// Counts indexed `[true][pred]` over `[NoCrack, Crack]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts(pub [[u64; 2]; 2]);

impl Counts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = [[0u64; 2]; 2];
        for (t, p) in pairs {
            c[t.index()][p.index()] += 1;
        }
        Self(c)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn support(&self, class: Label) -> u64 {
        self.0[class.index()].iter().sum()
    }

    pub fn predicted(&self, class: Label) -> u64 {
        self.0[0][class.index()] + self.0[1][class.index()]
    }

    pub fn correct(&self) -> u64 {
        self.0[0][0] + self.0[1][1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Counts,
    /// Row-normalized; a row with no true samples stays zero.
    pub normalized: [[f64; 2]; 2],
}

impl From<Counts> for ConfusionMatrix {
    fn from(counts: Counts) -> Self {
        let mut normalized = [[0.0; 2]; 2];
        for (t, row) in counts.0.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n > 0 {
                for (p, &v) in row.iter().enumerate() {
                    normalized[t][p] = v as f64 / n as f64;
                }
            }
        }
        Self { counts, normalized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    /// `None` when the class is absent from the test set.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `[NoCrack, Crack]`
    pub per_class: [ClassMetrics; 2],
    /// Support-weighted over classes present in the test set.
    pub weighted: Averages,
    pub macro_avg: Averages,
    pub micro: Averages,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_counts(c: &Counts) -> Result<Self> {
        let total = c.total();
        if total == 0 {
            return Err(Error::Precondition("cannot score an empty test set".into()));
        }
        let per_class = Label::BOTH.map(|class| {
            let i = class.index();
            let tp = c.0[i][i];
            let support = c.support(class);
            let precision = ratio(tp, c.predicted(class));
            let recall = (support > 0).then(|| ratio(tp, support));
            ClassMetrics {
                precision,
                recall,
                f1: recall.map(|r| f1_score(precision, r)),
                support,
            }
        });
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.recall.is_some()).collect();
        if present.len() < per_class.len() {
            log::warn!("test set holds a single class; recall of the absent class is undefined and left out of the averages");
        }
        let support: u64 = present.iter().map(|m| m.support).sum();
        let weigh = |f: &dyn Fn(&ClassMetrics) -> f64| {
            present.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / support as f64
        };
        let weighted = Averages {
            precision: weigh(&|m| m.precision),
            recall: weigh(&|m| m.recall.unwrap_or(0.0)),
            f1: weigh(&|m| m.f1.unwrap_or(0.0)),
        };
        let k = present.len() as f64;
        let macro_avg = Averages {
            precision: present.iter().map(|m| m.precision).sum::<f64>() / k,
            recall: present.iter().map(|m| m.recall.unwrap_or(0.0)).sum::<f64>() / k,
            f1: present.iter().map(|m| m.f1.unwrap_or(0.0)).sum::<f64>() / k,
        };
        // pooled over both classes every error is one FP and one FN
        let tp: u64 = c.correct();
        let fp: u64 = (0..2).map(|j| c.0[1 - j][j]).sum();
        let fn_: u64 = (0..2).map(|i| c.0[i][1 - i]).sum();
        let mp = ratio(tp, tp + fp);
        let mr = ratio(tp, tp + fn_);
        Ok(Self {
            per_class,
            weighted,
            macro_avg,
            micro: Averages {
                precision: mp,
                recall: mr,
                f1: f1_score(mp, mr),
            },
            accuracy: ratio(c.correct(), total),
        })
    }
}

/// Training context carried into the report tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunInfo {
    pub regime: String,
    pub epochs: usize,
    pub lr: f64,
    pub training_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub backbone: Backbone,
    pub case_id: Option<u8>,
    pub run: RunInfo,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub eval_seconds: f64,
}

impl EvalReport {
    pub fn from_counts(backbone: Backbone, case_id: Option<u8>, counts: Counts) -> Result<Self> {
        Ok(Self {
            model_id: backbone.name().into(),
            backbone,
            case_id,
            run: RunInfo::default(),
            metrics: Metrics::from_counts(&counts)?,
            confusion: counts.into(),
            eval_seconds: 0.0,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.metrics.accuracy
    }

    pub fn write_confusion(&self, dir: &Path) -> Result<PathBuf> {
        let case = self.case_id.map_or("na".to_string(), |c| c.to_string());
        let path = dir.join(format!("confusion_{}_{case}.json", self.model_id));
        let body = serde_json::to_string_pretty(&self.confusion)?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Classifies every test patch and scores the predictions.
pub fn evaluate<T: Scalar>(
    model: &ClassifierModel<T>,
    test: &[ImageSample],
    case_id: Option<u8>,
    batch_size: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Precondition("test set is empty".into()));
    }
    let start = Instant::now();
    let mut pairs = Vec::with_capacity(test.len());
    for chunk in test.chunks(batch_size.max(1)) {
        let images = chunk.iter().map(ImageSample::load).collect::<Result<Vec<_>>>()?;
        let preds = model.predict_images(&images)?;
        pairs.extend(chunk.iter().zip(preds).map(|(s, p)| (s.label, p.label)));
    }
    let mut report = EvalReport::from_counts(model.backbone_kind(), case_id, Counts::from_pairs(pairs))?;
    report.run.regime = model.regime().to_string();
    report.run.seed = model.seed();
    report.eval_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One row of the comparison table, also the CSV record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub case: String,
    pub regime: String,
    pub epochs: usize,
    pub lr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub training_time_s: f64,
}

impl From<&EvalReport> for TableRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            model: r.model_id.clone(),
            case: r.case_id.map_or(String::new(), |c| c.to_string()),
            regime: r.run.regime.clone(),
            epochs: r.run.epochs,
            lr: r.run.lr,
            precision: r.metrics.weighted.precision,
            recall: r.metrics.weighted.recall,
            f1: r.metrics.weighted.f1,
            accuracy: r.metrics.accuracy,
            training_time_s: r.run.training_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub rows: Vec<TableRow>,
    pub csv: String,
    pub markdown: String,
}

impl ReportTables {
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [("report.csv", &self.csv), ("report.md", &self.markdown)] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn sorted(reports: &[EvalReport]) -> Vec<&EvalReport> {
    let mut v: Vec<&EvalReport> = reports.iter().collect();
    v.sort_by_key(|r| (r.run.regime.clone(), r.case_id, r.backbone.index()));
    v
}

/// CSV and Markdown tables, rows in registry order within each case.
pub fn render_tables(reports: &[EvalReport]) -> Result<ReportTables> {
    let rows: Vec<TableRow> = sorted(reports).into_iter().map(TableRow::from).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Chart(e.to_string()))?)
        .expect("csv output is utf-8");

    let mut md = Vec::new();
    let _ = writeln!(
        md,
        "| model | case | regime | epochs | lr | precision | recall | f1-score | accuracy | training time (s) |"
    );
    let _ = writeln!(md, "|---|---|---|---:|---:|---:|---:|---:|---:|---:|");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:e} | {:.2} | {:.2} | {:.2} | {:.2} | {:.3} |",
            r.model, r.case, r.regime, r.epochs, r.lr, r.precision, r.recall, r.f1, r.accuracy, r.training_time_s
        );
    }
    Ok(ReportTables {
        rows,
        csv,
        markdown: String::from_utf8(md).expect("markdown is utf-8"),
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Accuracy and training-time bar charts per regime, one bar group per case.
pub fn render_comparison_charts(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut regimes: Vec<String> = reports.iter().map(|r| r.run.regime.clone()).collect();
    regimes.sort();
    regimes.dedup();
    let mut written = Vec::new();
    for regime in regimes {
        let subset: Vec<&EvalReport> = reports.iter().filter(|r| r.run.regime == regime).collect();
        let mut cases: Vec<Option<u8>> = subset.iter().map(|r| r.case_id).collect();
        cases.sort();
        cases.dedup();
        let mut models: Vec<Backbone> = subset.iter().map(|r| r.backbone).collect();
        models.sort();
        models.dedup();
        let groups: Vec<String> = cases
            .iter()
            .map(|c| c.map_or("all".to_string(), |c| format!("case {c}")))
            .collect();
        let series = |f: fn(&EvalReport) -> f64| -> Vec<BarSeries> {
            models
                .iter()
                .map(|&m| BarSeries {
                    name: m.name().into(),
                    values: cases
                        .iter()
                        .map(|&c| subset.iter().find(|r| r.backbone == m && r.case_id == c).map(|r| f(r)))
                        .collect(),
                })
                .collect()
        };
        let tag = if regime.is_empty() { "all".to_string() } else { regime.to_lowercase() };
        let acc = dir.join(format!("accuracy_{tag}.png"));
        charts::grouped_bars(&acc, &format!("Test accuracy ({tag})"), "accuracy", &groups, &series(|r| r.accuracy()))?;
        let time = dir.join(format!("training_time_{tag}.png"));
        charts::grouped_bars(
            &time,
            &format!("Training time ({tag})"),
            "seconds",
            &groups,
            &series(|r| r.run.training_seconds),
        )?;
        written.extend([acc, time]);
    }
    Ok(written)
}
