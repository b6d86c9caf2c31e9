//! `evaluate`: metrics for every final and grid-search checkpoint, summarized
//! as a metric × regularizer table and a (weight, test loss, NF) curve.

use std::collections::HashMap;
use std::path::Path;

use expo_core::data::{DatasetManifest, StandardizedDataset};
use expo_core::metrics::{evaluate_model, EvalSettings, MetricsReport, Summary};
use expo_core::regularize::RegularizerKind;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, write_atomic, write_json, CheckpointFile};
use crate::error::Result;
use crate::significance::paired_t_test;
use crate::train::{load_split, RunManifest};

pub const TABLE_CSV: &str = "table.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// `test_loss`, `test_accuracy`, `pf`, `nf` or `stability`.
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explainer: Option<String>,
    pub regularizer: RegularizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_weight: Option<f64>,
    /// Per-seed values, in seed order.
    pub values: Vec<f64>,
    pub summary: Summary,
    /// Paired t-test against the unregularized row over seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_vs_none: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub regularizer: RegularizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_weight: Option<f64>,
    pub explainer: String,
    pub test_loss: f64,
    pub nf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub rows: Vec<TableRow>,
    pub curve: Vec<CurvePoint>,
}

impl EvaluationSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(SUMMARY_JSON))
    }

    pub fn row(&self, metric: &str, explainer: Option<&str>, kind: RegularizerKind) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.explainer.as_deref() == explainer && r.regularizer == kind)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("metric,explainer,regularizer,relative_weight,mean,std_error,n,p_vs_none\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.metric,
                r.explainer.as_deref().unwrap_or(""),
                r.regularizer,
                opt(r.relative_weight),
                r.summary.mean,
                r.summary.std_error,
                r.summary.n,
                opt(r.p_vs_none)
            ));
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("regularizer,relative_weight,explainer,test_loss,nf\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.regularizer,
                opt(p.relative_weight),
                p.explainer,
                p.test_loss,
                p.nf
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct Evaluator<'a> {
    run_dir: &'a Path,
    manifest: DatasetManifest,
    settings: EvalSettings,
    run: &'a RunManifest,
    datasets: HashMap<u64, StandardizedDataset>,
    reports: HashMap<String, MetricsReport>,
}

impl Evaluator<'_> {
    /// Evaluate the checkpoint at `rel` once, writing its report beside the
    /// others.
    fn report(&mut self, rel: &str) -> Result<&MetricsReport> {
        if !self.reports.contains_key(rel) {
            let ckpt = CheckpointFile::load(&self.run_dir.join(rel))?;
            if !self.datasets.contains_key(&ckpt.split_seed) {
                self.datasets.insert(ckpt.split_seed, load_split(&self.manifest, ckpt.split_seed)?);
            }
            let ds = &self.datasets[&ckpt.split_seed];
            let started = std::time::Instant::now();
            let report = evaluate_model(&ckpt.model, ds, &self.run.explainers, &self.settings, ckpt.cell.seed)?;
            log::info!("{}: evaluated in {:.1}s", ckpt.cell.name(), started.elapsed().as_secs_f64());
            let dir = self.run_dir.join("reports");
            let name = ckpt.cell.name();
            write_json(&dir.join(format!("{name}.json")), &report)?;
            write_atomic(&dir.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
            self.reports.insert(rel.to_owned(), report);
        }
        Ok(&self.reports[rel])
    }
}

type Metric = (String, Option<String>, fn(&MetricsReport, Option<&str>) -> Option<f64>);

fn metrics(run: &RunManifest) -> Vec<Metric> {
    let mut out: Vec<Metric> = vec![
        ("test_loss".into(), None, |r, _| Some(r.test_loss)),
        ("test_accuracy".into(), None, |r, _| r.test_accuracy),
    ];
    for e in &run.explainers {
        let name = Some(e.name.clone());
        out.push(("pf".into(), name.clone(), |r, e| r.aggregate(e?).map(|a| a.pf.mean)));
        out.push(("nf".into(), name.clone(), |r, e| r.aggregate(e?).map(|a| a.nf.mean)));
        out.push(("stability".into(), name, |r, e| r.aggregate(e?).map(|a| a.stability.mean)));
    }
    out
}

pub fn cmd_evaluate(run_dir: &Path, settings: Option<EvalSettings>) -> Result<EvaluationSummary> {
    let run = RunManifest::load(run_dir)?;
    let mut ev = Evaluator {
        run_dir,
        manifest: DatasetManifest::from_file(&run.dataset)?,
        settings: settings.unwrap_or_else(|| run.eval.clone()),
        run: &run,
        datasets: HashMap::new(),
        reports: HashMap::new(),
    };

    let mut per_model: Vec<(&crate::train::FinalModels, Vec<MetricsReport>)> = Vec::new();
    for m in &run.models {
        let reports = m.checkpoints.iter().map(|c| ev.report(c).cloned()).collect::<Result<Vec<_>>>()?;
        per_model.push((m, reports));
    }

    let mut rows = Vec::new();
    for (metric, explainer, pick) in metrics(&run) {
        let values_of = |reports: &[MetricsReport]| -> Option<Vec<f64>> {
            reports.iter().map(|r| pick(r, explainer.as_deref())).collect()
        };
        let Some(baseline) = values_of(&per_model[0].1) else { continue };
        for (m, reports) in &per_model {
            let values = values_of(reports).expect("same metrics for every model");
            let p_vs_none = (m.kind != RegularizerKind::None)
                .then(|| paired_t_test(&values, &baseline).map(|t| t.p_value))
                .flatten();
            rows.push(TableRow {
                metric: metric.clone(),
                explainer: explainer.clone(),
                regularizer: m.kind,
                relative_weight: m.relative_weight,
                summary: Summary::of(&values),
                values,
                p_vs_none,
            });
        }
    }

    // the curve uses the selection seed: the chosen unregularized model then
    // every regularized grid cell
    let mut points = vec![(RegularizerKind::None, None, run.models[0].checkpoints[0].clone())];
    for s in &run.weight_search {
        for c in s.candidates.iter().filter(|c| c.val_loss.is_some()) {
            points.push((s.kind, c.cell.relative_weight, c.checkpoint.clone()));
        }
    }
    let mut curve = Vec::new();
    for (kind, w, rel) in points {
        let report = ev.report(&rel)?;
        for a in &report.aggregates {
            curve.push(CurvePoint {
                regularizer: kind,
                relative_weight: w,
                explainer: a.explainer.clone(),
                test_loss: report.test_loss,
                nf: a.nf.mean,
            });
        }
    }

    let summary = EvaluationSummary { rows, curve };
    write_atomic(&run_dir.join(TABLE_CSV), summary.table_csv().as_bytes())?;
    write_atomic(&run_dir.join(CURVE_CSV), summary.curve_csv().as_bytes())?;
    write_json(&run_dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}
