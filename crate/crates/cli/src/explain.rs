//! `explain`: one local explanation of a checkpoint at a dataset row.

use std::path::Path;

use expo_core::data::DatasetManifest;
use expo_core::engine::Predictor;
use expo_core::explain::{Explainer, LinearExplanation};
use expo_core::rng::SeedStream;
use serde::{Deserialize, Serialize};

use crate::artifacts::CheckpointFile;
use crate::error::{CliError, Result};
use crate::train::load_split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutput {
    pub row: usize,
    pub prediction: f64,
    /// Sorted by decreasing magnitude.
    pub weights: Vec<FeatureWeight>,
    pub explanation: LinearExplanation,
}

impl ExplainOutput {
    /// Coefficients rounded to two decimals, one per line.
    pub fn display(&self) -> String {
        let width = self.weights.iter().map(|w| w.feature.len()).max().unwrap_or(0);
        let mut out = format!("row {}: prediction {:.2}\n", self.row, self.prediction);
        for w in &self.weights {
            out.push_str(&format!("  {:<width$}  {:>7.2}\n", w.feature, w.coefficient));
        }
        out
    }
}

pub fn cmd_explain(
    checkpoint: &Path,
    dataset_manifest: &Path,
    row: usize,
    explainer: &Explainer,
    seed: u64,
) -> Result<ExplainOutput> {
    let ckpt = CheckpointFile::load(checkpoint)?;
    let ds = load_split(&DatasetManifest::from_file(dataset_manifest)?, ckpt.split_seed)?;
    if row >= ds.features.rows() {
        return Err(CliError::Config(format!("row {row} is out of range for {} rows", ds.features.rows())));
    }
    let x = ds.features.row(row);
    let explanation = explainer.explain(&ckpt.model, x, 0, SeedStream::new(seed))?;
    let mut weights: Vec<FeatureWeight> = ds
        .feature_names
        .iter()
        .zip(&explanation.coefficients)
        .map(|(f, &c)| FeatureWeight { feature: f.clone(), coefficient: c })
        .collect();
    weights.sort_by(|a, b| b.coefficient.abs().total_cmp(&a.coefficient.abs()));
    Ok(ExplainOutput { row, prediction: ckpt.model.predict_one(x, 0), weights, explanation })
}
