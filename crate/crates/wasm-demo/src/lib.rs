//! Browser bindings: train a small model on planted-rule data, score a
//! sample line, and fetch the attribute similarity / matching grids.

use serde_json::json;
use wasm_bindgen::prelude::*;

use gmcf::data::Side;
use gmcf::evaluation::{evaluate, export_matrices};
use gmcf::io::{parse_dataset_str, parse_sample_line, Dataset, ParseOptions};
use gmcf::model::{predict, ModelParams};
use gmcf::synth::{generate_synthetic, SynthSpec};
use gmcf::training::{split_per_user, train, SplitDataset, TrainConfig};
use gmcf::GmcfError;

fn js_err(e: GmcfError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    data: Dataset,
    split: SplitDataset,
    params: Option<ModelParams>,
}

#[wasm_bindgen]
impl Demo {
    /// A planted-rule dataset with `users` users and 20 samples each.
    #[wasm_bindgen(constructor)]
    pub fn new(users: usize, noise: f64, seed: u64) -> Result<Demo, JsError> {
        Self::create(users, noise, seed).map_err(js_err)
    }

    #[wasm_bindgen(js_name = sampleCount)]
    pub fn sample_count(&self) -> usize {
        self.data.samples.len()
    }

    /// Trains from scratch and returns JSON
    /// `{log: [..epoch lines], test: "auc=.."}`.
    pub fn train(&mut self, variant: &str, dim: usize, epochs: usize, lr: f64, seed: u64) -> Result<String, JsError> {
        self.run_training(variant, dim, epochs, lr, seed).map_err(js_err)
    }

    /// `{score, probability}` for `user fields\titem fields`.
    pub fn predict(&self, line: &str) -> Result<String, JsError> {
        self.score_line(line).map_err(js_err)
    }

    /// A sample line from the dataset, without its label.
    #[wasm_bindgen(js_name = exampleLine)]
    pub fn example_line(&self, k: usize) -> String {
        let s = &self.data.samples[k % self.data.samples.len()];
        let line = gmcf::io::sample_to_line(s, &self.data.vocab);
        line.split_once('\t').map(|(_, rest)| rest.to_string()).unwrap_or(line)
    }

    /// Similarity grid over the user attributes whose names start with
    /// `row_prefix`, matching grid against item attributes starting with
    /// `col_prefix`. JSON `{rows, cols, similarity, matching}`.
    pub fn matrices(&self, row_prefix: &str, col_prefix: &str) -> Result<String, JsError> {
        self.grids(row_prefix, col_prefix).map_err(js_err)
    }
}

impl Demo {
    pub fn create(users: usize, noise: f64, seed: u64) -> gmcf::Result<Demo> {
        let spec = SynthSpec {
            users,
            items: 60,
            noise,
            seed,
            ..SynthSpec::default()
        };
        let (data, _) = parse_dataset_str(&generate_synthetic(&spec)?.text, ParseOptions::default())?;
        let split = split_per_user(&data.samples, seed);
        Ok(Demo {
            data,
            split,
            params: None,
        })
    }

    pub fn run_training(
        &mut self,
        variant: &str,
        dim: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> gmcf::Result<String> {
        let config = TrainConfig {
            dim,
            epochs,
            learning_rate: lr,
            batch_size: 64,
            patience: 0,
            seed,
            variant: variant.parse()?,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let outcome = train(&self.split, self.data.vocab.len(), &config, |e| log.push(e.to_string()))?;
        let test = evaluate(&outcome.params, &self.split.test)?.to_string();
        self.params = Some(outcome.params);
        Ok(json!({ "log": log, "test": test }).to_string())
    }

    fn trained(&self) -> gmcf::Result<&ModelParams> {
        self.params
            .as_ref()
            .ok_or_else(|| GmcfError::Contract("train a model first".into()))
    }

    pub fn score_line(&self, line: &str) -> gmcf::Result<String> {
        let params = self.trained()?;
        let line = if line.split('\t').count() == 2 {
            format!("0\t{line}")
        } else {
            line.to_string()
        };
        let sample = parse_sample_line(&line, &self.data.vocab)?;
        let r = predict(&sample, params)?;
        Ok(json!({ "score": r.score, "probability": r.probability() }).to_string())
    }

    pub fn grids(&self, row_prefix: &str, col_prefix: &str) -> gmcf::Result<String> {
        let params = self.trained()?;
        let pick = |side: Side, prefix: &str| -> Vec<usize> {
            let mut ids: Vec<usize> = self
                .data
                .vocab
                .ids()
                .filter(|a| a.side == side && self.data.vocab.name(a.id).starts_with(prefix))
                .map(|a| a.id)
                .collect();
            ids.sort_by(|&a, &b| self.data.vocab.name(a).cmp(self.data.vocab.name(b)));
            ids
        };
        let m = export_matrices(
            &params.embeddings,
            &pick(Side::User, row_prefix),
            &pick(Side::Item, col_prefix),
        )?;
        let names = |ids: &[usize]| ids.iter().map(|&i| self.data.vocab.name(i)).collect::<Vec<_>>();
        Ok(json!({
            "rows": names(&m.rows),
            "cols": names(&m.cols),
            "similarity": m.similarity,
            "matching": m.matching,
        })
        .to_string())
    }
}

/// Max deviation between the FM-reduction mode and the closed-form FM.
#[wasm_bindgen(js_name = fmIdentity)]
pub fn fm_identity(n: usize, d: usize, seed: u64) -> Result<f64, JsError> {
    gmcf::checks::fmcheck(n, d, seed).map_err(js_err)
}
