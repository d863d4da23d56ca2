//! Central finite-difference check of the full training gradient
//! (`L_enc + L_dec + L_ctr`) for every scalar parameter of a small model.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpus::{encode_sentence, PairSource, SentencePair, Vocab};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::Stage;
use crate::parallel::Exec;
use crate::rng::{Purpose, SeedTree};
use crate::trainer::{batch_gradients, Batch, TrainConfig};

/// Denominator floor for the relative error, so parameters whose gradient
/// is exactly or nearly zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub step_size: f64,
    pub init_std: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            seed: 7,
            step_size: 1e-5,
            init_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub loss: f64,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

const SENTENCES: [(&str, &str); 2] = [
    ("river boats carry grain north", "grain boats sail the river"),
    ("old towers guard the quiet hill", "a quiet hill with stone towers"),
];

fn setup(cfg: &GradcheckConfig) -> Result<(ModelParams, Vec<SentencePair>, TrainConfig)> {
    let words: BTreeSet<&str> = SENTENCES
        .iter()
        .flat_map(|(a, b)| a.split(' ').chain(b.split(' ')))
        .collect();
    let vocab = Vocab::from_tokens(words)?;
    let model = ModelConfig {
        max_len: 10,
        init_std: cfg.init_std,
        ..ModelConfig::new(vocab.len(), cfg.d_model, cfg.n_heads, cfg.n_layers)
    };
    let params = ModelParams::init(&model, &mut SeedTree::new(cfg.seed).rng(Purpose::Init, 0, 0))?;
    let pairs = SENTENCES
        .iter()
        .map(|(a, b)| SentencePair {
            a: encode_sentence(a, &vocab, model.max_len),
            b: encode_sentence(b, &vocab, model.max_len),
            source: PairSource::SameArticle,
        })
        .collect();
    let train = TrainConfig {
        batch_size: 2,
        seed: cfg.seed,
        ..TrainConfig::new(Stage::Stage2RetromaeCtr)
    };
    Ok((params, pairs, train))
}

/// Compares analytic and finite-difference gradients for every parameter.
pub fn gradcheck(cfg: &GradcheckConfig, exec: Exec) -> Result<GradcheckReport> {
    let (params, pairs, train) = setup(cfg)?;
    let batch = Batch::Pairs(pairs.iter().collect());
    let (bundle, analytic) = batch_gradients(&train, &params, &batch, 0, Exec::Sequential)?;
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(batch_gradients(&train, p, &batch, 0, Exec::Sequential)?.0.total)
    };
    let index: Vec<(usize, usize)> = params
        .sizes()
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |j| (t, j)))
        .collect();
    let h = cfg.step_size;
    let numeric = exec.try_map(index.len(), |i| {
        let (t, j) = index[i];
        let mut p = params.clone();
        let orig = p.tensors()[t].data()[j];
        p.tensors_mut()[t].data_mut()[j] = orig + h;
        let up = loss_at(&p)?;
        p.tensors_mut()[t].data_mut()[j] = orig - h;
        let down = loss_at(&p)?;
        Ok((up - down) / (2.0 * h))
    })?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: index.len(),
        loss: bundle.total,
    };
    for (&(t, j), &n) in index.iter().zip(&numeric) {
        let a = analytic[t][j];
        let e = relative_error(a, n);
        if e > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = e;
            report.worst_param = params.names()[t].clone();
            report.worst_index = j;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
    }
}
