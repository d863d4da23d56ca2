//! Reconstruction and contrastive losses, and their per-stage combination.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::masking::{MaskedInput, IGNORE};
use crate::model::DecoderVariant;
use crate::tape::{CrossEntropy, Tape, Var};

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Which losses a training stage optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Generic-corpus pre-training: `L_enc + L_dec`.
    Stage1,
    /// Continued pre-training on domain text: `L_enc + L_dec`.
    Stage2Retromae,
    /// Continued pre-training plus in-batch contrastive: `L_enc + L_dec + L_ctr`.
    Stage2RetromaeCtr,
    /// Contrastive fine-tuning on labelled pairs: `L_ctr`.
    SupervisedCtrFinetune,
}

impl Stage {
    pub fn uses_reconstruction(self) -> bool {
        !matches!(self, Stage::SupervisedCtrFinetune)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Stage::Stage2RetromaeCtr | Stage::SupervisedCtrFinetune)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2Retromae => "stage2_retromae",
            Stage::Stage2RetromaeCtr => "stage2_retromae_ctr",
            Stage::SupervisedCtrFinetune => "supervised_ctr_finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "stage1" => Ok(Stage::Stage1),
            "stage2_retromae" | "retromae" => Ok(Stage::Stage2Retromae),
            "stage2_retromae_ctr" | "retromae_ctr" => Ok(Stage::Stage2RetromaeCtr),
            "supervised_ctr_finetune" | "finetune_ctr" => Ok(Stage::SupervisedCtrFinetune),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Per-component weights; all 1.0 reproduces the plain sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enc: f64,
    pub dec: f64,
    pub ctr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            enc: 1.0,
            dec: 1.0,
            ctr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_enc: f64,
    pub l_dec: f64,
    pub l_ctr: Option<f64>,
    pub total: f64,
    pub temperature: Option<f64>,
}

/// Encoder MLM loss: mean cross-entropy over the encoder-masked positions.
pub fn loss_enc(tape: &mut Tape, mlm_logits: Var, mlm_labels: &[usize]) -> Result<CrossEntropy> {
    let ce = tape.cross_entropy(mlm_logits, mlm_labels, IGNORE)?;
    if ce.all_ignored() {
        log::warn!("encoder loss over zero masked positions");
    }
    Ok(ce)
}

/// Reconstruction targets for the decoder loss.
///
/// Basic decoding scores only the decoder-masked positions; enhanced decoding
/// scores every real token (positions `1..len-1`, i.e. not `[CLS]`/`[SEP]`).
pub fn decoder_targets(
    seq: &TokenSequence,
    variant: DecoderVariant,
    dec_masked: Option<&MaskedInput>,
) -> Result<Vec<usize>> {
    match (variant, dec_masked) {
        (DecoderVariant::Basic, Some(m)) => {
            if m.mlm_labels.len() != seq.len() {
                return Err(Error::Contract(format!(
                    "decoder mask of length {} for a sequence of length {}",
                    m.mlm_labels.len(),
                    seq.len()
                )));
            }
            Ok(m.mlm_labels.clone())
        }
        (DecoderVariant::Basic, None) => Err(Error::Contract(
            "basic decoding loss needs the decoder mask".into(),
        )),
        (DecoderVariant::Enhanced, _) => {
            let mut t = vec![IGNORE; seq.len()];
            for i in seq.real_positions() {
                t[i] = seq.ids()[i];
            }
            Ok(t)
        }
    }
}

/// Decoder reconstruction loss (mean over scored positions).
pub fn loss_dec(
    tape: &mut Tape,
    dec_logits: Var,
    seq: &TokenSequence,
    variant: DecoderVariant,
    dec_masked: Option<&MaskedInput>,
) -> Result<CrossEntropy> {
    let rows = tape.value(dec_logits).rows();
    if rows != seq.len() {
        return Err(Error::Contract(format!(
            "{rows} decoder logit rows for a sequence of length {}",
            seq.len()
        )));
    }
    let targets = decoder_targets(seq, variant, dec_masked)?;
    let ce = tape.cross_entropy(dec_logits, &targets, IGNORE)?;
    if ce.all_ignored() {
        log::warn!("decoder loss over zero positions");
    }
    Ok(ce)
}

/// In-batch-negative InfoNCE over cosine similarities.
///
/// Row `i` of `anchors` is scored against every row of `positives`; its own
/// positive sits on the diagonal and the other rows act as negatives. The
/// positive is part of the softmax denominator. Returns the mean over rows.
pub fn loss_contrastive(tape: &mut Tape, anchors: Var, positives: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(anchors).rows();
    if b < 2 {
        return Err(Error::Contract(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if tape.value(positives).rows() != b || tape.value(positives).cols() != tape.value(anchors).cols() {
        return Err(Error::Shape(format!(
            "anchors {:?} vs positives {:?}",
            tape.value(anchors).shape(),
            tape.value(positives).shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let a = tape.l2_normalize_rows(anchors)?;
    let p = tape.l2_normalize_rows(positives)?;
    let sim = tape.matmul_bt(a, p)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    Ok(tape.cross_entropy(logits, &targets, IGNORE)?.loss)
}

/// Average of both matching directions (anchor→positive, positive→anchor).
pub fn loss_contrastive_symmetric(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    temperature: f64,
) -> Result<Var> {
    let forward = loss_contrastive(tape, anchors, positives, temperature)?;
    let backward = loss_contrastive(tape, positives, anchors, temperature)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

fn check_component(name: &str, v: Option<f64>) -> Result<f64> {
    match v {
        Some(x) if x.is_finite() && x >= 0.0 => Ok(x),
        Some(x) => Err(Error::Contract(format!("{name} = {x} is not a finite non-negative loss"))),
        None => Ok(0.0),
    }
}

/// Combines components with unit weights.
pub fn combine_stage(
    l_enc: Option<f64>,
    l_dec: Option<f64>,
    l_ctr: Option<f64>,
    stage: Stage,
) -> Result<LossBundle> {
    combine_weighted(l_enc, l_dec, l_ctr, stage, LossWeights::default(), None)
}

/// Combines components for `stage`; exactly the components the stage uses
/// must be present.
pub fn combine_weighted(
    l_enc: Option<f64>,
    l_dec: Option<f64>,
    l_ctr: Option<f64>,
    stage: Stage,
    weights: LossWeights,
    temperature: Option<f64>,
) -> Result<LossBundle> {
    let want_rec = stage.uses_reconstruction();
    let want_ctr = stage.uses_contrastive();
    if l_enc.is_some() != want_rec || l_dec.is_some() != want_rec || l_ctr.is_some() != want_ctr {
        return Err(Error::Contract(format!(
            "stage {} got enc={} dec={} ctr={}",
            stage.as_str(),
            l_enc.is_some(),
            l_dec.is_some(),
            l_ctr.is_some()
        )));
    }
    let e = check_component("l_enc", l_enc)?;
    let d = check_component("l_dec", l_dec)?;
    let c = check_component("l_ctr", l_ctr)?;
    let mut total = 0.0;
    if want_rec {
        total += weights.enc * e + weights.dec * d;
    }
    if want_ctr {
        total += weights.ctr * c;
    }
    Ok(LossBundle {
        l_enc: e,
        l_dec: d,
        l_ctr,
        total,
        temperature: if want_ctr { temperature } else { None },
    })
}
