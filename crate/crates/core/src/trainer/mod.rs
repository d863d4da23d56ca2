//! Training loops for both stages and contrastive fine-tuning.
//!
//! Every step builds one graph per example (in parallel when enabled),
//! couples them through the in-batch contrastive term if the stage uses one,
//! back-propagates each graph, and sums the per-example gradients in index
//! order before a single Adam update. Masks and visibility matrices are drawn
//! afresh each step from streams keyed by `(seed, step, example)`.

pub mod checkpoint;

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, RngState};

use crate::corpus::{SentencePair, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::masking::{build_visibility, mask_for_decoder, mask_for_encoder, MaskedInput};
use crate::model::{
    decode_basic, decode_enhanced, encode, DecoderVariant, ModelConfig, ModelParams, ParamVars,
};
use crate::objectives::{
    combine_weighted, loss_contrastive, loss_contrastive_symmetric, loss_dec, loss_enc, LossBundle,
    LossWeights, Stage, DEFAULT_TEMPERATURE,
};
use crate::optim::{adam_step, AdamState};
use crate::parallel::Exec;
use crate::rng::{Purpose, SeedTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const ENC_RATIO_RANGE: (f64, f64) = (0.15, 0.30);
pub const DEC_RATIO_RANGE: (f64, f64) = (0.50, 0.70);

/// Where contrastive pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSourceKind {
    None,
    /// Two sentences from the same document.
    Article,
    /// Labelled pairs read from a file.
    File,
}

impl std::str::FromStr for PairSourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "article" => Ok(Self::Article),
            "file" => Ok(Self::File),
            other => Err(Error::Config(format!("unknown pair source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub enc_mask_ratio: f64,
    pub dec_mask_ratio: f64,
    /// Accept mask ratios outside the usual ranges.
    pub force_ratios: bool,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub temperature: f64,
    pub pair_source: PairSourceKind,
    /// Score both pair directions in the contrastive term.
    pub symmetric_ctr: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        let pair_source = match stage {
            Stage::Stage1 | Stage::Stage2Retromae => PairSourceKind::None,
            Stage::Stage2RetromaeCtr => PairSourceKind::Article,
            Stage::SupervisedCtrFinetune => PairSourceKind::File,
        };
        Self {
            stage,
            enc_mask_ratio: 0.3,
            dec_mask_ratio: 0.5,
            force_ratios: false,
            batch_size: 8,
            steps: 100,
            lr: DEFAULT_LR,
            warmup_steps: 0,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            pair_source,
            symmetric_ctr: false,
            clip_norm: None,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64, (lo, hi): (f64, f64)| {
            if self.force_ratios {
                r > 0.0 && r < 1.0
            } else {
                (lo - 1e-12..=hi + 1e-12).contains(&r)
            }
        };
        if !in_range(self.enc_mask_ratio, ENC_RATIO_RANGE) {
            return Err(Error::Config(format!(
                "enc_mask_ratio {} outside [{}, {}] (set force_ratios to override)",
                self.enc_mask_ratio, ENC_RATIO_RANGE.0, ENC_RATIO_RANGE.1
            )));
        }
        if !in_range(self.dec_mask_ratio, DEC_RATIO_RANGE) {
            return Err(Error::Config(format!(
                "dec_mask_ratio {} outside [{}, {}] (set force_ratios to override)",
                self.dec_mask_ratio, DEC_RATIO_RANGE.0, DEC_RATIO_RANGE.1
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage.uses_contrastive() && self.batch_size < 2 {
            return Err(Error::Config(
                "contrastive stages need batch_size >= 2 for in-batch negatives".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        let wants_pairs = self.stage.uses_contrastive();
        let has_pairs = self.pair_source != PairSourceKind::None;
        if wants_pairs != has_pairs {
            return Err(Error::Config(format!(
                "stage {} with pair source {:?}",
                self.stage.as_str(),
                self.pair_source
            )));
        }
        let w = self.weights;
        if [w.enc, w.dec, w.ctr].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(())
    }

    /// Learning rate at local step `t` (linear warmup, then constant).
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps > 0 && t < self.warmup_steps {
            self.lr * (t + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// One line of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_enc: Option<f64>,
    pub l_dec: Option<f64>,
    pub l_ctr: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    fn from_bundle(step: u64, stage: Stage, b: &LossBundle) -> Self {
        let rec = stage.uses_reconstruction();
        Self {
            step,
            l_enc: rec.then_some(b.l_enc),
            l_dec: rec.then_some(b.l_dec),
            l_ctr: b.l_ctr,
            total: b.total,
        }
    }
}

/// Execution knobs that do not change results.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub exec: Exec,
    /// Receives one JSON record per step.
    pub curve: Option<&'a mut dyn Write>,
}


#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Sequences a reconstruction loss can be computed on: at least one
/// maskable token.
fn trainable(seq: &TokenSequence) -> bool {
    !seq.maskable_positions().is_empty()
}

/// What one step trains on. Pair batches train on both sides of every pair
/// and couple them through the contrastive term.
pub enum Batch<'a> {
    Passages(Vec<&'a TokenSequence>),
    Pairs(Vec<&'a SentencePair>),
}

struct ExampleGraph {
    tape: Tape,
    pv: ParamVars,
    /// Per-example share of the reconstruction objective.
    loss: Option<Var>,
    embedding: Var,
    l_enc: f64,
    l_dec: f64,
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    params: &'a ModelParams,
    tree: SeedTree,
    step: u64,
    n_examples: usize,
}

impl StepContext<'_> {
    fn build(&self, item: usize, seq: &TokenSequence) -> Result<ExampleGraph> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape, true);
        let item_key = item as u64;
        if !self.cfg.stage.uses_reconstruction() {
            let out = encode(&mut tape, &pv, &MaskedInput::unmasked(seq), false)?;
            return Ok(ExampleGraph {
                tape,
                pv,
                loss: None,
                embedding: out.embedding.var,
                l_enc: 0.0,
                l_dec: 0.0,
            });
        }
        let mut enc_rng = self.tree.rng(Purpose::EncoderMask, self.step, item_key);
        let masked = mask_for_encoder(seq, self.cfg.enc_mask_ratio, &mut enc_rng)?;
        let out = encode(&mut tape, &pv, &masked, true)?;
        let logits = out.mlm_logits.expect("logits requested");
        let enc = loss_enc(&mut tape, logits, &masked.mlm_labels)?;
        let dec = match self.params.config().dec_variant {
            DecoderVariant::Enhanced => {
                let mut vis_rng = self.tree.rng(Purpose::Visibility, self.step, item_key);
                let vis = build_visibility(seq.len() - 1, self.cfg.dec_mask_ratio, &mut vis_rng)?;
                let dec_out = decode_enhanced(&mut tape, &pv, out.embedding, seq, &vis)?;
                loss_dec(&mut tape, dec_out.logits, seq, DecoderVariant::Enhanced, None)?
            }
            DecoderVariant::Basic => {
                let mut dec_rng = self.tree.rng(Purpose::DecoderMask, self.step, item_key);
                let dm = mask_for_decoder(seq, self.cfg.dec_mask_ratio, &mut dec_rng)?;
                let logits = decode_basic(&mut tape, &pv, out.embedding, &dm)?;
                loss_dec(&mut tape, logits, seq, DecoderVariant::Basic, Some(&dm))?
            }
        };
        let w = self.cfg.weights;
        let share = 1.0 / self.n_examples as f64;
        let a = tape.scale(enc.loss, w.enc * share);
        let b = tape.scale(dec.loss, w.dec * share);
        let loss = tape.add(a, b)?;
        Ok(ExampleGraph {
            l_enc: tape.value(enc.loss).item(),
            l_dec: tape.value(dec.loss).item(),
            tape,
            pv,
            loss: Some(loss),
            embedding: out.embedding.var,
        })
    }
}

/// In-batch contrastive term over per-example embeddings. Returns the loss
/// and the gradient of `w_ctr · loss` with respect to each embedding row.
fn contrastive_term(
    cfg: &TrainConfig,
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut a = Tensor::from_rows(anchors)?;
    a.set_requires_grad(true);
    let mut p = Tensor::from_rows(positives)?;
    p.set_requires_grad(true);
    let a = tape.leaf(a);
    let p = tape.leaf(p);
    let loss = if cfg.symmetric_ctr {
        loss_contrastive_symmetric(&mut tape, a, p, cfg.temperature)?
    } else {
        loss_contrastive(&mut tape, a, p, cfg.temperature)?
    };
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let rows = |v: Var, tape: &Tape| -> Vec<Vec<f64>> {
        let d = tape.value(v).cols();
        tape.grad(v)
            .expect("tracked leaf")
            .chunks(d)
            .map(|r| r.iter().map(|g| g * cfg.weights.ctr).collect())
            .collect()
    };
    Ok((value, rows(a, &tape), rows(p, &tape)))
}

fn diagnostics(params: &ModelParams) -> String {
    let mut worst = ("", 0.0f64);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let m = t.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if m > worst.1 || m.is_nan() {
            worst = (name, m);
        }
    }
    format!(
        "largest |weight| {} in `{}`; first non-finite parameter: {}",
        worst.1,
        worst.0,
        params.first_non_finite().unwrap_or("none")
    )
}

/// Shared optimisation loop.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    params: ModelParams,
    adam: AdamState,
    /// Global step of the first step in this run.
    start: u64,
}

impl Loop<'_> {
    fn run<'d>(
        mut self,
        mut sample: impl FnMut(&SeedTree, u64) -> Result<Batch<'d>>,
        opts: &mut RunOptions<'_>,
    ) -> Result<(ModelParams, AdamState, Vec<LossRecord>)> {
        let cfg = self.cfg;
        let tree = SeedTree::new(cfg.seed);
        let mut curve = Vec::with_capacity(cfg.steps as usize);
        let names: Vec<String> = self.params.names().to_vec();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        for t in 0..cfg.steps {
            let step = self.start + t;
            let batch = sample(&tree, step)?;
            let (bundle, mut grads) = batch_gradients(cfg, &self.params, &batch, step, opts.exec)?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(
                self.params.tensors_mut(),
                &name_refs,
                &grads,
                &mut self.adam,
                Some(cfg.lr_at(t)),
            )?;
            if let Some(name) = self.params.first_non_finite() {
                return Err(Error::NonFiniteParam {
                    name: name.to_string(),
                    step,
                });
            }

            let record = LossRecord::from_bundle(step, cfg.stage, &bundle);
            if let Some(w) = opts.curve.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("<loss curve>", e))?;
            }
            log::debug!("step {step} total {:.6}", record.total);
            curve.push(record);
        }
        Ok((self.params, self.adam, curve))
    }
}

/// Losses and summed parameter gradients for one batch at global `step`.
///
/// Masks and visibility matrices are drawn from `(cfg.seed, step, example)`,
/// so the result is a deterministic function of its arguments.
pub fn batch_gradients(
    cfg: &TrainConfig,
    params: &ModelParams,
    batch: &Batch<'_>,
    step: u64,
    exec: Exec,
) -> Result<(LossBundle, Vec<Vec<f64>>)> {
    let seqs: Vec<&TokenSequence> = match batch {
        Batch::Passages(p) => p.clone(),
        Batch::Pairs(p) => p.iter().flat_map(|pair| [&pair.a, &pair.b]).collect(),
    };
    if seqs.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let wants_pairs = cfg.stage.uses_contrastive();
    if wants_pairs != matches!(batch, Batch::Pairs(_)) {
        return Err(Error::Contract(format!(
            "stage {} given the wrong kind of batch",
            cfg.stage.as_str()
        )));
    }
    let ctx = StepContext {
        cfg,
        params,
        tree: SeedTree::new(cfg.seed),
        step,
        n_examples: seqs.len(),
    };
    let graphs = exec.try_map(seqs.len(), |i| ctx.build(i, seqs[i]))?;

    let n = graphs.len() as f64;
    let l_enc = graphs.iter().map(|g| g.l_enc).sum::<f64>() / n;
    let l_dec = graphs.iter().map(|g| g.l_dec).sum::<f64>() / n;
    let mut seeds: Vec<Option<Vec<f64>>> = vec![None; graphs.len()];
    let l_ctr = if wants_pairs {
        let emb = |g: &ExampleGraph| g.tape.value(g.embedding).data().to_vec();
        let anchors: Vec<Vec<f64>> = graphs.iter().step_by(2).map(emb).collect();
        let positives: Vec<Vec<f64>> = graphs.iter().skip(1).step_by(2).map(emb).collect();
        let (value, ga, gp) = contrastive_term(cfg, &anchors, &positives)?;
        for (k, (a, p)) in ga.into_iter().zip(gp).enumerate() {
            seeds[2 * k] = Some(a);
            seeds[2 * k + 1] = Some(p);
        }
        Some(value)
    } else {
        None
    };
    let rec = cfg.stage.uses_reconstruction();
    if ![l_enc, l_dec, l_ctr.unwrap_or(0.0)].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!(
                "l_enc={l_enc} l_dec={l_dec} l_ctr={l_ctr:?}; {}",
                diagnostics(params)
            ),
        });
    }
    let bundle = combine_weighted(
        rec.then_some(l_enc),
        rec.then_some(l_dec),
        l_ctr,
        cfg.stage,
        cfg.weights,
        wants_pairs.then_some(cfg.temperature),
    )?;

    let work: Vec<(ExampleGraph, Option<Vec<f64>>)> = graphs.into_iter().zip(seeds).collect();
    let per_example = exec.map_vec(work, |_, (mut g, emb_seed)| -> Result<Vec<Vec<f64>>> {
        let mut s = Vec::with_capacity(2);
        if let Some(l) = g.loss {
            s.push((l, vec![1.0]));
        }
        if let Some(e) = emb_seed {
            s.push((g.embedding, e));
        }
        g.tape.backward_seeded(&s)?;
        Ok(g.pv.grads(&g.tape))
    });
    let mut grads: Vec<Vec<f64>> = params.sizes().iter().map(|&n| vec![0.0; n]).collect();
    for ex in per_example {
        for (acc, g) in grads.iter_mut().zip(ex?) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((bundle, grads))
}

fn sample_indices(tree: &SeedTree, step: u64, n: usize, b: usize) -> Vec<usize> {
    let mut rng = tree.rng(Purpose::Batch, step, 0);
    index::sample(&mut rng, n, b).into_vec()
}

fn check_batch(cfg: &TrainConfig, available: usize, what: &str) -> Result<()> {
    if available == 0 {
        return Err(Error::DegenerateInput(format!("no usable {what}")));
    }
    if cfg.batch_size > available {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {available} usable {what}",
            cfg.batch_size
        )));
    }
    Ok(())
}

fn check_vocab(base: &Vocab, data: &Vocab) -> Result<()> {
    if base == data {
        return Ok(());
    }
    let diff = base
        .tokens()
        .iter()
        .zip(data.tokens())
        .position(|(a, b)| a != b)
        .unwrap_or(base.len().min(data.len()));
    Err(Error::Compatibility {
        field: "vocab".into(),
        found: format!("{} tokens (first difference at id {diff})", data.len()),
        expected: format!("{} tokens as in the base checkpoint", base.len()),
    })
}

fn usable_passages(corpus: &[TokenSequence]) -> Vec<&TokenSequence> {
    let kept: Vec<&TokenSequence> = corpus.iter().filter(|s| trainable(s)).collect();
    if kept.len() < corpus.len() {
        log::warn!(
            "skipping {} sequences without maskable tokens",
            corpus.len() - kept.len()
        );
    }
    kept
}

fn passages_loop(
    cfg: &TrainConfig,
    passages: Vec<&TokenSequence>,
    params: ModelParams,
    adam: AdamState,
    start: u64,
    opts: &mut RunOptions<'_>,
) -> Result<(ModelParams, AdamState, Vec<LossRecord>)> {
    check_batch(cfg, passages.len(), "passages")?;
    let b = cfg.batch_size;
    Loop { cfg, params, adam, start }.run(
        |tree, step| {
            let idx = sample_indices(tree, step, passages.len(), b);
            Ok(Batch::Passages(idx.into_iter().map(|i| passages[i]).collect()))
        },
        opts,
    )
}

fn pairs_loop(
    cfg: &TrainConfig,
    pairs: Vec<&SentencePair>,
    params: ModelParams,
    adam: AdamState,
    start: u64,
    opts: &mut RunOptions<'_>,
) -> Result<(ModelParams, AdamState, Vec<LossRecord>)> {
    check_batch(cfg, pairs.len(), "pairs")?;
    let b = cfg.batch_size;
    Loop { cfg, params, adam, start }.run(
        |tree, step| {
            let idx = sample_indices(tree, step, pairs.len(), b);
            Ok(Batch::Pairs(idx.into_iter().map(|i| pairs[i]).collect()))
        },
        opts,
    )
}

fn finish(
    cfg: &TrainConfig,
    params: ModelParams,
    adam: AdamState,
    vocab: Vocab,
    step: u64,
    lineage: Vec<String>,
    curve: Vec<LossRecord>,
) -> TrainOutcome {
    TrainOutcome {
        checkpoint: Checkpoint {
            params,
            vocab,
            optimizer: Some(adam),
            step,
            rng: RngState {
                seed: cfg.seed,
                step,
            },
            train_config: Some(cfg.clone()),
            lineage,
        },
        curve,
    }
}

/// Stage 1: masked-autoencoder pre-training from random initialisation.
pub fn train_stage1(
    cfg: &TrainConfig,
    model: &ModelConfig,
    corpus: &[TokenSequence],
    vocab: &Vocab,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Stage1 {
        return Err(Error::Config(format!(
            "train_stage1 called with stage {}",
            cfg.stage.as_str()
        )));
    }
    cfg.validate()?;
    if model.vocab_size != vocab.len() {
        return Err(Error::Compatibility {
            field: "vocab_size".into(),
            found: model.vocab_size.to_string(),
            expected: vocab.len().to_string(),
        });
    }
    let tree = SeedTree::new(cfg.seed);
    let params = ModelParams::init(model, &mut tree.rng(Purpose::Init, 0, 0))?;
    let adam = AdamState::with_lr(&params.sizes(), cfg.lr)?;
    let (params, adam, curve) =
        passages_loop(cfg, usable_passages(corpus), params, adam, 0, &mut opts)?;
    Ok(finish(cfg, params, adam, vocab.clone(), cfg.steps, Vec::new(), curve))
}

/// Domain data for stage 2. Reconstruction-only training reads `passages`;
/// the contrastive mode trains on both sides of each pair instead.
#[derive(Debug, Clone, Default)]
pub struct DomainData {
    pub passages: Vec<TokenSequence>,
    pub pairs: Vec<SentencePair>,
}

fn lineage_of(base: &Checkpoint) -> Result<Vec<String>> {
    let mut lineage = base.lineage.clone();
    lineage.push(base.id()?);
    Ok(lineage)
}

/// Stage 2: continued pre-training from `base`, optionally with the
/// in-batch contrastive term. Adam restarts from zero moments.
pub fn train_stage2(
    cfg: &TrainConfig,
    base: &Checkpoint,
    data: &DomainData,
    vocab: &Vocab,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    if !matches!(cfg.stage, Stage::Stage2Retromae | Stage::Stage2RetromaeCtr) {
        return Err(Error::Config(format!(
            "train_stage2 called with stage {}",
            cfg.stage.as_str()
        )));
    }
    cfg.validate()?;
    check_vocab(&base.vocab, vocab)?;
    let params = base.params.clone();
    let adam = AdamState::with_lr(&params.sizes(), cfg.lr)?;
    let (params, adam, curve) = if cfg.stage == Stage::Stage2Retromae {
        passages_loop(cfg, usable_passages(&data.passages), params, adam, base.step, &mut opts)?
    } else {
        let pairs: Vec<&SentencePair> = data
            .pairs
            .iter()
            .filter(|p| trainable(&p.a) && trainable(&p.b))
            .collect();
        pairs_loop(cfg, pairs, params, adam, base.step, &mut opts)?
    };
    Ok(finish(
        cfg,
        params,
        adam,
        base.vocab.clone(),
        base.step + cfg.steps,
        lineage_of(base)?,
        curve,
    ))
}

/// Contrastive-only fine-tuning on labelled pairs, unmasked inputs.
pub fn finetune_supervised_ctr(
    cfg: &TrainConfig,
    base: &Checkpoint,
    pairs: &[SentencePair],
    vocab: &Vocab,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::SupervisedCtrFinetune {
        return Err(Error::Config(format!(
            "finetune_supervised_ctr called with stage {}",
            cfg.stage.as_str()
        )));
    }
    cfg.validate()?;
    check_vocab(&base.vocab, vocab)?;
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("no labelled pairs".into()));
    }
    let params = base.params.clone();
    let adam = AdamState::with_lr(&params.sizes(), cfg.lr)?;
    let (params, adam, curve) =
        pairs_loop(cfg, pairs.iter().collect(), params, adam, base.step, &mut opts)?;
    Ok(finish(
        cfg,
        params,
        adam,
        base.vocab.clone(),
        base.step + cfg.steps,
        lineage_of(base)?,
        curve,
    ))
}
