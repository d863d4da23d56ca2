mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Masked-autoencoder sentence-embedding pre-training and evaluation.
///
/// Options other than paths may also come from `--config <file>` as
/// `key = value` lines; command-line flags take precedence over the file,
/// which takes precedence over built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "retromae", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: `$RETROMAE_DATA_DIR/runs/<command>-<time>-seed<seed>`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Disable the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// `enhanced` or `basic`.
    #[arg(long)]
    pub decoder: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub enc_mask_ratio: Option<f64>,
    #[arg(long)]
    pub dec_mask_ratio: Option<f64>,
    /// Accept mask ratios outside the usual ranges.
    #[arg(long)]
    pub force_ratios: bool,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Score both pair directions in the contrastive loss.
    #[arg(long)]
    pub symmetric_ctr: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary file from a sentence corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        min_freq: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-1 pre-training on a generic sentence corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; built from the corpus when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-2 continued pre-training from a base checkpoint.
    ContinuePretrain {
        #[arg(long)]
        base: PathBuf,
        /// `retromae` or `retromae-ctr`.
        #[arg(long)]
        mode: String,
        /// `article` or `file`; used by `retromae-ctr`.
        #[arg(long)]
        pairs: Option<String>,
        /// One sentence per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `{"text": ...}` per line.
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long)]
        pair_file: Option<PathBuf>,
        /// `two-column` or `record`.
        #[arg(long)]
        pair_format: Option<String>,
        /// Passes of same-article pair sampling over the documents.
        #[arg(long)]
        pair_rounds: Option<usize>,
        /// Must match the base checkpoint's vocabulary when given.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive-only fine-tuning on labelled pairs.
    FinetuneCtr {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pair_file: PathBuf,
        #[arg(long)]
        pair_format: Option<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Write unit-normalised sentence embeddings.
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// One sentence per line.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dense retrieval with MRR@k / Recall@k / NDCG@10.
    EvalRetrieval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// Comma-separated cutoffs.
        #[arg(long)]
        ks: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Spearman correlation of embedding cosine with gold similarity.
    EvalSts {
        #[arg(long)]
        model: PathBuf,
        /// `a<TAB>b<TAB>score` lines.
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a base and a stage-2 checkpoint on both fixture domains.
    EvalTwoDomain {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        fixture: PathBuf,
        /// Domain the stage-2 model was trained on.
        #[arg(long)]
        in_domain: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check on a small model.
    Gradcheck {
        #[arg(long = "d")]
        d: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic two-domain corpus.
    MakeFixture {
        #[arg(long)]
        generic_sentences: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        docs_per_topic: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e:#}", commands::category(&e));
            ExitCode::from(1)
        }
    }
}
