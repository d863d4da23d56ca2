use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use retromae::corpus::{
    build_vocab, count_tokens, encode_sentence, make_article_pairs, read_documents, read_pairs,
    read_sentences, split_sentences, vocab_from_counts, PairFormat, PairSource, SentencePair,
    TextPair, TokenSequence, Vocab, DEFAULT_MAX_LEN,
};
use retromae::eval::{
    compute_metrics, eval_sts, eval_two_domain, read_sts, retrieve, Judgments, RetrievalRun,
};
use retromae::fixture::{generate, paraphrase_pairs, sts_items, FixtureConfig, TextRecord, TwoDomainFixture};
use retromae::gradcheck::{gradcheck, GradcheckConfig};
use retromae::model::{embed_sentences, DecoderVariant, ModelConfig};
use retromae::objectives::Stage;
use retromae::rng::{Purpose, SeedTree};
use retromae::trainer::{
    finetune_supervised_ctr, load_checkpoint, save_checkpoint, train_stage1, train_stage2,
    Checkpoint, DomainData, PairSourceKind, RunOptions, TrainConfig, TrainOutcome,
};
use retromae::{Error, Exec};

use crate::manifest::{resolve_input, run_dir, unix_now, RunManifest};
use crate::settings::Settings;
use crate::{Command, Common, ModelArgs, TrainArgs};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const DEFAULT_VOCAB_SIZE: usize = 30_000;
const FIXTURE_PAIRS: usize = 200;
const FIXTURE_STS: usize = 100;

/// Short tag printed in `error [tag]: ...` lines.
pub fn category(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<Error>() {
        Some(Error::Shape(_)) => "shape",
        Some(Error::DegenerateRow { .. }) => "degenerate_row",
        Some(Error::Index(_)) => "index",
        Some(Error::PoisonedGradient { .. }) => "poisoned_gradient",
        Some(Error::Config(_)) => "config",
        Some(Error::Io { .. }) => "io",
        Some(Error::Format(_)) => "format",
        Some(Error::DegenerateInput(_)) => "degenerate_input",
        Some(Error::Contract(_)) => "contract",
        Some(Error::Corrupt { .. }) => "corrupt",
        Some(Error::Compatibility { .. }) => "compatibility",
        Some(Error::NonFiniteLoss { .. }) => "non_finite_loss",
        Some(Error::NonFiniteParam { .. }) => "non_finite_param",
        Some(Error::UndefinedCorrelation(_)) => "undefined_correlation",
        Some(Error::Fixture(_)) => "fixture",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "usage",
    }
}

/// Per-run state: resolved settings, output directory and manifest.
struct Run {
    settings: Settings,
    seed: u64,
    exec: Exec,
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, common: &Common) -> Result<Self> {
        let started = unix_now();
        let mut settings = Settings::load(common.config.as_deref())?;
        let seed = settings.get("seed", common.seed, 0u64)?;
        let sequential = settings.switch("sequential", common.sequential)?;
        let dir = run_dir(common.out_dir.as_deref(), command, seed)?;
        let mut manifest = RunManifest::new(command, seed, started);
        if let Some(c) = &common.config {
            manifest.input(c)?;
        }
        Ok(Self {
            settings,
            seed,
            exec: if sequential { Exec::Sequential } else { Exec::Parallel },
            dir,
            manifest,
        })
    }

    fn input(&mut self, p: &Path) -> Result<PathBuf> {
        let p = resolve_input(p);
        self.manifest.input(&p)?;
        Ok(p)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.manifest.output(&p);
        p
    }

    fn finish(mut self) -> Result<()> {
        self.settings.finish()?;
        self.manifest.config = self.settings.resolved().clone();
        let path = self.manifest.write(&self.dir)?;
        log::info!("wrote {}", path.display());
        println!("{}", self.dir.display());
        Ok(())
    }
}

fn model_config(m: &ModelArgs, s: &mut Settings, vocab_size: usize) -> Result<ModelConfig> {
    let d = s.get("d-model", m.d_model, 32usize)?;
    let heads = s.get("heads", m.heads, 4usize)?;
    let layers = s.get("layers", m.layers, 2usize)?;
    let d_ff = s.get("d-ff", m.d_ff, 4 * d)?;
    let max_len = s.get("max-len", m.max_len, DEFAULT_MAX_LEN)?;
    let decoder: DecoderVariant = s.get("decoder", m.decoder.clone(), "enhanced".to_string())?.parse()?;
    let cfg = ModelConfig {
        d_ff,
        max_len,
        dec_variant: decoder,
        ..ModelConfig::new(vocab_size, d, heads, layers)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(stage: Stage, t: &TrainArgs, s: &mut Settings, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::new(stage);
    let cfg = TrainConfig {
        steps: s.get("steps", t.steps, d.steps)?,
        batch_size: s.get("batch-size", t.batch_size, d.batch_size)?,
        lr: s.get("lr", t.lr, d.lr)?,
        warmup_steps: s.get("warmup-steps", t.warmup_steps, d.warmup_steps)?,
        enc_mask_ratio: s.get("enc-mask-ratio", t.enc_mask_ratio, d.enc_mask_ratio)?,
        dec_mask_ratio: s.get("dec-mask-ratio", t.dec_mask_ratio, d.dec_mask_ratio)?,
        force_ratios: s.switch("force-ratios", t.force_ratios)?,
        clip_norm: s.get_opt("clip-norm", t.clip_norm)?,
        temperature: s.get("temperature", t.temperature, d.temperature)?,
        symmetric_ctr: s.switch("symmetric-ctr", t.symmetric_ctr)?,
        seed,
        ..d
    };
    Ok(cfg)
}

fn train_with_curve(
    run: &mut Run,
    f: impl FnOnce(RunOptions<'_>) -> retromae::Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    let curve_path = run.output("loss_curve.jsonl");
    let file = File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?;
    let mut w = BufWriter::new(file);
    let outcome = f(RunOptions {
        exec: run.exec,
        curve: Some(&mut w),
    })?;
    w.flush()?;
    Ok(outcome)
}

fn save_outcome(run: &mut Run, outcome: &TrainOutcome) -> Result<()> {
    let path = run.output("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &path)?;
    let vocab_path = run.output("vocab.txt");
    outcome.checkpoint.vocab.write(&vocab_path)?;
    if let Some(last) = outcome.curve.last() {
        log::info!("final loss {:.6} at step {}", last.total, last.step);
    }
    Ok(())
}

fn load_model(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let path = run.input(path)?;
    load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

/// `--vocab` must match the checkpoint's vocabulary when given.
fn resolve_vocab(run: &mut Run, flag: Option<&Path>, ckpt: &Checkpoint) -> Result<Vocab> {
    match flag {
        Some(p) => {
            let p = run.input(p)?;
            Ok(Vocab::read(p)?)
        }
        None => Ok(ckpt.vocab.clone()),
    }
}

fn encode_all(texts: &[String], vocab: &Vocab, max_len: usize) -> Vec<TokenSequence> {
    texts.iter().map(|t| encode_sentence(t, vocab, max_len)).collect()
}

fn read_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| anyhow!(Error::Format(format!("{}:{}: {e}", path.display(), n + 1))))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|k| k.trim().parse::<usize>().map_err(|e| anyhow!("bad cutoff `{k}`: {e}")))
        .collect()
}

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::BuildVocab { corpus, max_size, min_freq, common } => {
            let mut run = Run::start("build-vocab", &common)?;
            let corpus = run.input(&corpus)?;
            let max_size = run.settings.get("max-size", max_size, DEFAULT_VOCAB_SIZE)?;
            let min_freq = run.settings.get("min-freq", min_freq, 1u64)?;
            let vocab = build_vocab(&corpus, max_size, min_freq)?;
            let out = run.output("vocab.txt");
            vocab.write(&out)?;
            log::info!("vocabulary of {} entries", vocab.len());
            run.finish()?;
        }
        Command::Pretrain { corpus, vocab, model, train, common } => {
            let mut run = Run::start("pretrain", &common)?;
            let corpus = run.input(&corpus)?;
            let sentences = read_sentences(&corpus)?;
            let vocab = match vocab {
                Some(p) => {
                    let p = run.input(&p)?;
                    Vocab::read(p)?
                }
                None => {
                    let max_size = run.settings.get("max-size", None, DEFAULT_VOCAB_SIZE)?;
                    let min_freq = run.settings.get("min-freq", None, 1u64)?;
                    vocab_from_counts(&count_tokens(&sentences), max_size, min_freq)?
                }
            };
            let mcfg = model_config(&model, &mut run.settings, vocab.len())?;
            let tcfg = train_config(Stage::Stage1, &train, &mut run.settings, run.seed)?;
            let seqs = encode_all(&sentences, &vocab, mcfg.max_len);
            let outcome = train_with_curve(&mut run, |opts| train_stage1(&tcfg, &mcfg, &seqs, &vocab, opts))?;
            save_outcome(&mut run, &outcome)?;
            run.finish()?;
        }
        Command::ContinuePretrain {
            base,
            mode,
            pairs,
            corpus,
            documents,
            pair_file,
            pair_format,
            pair_rounds,
            vocab,
            train,
            common,
        } => {
            let mut run = Run::start("continue-pretrain", &common)?;
            let stage: Stage = mode.parse()?;
            if !matches!(stage, Stage::Stage2Retromae | Stage::Stage2RetromaeCtr) {
                bail!(Error::Config(format!("--mode must be retromae or retromae-ctr, not `{mode}`")));
            }
            let base = load_model(&mut run, &base)?;
            let vocab = resolve_vocab(&mut run, vocab.as_deref(), &base)?;
            let max_len = base.params.config().max_len;
            let mut tcfg = train_config(stage, &train, &mut run.settings, run.seed)?;
            let default_source = match stage {
                Stage::Stage2RetromaeCtr => "article",
                _ => "none",
            };
            tcfg.pair_source = run.settings.get("pairs", pairs, default_source.to_string())?.parse()?;

            let sentences = match (&corpus, &documents) {
                (Some(_), Some(_)) => bail!(Error::Config("give --corpus or --documents, not both".into())),
                (Some(c), None) => Some(read_sentences(run.input(c)?)?),
                (None, Some(d)) => {
                    let docs = read_documents(run.input(d)?)?;
                    Some(docs.iter().flat_map(|t| split_sentences(t)).collect::<Vec<_>>())
                }
                (None, None) => None,
            };
            let mut data = DomainData::default();
            match tcfg.pair_source {
                PairSourceKind::None => {
                    let s = sentences
                        .ok_or_else(|| Error::Config("retromae mode needs --corpus or --documents".into()))?;
                    data.passages = encode_all(&s, &vocab, max_len);
                }
                PairSourceKind::Article => {
                    let d = documents
                        .as_ref()
                        .ok_or_else(|| Error::Config("--pairs article needs --documents".into()))?;
                    let docs = read_documents(resolve_input(d))?;
                    let rounds = run.settings.get("pair-rounds", pair_rounds, 1usize)?;
                    let tree = SeedTree::new(run.seed);
                    for r in 0..rounds {
                        let mut rng = tree.rng(Purpose::Pairs, r as u64, 0);
                        data.pairs.extend(make_article_pairs(docs.iter().cloned(), &mut rng).map(|p| {
                            SentencePair::encode(&TextPair { a: p.a, b: p.b }, PairSource::SameArticle, &vocab, max_len)
                        }));
                    }
                }
                PairSourceKind::File => {
                    let f = pair_file
                        .as_ref()
                        .ok_or_else(|| Error::Config("--pairs file needs --pair-file".into()))?;
                    let f = run.input(f)?;
                    let fmt: PairFormat = run
                        .settings
                        .get("pair-format", pair_format, "two-column".to_string())?
                        .parse()?;
                    let (raw, _) = read_pairs(&f, fmt)?;
                    data.pairs = raw
                        .iter()
                        .map(|p| SentencePair::encode(p, PairSource::NliPair, &vocab, max_len))
                        .collect();
                }
            }
            let outcome = train_with_curve(&mut run, |opts| train_stage2(&tcfg, &base, &data, &vocab, opts))?;
            save_outcome(&mut run, &outcome)?;
            run.finish()?;
        }
        Command::FinetuneCtr { base, pair_file, pair_format, vocab, train, common } => {
            let mut run = Run::start("finetune-ctr", &common)?;
            let base = load_model(&mut run, &base)?;
            let vocab = resolve_vocab(&mut run, vocab.as_deref(), &base)?;
            let max_len = base.params.config().max_len;
            let tcfg = train_config(Stage::SupervisedCtrFinetune, &train, &mut run.settings, run.seed)?;
            let f = run.input(&pair_file)?;
            let fmt: PairFormat = run
                .settings
                .get("pair-format", pair_format, "two-column".to_string())?
                .parse()?;
            let (raw, _) = read_pairs(&f, fmt)?;
            let pairs: Vec<SentencePair> = raw
                .iter()
                .map(|p| SentencePair::encode(p, PairSource::NliPair, &vocab, max_len))
                .collect();
            let outcome =
                train_with_curve(&mut run, |opts| finetune_supervised_ctr(&tcfg, &base, &pairs, &vocab, opts))?;
            save_outcome(&mut run, &outcome)?;
            run.finish()?;
        }
        Command::Embed { model, input, common } => {
            let mut run = Run::start("embed", &common)?;
            let ckpt = load_model(&mut run, &model)?;
            let input = run.input(&input)?;
            let texts = read_sentences(&input)?;
            let emb = embed_sentences(&texts, &ckpt.params, &ckpt.vocab, run.exec)?;
            let out = run.output("embeddings.jsonl");
            let mut w = BufWriter::new(File::create(&out)?);
            for (i, t) in texts.iter().enumerate() {
                let v = serde_json::json!({"index": i, "text": t, "embedding": emb.row(i)});
                writeln!(w, "{v}")?;
            }
            w.flush()?;
            run.finish()?;
        }
        Command::EvalRetrieval { model, docs, queries, judgments, ks, common } => {
            let mut run = Run::start("eval-retrieval", &common)?;
            let ckpt = load_model(&mut run, &model)?;
            let docs = read_text_records(&run.input(&docs)?)?;
            let queries = read_text_records(&run.input(&queries)?)?;
            let judgments = Judgments::read_jsonl(run.input(&judgments)?)?;
            let ks = parse_ks(&run.settings.get("ks", ks, "1,5,10".to_string())?)?;
            let doc_text: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let query_text: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
            let d = embed_sentences(&doc_text, &ckpt.params, &ckpt.vocab, run.exec)?;
            let q = embed_sentences(&query_text, &ckpt.params, &ckpt.vocab, run.exec)?;
            let depth = ks.iter().copied().chain([10]).max().unwrap_or(10).min(d.rows());
            let ranked = retrieve(&q, &d, depth, run.exec)?;
            let doc_ids: Vec<String> = docs.into_iter().map(|r| r.id).collect();
            let query_ids: Vec<String> = queries.into_iter().map(|r| r.id).collect();
            let result = RetrievalRun::from_indices(&query_ids, &doc_ids, &ranked)?;
            let metrics = compute_metrics(&result, &judgments, &ks)?;
            let out = run.output("run.jsonl");
            let mut w = BufWriter::new(File::create(&out)?);
            for (qid, list) in result.query_ids.iter().zip(&result.ranked) {
                writeln!(w, "{}", serde_json::json!({"query_id": qid, "ranked": list}))?;
            }
            w.flush()?;
            write_json(&run.output("metrics.json"), &metrics)?;
            for (k, v) in &metrics.mrr {
                println!("mrr@{k}\t{v:.4}");
            }
            for (k, v) in &metrics.recall {
                println!("recall@{k}\t{v:.4}");
            }
            println!("ndcg@10\t{:.4}", metrics.ndcg_at_10);
            run.finish()?;
        }
        Command::EvalSts { model, pairs, common } => {
            let mut run = Run::start("eval-sts", &common)?;
            let ckpt = load_model(&mut run, &model)?;
            let items = read_sts(run.input(&pairs)?)?;
            let (records, rho) = eval_sts(&items, &ckpt.params, &ckpt.vocab, run.exec)?;
            let out = run.output("sts.jsonl");
            let mut w = BufWriter::new(File::create(&out)?);
            for r in &records {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
            w.flush()?;
            write_json(&run.output("metrics.json"), &serde_json::json!({"spearman": rho, "pairs": records.len()}))?;
            println!("spearman\t{rho:.4}");
            run.finish()?;
        }
        Command::EvalTwoDomain { base, stage2, fixture, in_domain, common } => {
            let mut run = Run::start("eval-two-domain", &common)?;
            let base = load_model(&mut run, &base)?;
            let stage2 = load_model(&mut run, &stage2)?;
            let fixture = TwoDomainFixture::read(run.input(&fixture)?)?;
            let in_domain = run.settings.get("in-domain", in_domain, "b".to_string())?;
            let report = eval_two_domain(&base, &stage2, &fixture, &in_domain, run.exec)?;
            fs::write(run.output("report.jsonl"), report.to_jsonl())?;
            let table = report.to_table();
            fs::write(run.output("report.txt"), &table)?;
            print!("{table}");
            run.finish()?;
        }
        Command::Gradcheck { d, layers, heads, step_size, common } => {
            let mut run = Run::start("gradcheck", &common)?;
            let defaults = GradcheckConfig::default();
            let cfg = GradcheckConfig {
                d_model: run.settings.get("d", d, defaults.d_model)?,
                n_layers: run.settings.get("layers", layers, defaults.n_layers)?,
                n_heads: run.settings.get("heads", heads, defaults.n_heads)?,
                step_size: run.settings.get("step-size", step_size, defaults.step_size)?,
                seed: common.seed.map_or(defaults.seed, |_| run.seed),
                ..defaults
            };
            let report = gradcheck(&cfg, run.exec)?;
            write_json(&run.output("gradcheck.json"), &report)?;
            let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
            println!(
                "max relative error {:.3e} at {}[{}] over {} scalars: {}",
                report.max_rel_error,
                report.worst_param,
                report.worst_index,
                report.checked,
                if pass { "PASS" } else { "FAIL" }
            );
            run.finish()?;
            if !pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::MakeFixture { generic_sentences, topics, docs_per_topic, common } => {
            let mut run = Run::start("make-fixture", &common)?;
            let d = FixtureConfig::default();
            let cfg = FixtureConfig {
                seed: run.seed,
                generic_sentences: run.settings.get("generic-sentences", generic_sentences, d.generic_sentences)?,
                topics_per_domain: run.settings.get("topics", topics, d.topics_per_domain)?,
                docs_per_topic: run.settings.get("docs-per-topic", docs_per_topic, d.docs_per_topic)?,
                ..d
            };
            let fixture = generate(&cfg)?;
            fixture.write(&run.dir)?;
            let vocab = vocab_from_counts(&count_tokens(fixture.all_text()), DEFAULT_VOCAB_SIZE, 1)?;
            vocab.write(run.output("vocab.txt"))?;
            for dom in &fixture.domains {
                let sub = run.dir.join(&dom.name);
                let mut self_j = Judgments::default();
                for doc in &dom.docs {
                    self_j.insert(doc.id.clone(), doc.id.clone());
                }
                self_j.write_jsonl(File::create(sub.join("self_judgments.jsonl"))?)?;
                let pairs: Vec<String> = paraphrase_pairs(dom, FIXTURE_PAIRS, run.seed)
                    .iter()
                    .map(|p| PairFormat::TwoColumn.format_line(p))
                    .collect();
                fs::write(sub.join("pairs.tsv"), pairs.join("\n") + "\n")?;
                let sts: Vec<String> = sts_items(dom, FIXTURE_STS, run.seed)
                    .iter()
                    .map(|(a, b, s)| format!("{a}\t{b}\t{s}"))
                    .collect();
                fs::write(sub.join("sts.tsv"), sts.join("\n") + "\n")?;
            }
            run.output("generic.txt");
            run.output("a");
            run.output("b");
            run.finish()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
