//! Plain-loop reference implementations used as test oracles, plus the
//! small corpora shared by several test targets.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use retromae::corpus::{count_tokens, encode_sentence, tokenize, vocab_from_counts, TokenSequence, Vocab};
use retromae::fixture::{generate, FixtureConfig};
use retromae::model::{ModelConfig, ModelParams};
use retromae::rng::{Purpose, SeedTree};

pub mod checks;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(data: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(data.len(), rows * cols);
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn param(p: &ModelParams, name: &str) -> Mat {
    let t = p.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t.data(), t.shape()[0], t.shape()[1])
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(c, x)| (x - mean) / sd * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax over the entries where `visible` holds; the rest get 0.
pub fn masked_softmax(scores: &[f64], visible: &[bool]) -> Vec<f64> {
    let exps: Vec<f64> = scores
        .iter()
        .zip(visible)
        .map(|(s, &v)| if v { s.exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// One post-LN transformer block with weights `<prefix>.*`, queries from
/// `q_in`, keys/values from `kv_in`, attention restricted to `visible`.
pub fn block(p: &ModelParams, prefix: &str, q_in: &Mat, kv_in: &Mat, visible: &[Vec<bool>]) -> Mat {
    let w = |f: &str| param(p, &format!("{prefix}.{f}"));
    let b = |f: &str| param(p, &format!("{prefix}.{f}"))[0].clone();
    let heads = p.config().n_heads;
    let d = p.config().d_model;
    let dh = d / heads;
    let q = add_bias(&matmul(q_in, &w("wq")), &b("bq"));
    let k = add_bias(&matmul(kv_in, &w("wk")), &b("bk"));
    let v = add_bias(&matmul(kv_in, &w("wv")), &b("bv"));
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let a = masked_softmax(&scores, &visible[i]);
            for t in 0..dh {
                ctx[i][h * dh + t] = (0..k.len()).map(|j| a[j] * v[j][h * dh + t]).sum();
            }
        }
    }
    let att = add_bias(&matmul(&ctx, &w("wo")), &b("bo"));
    let x = layer_norm(&add(q_in, &att), &b("ln1_gamma"), &b("ln1_beta"));
    let f = add_bias(&matmul(&x, &w("ff_w1")), &b("ff_b1"));
    let f: Mat = f.iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect();
    let f = add_bias(&matmul(&f, &w("ff_w2")), &b("ff_b2"));
    layer_norm(&add(&x, &f), &b("ln2_gamma"), &b("ln2_beta"))
}

pub fn tied_logits(p: &ModelParams, states: &Mat) -> Mat {
    add_bias(
        &matmul(states, &transpose(&param(p, "token_embeddings"))),
        &param(p, "lm_bias")[0],
    )
}

/// Reference encoder: returns all final hidden states; row 0 is the
/// sentence embedding.
pub fn encoder(p: &ModelParams, ids: &[usize]) -> Mat {
    let tok = param(p, "token_embeddings");
    let pos = param(p, "position_embeddings");
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let full = vec![vec![true; ids.len()]; ids.len()];
    for l in 0..p.config().n_encoder_layers {
        x = block(p, &format!("encoder.{l}"), &x, &x, &full);
    }
    x
}

/// Reference two-stream decoder logits for embedding `h`.
pub fn enhanced_decoder(p: &ModelParams, h: &[f64], ids: &[usize], visible: &[Vec<bool>]) -> Mat {
    let tok = param(p, "token_embeddings");
    let pos = param(p, "position_embeddings");
    let query: Mat = (0..ids.len())
        .map(|i| h.iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let mut context: Mat = vec![h.to_vec()];
    for (i, &id) in ids.iter().enumerate().skip(1) {
        context.push(tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect());
    }
    tied_logits(p, &block(p, "decoder", &query, &context, visible))
}

/// Mean cross-entropy over rows whose target is not `ignore`, computed
/// directly as `−log(exp(z_t) / Σ exp(z))`.
pub fn cross_entropy(logits: &Mat, targets: &[usize], ignore: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == ignore {
            continue;
        }
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total -= (row[t].exp() / z).ln();
        n += 1;
    }
    total / n as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// In-batch InfoNCE, anchors against positives, positive included in the
/// denominator.
pub fn info_nce(anchors: &Mat, positives: &Mat, tau: f64) -> f64 {
    let b = anchors.len();
    let mut total = 0.0;
    for i in 0..b {
        let num = (cosine(&anchors[i], &positives[i]) / tau).exp();
        let den: f64 = (0..b).map(|j| (cosine(&anchors[i], &positives[j]) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / b as f64
}

/// Full stable sort by descending score; equal scores keep index order.
pub fn full_sort_topk(query: &[f64], docs: &Mat, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = docs.iter().map(|d| d.iter().zip(query).map(|(a, b)| a * b).sum()).collect();
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

pub struct RefMetrics {
    pub mrr: f64,
    pub recall: f64,
    pub ndcg10: f64,
}

/// Metrics for one query by direct definition.
pub fn ref_metrics(ranked: &[String], relevant: &HashSet<String>, k: usize) -> RefMetrics {
    let mut mrr = 0.0;
    for (r, d) in ranked.iter().enumerate().take(k) {
        if relevant.contains(d) {
            mrr = 1.0 / (r as f64 + 1.0);
            break;
        }
    }
    let hits = ranked.iter().take(k).filter(|d| relevant.contains(*d)).count();
    let mut dcg = 0.0;
    for (r, d) in ranked.iter().enumerate().take(10) {
        if relevant.contains(d) {
            dcg += 1.0 / (r as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 0..relevant.len().min(10) {
        idcg += 1.0 / (r as f64 + 2.0).log2();
    }
    RefMetrics {
        mrr,
        recall: hits as f64 / relevant.len() as f64,
        ndcg10: dcg / idcg,
    }
}

/// Rank of each value by counting: `#less + (#equal + 1) / 2`.
pub fn count_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Closed form for tie-free data: `1 − 6 Σ d² / (n (n² − 1))`.
pub fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (count_ranks(x), count_ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn random_mat<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn unit_rows(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn small_model(vocab_size: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        max_len: 16,
        d_ff: 16,
        init_std: 0.3,
        ..ModelConfig::new(vocab_size, 8, 2, 1)
    };
    ModelParams::init(&cfg, &mut SeedTree::new(seed).rng(Purpose::Init, 0, 0)).unwrap()
}

/// 32 ten-word sentences over the fixture's word list, each word used about
/// equally often: the memorisation corpus.
pub fn overfit_corpus() -> (Vocab, Vec<TokenSequence>) {
    let f = generate(&FixtureConfig::default()).unwrap();
    let words: BTreeSet<String> = f.all_text().iter().flat_map(|t| tokenize(t)).collect();
    let mut words: Vec<String> = words.into_iter().filter(|w| w != ".").collect();
    let mut rng = SeedTree::new(1).rng(Purpose::Fixture, 0, 0);
    words.shuffle(&mut rng);
    let mut slots: Vec<String> = words.iter().cloned().cycle().take(32 * 10).collect();
    slots.shuffle(&mut rng);
    let sentences: Vec<String> = slots.chunks(10).map(|c| c.join(" ")).collect();
    let vocab = vocab_from_counts(&count_tokens(&sentences), 1000, 1).unwrap();
    let seqs = sentences.iter().map(|s| encode_sentence(s, &vocab, 32)).collect();
    (vocab, seqs)
}
