//! Library-versus-oracle comparisons. Each returns the largest deviation
//! seen (0 for exact agreement).

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retromae::corpus::{TokenSequence, CLS, SEP};
use retromae::eval::{compute_metrics, retrieve, spearman, Judgments, RetrievalRun};
use retromae::masking::{build_visibility, MaskedInput, IGNORE};
use retromae::model::{decode_enhanced, encode};
use retromae::objectives::loss_contrastive;
use retromae::{Exec, Tape, Tensor};

use super::*;

pub fn random_sequence<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> TokenSequence {
    let n = rng.gen_range(1..=max_len - 2);
    let mut ids = vec![CLS];
    ids.extend((0..n).map(|_| rng.gen_range(5..vocab)));
    ids.push(SEP);
    TokenSequence::new(ids).unwrap()
}

/// In-batch contrastive loss for B = 2..=8 against the double-loop oracle.
pub fn contrastive(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for b in 2..=8 {
        for tau in [0.05, 0.1, 1.0] {
            let a = random_mat(b, 6, &mut rng);
            let p = random_mat(b, 6, &mut rng);
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::from_rows(&a).unwrap());
            let pv = tape.constant(Tensor::from_rows(&p).unwrap());
            let l = loss_contrastive(&mut tape, av, pv, tau).unwrap();
            worst = worst.max((tape.value(l).item() - info_nce(&a, &p, tau)).abs());
        }
    }
    worst
}

/// Masked-mean cross-entropy against the direct formula.
pub fn cross_entropy_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (rows, v) = (rng.gen_range(1..10), rng.gen_range(2..30));
        let logits: Mat = (0..rows)
            .map(|_| (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect())
            .collect();
        let mut targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
        if rows > 1 {
            targets[rng.gen_range(0..rows)] = IGNORE;
        }
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::from_rows(&logits).unwrap());
        let ce = tape.cross_entropy(lv, &targets, IGNORE).unwrap();
        worst = worst.max((tape.value(ce.loss).item() - cross_entropy(&logits, &targets, IGNORE)).abs());
    }
    worst
}

/// Encoder plus two-stream decoder forward pass against the reference
/// transformer, over random sentences and visibility draws.
pub fn two_stream_forward(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = small_model(30, seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let seq = random_sequence(&mut rng, 30, 16);
        let vis = build_visibility(seq.len() - 1, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, false);
        let enc = encode(&mut tape, &pv, &MaskedInput::unmasked(&seq), false).unwrap();
        let out = decode_enhanced(&mut tape, &pv, enc.embedding, &seq, &vis).unwrap();

        let h = encoder(&params, seq.ids())[0].clone();
        let visible: Vec<Vec<bool>> = (0..seq.len()).map(|i| vis.row(i).to_vec()).collect();
        let oracle = enhanced_decoder(&params, &h, seq.ids(), &visible);
        worst = worst.max(max_abs_diff(tape.value(out.logits).data(), &flat(&oracle)));
        worst = worst.max(max_abs_diff(tape.value(enc.embedding.var).data(), &h));
    }
    worst
}

/// Top-k retrieval on 50 random documents of width 16 (with duplicated rows
/// to force ties) against a full stable sort. Returns the number of
/// disagreeing rankings.
pub fn retrieval_mismatches(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = unit_rows(&random_mat(50, 16, &mut rng));
    for i in 0..5 {
        docs[40 + i] = docs[i].clone();
    }
    let queries = unit_rows(&random_mat(20, 16, &mut rng));
    let dt = Tensor::from_rows(&docs).unwrap();
    let qt = Tensor::from_rows(&queries).unwrap();
    let mut bad = 0;
    for k in [1, 5, 10, 50] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = retrieve(&qt, &dt, k, exec).unwrap();
            for (q, ranking) in queries.iter().zip(&got) {
                if *ranking != full_sort_topk(q, &docs, k) {
                    bad += 1;
                }
            }
        }
    }
    // Queries equal to a duplicated document: both copies tie for first.
    let tied = Tensor::from_rows(&[docs[2].clone()]).unwrap();
    if retrieve(&tied, &dt, 2, Exec::Sequential).unwrap()[0] != vec![2, 42] {
        bad += 1;
    }
    bad
}

/// MRR@k, Recall@k and NDCG@10 on random runs and judgments.
pub fn metrics_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<String> = (0..30).map(|i| format!("d{i}")).collect();
    let mut judgments = Judgments::default();
    let mut query_ids = Vec::new();
    let mut ranked = Vec::new();
    for q in 0..40 {
        let qid = format!("q{q}");
        let n_rel = rng.gen_range(0..6);
        for _ in 0..n_rel {
            judgments.insert(qid.clone(), docs[rng.gen_range(0..30)].clone());
        }
        let mut order: Vec<String> = docs.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        order.truncate(rng.gen_range(3..30));
        query_ids.push(qid);
        ranked.push(order);
    }
    let run = RetrievalRun { query_ids: query_ids.clone(), ranked: ranked.clone() };
    let ks = [1, 3, 5, 10, 20];
    let m = compute_metrics(&run, &judgments, &ks).unwrap();
    let mut worst: f64 = 0.0;
    let judged: Vec<(usize, HashSet<String>)> = query_ids
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let rel: HashSet<String> = judgments.relevant(q).cloned().unwrap_or_default().into_iter().collect();
            (!rel.is_empty()).then_some((i, rel))
        })
        .collect();
    assert_eq!(m.evaluated, judged.len());
    for &k in &ks {
        let refs: Vec<RefMetrics> = judged.iter().map(|(i, rel)| ref_metrics(&ranked[*i], rel, k)).collect();
        let n = refs.len() as f64;
        worst = worst.max((m.mrr[&k] - refs.iter().map(|r| r.mrr).sum::<f64>() / n).abs());
        worst = worst.max((m.recall[&k] - refs.iter().map(|r| r.recall).sum::<f64>() / n).abs());
        worst = worst.max((m.ndcg_at_10 - refs.iter().map(|r| r.ndcg10).sum::<f64>() / n).abs());
    }
    worst
}

/// Spearman on 30 tie-free points (closed form) and on tied data (counted
/// ranks + Pearson).
pub fn spearman_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
    let mut worst = (spearman(&x, &y).unwrap() - spearman_no_ties(&x, &y)).abs();
    let xt: Vec<f64> = (0..30).map(|_| rng.gen_range(0..6) as f64).collect();
    let yt: Vec<f64> = xt.iter().map(|v| v + rng.gen_range(0..3) as f64).collect();
    let oracle = pearson(&count_ranks(&xt), &count_ranks(&yt));
    worst = worst.max((spearman(&xt, &yt).unwrap() - oracle).abs());
    let distinct: BTreeSet<u64> = xt.iter().map(|v| v.to_bits()).collect();
    assert!(distinct.len() < xt.len(), "tied sample must contain ties");
    worst
}
