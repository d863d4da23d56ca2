//! Retrieval and semantic-similarity evaluation.
//!
//! Retrieval is an exact flat scan over unit-normalised embeddings; ties are
//! broken by ascending document index so rankings are reproducible.
//! Relevance is binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, Vocab};
use crate::error::{Error, Result};
use crate::fixture::{Domain, TwoDomainFixture};
use crate::model::{embed_sentences, ModelParams};
use crate::parallel::Exec;
use crate::tensor::{dot, Tensor};
use crate::trainer::Checkpoint;

/// Top-`k` document indices for every query row, best first.
///
/// Both matrices are expected to hold unit rows, so the dot product is the
/// cosine similarity.
pub fn retrieve(queries: &Tensor, docs: &Tensor, k: usize, exec: Exec) -> Result<Vec<Vec<usize>>> {
    let n = docs.rows();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} with {n} documents")));
    }
    if queries.cols() != docs.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs document width {}",
            queries.cols(),
            docs.cols()
        )));
    }
    exec.try_map(queries.rows(), |q| {
        let qv = queries.row(q);
        let mut scored: Vec<(f64, usize)> = (0..n).map(|d| (dot(qv, docs.row(d)), d)).collect();
        if let Some(&(s, d)) = scored.iter().find(|(s, _)| !s.is_finite()) {
            return Err(Error::Contract(format!(
                "query {q} scores {s} against document {d}"
            )));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < n {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored.into_iter().map(|(_, d)| d).collect())
    })
}

/// Binary relevance judgments: query id → relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgments(pub BTreeMap<String, BTreeSet<String>>);

#[derive(Serialize, Deserialize)]
struct JudgmentRecord {
    query_id: String,
    doc_id: String,
}

impl Judgments {
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>) {
        self.0.entry(query_id.into()).or_default().insert(doc_id.into());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query_id)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0
            .iter()
            .flat_map(|(q, ds)| ds.iter().map(move |d| (q.as_str(), d.as_str())))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for (q, d) in self.pairs() {
            let rec = JudgmentRecord {
                query_id: q.into(),
                doc_id: d.into(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut j = Self::default();
        for (n, line) in read_lines(path)?.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JudgmentRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            j.insert(rec.query_id, rec.doc_id);
        }
        Ok(j)
    }
}

/// Ranked doc ids per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalRun {
    pub query_ids: Vec<String>,
    pub ranked: Vec<Vec<String>>,
}

impl RetrievalRun {
    /// Maps index rankings onto ids.
    pub fn from_indices(query_ids: &[String], doc_ids: &[String], rankings: &[Vec<usize>]) -> Result<Self> {
        if query_ids.len() != rankings.len() {
            return Err(Error::Contract(format!(
                "{} query ids for {} rankings",
                query_ids.len(),
                rankings.len()
            )));
        }
        let ranked = rankings
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&d| {
                        doc_ids
                            .get(d)
                            .cloned()
                            .ok_or_else(|| Error::Index(format!("doc index {d} of {}", doc_ids.len())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            query_ids: query_ids.to_vec(),
            ranked,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg_at_10: f64,
    /// Queries that contributed.
    pub evaluated: usize,
    /// Queries left out because nothing relevant was judged for them.
    pub skipped_no_relevant: usize,
}

/// MRR@k and Recall@k for each `k` in `ks`, plus NDCG@10, averaged over
/// queries with at least one judged-relevant document. Rankings shorter
/// than a cutoff are scored on what they contain.
pub fn compute_metrics(run: &RetrievalRun, judgments: &Judgments, ks: &[usize]) -> Result<Metrics> {
    if ks.contains(&0) {
        return Err(Error::Contract("metric cutoff k must be positive".into()));
    }
    let mut mrr: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut recall = mrr.clone();
    let mut ndcg = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (q, ranked) in run.query_ids.iter().zip(&run.ranked) {
        let Some(rel) = judgments.relevant(q).filter(|r| !r.is_empty()) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        let first_hit = ranked.iter().position(|d| rel.contains(d));
        for (&k, v) in mrr.iter_mut() {
            if let Some(p) = first_hit.filter(|&p| p < k) {
                *v += 1.0 / (p + 1) as f64;
            }
        }
        for (&k, v) in recall.iter_mut() {
            let found = ranked.iter().take(k).filter(|d| rel.contains(*d)).count();
            *v += found as f64 / rel.len() as f64;
        }
        let dcg: f64 = ranked
            .iter()
            .take(10)
            .enumerate()
            .filter(|(_, d)| rel.contains(*d))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..rel.len().min(10)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        ndcg += dcg / ideal;
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevant documents and were excluded");
    }
    if evaluated == 0 {
        return Err(Error::DegenerateInput("no query has a relevant document".into()));
    }
    let n = evaluated as f64;
    mrr.values_mut().for_each(|v| *v /= n);
    recall.values_mut().for_each(|v| *v /= n);
    Ok(Metrics {
        mrr,
        recall,
        ndcg_at_10: ndcg / n,
        evaluated,
        skipped_no_relevant: skipped,
    })
}

/// Ranks with ties given the mean of the positions they span (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(preds: &[f64], golds: &[f64]) -> Result<f64> {
    if preds.len() != golds.len() || preds.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length lists of at least 2, got {} and {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.iter().chain(golds).any(|v| !v.is_finite()) {
        return Err(Error::Contract("spearman input contains a non-finite value".into()));
    }
    pearson(&average_ranks(preds), &average_ranks(golds))
        .ok_or_else(|| Error::UndefinedCorrelation("an input list is constant".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsRecord {
    pub a: String,
    pub b: String,
    pub gold: f64,
    pub predicted: f64,
}

/// Scores `(a, b, gold)` triples by embedding cosine and correlates with gold.
pub fn eval_sts(
    items: &[(String, String, f64)],
    params: &ModelParams,
    vocab: &Vocab,
    exec: Exec,
) -> Result<(Vec<StsRecord>, f64)> {
    if items.len() < 2 {
        return Err(Error::Contract("STS needs at least two pairs".into()));
    }
    let a: Vec<&str> = items.iter().map(|t| t.0.as_str()).collect();
    let b: Vec<&str> = items.iter().map(|t| t.1.as_str()).collect();
    let ea = embed_sentences(&a, params, vocab, exec)?;
    let eb = embed_sentences(&b, params, vocab, exec)?;
    let records: Vec<StsRecord> = items
        .iter()
        .enumerate()
        .map(|(i, (x, y, g))| StsRecord {
            a: x.clone(),
            b: y.clone(),
            gold: *g,
            predicted: dot(ea.row(i), eb.row(i)).clamp(-1.0, 1.0),
        })
        .collect();
    let preds: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let golds: Vec<f64> = records.iter().map(|r| r.gold).collect();
    let rho = spearman(&preds, &golds)?;
    Ok((records, rho))
}

/// Reads `a \t b \t score` lines.
pub fn read_sts(path: impl AsRef<Path>) -> Result<Vec<(String, String, f64)>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (n, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let parsed = match parts.as_slice() {
            [a, b, s] => s.trim().parse::<f64>().ok().map(|s| (a.to_string(), b.to_string(), s)),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| {
            Error::Format(format!("{}:{}: expected `a<TAB>b<TAB>score`", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

/// Embeds a domain's queries and documents with `params` and scores the
/// resulting top-`depth` run.
pub fn evaluate_domain(
    domain: &Domain,
    params: &ModelParams,
    vocab: &Vocab,
    ks: &[usize],
    exec: Exec,
) -> Result<Metrics> {
    let doc_text: Vec<&str> = domain.docs.iter().map(|d| d.text.as_str()).collect();
    let query_text: Vec<&str> = domain.queries.iter().map(|q| q.text.as_str()).collect();
    let docs = embed_sentences(&doc_text, params, vocab, exec)?;
    let queries = embed_sentences(&query_text, params, vocab, exec)?;
    let depth = ks.iter().copied().chain([10]).max().unwrap_or(10).min(docs.rows());
    let rankings = retrieve(&queries, &docs, depth, exec)?;
    let doc_ids: Vec<String> = domain.docs.iter().map(|d| d.id.clone()).collect();
    let query_ids: Vec<String> = domain.queries.iter().map(|q| q.id.clone()).collect();
    let run = RetrievalRun::from_indices(&query_ids, &doc_ids, &rankings)?;
    compute_metrics(&run, &domain.judgments, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    pub domain: String,
    pub in_domain: bool,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub domain: String,
    pub in_domain: bool,
    pub metric: String,
    /// stage-2 value minus base value.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoDomainReport {
    pub cells: Vec<ReportCell>,
    pub deltas: Vec<ReportDelta>,
}

pub const REPORT_METRICS: [&str; 2] = ["recall@5", "mrr@10"];

impl TwoDomainReport {
    pub fn cell(&self, model: &str, domain: &str, metric: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.domain == domain && c.metric == metric)
            .map(|c| c.value)
    }

    pub fn delta(&self, domain: &str, metric: &str) -> Option<f64> {
        self.deltas
            .iter()
            .find(|d| d.domain == domain && d.metric == metric)
            .map(|d| d.delta)
    }

    /// One JSON object per cell, then one per delta.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let v = serde_json::json!({"kind": "cell", "model": c.model, "domain": c.domain,
                "in_domain": c.in_domain, "metric": c.metric, "value": c.value});
            let _ = writeln!(out, "{v}");
        }
        for d in &self.deltas {
            let v = serde_json::json!({"kind": "delta", "domain": d.domain,
                "in_domain": d.in_domain, "metric": d.metric, "delta": d.delta});
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<6} {:<4} {:>10} {:>10} {:>10}\n",
            "metric", "domain", "in", "base", "stage2", "delta"
        );
        for d in &self.deltas {
            let base = self.cell("base", &d.domain, &d.metric).unwrap_or(f64::NAN);
            let s2 = self.cell("stage2", &d.domain, &d.metric).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{:<10} {:<6} {:<4} {:>10.4} {:>10.4} {:>+10.4}",
                d.metric,
                d.domain,
                if d.in_domain { "yes" } else { "no" },
                base,
                s2,
                d.delta
            );
        }
        out
    }
}

/// Compares a base checkpoint with its stage-2 continuation on both fixture
/// domains. `in_domain` names the domain stage 2 trained on.
pub fn eval_two_domain(
    base: &Checkpoint,
    stage2: &Checkpoint,
    fixture: &TwoDomainFixture,
    in_domain: &str,
    exec: Exec,
) -> Result<TwoDomainReport> {
    if fixture.domains.len() != 2 {
        return Err(Error::Fixture(format!(
            "expected two domains, found {}",
            fixture.domains.len()
        )));
    }
    if !fixture.domains.iter().any(|d| d.name == in_domain) {
        return Err(Error::Fixture(format!("fixture has no domain `{in_domain}`")));
    }
    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    for domain in &fixture.domains {
        let is_in = domain.name == in_domain;
        let mb = evaluate_domain(domain, &base.params, &base.vocab, &[5, 10], exec)?;
        let ms = evaluate_domain(domain, &stage2.params, &stage2.vocab, &[5, 10], exec)?;
        for metric in REPORT_METRICS {
            let pick = |m: &Metrics| if metric == "recall@5" { m.recall[&5] } else { m.mrr[&10] };
            let (b, s) = (pick(&mb), pick(&ms));
            for (model, value) in [("base", b), ("stage2", s)] {
                cells.push(ReportCell {
                    model: model.into(),
                    domain: domain.name.clone(),
                    in_domain: is_in,
                    metric: metric.into(),
                    value,
                });
            }
            deltas.push(ReportDelta {
                domain: domain.name.clone(),
                in_domain: is_in,
                metric: metric.into(),
                delta: s - b,
            });
        }
    }
    Ok(TwoDomainReport { cells, deltas })
}
