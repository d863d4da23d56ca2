//! Synthetic corpora: a generic text pool plus two retrieval domains whose
//! content words do not overlap.
//!
//! Each domain has topics; a document mixes its topic's words, a few
//! document-specific domain words and filler from the generic pool. Every
//! query is drawn from one document's words and judged relevant to that
//! document only. Documents of one topic are joined into an article so
//! same-article sentence pairs can be formed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, read_sentences, TextPair};
use crate::error::{Error, Result};
use crate::eval::Judgments;
use crate::rng::{Purpose, SeedTree};

const GENERIC_WORDS: [&str; 48] = [
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "by", "at",
    "from", "it", "this", "that", "new", "old", "large", "small", "early", "late", "first",
    "last", "many", "few", "often", "rarely", "people", "time", "year", "work", "place",
    "group", "part", "world", "city", "day", "made", "used", "known", "found", "called",
    "began", "became", "remained",
];

const SYLLABLES: [[&str; 12]; 2] = [
    ["ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su", "do", "fa"],
    ["gra", "blo", "tre", "shu", "kwi", "dro", "ple", "stu", "fri", "cla", "spo", "thi"],
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub docs: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    pub judgments: Judgments,
    /// Multi-sentence documents (one per topic).
    pub articles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoDomainFixture {
    pub generic: Vec<String>,
    pub domains: Vec<Domain>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub seed: u64,
    pub generic_sentences: usize,
    pub words_per_domain: usize,
    pub topics_per_domain: usize,
    pub docs_per_topic: usize,
    pub topic_words: usize,
    /// Topic words per document.
    pub doc_topic_words: usize,
    /// Document-specific domain words per document.
    pub doc_own_words: usize,
    pub doc_filler_words: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generic_sentences: 300,
            words_per_domain: 72,
            topics_per_domain: 8,
            docs_per_topic: 4,
            topic_words: 4,
            doc_topic_words: 2,
            doc_own_words: 4,
            doc_filler_words: 2,
        }
    }
}

impl FixtureConfig {
    fn validate(&self) -> Result<()> {
        let max_words = SYLLABLES[0].len() * SYLLABLES[0].len();
        if self.words_per_domain > max_words || self.words_per_domain < self.topic_words + self.doc_own_words {
            return Err(Error::Fixture(format!(
                "words_per_domain must be in [{}, {max_words}]",
                self.topic_words + self.doc_own_words
            )));
        }
        if self.topics_per_domain == 0 || self.docs_per_topic < 2 || self.doc_topic_words > self.topic_words {
            return Err(Error::Fixture(
                "need topics, at least two documents per topic and doc_topic_words <= topic_words".into(),
            ));
        }
        if self.doc_own_words < 2 {
            return Err(Error::Fixture("doc_own_words must be at least 2".into()));
        }
        Ok(())
    }
}

/// Pseudo-words of two syllables from the domain's own syllable set, so the
/// two domains (and the generic pool) never share a token.
fn domain_words(domain: usize, n: usize, rng: &mut impl Rng) -> Vec<String> {
    let syl = &SYLLABLES[domain];
    let mut all: Vec<String> = syl
        .iter()
        .flat_map(|a| syl.iter().map(move |b| format!("{a}{b}")))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn sentence(words: Vec<&str>, rng: &mut impl Rng) -> String {
    let mut w = words;
    w.shuffle(rng);
    format!("{} .", w.join(" "))
}

fn pick<'a>(pool: &'a [String], n: usize, rng: &mut impl Rng) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).map(String::as_str).collect()
}

fn generic_sentence(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(5..=10);
    let words: Vec<&str> = (0..len).map(|_| *GENERIC_WORDS.choose(rng).expect("non-empty")).collect();
    format!("{} .", words.join(" "))
}

fn make_domain(cfg: &FixtureConfig, index: usize, tree: &SeedTree) -> Domain {
    let name = ["a", "b"][index].to_string();
    let mut rng = tree.rng(Purpose::Fixture, 1 + index as u64, 0);
    let words = domain_words(index, cfg.words_per_domain, &mut rng);
    let filler: Vec<String> = GENERIC_WORDS.iter().map(|s| s.to_string()).collect();
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    let mut judgments = Judgments::default();
    let mut articles = Vec::new();
    for topic in 0..cfg.topics_per_domain {
        let topic_pool = pick(&words, cfg.topic_words, &mut rng);
        let topic_pool: Vec<String> = topic_pool.iter().map(|s| s.to_string()).collect();
        let mut article = Vec::new();
        for k in 0..cfg.docs_per_topic {
            let id = format!("{name}-d{:03}", topic * cfg.docs_per_topic + k);
            let own: Vec<&str> = words
                .iter()
                .filter(|w| !topic_pool.contains(w))
                .map(String::as_str)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, cfg.doc_own_words)
                .copied()
                .collect();
            let mut body = pick(&topic_pool, cfg.doc_topic_words, &mut rng);
            body.extend(&own);
            body.extend(pick(&filler, cfg.doc_filler_words, &mut rng));
            let text = sentence(body, &mut rng);

            let mut q: Vec<&str> = vec![topic_pool.choose(&mut rng).expect("non-empty").as_str()];
            q.extend(own.choose_multiple(&mut rng, cfg.doc_own_words.div_ceil(2)).copied());
            q.push(*GENERIC_WORDS.choose(&mut rng).expect("non-empty"));
            let qid = format!("{name}-q{:03}", topic * cfg.docs_per_topic + k);
            queries.push(TextRecord {
                id: qid.clone(),
                text: sentence(q, &mut rng),
            });
            judgments.insert(qid, id.clone());
            article.push(text.clone());
            docs.push(TextRecord { id, text });
        }
        articles.push(article.join(" "));
    }
    Domain {
        name,
        docs,
        queries,
        judgments,
        articles,
    }
}

/// Generates the generic pool and both domains from `cfg.seed`.
pub fn generate(cfg: &FixtureConfig) -> Result<TwoDomainFixture> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let mut rng = tree.rng(Purpose::Fixture, 0, 0);
    let generic = (0..cfg.generic_sentences).map(|_| generic_sentence(&mut rng)).collect();
    let domains = (0..2).map(|i| make_domain(cfg, i, &tree)).collect();
    Ok(TwoDomainFixture { generic, domains })
}

/// Paraphrase-style pairs: a sentence and a reshuffled copy with one word
/// swapped for generic filler.
pub fn paraphrase_pairs(domain: &Domain, n: usize, seed: u64) -> Vec<TextPair> {
    let mut rng = SeedTree::new(seed).rng(Purpose::Fixture, 100, 0);
    (0..n)
        .map(|_| {
            let doc = &domain.docs.choose(&mut rng).expect("domain has documents").text;
            let mut words: Vec<&str> = doc.split_whitespace().filter(|w| *w != ".").collect();
            let i = rng.gen_range(0..words.len());
            words[i] = GENERIC_WORDS.choose(&mut rng).expect("non-empty");
            TextPair {
                a: doc.clone(),
                b: sentence(words, &mut rng),
            }
        })
        .collect()
}

/// Similarity-graded pairs: `b` keeps a random share of `a`'s words and
/// replaces the rest with generic filler; the gold score is that share × 5.
pub fn sts_items(domain: &Domain, n: usize, seed: u64) -> Vec<(String, String, f64)> {
    let mut rng = SeedTree::new(seed).rng(Purpose::Fixture, 200, 0);
    (0..n)
        .map(|_| {
            let doc = &domain.docs.choose(&mut rng).expect("domain has documents").text;
            let words: Vec<&str> = doc.split_whitespace().filter(|w| *w != ".").collect();
            let keep = rng.gen_range(0..=words.len());
            let mut idx: Vec<usize> = (0..words.len()).collect();
            idx.shuffle(&mut rng);
            let mut b: Vec<&str> = idx[..keep].iter().map(|&i| words[i]).collect();
            while b.len() < words.len() {
                b.push(GENERIC_WORDS.choose(&mut rng).expect("non-empty"));
            }
            let score = 5.0 * keep as f64 / words.len() as f64;
            (doc.clone(), sentence(b, &mut rng), score)
        })
        .collect()
}

fn write_records(path: &Path, recs: impl IntoIterator<Item = impl Serialize>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in recs {
        let line = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct ArticleRecord<'a> {
    text: &'a str,
}

impl TwoDomainFixture {
    /// Every sentence in the fixture, for vocabulary building.
    pub fn all_text(&self) -> Vec<String> {
        let mut out = self.generic.clone();
        for d in &self.domains {
            out.extend(d.docs.iter().map(|r| r.text.clone()));
            out.extend(d.queries.iter().map(|r| r.text.clone()));
        }
        out
    }

    pub fn domain(&self, name: &str) -> Result<&Domain> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Fixture(format!("no domain `{name}`")))
    }

    /// Layout: `generic.txt`, and per domain `<name>/docs.jsonl`,
    /// `queries.jsonl`, `judgments.jsonl`, `articles.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let generic = dir.join("generic.txt");
        fs::write(&generic, self.generic.join("\n") + "\n").map_err(|e| Error::io(&generic, e))?;
        for d in &self.domains {
            let sub = dir.join(&d.name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_records(&sub.join("docs.jsonl"), &d.docs)?;
            write_records(&sub.join("queries.jsonl"), &d.queries)?;
            let jp = sub.join("judgments.jsonl");
            let f = fs::File::create(&jp).map_err(|e| Error::io(&jp, e))?;
            d.judgments.write_jsonl(f).map_err(|e| Error::io(&jp, e))?;
            write_records(
                &sub.join("articles.jsonl"),
                d.articles.iter().map(|t| ArticleRecord { text: t }),
            )?;
        }
        Ok(())
    }

    /// Reads a fixture written by [`TwoDomainFixture::write`]; both domains
    /// `a` and `b` must be present.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let generic = read_sentences(dir.join("generic.txt"))?;
        let mut domains = Vec::new();
        for name in ["a", "b"] {
            let sub = dir.join(name);
            if !sub.is_dir() {
                return Err(Error::Fixture(format!("missing domain directory {}", sub.display())));
            }
            domains.push(Domain {
                name: name.to_string(),
                docs: read_records(&sub.join("docs.jsonl"))?,
                queries: read_records(&sub.join("queries.jsonl"))?,
                judgments: Judgments::read_jsonl(sub.join("judgments.jsonl"))?,
                articles: crate::corpus::read_documents(sub.join("articles.jsonl"))?,
            });
        }
        Ok(Self { generic, domains })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_sentences, tokenize};
    use std::collections::BTreeSet;

    fn words_of(texts: impl IntoIterator<Item = String>) -> BTreeSet<String> {
        texts.into_iter().flat_map(|t| tokenize(&t)).collect()
    }

    #[test]
    fn domains_share_no_content_words() {
        let f = generate(&FixtureConfig::default()).unwrap();
        let generic = words_of(f.generic.clone());
        let a = words_of(f.domains[0].docs.iter().map(|d| d.text.clone()));
        let b = words_of(f.domains[1].docs.iter().map(|d| d.text.clone()));
        let a_only: BTreeSet<_> = a.difference(&generic).collect();
        let b_only: BTreeSet<_> = b.difference(&generic).collect();
        assert!(!a_only.is_empty() && !b_only.is_empty());
        assert!(a_only.is_disjoint(&b_only));
    }

    #[test]
    fn one_judgment_per_query_and_articles_split_back() {
        let cfg = FixtureConfig::default();
        let f = generate(&cfg).unwrap();
        for d in &f.domains {
            assert_eq!(d.queries.len(), d.docs.len());
            for q in &d.queries {
                assert_eq!(d.judgments.relevant(&q.id).unwrap().len(), 1);
            }
            assert_eq!(d.articles.len(), cfg.topics_per_domain);
            assert_eq!(split_sentences(&d.articles[0]).len(), cfg.docs_per_topic);
        }
    }

    #[test]
    fn deterministic_and_round_trips_through_files() {
        let cfg = FixtureConfig {
            seed: 9,
            ..FixtureConfig::default()
        };
        let f = generate(&cfg).unwrap();
        assert_eq!(f, generate(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        f.write(dir.path()).unwrap();
        assert_eq!(TwoDomainFixture::read(dir.path()).unwrap(), f);
        fs::remove_dir_all(dir.path().join("b")).unwrap();
        assert!(matches!(TwoDomainFixture::read(dir.path()), Err(Error::Fixture(_))));
    }

    #[test]
    fn sts_scores_span_the_scale() {
        let f = generate(&FixtureConfig::default()).unwrap();
        let items = sts_items(&f.domains[0], 50, 1);
        assert!(items.iter().all(|(_, _, s)| (0.0..=5.0).contains(s)));
        let distinct: BTreeSet<u64> = items.iter().map(|t| t.2.to_bits()).collect();
        assert!(distinct.len() > 3);
        assert_eq!(paraphrase_pairs(&f.domains[0], 7, 1).len(), 7);
    }
}
