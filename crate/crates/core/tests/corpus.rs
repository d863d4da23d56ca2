use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retromae::corpus::{
    build_vocab, make_article_pairs, read_documents, read_pairs, sample_sentence_pair, split_sentences, PairFormat,
    TextPair, Vocab, NUM_SPECIAL, SPECIAL_TOKENS,
};
use retromae::Error;

const WORDS: [&str; 12] = [
    "river", "stone", "lamp", "quiet", "orbit", "maple", "signal", "harbor", "ember", "violet", "cable", "north",
];

/// Random 1k-sentence corpus with a skewed word distribution.
fn corpus(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1000)
        .map(|_| {
            let n = rng.gen_range(1..12);
            (0..n)
                .map(|_| {
                    let w = rng.gen_range(0..WORDS.len()).min(rng.gen_range(0..WORDS.len()));
                    WORDS[w].to_string()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[test]
fn vocabulary_ranks_by_frequency() {
    let lines = corpus(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    std::fs::write(&path, lines.join("\n")).unwrap();

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in &lines {
        for w in line.split(' ') {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut oracle: Vec<(&str, u64)> = counts.into_iter().collect();
    oracle.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let vocab = build_vocab(&path, 100, 1).unwrap();
    let got: Vec<&str> = vocab.tokens()[NUM_SPECIAL..].iter().map(String::as_str).collect();
    let want: Vec<&str> = oracle.iter().map(|(w, _)| *w).collect();
    assert_eq!(got, want);
    assert_eq!(&vocab.tokens()[..NUM_SPECIAL], SPECIAL_TOKENS.map(String::from).as_slice());

    let capped = build_vocab(&path, NUM_SPECIAL + 4, 1).unwrap();
    assert_eq!(&capped.tokens()[NUM_SPECIAL..], &vocab.tokens()[NUM_SPECIAL..NUM_SPECIAL + 4]);
    let min = oracle[5].1;
    let filtered = build_vocab(&path, 100, min).unwrap();
    assert_eq!(filtered.len(), NUM_SPECIAL + oracle.iter().filter(|(_, c)| *c >= min).count());

    let saved = dir.path().join("vocab.txt");
    vocab.write(&saved).unwrap();
    assert_eq!(Vocab::read(&saved).unwrap(), vocab);
}

#[test]
fn pair_files_round_trip_and_skip_malformed_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<TextPair> = (0..100)
        .map(|i| TextPair {
            a: format!("{} number {i}", WORDS[rng.gen_range(0..12)]),
            b: format!("\"{}\", said {}", WORDS[rng.gen_range(0..12)], i * 7),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    for format in [PairFormat::TwoColumn, PairFormat::Record] {
        let path = dir.path().join("pairs");
        let mut f = std::fs::File::create(&path).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            writeln!(f, "{}", format.format_line(p)).unwrap();
            if i % 10 == 0 {
                writeln!(f, "not a pair line").unwrap();
                writeln!(f).unwrap();
            }
        }
        drop(f);
        let (back, summary) = read_pairs(&path, format).unwrap();
        assert_eq!(back, pairs);
        assert_eq!((summary.loaded, summary.skipped), (100, 10));
    }

    // Reading under the wrong format is refused rather than silently empty.
    let path = dir.path().join("pairs");
    assert!(matches!(read_pairs(&path, PairFormat::TwoColumn), Err(Error::Format(_))));
}

#[test]
fn article_pairs_stay_inside_their_document() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let docs: Vec<String> = (0..40)
        .map(|d| {
            let n = rng.gen_range(1..7);
            (0..n).map(|s| format!("doc{d} sentence{s} {}.", WORDS[s % 12])).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let body: Vec<String> = docs.iter().map(|t| serde_json::json!({ "text": t }).to_string()).collect();
    std::fs::write(&path, body.join("\n")).unwrap();
    let read = read_documents(&path).unwrap();
    assert_eq!(read, docs);

    let mut prng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = make_article_pairs(read, &mut prng).collect();
    let eligible = docs.iter().filter(|d| split_sentences(d).len() >= 2).count();
    assert_eq!(pairs.len(), eligible);
    for p in &pairs {
        let sentences = split_sentences(&docs[p.doc]);
        assert_ne!(p.a_index, p.b_index);
        assert_eq!(p.a, sentences[p.a_index]);
        assert_eq!(p.b, sentences[p.b_index]);
        let tag = format!("doc{} ", p.doc);
        assert!(p.a.starts_with(&tag) && p.b.starts_with(&tag));
    }
}

#[test]
fn sentence_pairs_are_uniform() {
    let n = 10;
    let draws = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut first = vec![0usize; n];
    let mut second = vec![0usize; n];
    for _ in 0..draws {
        let (i, j) = sample_sentence_pair(n, &mut rng).unwrap();
        assert_ne!(i, j);
        first[i] += 1;
        second[j] += 1;
    }
    for c in first.iter().chain(&second) {
        let freq = *c as f64 / draws as f64;
        assert!((freq - 0.1).abs() < 0.002, "frequency {freq}");
    }
    assert_eq!(sample_sentence_pair(1, &mut rng), None);
}
