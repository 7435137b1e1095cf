use sinkcache::model::{Model, ModelConfig};
use sinkcache::train::{make_corpus, read_corpus, write_corpus, CorpusKind, MarkovTable};
use sinkcache::Checkpoint;

/// Stationary distribution over `(previous, current)` pairs by power iteration.
fn stationary_pairs(t: &MarkovTable) -> Vec<f64> {
    let n = t.alphabet();
    let mut pi = vec![1.0 / (n * n) as f64; n * n];
    for _ in 0..2000 {
        let mut next = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let p = pi[a * n + b];
                if p == 0.0 {
                    continue;
                }
                for c in 0..n {
                    next[b * n + c] += p * t.prob(a, b, c);
                }
            }
        }
        pi = next;
    }
    pi
}

#[test]
fn markov_pair_frequencies_match_stationary_distribution() {
    let table = MarkovTable::standard();
    let n = table.alphabet();
    let pi = stationary_pairs(&table);
    let tokens = make_corpus(CorpusKind::Markov, 1_000_000, 3).unwrap();
    let mut counts = vec![0usize; n * n];
    for w in tokens.windows(2) {
        counts[w[0] as usize * n + w[1] as usize] += 1;
    }
    let total = (tokens.len() - 1) as f64;
    let tv: f64 = 0.5 * counts.iter().zip(&pi).map(|(&c, &p)| (c as f64 / total - p).abs()).sum::<f64>();
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tok");
    for kind in [CorpusKind::Markov, CorpusKind::Copy, CorpusKind::Needle] {
        let tokens = make_corpus(kind, 5000, 7).unwrap();
        write_corpus(&path, &tokens, 258).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), (258, tokens));
    }
    std::fs::write(&path, b"not a corpus").unwrap();
    assert!(read_corpus(&path).is_err());
}

#[test]
fn needle_corpus_is_ascii_text() {
    let tokens = make_corpus(CorpusKind::Needle, 4000, 0).unwrap();
    let text: String = tokens.iter().map(|&t| char::from(t as u8)).collect();
    assert!(text.starts_with("line 0000: REGISTER_CONTENT is "));
    assert!(text.contains("? REGISTER_CONTENT is "));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ModelConfig {
        n_sink_tokens: 1,
        ..Default::default()
    };
    let model = Model::init(cfg.clone()).unwrap();
    let ckpt = Checkpoint::new(cfg, None, model.weights().clone());
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    assert!(back.summary().contains("checksum OK"));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
