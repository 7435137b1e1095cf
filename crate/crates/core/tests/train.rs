use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkcache::model::{AttnVariant, Batch, ModelConfig, PosKind, TrainGraph, Weights};
use sinkcache::numerics::Matrix;
use sinkcache::train::{
    clip_grad_norm, make_corpus, train, unigram_entropy, AdamW, CorpusKind, TrainConfig,
};

fn small(variant: AttnVariant, sinks: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        d_ff: 64,
        train_window: 32,
        pos_kind: PosKind::Rope,
        attn_variant: variant,
        n_sink_tokens: sinks,
        seed: 5,
        ..Default::default()
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        seq_len: 32,
        lr_peak: 3e-3,
        warmup: 10,
        seed: 9,
        ..Default::default()
    }
}

fn markov(n: usize) -> Vec<u32> {
    make_corpus(CorpusKind::Markov, n, 1).unwrap()
}

#[test]
fn zero_steps_returns_initialization() {
    let m = small(AttnVariant::Softmax, 1);
    let (ckpt, curve) = train(&m, &quick(0), &markov(4096)).unwrap();
    assert_eq!(ckpt.weights, Weights::init(&m).unwrap());
    assert!(curve.points.is_empty());
}

#[test]
fn training_is_deterministic() {
    let m = small(AttnVariant::Softmax1, 1);
    let corpus = markov(4096);
    let (a, ca) = train(&m, &quick(12), &corpus).unwrap();
    let (b, cb) = train(&m, &quick(12), &corpus).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(ca, cb);
}

#[test]
fn rejects_bad_inputs() {
    let m = small(AttnVariant::Softmax, 0);
    assert!(train(&m, &quick(1), &markov(16)).is_err());
    let mut corpus = markov(4096);
    corpus[7] = m.sink_id(0);
    assert!(train(&m, &quick(1), &corpus).is_err());
    let long = TrainConfig { seq_len: 64, ..quick(1) };
    assert!(train(&m, &long, &markov(4096)).is_err());
}

#[test]
fn sink_embedding_receives_gradient() {
    let m = small(AttnVariant::Softmax, 1);
    let w = Weights::<f32>::init(&m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sinkcache::train::sample_batch(&m, 32, 2, &markov(4096), &mut rng).unwrap();
    let mut g = TrainGraph::new(&m, &w).unwrap();
    g.forward(&batch).unwrap();
    let grads = g.backward().unwrap();
    assert!(grads.sink_emb.data().iter().any(|v| v.abs() > 0.0));
}

/// One batch in both layouts: plain windows for the softmax-one model and
/// the same windows behind a sink token (whose own target is unscored).
fn paired_batches(corpus: &[u32], n: usize, len: usize, sink: u32, rng: &mut ChaCha8Rng) -> (Batch, Batch) {
    let (mut pt, mut pg, mut st, mut sg) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let s = rng.random_range(0..corpus.len() - len - 1);
        let w = &corpus[s..s + len + 1];
        pt.extend_from_slice(&w[..len]);
        pg.extend(w[1..].iter().map(|&t| Some(t)));
        st.push(sink);
        st.extend_from_slice(&w[..len]);
        sg.push(None);
        sg.extend(w[1..].iter().map(|&t| Some(t)));
    }
    (
        Batch::new(n, len, pt, pg).unwrap(),
        Batch::new(n, len + 1, st, sg).unwrap(),
    )
}

#[test]
fn softmax1_training_equals_softmax_with_frozen_zero_sink() {
    let one = small(AttnVariant::Softmax1, 0);
    let zero = ModelConfig {
        attn_variant: AttnVariant::Softmax,
        n_sink_tokens: 1,
        train_window: 33,
        ..one.clone()
    };
    let mut wa = Weights::<f32>::init(&one).unwrap();
    let mut wb = wa.clone();
    wb.sink_emb = Matrix::zeros(1, one.d_model);
    let mut oa = AdamW::new(&wa, 0.9, 0.95, 1e-8, 0.1);
    let mut ob = AdamW::new(&wb, 0.9, 0.95, 1e-8, 0.1);
    let corpus = markov(8192);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (ba, bb) = paired_batches(&corpus, 3, 32, zero.sink_id(0), &mut rng);
        let mut ga = TrainGraph::new(&one, &wa).unwrap();
        let la = ga.forward(&ba).unwrap();
        let mut da = ga.backward().unwrap();
        let mut gb = TrainGraph::new(&zero, &wb).unwrap();
        let lb = gb.forward(&bb).unwrap();
        let mut db = gb.backward().unwrap();
        assert!((la - lb).abs() < 1e-5, "loss {la} vs {lb}");
        db.sink_emb.fill(0.0);
        clip_grad_norm(&mut da, 1.0);
        clip_grad_norm(&mut db, 1.0);
        oa.step(&mut wa, &da, 1e-2);
        ob.step(&mut wb, &db, 1e-2);
    }
    assert!(wb.sink_emb.data().iter().all(|&v| v == 0.0));
    for ((name, a), (_, b)) in wa.tensors().iter().zip(wb.tensors()) {
        if name == "sink_emb" {
            continue;
        }
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "{name} differs by {diff}");
    }
}

#[test]
fn loss_falls_below_unigram_entropy() {
    let m = ModelConfig {
        d_model: 32,
        d_head: 8,
        d_ff: 64,
        train_window: 32,
        ..Default::default()
    };
    let corpus = markov(200_000);
    let cfg = TrainConfig { seq_len: 32, batch: 4, ..Default::default() };
    let (_, curve) = train(&m, &cfg, &corpus).unwrap();
    let early = curve.mean(100, 150).unwrap();
    let late = curve.mean(1950, 2000).unwrap();
    assert!(late < early, "late {late} early {early}");
    assert!(late < unigram_entropy(&corpus), "late {late}");
    assert_eq!(curve.to_csv().lines().count(), 2001);
}
