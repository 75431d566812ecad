//! Persistence round-trips and seeded reproducibility.

use spacefusion::corpus::{build_vocab, generate_synthetic, generate_synthetic_splits, load_corpus, read_text_corpus, write_corpus};
use spacefusion::inference::{context_rng, generate_pool, RankerConfig};
use spacefusion::model::{ModelConfig, SpaceFusionModel};
use spacefusion::trainer::{load_checkpoint, load_checkpoint_with_vocab, save_checkpoint, train, CheckpointMeta, TrainConfig};

fn small_setup(seed: u64) -> (Vec<spacefusion::corpus::MultiRefSample>, Vec<spacefusion::corpus::MultiRefSample>, spacefusion::corpus::Vocabulary) {
    let splits = generate_synthetic_splits(30, 3, seed).unwrap();
    let vocab = build_vocab(&splits.train, 1000).unwrap();
    let tr = splits.train.iter().map(|s| s.encode(&vocab)).collect();
    let va = splits.valid.iter().map(|s| s.encode(&vocab)).collect();
    (tr, va, vocab)
}

fn small_model(vocab_size: usize, seed: u64) -> SpaceFusionModel {
    let mut cfg = ModelConfig::desk(vocab_size).with_hidden(8);
    cfg.embedding_dim = 8;
    cfg.seed = seed;
    SpaceFusionModel::new(cfg).unwrap()
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let samples = generate_synthetic(25, 3, 9).unwrap();
    write_corpus(&path, &samples).unwrap();
    assert_eq!(read_text_corpus(&path).unwrap(), samples);
    let vocab = build_vocab(&samples, 1000).unwrap();
    let direct: Vec<_> = samples.iter().map(|s| s.encode(&vocab)).collect();
    assert_eq!(load_corpus(&path, &vocab).unwrap(), direct);
}

#[test]
fn seeded_training_repeats_exactly() {
    let (tr, va, vocab) = small_setup(2);
    let cfg = TrainConfig { max_epochs: 3, patience: 3, batch_size: 8, seed: 4, ..TrainConfig::default() };
    let mut a = small_model(vocab.len(), 1);
    let mut b = small_model(vocab.len(), 1);
    let ra = train(&mut a, &tr, &va, &cfg).unwrap();
    let rb = train(&mut b, &tr, &va, &cfg).unwrap();
    assert_eq!(ra.to_csv(), rb.to_csv());
    for ((_, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn checkpoint_preserves_forward_outputs() {
    let (tr, va, vocab) = small_setup(3);
    let mut model = small_model(vocab.len(), 5);
    let cfg = TrainConfig { max_epochs: 1, patience: 1, batch_size: 8, seed: 1, ..TrainConfig::default() };
    train(&mut model, &tr, &va, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &vocab, &CheckpointMeta { train_config: Some(cfg.clone()), ..CheckpointMeta::default() }).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.vocab, vocab);
    assert_eq!(ck.model.config(), model.config());
    assert_eq!(ck.train_config.as_ref(), Some(&cfg));
    let contexts: Vec<&[usize]> = tr.iter().map(|s| s.context.as_slice()).collect();
    let zs = model.encode_contexts(&contexts).unwrap();
    assert_eq!(ck.model.encode_contexts(&contexts).unwrap(), zs);
    let targets: Vec<&[usize]> = tr.iter().map(|s| s.responses[0].as_slice()).collect();
    let a = model.decode_mean_log_probs(&zs, &targets).unwrap();
    let b = ck.model.decode_mean_log_probs(&zs, &targets).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    // a checkpoint paired with some other vocabulary is refused
    let other = build_vocab(&generate_synthetic(5, 2, 77).unwrap(), 12).unwrap();
    assert!(load_checkpoint_with_vocab(dir.path(), &other).is_err());
}

#[test]
fn pools_are_reproducible_per_context() {
    let (tr, _, vocab) = small_setup(6);
    let model = small_model(vocab.len(), 2);
    let mut rc = RankerConfig::new(1.5);
    rc.pool_size = 12;
    let p1 = generate_pool(&model, &tr[0].context, &rc, &mut context_rng(8, 0)).unwrap();
    let p2 = generate_pool(&model, &tr[0].context, &rc, &mut context_rng(8, 0)).unwrap();
    assert_eq!(p1, p2);
    for h in &p1 {
        assert_eq!(h.tokens.last(), Some(&spacefusion::corpus::EOS));
        assert!(h.len <= rc.max_len && h.tokens.len() <= spacefusion::corpus::MAX_SEQ_LEN);
    }
    rc.radius = 0.0;
    let p0 = generate_pool(&model, &tr[0].context, &rc, &mut context_rng(8, 0)).unwrap();
    assert_eq!(p0.len(), 1);
}
