mod common;

use spoofnet::autodiff::{AdamConfig, AdamState, Bank, Binder, BnContext, Graph, Tensor};
use spoofnet::checkpoint::Checkpoint;
use spoofnet::config::RunConfig;
use spoofnet::Error;

fn tiny_config() -> RunConfig {
    let text = "encoder.input_len = 400\nencoder.num_filters = 6\nencoder.kernel_len = 17\n\
                encoder.channels = 2,3\nencoder.pool_time = 0\nencoder.gru_hidden = 6\nencoder.embed_dim = 5\n";
    RunConfig::from_str_at(text, std::path::Path::new("tiny.conf")).unwrap()
}

/// A tiny model whose parameters and both statistic banks differ from init.
fn trained_model() -> spoofnet::model::Model {
    let mut m = common::tiny_model(4);
    for (seed, bank) in [(5, Bank::Main), (6, Bank::Auxiliary)] {
        let x = common::waves(3, seed);
        let g = Graph::new();
        let p = Binder::new(&m.store, &g, true);
        let ctx = BnContext::train(bank);
        m.encoder.encode(&p, g.constant(x.clone()), ctx).unwrap();
    }
    let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = m.store.value(id).clone();
        let shifted = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * 0.9 + 0.01).collect()).unwrap();
        m.store.set_value(id, shifted).unwrap();
    }
    m
}

#[test]
fn round_trip_restores_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let model = trained_model();
    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    adam.t = 7;
    adam.m[0][0] = 0.25;
    adam.v[1][0] = 1e-9;
    let ckpt = Checkpoint::capture(&model, Some(&adam), &cfg.resolved_text(), 3, Some(0.125));
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.epoch, 3);
    assert_eq!(loaded.dev_eer, Some(0.125));
    assert_eq!(loaded.adam.as_ref(), Some(&adam));

    let (rcfg, restored) = loaded.restore().unwrap();
    assert_eq!(rcfg.encoder().unwrap(), cfg.encoder().unwrap());
    let x = common::waves(4, 6);
    let a: Vec<u64> = model.score(&x).unwrap().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = restored.score(&x).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    for bank in [Bank::Main, Bank::Auxiliary] {
        assert_eq!(model.encoder.bank_fingerprint(bank), restored.encoder.bank_fingerprint(bank));
    }
    assert_ne!(model.encoder.bank_fingerprint(Bank::Main), model.encoder.bank_fingerprint(Bank::Auxiliary));
}

#[test]
fn missing_dev_eer_round_trips() {
    let ckpt = Checkpoint::capture(&common::tiny_model(1), None, &tiny_config().resolved_text(), 1, None);
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().dev_eer, None);
}

#[test]
fn corruption_is_detected() {
    let bytes = Checkpoint::capture(&trained_model(), None, &tiny_config().resolved_text(), 1, None).to_bytes();
    let is_ckpt_err = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::Checkpoint(_)));
    for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
        let mut b = bytes.clone();
        b[pos] ^= 0x40;
        assert!(is_ckpt_err(&b), "flip at {pos}");
    }
    for cut in [0, 4, 19, bytes.len() / 3, bytes.len() - 1] {
        assert!(is_ckpt_err(&bytes[..cut]), "cut at {cut}");
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(is_ckpt_err(&extended));
}

#[test]
fn layout_mismatch_is_rejected() {
    let ckpt = Checkpoint::capture(&common::tiny_model(1), None, "", 1, None);
    let mut cfg = tiny_config();
    cfg.set("encoder.channels", "2,4").unwrap();
    let mut other = spoofnet::model::Model::new(
        cfg.encoder().unwrap(),
        cfg.margin().unwrap(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .unwrap();
    assert!(matches!(ckpt.apply(&mut other), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")).is_err());
}
