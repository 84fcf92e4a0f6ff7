mod common;

use common::{tiny_config, Fixture};
use icmlm::registry::Flavor;
use icmlm::trainer::{resume, resume_in, train, Checkpoint, MaskQuery, TrainConfig, TrainedModel, Trainer};
use icmlm::Error;

#[test]
fn zero_steps_returns_the_initialization() {
    let fx = Fixture::new(12);
    let cfg = tiny_config(Flavor::IcmlmAttfc, 0);
    let fresh = Trainer::new(cfg.clone(), fx.data()).unwrap();
    let ckpt = train(&cfg, fx.data()).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.params.checksum(), fresh.params().checksum());
    assert!(ckpt.log.is_empty());
}

#[test]
fn same_seed_same_weights() {
    let fx = Fixture::new(12);
    let cfg = tiny_config(Flavor::IcmlmTfm, 4);
    let a = train(&cfg, fx.data()).unwrap();
    let b = train(&cfg, fx.data()).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    let c = train(&icmlm::trainer::TrainConfig { seed: 1, ..cfg }, fx.data()).unwrap();
    assert_ne!(a.params.checksum(), c.params.checksum());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let fx = Fixture::new(12);
    for flavor in [Flavor::IcmlmAttfc, Flavor::TpPostag] {
        let mut cfg = tiny_config(flavor, 8);
        cfg.lr_horizon = 8;
        let full = train(&cfg, fx.data()).unwrap();
        let half = train(&icmlm::trainer::TrainConfig { steps: 4, warmup_steps: 2, ..cfg.clone() }, fx.data()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        half.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        let resumed = resume_in(loaded, Some(cfg.clone()), fx.data(), 4, None).unwrap();
        assert_eq!(resumed.step, 8);
        assert_eq!(resumed.params.checksum(), full.params.checksum(), "{flavor}");
        assert_eq!(resumed.optim_state.checksum(), full.optim_state.checksum(), "{flavor}");
    }
}

#[test]
fn resuming_zero_steps_is_the_identity() {
    let fx = Fixture::new(12);
    let ckpt = train(&tiny_config(Flavor::IcmlmAttfc, 3), fx.data()).unwrap();
    let same = resume(ckpt.clone(), fx.data(), 0).unwrap();
    assert_eq!(same.step, ckpt.step);
    assert_eq!(same.params.checksum(), ckpt.params.checksum());
}

#[test]
fn resume_refuses_a_different_concept_count() {
    let fx = Fixture::new(12);
    let ckpt = train(&tiny_config(Flavor::IcmlmAttfc, 2), fx.data()).unwrap();
    let mut labels = fx.labels.clone();
    labels.k += 1;
    for v in &mut labels.vectors {
        v.y.push(0.0);
    }
    let data = icmlm::trainer::TrainData { labels: Some(&labels), ..fx.data() };
    assert!(matches!(resume(ckpt.clone(), data, 1), Err(Error::Refused(_))));

    let mut other = ckpt.config.clone();
    other.flavor = Flavor::IcmlmTfm;
    assert!(matches!(resume_in(ckpt, Some(other), fx.data(), 1, None), Err(Error::Refused(_))));
}

#[test]
fn warm_up_freezes_the_backbone_and_the_language_model_never_moves() {
    let fx = Fixture::new(12);
    let lm_before = fx.lm.checksum();
    let cfg = tiny_config(Flavor::IcmlmAttfc, 8);
    let init = Trainer::new(cfg.clone(), fx.data()).unwrap().params().checksum_prefix("backbone.");
    let warm = train(&icmlm::trainer::TrainConfig { steps: 8, warmup_steps: 7, ..cfg.clone() }, fx.data()).unwrap();
    let mut t = Trainer::new(icmlm::trainer::TrainConfig { warmup_steps: 2, ..cfg.clone() }, fx.data()).unwrap();
    t.run(2, None).unwrap();
    assert_eq!(t.params().checksum_prefix("backbone."), init);
    assert_ne!(t.params().checksum_prefix("fc."), Trainer::new(cfg.clone(), fx.data()).unwrap().params().checksum_prefix("fc."));
    t.run(1, None).unwrap();
    assert_ne!(t.params().checksum_prefix("backbone."), init);
    assert_ne!(warm.params.checksum_prefix("backbone."), init);
    assert_eq!(fx.lm.checksum(), lm_before);
    assert_eq!(warm.lm.as_ref().unwrap().checksum(), lm_before);
}

#[test]
fn total_loss_combines_both_terms() {
    let fx = Fixture::new(12);
    let mut cfg = tiny_config(Flavor::IcmlmTfm, 3);
    cfg.lambda = 0.3;
    let ckpt = train(&cfg, fx.data()).unwrap();
    assert_eq!(ckpt.log.len(), 3);
    for r in &ckpt.log {
        let (m, t) = (r.l_mlm.unwrap(), r.l_tp.unwrap());
        assert!((r.l_total - (m + 0.3 * t)).abs() <= 1e-9 * r.l_total.abs().max(1.0));
    }
    cfg.lambda = 0.0;
    let ckpt = train(&cfg, fx.data()).unwrap();
    assert!(ckpt.log.iter().all(|r| r.l_tp.is_none()));
}

#[test]
fn tag_prediction_loss_goes_down() {
    let fx = Fixture::new(24);
    let mut cfg = tiny_config(Flavor::TpPostag, 60);
    cfg.batch_size = 8;
    cfg.learning_rate = 0.1;
    let ckpt = train(&cfg, fx.data()).unwrap();
    let mean = |rs: &[icmlm::objectives::LossReport]| rs.iter().map(|r| r.l_total).sum::<f64>() / rs.len() as f64;
    let n = ckpt.log.len();
    assert!(mean(&ckpt.log[n - 10..]) < mean(&ckpt.log[..10]), "{} vs {}", mean(&ckpt.log[n - 10..]), mean(&ckpt.log[..10]));
}

#[test]
fn reloaded_checkpoint_predicts_identically() {
    let fx = Fixture::new(12);
    let ckpt = train(&tiny_config(Flavor::IcmlmAttfc, 3), fx.data()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let seq = &fx.seqs[0];
    let image = fx.ds.image(&seq.image_id).unwrap();
    let q = [MaskQuery { image, caption_id: &seq.caption_id, tokens: &seq.tokens, mask_index: 1 }];
    let a = TrainedModel::from_checkpoint(&ckpt).unwrap().predict(&q).unwrap();
    let b = TrainedModel::from_checkpoint(&back).unwrap().predict(&q).unwrap();
    assert_eq!(a[0].probs, b[0].probs);
    assert_eq!(a[0].attention.p, b[0].attention.p);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::NotFound(_))));
}

#[test]
fn save_and_load_round_trip_every_field() {
    let fx = Fixture::new(24);
    let cfg = TrainConfig { warmup_steps: 20, ..tiny_config(Flavor::IcmlmAttfc, 200) };
    let ckpt = train(&cfg, fx.data()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert!(back.params == ckpt.params);
    assert!(back.optim_state == ckpt.optim_state);
    assert_eq!(back.step, ckpt.step);
    assert_eq!(back.log, ckpt.log);
    assert_eq!(back.config, ckpt.config);
}
