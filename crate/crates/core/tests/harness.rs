use nriqa_core::data::{generate_dataset, load_images, PatchSpec, SynthConfig};
use nriqa_core::harness::{evaluate, gradcheck, predict, restore, Checkpoint, RunConfig, Trainer};
use nriqa_core::model::Model;
use nriqa_core::session::Session;
use nriqa_core::{Error, Tensor};

/// Tiny network on 12×12 synthetic images.
fn small_run(seed: u64) -> (RunConfig, Vec<Tensor>, Vec<f64>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SynthConfig { sources: 2, levels: 3, size: 12, seed: 5 }, dir.path()).unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.patch = PatchSpec { edge: 10, n_patch: 2 };
    cfg.model.backbone.dropout = 0.1;
    cfg.batch_size = 6;
    cfg.epochs = 2;
    cfg.seed = Some(seed);
    (cfg, load_images(&m).unwrap(), m.scores(), dir)
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (cfg, images, scores, _dir) = small_run(3);
    let a = Trainer::new(&cfg, images.clone(), scores.clone()).unwrap().train().unwrap();
    let b = Trainer::new(&cfg, images.clone(), scores.clone()).unwrap().train().unwrap();
    let rows = |l: &[nriqa_core::harness::EpochLog]| l.iter().map(|e| e.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&a), rows(&b));
    let mut other = cfg.clone();
    other.seed = Some(4);
    let c = Trainer::new(&other, images, scores).unwrap().train().unwrap();
    assert_ne!(rows(&a), rows(&c));
}

#[test]
fn sequential_and_parallel_training_agree() {
    let (cfg, images, scores, _dir) = small_run(8);
    let a = Trainer::new(&cfg, images.clone(), scores.clone()).unwrap().train().unwrap();
    nriqa_core::par::set_enabled(false);
    let b = Trainer::new(&cfg, images, scores).unwrap().train().unwrap();
    nriqa_core::par::set_enabled(true);
    assert_eq!(a, b);
}

#[test]
fn seed_is_required() {
    let (mut cfg, images, scores, _dir) = small_run(0);
    cfg.seed = None;
    assert!(matches!(Trainer::new(&cfg, images, scores), Err(Error::Config(_))));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let (mut cfg, images, _, _dir) = small_run(1);
    let scores: Vec<f64> = (0..images.len()).map(|i| i as f64 / images.len() as f64).collect();
    cfg.lr = 0.0;
    cfg.model.backbone.dropout = 0.0;
    cfg.patch = PatchSpec { edge: 12, n_patch: 1 };
    cfg.batch_size = images.len();
    cfg.epochs = 3;
    let mut t = Trainer::new(&cfg, images, scores).unwrap();
    let before = t.store().clone();
    let logs = t.train().unwrap();
    assert!(t.store().named().zip(before.named()).all(|(a, b)| a == b));
    for w in logs.windows(2) {
        let same = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(same(w[0].lq, w[1].lq) && same(w[0].lrr, w[1].lrr) && same(w[0].lsc, w[1].lsc), "{w:?}");
    }
}

#[test]
fn disabling_self_consistency_halves_forward_passes() {
    let (cfg, images, scores, _dir) = small_run(2);
    let mut with = Trainer::new(&cfg, images.clone(), scores.clone()).unwrap();
    with.run_epoch().unwrap();
    let mut off = cfg.clone();
    off.loss.theta3 = 0.0;
    let mut without = Trainer::new(&off, images, scores).unwrap();
    let log = without.run_epoch().unwrap();
    assert_eq!(with.forward_passes(), 2 * without.forward_passes());
    assert_eq!(without.forward_passes(), 8);
    assert_eq!(log.lsc, 0.0);
}

#[test]
fn repeated_image_is_fitted() {
    let (mut cfg, images, _, _dir) = small_run(6);
    cfg.loss.theta2 = 0.0;
    cfg.loss.theta3 = 0.0;
    cfg.model.backbone.dropout = 0.0;
    cfg.patch = PatchSpec { edge: 12, n_patch: 1 };
    cfg.batch_size = 8;
    cfg.lr = 1e-2;
    let one = vec![images[0].clone(); 8];
    let mut t = Trainer::new(&cfg, one, vec![0.37; 8]).unwrap();
    let mut curve = Vec::new();
    while curve.len() < 500 {
        curve.push(t.run_epoch().unwrap().lq);
        if curve.last().unwrap() < &1e-3 {
            break;
        }
    }
    assert!(*curve.last().unwrap() < 1e-3, "final {:?}", &curve[curve.len().saturating_sub(5)..]);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (cfg, mut images, scores, _dir) = small_run(7);
    for img in &mut images {
        img.data_mut().fill(f64::NAN);
    }
    match Trainer::new(&cfg, images, scores).unwrap().run_epoch() {
        Err(Error::TrainingAborted(msg)) => assert!(msg.contains("epoch 1 batch 0"), "{msg}"),
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (cfg, images, scores, _dir) = small_run(9);
    let mut t = Trainer::new(&cfg, images.clone(), scores.clone()).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"ADTR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.epoch, 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.adtr");
    ckpt.save(&path).unwrap();
    let (model, store) = restore(&Checkpoint::load(&path).unwrap()).unwrap();
    let before = evaluate(t.model(), t.store(), &images, &scores, &cfg.patch, 11).unwrap();
    let after = evaluate(&model, &store, &images, &scores, &cfg.patch, 11).unwrap();
    assert_eq!(before, after);

    let resumed = Trainer::from_checkpoint(&back, images, scores).unwrap();
    assert_eq!(resumed.epoch(), 1);
    assert_eq!(resumed.current_lr(), t.current_lr());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (cfg, images, scores, _dir) = small_run(10);
    let bytes = Trainer::new(&cfg, images, scores).unwrap().checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).is_err());
}

#[test]
fn incompatible_checkpoint_shapes_are_rejected() {
    let (cfg, images, scores, _dir) = small_run(12);
    let mut ckpt = Trainer::new(&cfg, images, scores).unwrap().checkpoint();
    ckpt.config.model.encoder.d_model = 12;
    ckpt.config.model.encoder.ffn_hidden = 24;
    assert!(restore(&ckpt).is_err());
}

#[test]
fn full_image_patches_equal_a_single_forward() {
    let (cfg, images, _, _dir) = small_run(13);
    let (model, store) = Model::new(&cfg.model, 2).unwrap();
    let spec = PatchSpec { edge: 12, n_patch: 5 };
    let preds = predict(&model, &store, &images[..3], &spec, 0).unwrap();
    for (img, p) in images.iter().zip(preds) {
        let mut sess = Session::new(&store, false);
        let x = sess.constant(Tensor::stack(std::slice::from_ref(img)).unwrap());
        let out = model.forward(&mut sess, x, None).unwrap();
        let direct = sess.tape.value(out.scores).data()[0];
        assert!((p - direct).abs() <= 1e-15 * direct.abs().max(1.0));
    }
    assert_eq!(predict(&model, &store, &images, &spec, 3).unwrap(), predict(&model, &store, &images, &spec, 3).unwrap());
}

#[test]
fn tiny_gradcheck_passes() {
    let report = gradcheck(&RunConfig::tiny(), 5, 0).unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    assert!(report.entries.len() >= 5 * 40);
}

#[test]
fn config_text_and_overrides() {
    let cfg = RunConfig::parse("# run\nlr = 0.01\nchannels = 8, 16\n\ntheta3=0\n").unwrap();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.model.backbone.channels, vec![8, 16]);
    assert_eq!(cfg.loss.theta3, 0.0);
    let mut again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    again.set("weight-decay", "0.001").unwrap();
    assert_eq!(again.weight_decay, 0.001);
    let err = RunConfig::parse("lr = 1\nbogus = 2\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(RunConfig::parse("lr 1").is_err());
    assert!(RunConfig::parse("batch_size = -1").is_err());
    let mut bad = RunConfig::default();
    bad.patch.edge = 16;
    assert!(bad.validate().is_err());
}
