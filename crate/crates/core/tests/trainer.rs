use std::fs;

use linerec::charset::CharSet;
use linerec::checkpoint;
use linerec::config::Config;
use linerec::dataset::{load_dataset, Prepared};
use linerec::experiment::synth_prepared;
use linerec::model::{he_init, BackboneKind, ModelConfig, Recognizer};
use linerec::rng::rng;
use linerec::synth::{generate_dataset, GlyphAtlas, SynthConfig};
use linerec::train::{
    adadelta_step, clip_gradients, evaluate, global_norm, infer, train, AdaDeltaParams,
    CheckpointTarget, TrainConfig,
};
use linerec::{Error, Tensor};
use proptest::prelude::*;

/// Scalar AdaDelta written from the update equations.
struct ScalarAdaDelta {
    rho: f64,
    eps: f64,
    lr: f64,
    eg2: f64,
    edx2: f64,
}

impl ScalarAdaDelta {
    fn new(rho: f64, eps: f64, lr: f64) -> Self {
        ScalarAdaDelta {
            rho,
            eps,
            lr,
            eg2: 0.0,
            edx2: 0.0,
        }
    }

    fn step(&mut self, x: f64, g: f64) -> f64 {
        self.eg2 = self.rho * self.eg2 + (1.0 - self.rho) * g * g;
        let rms_dx = (self.edx2 + self.eps).sqrt();
        let rms_g = (self.eg2 + self.eps).sqrt();
        let dx = -(rms_dx / rms_g) * g;
        self.edx2 = self.rho * self.edx2 + (1.0 - self.rho) * dx * dx;
        x + self.lr * dx
    }
}

#[test]
fn adadelta_first_step() {
    let mut p = [0.0f64];
    let (mut eg, mut ex) = ([0.0], [0.0]);
    adadelta_step(&mut p, &[1.0], &mut eg, &mut ex, AdaDeltaParams::default());
    assert!((p[0] - -4.47209e-3).abs() < 1e-8, "{}", p[0]);
    assert!((p[0] - -4.4717e-3).abs() / 4.4717e-3 < 1e-3);
    let want = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
    assert!((p[0] - want).abs() < 1e-15);
}

#[test]
fn adadelta_matches_scalar_recurrence_over_1000_steps() {
    // f(x) = a (x − b)², several curvatures, targets and learning rates.
    for (a, b, x0, lr) in [
        (1.0, 3.0, 10.0, 1.0),
        (0.2, -1.0, 4.0, 1.0),
        (5.0, 0.5, -2.0, 0.5),
        (1.0, 0.0, 1.0, 2.0),
    ] {
        let mut oracle = ScalarAdaDelta::new(0.95, 1e-6, lr);
        let mut x_ref: f64 = x0;
        let mut p = [x0];
        let (mut eg, mut ex) = ([0.0], [0.0]);
        let hp = AdaDeltaParams {
            rho: 0.95,
            eps: 1e-6,
            lr,
        };
        for step in 0..1000 {
            let g = 2.0 * a * (p[0] - b);
            adadelta_step(&mut p, &[g], &mut eg, &mut ex, hp);
            x_ref = oracle.step(x_ref, 2.0 * a * (x_ref - b));
            assert!(
                (p[0] - x_ref).abs() <= 1e-12,
                "step {step}: {} vs {x_ref}",
                p[0]
            );
        }
    }
}

#[test]
fn adadelta_descends_a_quadratic() {
    let mut p = [10.0f64];
    let (mut eg, mut ex) = ([0.0], [0.0]);
    let f = |x: f64| (x - 3.0).powi(2);
    let start = f(p[0]);
    let mut last = start;
    for _ in 0..200 {
        let g = 2.0 * (p[0] - 3.0);
        adadelta_step(&mut p, &[g], &mut eg, &mut ex, AdaDeltaParams::default());
        assert!(f(p[0]) < last);
        last = f(p[0]);
    }
    assert!(last < start);
}

#[test]
fn he_init_statistics() {
    let t: Tensor<f64> = he_init(&[100_000], 50, &mut rng(4)).unwrap();
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = (2.0f64 / 50.0).sqrt();
    assert!(mean.abs() < 0.02 * want);
    assert!((std - want).abs() < 0.02 * want, "{std}");
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm_and_keeps_direction(
        a in prop::collection::vec(-20.0f64..20.0, 1..10),
        b in prop::collection::vec(-20.0f64..20.0, 1..10),
        magnitude in 0.1f64..30.0,
    ) {
        let (mut ca, mut cb) = (a.clone(), b.clone());
        let before = clip_gradients(&mut [&mut ca[..], &mut cb[..]], magnitude);
        prop_assert!((before - global_norm(&[&a[..], &b[..]])).abs() < 1e-12);
        let after = global_norm(&[&ca[..], &cb[..]]);
        if before <= magnitude {
            prop_assert_eq!((&ca, &cb), (&a, &b));
        } else {
            prop_assert!((after - magnitude).abs() < 1e-9 * magnitude.max(1.0));
            let s = magnitude / before;
            for (x, y) in a.iter().chain(&b).zip(ca.iter().chain(&cb)) {
                prop_assert!((x * s - y).abs() < 1e-12);
            }
        }
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        unet_base: 4,
        hidden: 8,
        ..ModelConfig::tiny(BackboneKind::UNet)
    }
}

fn small_data(n: usize, seed: u64) -> (CharSet, Vec<Prepared>) {
    let atlas = GlyphAtlas::desk();
    let cs = CharSet::new(atlas.chars().to_vec()).unwrap();
    let mut sc = SynthConfig::default();
    sc.max_words = 1;
    sc.max_word_len = 3;
    let data = synth_prepared(n, &sc, &atlas, &cs, 32, seed).unwrap();
    (cs, data)
}

fn quick(seed: u64, iters: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_iters: iters,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let (cs, data) = small_data(8, 1);
    let run = |seed| {
        let mut m = Recognizer::<f64>::new(small_config(), cs.classes(), seed).unwrap();
        train(&mut m, &data, None, &quick(seed, 6), &mut Vec::new(), None)
            .unwrap()
            .losses
    };
    let a = run(3);
    assert_eq!(a.len(), 6);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
}

#[test]
fn losses_stay_finite_across_seeds() {
    let (cs, data) = small_data(8, 2);
    for seed in 0..5 {
        let mut m = Recognizer::<f32>::new(small_config(), cs.classes(), seed).unwrap();
        let r = train(&mut m, &data, None, &quick(seed, 4), &mut Vec::new(), None).unwrap();
        assert!(
            r.losses.iter().all(|l| l.is_finite()),
            "seed {seed}: {:?}",
            r.losses
        );
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (cs, data) = small_data(8, 3);
    let mut m = Recognizer::<f64>::new(small_config(), cs.classes(), 0).unwrap();
    let before: Vec<Vec<f64>> = m.store.params().iter().map(|p| p.data().to_vec()).collect();
    let mut cfg = quick(0, 5);
    cfg.optimizer.lr = 0.0;
    train(&mut m, &data, None, &cfg, &mut Vec::new(), None).unwrap();
    for (p, b) in m.store.params().iter().zip(&before) {
        assert_eq!(p.data(), &b[..]);
    }
}

#[test]
fn log_has_one_line_per_iteration_and_evaluations() {
    let (cs, data) = small_data(4, 4);
    let mut m = Recognizer::<f32>::new(small_config(), cs.classes(), 0).unwrap();
    let mut cfg = quick(0, 4);
    cfg.eval_every = 2;
    let mut log = Vec::new();
    let r = train(&mut m, &data, None, &cfg, &mut log, None).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("1\t") && lines[0].ends_with('\t'));
    assert_eq!(
        r.evaluations.iter().map(|e| e.0).collect::<Vec<_>>(),
        vec![2, 4]
    );
    assert_eq!(
        lines[3].split('\t').nth(2).unwrap().parse::<f64>().unwrap(),
        r.evaluations[1].1
    );
}

#[test]
fn labels_outside_the_head_are_rejected() {
    let (cs, mut data) = small_data(2, 5);
    let mut m = Recognizer::<f32>::new(small_config(), cs.classes(), 0).unwrap();
    data[0].labels.push(cs.classes() + 3);
    let e = train(&mut m, &data, None, &quick(0, 1), &mut Vec::new(), None).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (cs, data) = small_data(4, 6);
    let mut m = Recognizer::<f64>::new(small_config(), cs.classes(), 9).unwrap();
    train(&mut m, &data, None, &quick(9, 3), &mut Vec::new(), None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    let mut echo = Config::new();
    echo.set("data", "direction", "rtl");
    checkpoint::save(&a, &m, &cs, &echo).unwrap();
    let loaded = checkpoint::load::<f64>(&a, Some(&cs)).unwrap();
    assert_eq!(loaded.config.get("data", "direction"), Some("rtl"));
    checkpoint::save(&b, &loaded.model, &loaded.charset, &loaded.config).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let probe: Vec<&Prepared> = data.iter().collect();
    let (before, _) = infer(&m, &probe).unwrap();
    let (after, _) = infer(&loaded.model, &probe).unwrap();
    assert_eq!(before.data(), after.data());
    assert_eq!(
        evaluate(&m, &data, 4).unwrap(),
        evaluate(&loaded.model, &data, 4).unwrap()
    );
}

#[test]
fn best_checkpoint_records_its_iteration() {
    let (cs, data) = small_data(4, 9);
    let mut m = Recognizer::<f32>::new(small_config(), cs.classes(), 2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let target = CheckpointTarget {
        path: tmp.path().join("best.ckpt"),
        charset: &cs,
        echo: Config::new(),
    };
    let mut cfg = quick(2, 3);
    cfg.eval_every = 1;
    let r = train(&mut m, &data, None, &cfg, &mut Vec::new(), Some(&target)).unwrap();
    let loaded = checkpoint::load::<f32>(&target.path, Some(&cs)).unwrap();
    let best = r.best_iteration.unwrap().to_string();
    assert_eq!(
        loaded.config.get("train", "best_iteration"),
        Some(best.as_str())
    );
    let acc: f64 = loaded
        .config
        .get("train", "best_accuracy")
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(Some(acc), r.best_accuracy);
}

#[test]
fn checkpoint_validation() {
    let (cs, _) = small_data(1, 7);
    let m = Recognizer::<f32>::new(small_config(), cs.classes(), 0).unwrap();
    let bytes = checkpoint::to_bytes(&m, &cs, &Config::new()).unwrap();
    assert!(checkpoint::from_bytes::<f32>(&bytes, Some(&cs)).is_ok());

    for pos in [0, 9, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        let e = checkpoint::from_bytes::<f32>(&bad, None).err().unwrap();
        assert!(matches!(e, Error::Checkpoint(_)), "byte {pos}");
    }
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 9], None).is_err());

    let other = CharSet::new(vec!['a', 'b', ' ']).unwrap();
    let e = checkpoint::from_bytes::<f32>(&bytes, Some(&other))
        .err()
        .unwrap();
    assert!(e.to_string().contains("charset"));

    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        checkpoint::load::<f32>(&tmp.path().join("missing.ckpt"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn f32_and_f64_models_agree() {
    let (cs, data) = small_data(2, 8);
    let m = Recognizer::<f64>::new(small_config(), cs.classes(), 1).unwrap();
    let m32: Recognizer<f32> = m.cast();
    let probe: Vec<&Prepared> = data.iter().collect();
    let (a, _) = infer(&m, &probe).unwrap();
    let (b, _) = infer(&m32, &probe).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-3);
    }
}

#[test]
fn dataset_loading_errors_are_specific() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(load_dataset(dir).is_err());
    generate_dataset(3, &SynthConfig::default(), &GlyphAtlas::desk(), 2, dir).unwrap();
    let ds = load_dataset(dir).unwrap();
    assert_eq!(ds.samples.len(), 3);

    let labels = fs::read_to_string(dir.join("labels.tsv")).unwrap();
    fs::write(
        dir.join("labels.tsv"),
        format!("{labels}images/999999.png\tab\n"),
    )
    .unwrap();
    let e = load_dataset(dir).unwrap_err().to_string();
    assert!(e.contains("row 4") && e.contains("does not exist"), "{e}");

    fs::write(dir.join("labels.tsv"), "images/000000.png\ta%\n").unwrap();
    let e = load_dataset(dir).unwrap_err().to_string();
    assert!(e.contains("not in charset"), "{e}");

    fs::write(dir.join("labels.tsv"), "images/000000.png no tab\n").unwrap();
    assert!(matches!(load_dataset(dir), Err(Error::Data(_))));

    fs::write(dir.join("labels.tsv"), "").unwrap();
    assert!(matches!(load_dataset(dir), Err(Error::Data(_))));
}
