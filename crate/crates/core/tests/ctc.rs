use std::collections::HashMap;

use linerec::ctc::{
    beam_decode, ctc_loss, ctc_loss_and_grad, greedy_decode, is_feasible, min_frames, LogProbMatrix,
};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, steps: usize, classes: usize) -> LogProbMatrix {
    let logits: Vec<f64> = (0..steps * classes)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    LogProbMatrix::from_logits(steps, classes, &logits).unwrap()
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probability of every collapsed transcript, by walking all
/// `classes^steps` frame paths.
fn enumerate(m: &LogProbMatrix) -> HashMap<Vec<usize>, f64> {
    let (steps, classes) = (m.steps(), m.classes());
    let mut terms: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let total = classes.pow(steps as u32);
    let mut path = vec![0; steps];
    for mut code in 0..total {
        let mut lp = 0.0;
        for (t, slot) in path.iter_mut().enumerate() {
            *slot = code % classes;
            code /= classes;
            lp += m.get(t, *slot);
        }
        terms
            .entry(collapse(&path, m.blank()))
            .or_default()
            .push(lp);
    }
    terms.into_iter().map(|(k, v)| (k, logsumexp(&v))).collect()
}

fn brute_loss(m: &LogProbMatrix, target: &[usize]) -> f64 {
    enumerate(m).get(target).map_or(f64::INFINITY, |lp| -lp)
}

/// Seeded instance from the family T ≤ 6, L ≤ 3, K ≤ 4.
fn instance(seed: u64) -> (LogProbMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = rng.random_range(1..=6);
    let labels = rng.random_range(1..=4);
    let len = rng.random_range(0..=3);
    let m = random_matrix(&mut rng, steps, labels + 1);
    let target = (0..len).map(|_| rng.random_range(0..labels)).collect();
    (m, target)
}

#[test]
fn loss_matches_path_enumeration() {
    let mut feasible = 0;
    for seed in 0..100 {
        let (m, target) = instance(seed);
        let want = brute_loss(&m, &target);
        let got = ctc_loss(&m, &target).unwrap();
        if want.is_infinite() {
            assert!(got.is_infinite() && got > 0.0, "seed {seed}: {got}");
            assert!(!is_feasible(&target, m.steps()));
        } else {
            feasible += 1;
            assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
        }
    }
    assert!(feasible > 50);
}

#[test]
fn loss_matches_enumeration_for_256_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_matrix(&mut rng, 4, 4);
    let target = [0, 2];
    let want = brute_loss(&m, &target);
    assert!((ctc_loss(&m, &target).unwrap() - want).abs() < 1e-12);
}

#[test]
fn single_frame_and_empty_target() {
    let p: f64 = 0.3;
    let m = LogProbMatrix::new(1, 3, vec![p.ln(), 0.5f64.ln(), 0.2f64.ln()]).unwrap();
    assert!((ctc_loss(&m, &[0]).unwrap() + p.ln()).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_matrix(&mut rng, 5, 4);
    let want: f64 = -(0..5).map(|t| m.get(t, m.blank())).sum::<f64>();
    assert!((ctc_loss(&m, &[]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn infeasible_targets() {
    assert_eq!(min_frames(&[1, 1, 2]), 4);
    assert_eq!(min_frames(&[0, 1, 2]), 3);
    assert!(is_feasible(&[1, 1], 3));
    assert!(!is_feasible(&[1, 1], 2));
    let m = LogProbMatrix::zeros(2, 3);
    assert_eq!(ctc_loss(&m, &[1, 1]).unwrap(), f64::INFINITY);
    assert!(ctc_loss_and_grad(&m, &[1, 1]).is_err());
}

#[test]
fn gradient_single_path_and_symmetric_paths() {
    let m = LogProbMatrix::new(1, 3, vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
    let (_, g) = ctc_loss_and_grad(&m, &[1]).unwrap();
    assert_eq!(g.row(0), &[0.0, -1.0, 0.0]);

    let row = [0.6f64.ln(), 0.4f64.ln()];
    let m = LogProbMatrix::new(2, 2, [row, row].concat()).unwrap();
    let (_, g) = ctc_loss_and_grad(&m, &[0]).unwrap();
    assert!((g.get(0, 0) - g.get(1, 0)).abs() < 1e-15);
    assert!((g.get(0, 1) - g.get(1, 1)).abs() < 1e-15);
}

fn fd_error(m: &LogProbMatrix, target: &[usize]) -> f64 {
    let (loss, g) = ctc_loss_and_grad(m, target).unwrap();
    assert!((loss - ctc_loss(m, target).unwrap()).abs() < 1e-12);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..m.steps() {
        for k in 0..m.classes() {
            let mut plus = m.clone();
            plus.set(t, k, m.get(t, k) + h);
            let mut minus = m.clone();
            minus.set(t, k, m.get(t, k) - h);
            let numeric =
                (ctc_loss(&plus, target).unwrap() - ctc_loss(&minus, target).unwrap()) / (2.0 * h);
            let a = g.get(t, k);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = random_matrix(&mut rng, 5, 4);
    assert!(fd_error(&m, &[1, 2]) < 1e-6);

    for seed in 0..100 {
        let (m, target) = instance(seed);
        if is_feasible(&target, m.steps()) {
            let e = fd_error(&m, &target);
            assert!(e < 1e-6, "seed {seed}: {e}");
        }
    }
}

#[test]
fn loss_is_order_sensitive() {
    let mut checked = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = random_matrix(&mut rng, 6, 5);
        let target: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let reversed: Vec<usize> = target.iter().rev().cloned().collect();
        let a = ctc_loss(&m, &target).unwrap();
        let b = ctc_loss(&m, &reversed).unwrap();
        if reversed == target {
            assert_eq!(a, b);
        } else {
            checked += 1;
            assert!((a - b).abs() > 1e-9, "seed {seed}");
        }
    }
    assert!(checked > 50);
}

/// One-hot log-probs along a forced path.
fn forced(path: &[usize], classes: usize) -> LogProbMatrix {
    let mut m = LogProbMatrix::new(path.len(), classes, vec![-30.0; path.len() * classes]).unwrap();
    for (t, &k) in path.iter().enumerate() {
        m.set(t, k, 0.0);
    }
    m
}

#[test]
fn greedy_examples() {
    let (a, b, blank) = (0, 1, 2);
    assert_eq!(greedy_decode(&forced(&[a, a, blank, b], 3)), vec![a, b]);
    assert_eq!(greedy_decode(&forced(&[a, blank, a], 3)), vec![a, a]);
    assert!(greedy_decode(&forced(&[blank; 5], 3)).is_empty());
}

proptest! {
    #[test]
    fn greedy_recovers_padded_encoding(
        target in prop::collection::vec(0usize..6, 0..8),
        pad in 0usize..5,
        stretch in 1usize..3,
    ) {
        let blank = 6;
        let mut path = vec![blank; pad];
        let mut prev = None;
        for &k in &target {
            if prev == Some(k) {
                path.push(blank);
            }
            path.extend(std::iter::repeat_n(k, stretch));
            prev = Some(k);
        }
        path.extend(std::iter::repeat_n(blank, pad));
        if path.is_empty() {
            path.push(blank);
        }
        prop_assert_eq!(greedy_decode(&forced(&path, 7)), target);
    }
}

fn exhaustive_best(m: &LogProbMatrix) -> (Vec<usize>, f64) {
    enumerate(m)
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[test]
fn beam_single_frame() {
    let m = LogProbMatrix::new(1, 3, vec![0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()]).unwrap();
    assert_eq!(beam_decode(&m, 4).unwrap().labels, vec![1]);
    let m = LogProbMatrix::new(1, 3, vec![0.2f64.ln(), 0.1f64.ln(), 0.7f64.ln()]).unwrap();
    assert!(beam_decode(&m, 4).unwrap().labels.is_empty());
    assert!(beam_decode(&m, 0).is_err());
}

#[test]
fn wide_beam_equals_exhaustive_argmax() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = if seed == 0 {
            3
        } else {
            rng.random_range(1..=5)
        };
        let classes = if seed == 0 {
            3
        } else {
            rng.random_range(2..=4)
        };
        let m = random_matrix(&mut rng, steps, classes);
        let (labels, lp) = exhaustive_best(&m);
        let got = beam_decode(&m, classes.pow(steps as u32)).unwrap();
        assert_eq!(got.labels, labels, "seed {seed}");
        assert!((got.log_prob - lp).abs() < 1e-9);
    }
}

#[test]
fn beam_width_never_lowers_transcript_probability() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let steps = rng.random_range(2..=6);
        let classes = rng.random_range(2..=4);
        let m = random_matrix(&mut rng, steps, classes);
        let mut last = f64::NEG_INFINITY;
        for width in 1..=12 {
            let h = beam_decode(&m, width).unwrap();
            let lp = -ctc_loss(&m, &h.labels).unwrap();
            assert!((h.log_prob - lp).abs() < 1e-9);
            assert!(
                lp >= last - 1e-12,
                "seed {seed} width {width}: {lp} < {last}"
            );
            last = lp;
        }
    }
}
