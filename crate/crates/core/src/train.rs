//! AdaDelta training with global-norm clipping, evaluation and decoding.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::charset::CharSet;
use crate::checkpoint;
use crate::config::Config;
use crate::ctc::{beam_decode, greedy_decode, LogProbMatrix};
use crate::dataset::{assemble_batch, Prepared};
use crate::error::{Error, Result};
use crate::metrics::{char_accuracy, Pair};
use crate::model::{ParamStore, Pass, Recognizer};
use crate::real::Real;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub use crate::model::he_init;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// L2 norm of all gradients taken together.
pub fn global_norm<T: Real>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by `magnitude / norm` when the global norm exceeds
/// `magnitude`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [&mut [T]], magnitude: f64) -> f64 {
    let norm = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > magnitude {
        let s = T::lit(magnitude / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn clip_store<T: Real>(store: &mut ParamStore<T>, magnitude: f64) -> f64 {
    let mut grads: Vec<&mut [T]> = store
        .params_mut()
        .iter_mut()
        .filter_map(|p| p.grad_mut())
        .collect();
    clip_gradients(&mut grads, magnitude)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDeltaParams {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdaDeltaParams {
    fn default() -> Self {
        AdaDeltaParams {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// One AdaDelta update of `param` in place:
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1−ρ) g²
/// Δx     = −√(E[Δx²]+ε) / √(E[g²]+ε) · g
/// E[Δx²] ← ρ E[Δx²] + (1−ρ) Δx²
/// x      ← x + lr Δx
/// ```
pub fn adadelta_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    sq_grad: &mut [T],
    sq_delta: &mut [T],
    hp: AdaDeltaParams,
) {
    let (rho, eps, lr) = (T::lit(hp.rho), T::lit(hp.eps), T::lit(hp.lr));
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        sq_grad[i] = rho * sq_grad[i] + (one - rho) * g * g;
        let dx = -((sq_delta[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
        sq_delta[i] = rho * sq_delta[i] + (one - rho) * dx * dx;
        param[i] += lr * dx;
    }
}

/// Per-parameter accumulators `E[g²]` and `E[Δx²]`.
#[derive(Clone, Debug)]
pub struct AdaDeltaState<T> {
    pub params: AdaDeltaParams,
    pub sq_grad: Vec<Vec<T>>,
    pub sq_delta: Vec<Vec<T>>,
}

impl<T: Real> AdaDeltaState<T> {
    pub fn new(store: &ParamStore<T>, params: AdaDeltaParams) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.numel()])
                .collect()
        };
        AdaDeltaState {
            params,
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.sq_grad.len() != store.len() {
            return Err(Error::dim(
                "optimizer state does not match the parameter store",
            ));
        }
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            if g.len() != self.sq_grad[i].len() {
                return Err(Error::dim(format!(
                    "optimizer state {i} has the wrong length"
                )));
            }
            adadelta_step(
                p.data_mut(),
                &g,
                &mut self.sq_grad[i],
                &mut self.sq_delta[i],
                self.params,
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip: f64,
    pub max_iters: usize,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: AdaDeltaParams,
    pub bn_momentum: f64,
    /// Stop once the monitored accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            clip: 5.0,
            max_iters: 3000,
            eval_every: 100,
            seed: 0,
            optimizer: AdaDeltaParams::default(),
            bn_momentum: 0.1,
            target_accuracy: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let target: Option<f64> = cfg.parse_key("train", "target_accuracy")?;
        let c = TrainConfig {
            batch_size: cfg.get_or("train", "batch_size", d.batch_size)?,
            clip: cfg.get_or("train", "clip", d.clip)?,
            max_iters: cfg.get_or("train", "max_iters", d.max_iters)?,
            eval_every: cfg.get_or("train", "eval_every", d.eval_every)?,
            seed: cfg.get_or("train", "seed", d.seed)?,
            optimizer: AdaDeltaParams {
                rho: cfg.get_or("train", "rho", d.optimizer.rho)?,
                eps: cfg.get_or("train", "eps", d.optimizer.eps)?,
                lr: cfg.get_or("train", "lr", d.optimizer.lr)?,
            },
            bn_momentum: cfg.get_or("train", "bn_momentum", d.bn_momentum)?,
            target_accuracy: target,
            threads: cfg.get_or("train", "threads", d.threads)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, cfg: &mut Config) {
        cfg.set("train", "batch_size", self.batch_size.to_string());
        cfg.set("train", "clip", self.clip.to_string());
        cfg.set("train", "max_iters", self.max_iters.to_string());
        cfg.set("train", "eval_every", self.eval_every.to_string());
        cfg.set("train", "seed", self.seed.to_string());
        cfg.set("train", "rho", self.optimizer.rho.to_string());
        cfg.set("train", "eps", self.optimizer.eps.to_string());
        cfg.set("train", "lr", self.optimizer.lr.to_string());
        cfg.set("train", "bn_momentum", self.bn_momentum.to_string());
        if let Some(t) = self.target_accuracy {
            cfg.set("train", "target_accuracy", t.to_string());
        }
        cfg.set("train", "threads", self.threads.to_string());
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("train.clip must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("train.threads must be at least 1".into()));
        }
        let o = self.optimizer;
        if !(0.0..1.0).contains(&o.rho) || !(o.eps > 0.0) || o.lr < 0.0 {
            return Err(Error::Config(
                "optimizer needs rho in [0,1), eps > 0, lr ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Where and how to persist the best model.
pub struct CheckpointTarget<'a> {
    pub path: PathBuf,
    pub charset: &'a CharSet,
    /// Extra configuration echoed into the file.
    pub echo: Config,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
    /// `(iteration, accuracy)` at every evaluation.
    pub evaluations: Vec<(usize, f64)>,
    pub best_accuracy: Option<f64>,
    pub best_iteration: Option<usize>,
    pub iterations: usize,
}

/// Trains `model` on `train`; evaluates on `val` (or on `train` when absent)
/// every `eval_every` iterations and writes one log line per iteration:
/// `iter<TAB>loss<TAB>val_accuracy` (empty when not evaluated).
pub fn train<T: Real>(
    model: &mut Recognizer<T>,
    train_set: &[Prepared],
    val: Option<&[Prepared]>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint: Option<&CheckpointTarget<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for (i, p) in train_set.iter().enumerate() {
        if p.labels.iter().any(|&l| l + 1 >= model.classes) {
            return Err(Error::Data(format!(
                "training sample {i} has labels outside the model's {} characters",
                model.classes - 1
            )));
        }
    }
    let monitor = val.unwrap_or(train_set);
    let mut opt = AdaDeltaState::new(&model.store, cfg.optimizer);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let io = |e: std::io::Error| Error::io("training log", e);
    for it in 1..=cfg.max_iters {
        if cursor >= order.len() {
            order.sort_unstable();
            order.shuffle(&mut rng_for(derive_seed(cfg.seed, SHUFFLE_STREAM), epoch));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let indices = order[cursor..end].to_vec();
        cursor = end;
        let loss =
            train_step(model, &mut opt, train_set, &indices, cfg, it).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "iteration {it}: non-finite loss on batch samples {indices:?}: {m}"
                )),
                other => other,
            })?;
        report.losses.push(loss);
        report.iterations = it;
        let mut acc_field = String::new();
        let due = cfg.eval_every > 0 && (it % cfg.eval_every == 0 || it == cfg.max_iters);
        if due {
            let acc = evaluate(model, monitor, cfg.batch_size)?;
            acc_field = format!("{acc}");
            report.evaluations.push((it, acc));
            if report.best_accuracy.is_none_or(|b| acc > b) {
                report.best_accuracy = Some(acc);
                report.best_iteration = Some(it);
                if let Some(ck) = checkpoint {
                    let mut echo = ck.echo.clone();
                    cfg.write_to(&mut echo);
                    echo.set("train", "best_iteration", it.to_string());
                    echo.set("train", "best_accuracy", acc.to_string());
                    checkpoint::save(&ck.path, model, ck.charset, &echo)?;
                }
            }
        }
        writeln!(log, "{it}\t{loss}\t{acc_field}").map_err(io)?;
        if due
            && cfg
                .target_accuracy
                .is_some_and(|t| report.best_accuracy.unwrap_or(f64::MIN) >= t)
        {
            break;
        }
    }
    Ok(report)
}

/// Forward, CTC, backward, clip and AdaDelta on one batch; returns the loss.
pub fn train_step<T: Real>(
    model: &mut Recognizer<T>,
    opt: &mut AdaDeltaState<T>,
    data: &[Prepared],
    indices: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<f64> {
    let items: Vec<&Prepared> = indices.iter().map(|&i| &data[i]).collect();
    let batch = assemble_batch::<T>(&items, &model.config)?;
    let pass = Pass::new(
        &model.store,
        true,
        derive_seed(derive_seed(cfg.seed, DROPOUT_STREAM), iteration as u64),
    );
    let x = pass.input(batch.images);
    let lp = model.forward(&pass, x)?;
    let loss = pass.tape().ctc_loss(lp, &batch.targets, &batch.frames)?;
    let value = pass.tape().value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss {value}")));
    }
    let outcome = pass.finish(Some(loss))?;
    model.store.zero_grads();
    model.store.apply(outcome, T::lit(cfg.bn_momentum))?;
    clip_store(&mut model.store, cfg.clip);
    opt.step(&mut model.store)?;
    Ok(value)
}

/// Eval-mode log-probabilities `[T,N,C]` and frame counts for `items`.
pub fn infer<T: Real>(
    model: &Recognizer<T>,
    items: &[&Prepared],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let batch = assemble_batch::<T>(items, &model.config)?;
    let pass = Pass::new(&model.store, false, 0);
    let x = pass.input(batch.images);
    let lp = model.forward(&pass, x)?;
    Ok(((*pass.tape().value(lp)).clone(), batch.frames))
}

/// Per-sample `LogProbMatrix` views of a `[T,N,C]` tensor.
pub fn split_log_probs<T: Real>(lp: &Tensor<T>, frames: &[usize]) -> Result<Vec<LogProbMatrix>> {
    let s = lp.shape();
    let (t_max, n, c) = (s[0], s[1], s[2]);
    (0..n)
        .map(|ni| {
            let len = frames[ni].min(t_max);
            let mut data = Vec::with_capacity(len * c);
            for t in 0..len {
                data.extend(
                    lp.data()[(t * n + ni) * c..(t * n + ni + 1) * c]
                        .iter()
                        .map(|v| v.as_f64()),
                );
            }
            LogProbMatrix::new(len, c, data)
        })
        .collect()
}

/// Greedy decoding, or prefix beam search when `beam` is given.
pub fn decode<T: Real>(
    model: &Recognizer<T>,
    items: &[&Prepared],
    beam: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let (lp, frames) = infer(model, items)?;
    split_log_probs(&lp, &frames)?
        .iter()
        .map(|m| match beam {
            None => Ok(greedy_decode(m)),
            Some(w) => beam_decode(m, w).map(|h| h.labels),
        })
        .collect()
}

/// Decoded label sequences for every item, in batches of `batch_size`.
pub fn predict_all<T: Real>(
    model: &Recognizer<T>,
    items: &[Prepared],
    batch_size: usize,
    beam: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        out.extend(decode(model, &refs, beam)?);
    }
    Ok(out)
}

/// Prediction/ground-truth pairs with labels mapped through `charset`.
pub fn prediction_pairs<T: Real>(
    model: &Recognizer<T>,
    items: &[Prepared],
    charset: &CharSet,
    batch_size: usize,
    beam: Option<usize>,
) -> Result<Vec<Pair>> {
    let preds = predict_all(model, items, batch_size, beam)?;
    Ok(preds
        .iter()
        .zip(items)
        .map(|(p, it)| Pair::new(charset.decode(p), it.text.clone()))
        .collect())
}

/// Greedy character accuracy on `items`, comparing label sequences.
pub fn evaluate<T: Real>(
    model: &Recognizer<T>,
    items: &[Prepared],
    batch_size: usize,
) -> Result<f64> {
    let preds = predict_all(model, items, batch_size, None)?;
    // Labels are mapped to private-use code points so any charset works.
    let to_str = |l: &[usize]| -> String {
        l.iter()
            .map(|&i| char::from_u32(0xF0000 + i as u32).unwrap_or('?'))
            .collect()
    };
    let pairs: Vec<Pair> = preds
        .iter()
        .zip(items)
        .map(|(p, it)| Pair::new(to_str(p), to_str(&it.labels)))
        .collect();
    char_accuracy(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_halves_norm_ten() {
        let mut a = vec![6.0f64, 0.0];
        let mut b = vec![8.0f64];
        let n = clip_gradients(&mut [&mut a[..], &mut b[..]], 5.0);
        assert_eq!(n, 10.0);
        assert_eq!((a[0], b[0]), (3.0, 4.0));
        let n = clip_gradients(&mut [&mut a[..], &mut b[..]], 5.0);
        assert_eq!(n, 5.0);
        assert_eq!((a[0], b[0]), (3.0, 4.0));
    }

    #[test]
    fn zero_gradient_leaves_param_and_decays_state() {
        let mut p = [1.5f64];
        let mut eg = [0.4];
        let mut ex = [0.2];
        adadelta_step(&mut p, &[0.0], &mut eg, &mut ex, AdaDeltaParams::default());
        assert_eq!(p[0], 1.5);
        assert!((eg[0] - 0.38).abs() < 1e-15 && (ex[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip() {
        let mut t = TrainConfig::default();
        t.batch_size = 7;
        t.target_accuracy = Some(0.99);
        let mut c = Config::new();
        t.write_to(&mut c);
        assert_eq!(TrainConfig::from_config(&c).unwrap(), t);
    }
}
