//! Sequence stage: height collapse, temporal dropout, stacked BiLSTM and
//! the per-step classifier.
//!
//! Sequences are time-major `[T, N, D]` tensors.

use rand::seq::index;

use super::layers::{Builder, Linear};
use super::params::{ParamId, Pass};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tensor, Var};

/// A `[T, N, D]` sequence on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub var: Var,
    pub steps: usize,
    pub batch: usize,
    pub dim: usize,
}

/// Width-indexed visual features `V = {v_i}`.
pub type VisualFeatureSequence = Sequence;
/// Context features `H = {h_t}` produced by the BiLSTM stack.
pub type ContextSequence = Sequence;

impl Sequence {
    pub fn from_var<T: Real>(pass: &Pass<'_, T>, var: Var) -> Result<Self> {
        let s = pass.tape().shape(var);
        if s.len() != 3 {
            return Err(Error::dim(format!("sequence must be [T,N,D], got {s:?}")));
        }
        Ok(Sequence {
            var,
            steps: s[0],
            batch: s[1],
            dim: s[2],
        })
    }
}

/// Mean over height, then reorder `[N,C,1,W] → [W,N,C]`.
pub fn collapse_height<T: Real>(
    pass: &Pass<'_, T>,
    features: Var,
) -> Result<VisualFeatureSequence> {
    let tape = pass.tape();
    let pooled = tape.mean_height(features)?;
    let s = tape.shape(pooled);
    let flat = tape.reshape(pooled, &[s[0], s[1], s[3]])?;
    let seq = tape.permute(flat, &[2, 0, 1])?;
    Sequence::from_var(pass, seq)
}

/// Averages `passes` independent masks that each zero `⌊T·p⌋` whole
/// timesteps per sample and scale survivors by `1/(1−p)`. Identity outside
/// training.
pub fn temporal_dropout<T: Real>(
    pass: &Pass<'_, T>,
    v: VisualFeatureSequence,
    passes: usize,
    drop_fraction: f64,
) -> Result<VisualFeatureSequence> {
    if passes == 0 {
        return Err(Error::contract("temporal dropout needs at least one pass"));
    }
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::contract(format!(
            "drop fraction {drop_fraction} outside [0, 1)"
        )));
    }
    if !pass.training() || drop_fraction == 0.0 {
        return Ok(v);
    }
    if v.steps < 2 {
        pass.warn(format!(
            "temporal dropout skipped: sequence of {} step(s) cannot drop half",
            v.steps
        ));
        return Ok(v);
    }
    let mask = dropout_mask(&mut pass.rng(), v.steps, v.batch, passes, drop_fraction);
    let mut full = Vec::with_capacity(v.steps * v.batch * v.dim);
    for &m in &mask {
        full.extend(std::iter::repeat_n(T::lit(m), v.dim));
    }
    let var = pass.tape().mask_mul(v.var, full)?;
    Ok(Sequence { var, ..v })
}

/// `[T, N]` averaged keep-scales.
pub fn dropout_mask(
    rng: &mut crate::rng::Rng,
    steps: usize,
    batch: usize,
    passes: usize,
    drop_fraction: f64,
) -> Vec<f64> {
    let drop = (steps as f64 * drop_fraction).floor() as usize;
    let keep_scale = 1.0 / (1.0 - drop_fraction);
    let mut acc = vec![0.0; steps * batch];
    for n in 0..batch {
        for _ in 0..passes {
            let mut kept = vec![true; steps];
            for t in index::sample(rng, steps, drop) {
                kept[t] = false;
            }
            for (t, k) in kept.into_iter().enumerate() {
                if k {
                    acc[t * batch + n] += keep_scale;
                }
            }
        }
    }
    acc.iter_mut().for_each(|m| *m /= passes as f64);
    acc
}

/// One direction of an LSTM; gate order in the packed weights is
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new<T: Real>(b: &mut Builder<'_, T>, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmDirection {
            w_ih: b.he("w_ih", &[input, 4 * hidden], input)?,
            w_hh: b.he("w_hh", &[hidden, 4 * hidden], hidden)?,
            bias: b.filled("bias", &[4 * hidden], 0.0),
            hidden,
        })
    }

    /// Runs over `seq` (forwards, or backwards when `reverse`) and returns
    /// the hidden state for every step in time order.
    fn run<T: Real>(&self, pass: &Pass<'_, T>, seq: &Sequence, reverse: bool) -> Result<Vec<Var>> {
        let tape = pass.tape();
        let (steps, n, h) = (seq.steps, seq.batch, self.hidden);
        let flat = tape.reshape(seq.var, &[steps * n, seq.dim])?;
        let proj = tape.matmul(flat, pass.param(self.w_ih))?;
        let proj = tape.add_bias_last(proj, pass.param(self.bias))?;
        let proj = tape.reshape(proj, &[steps, n, 4 * h])?;
        let w_hh = pass.param(self.w_hh);
        let mut hidden = tape.constant(Tensor::zeros(&[n, h]));
        let mut cell = tape.constant(Tensor::zeros(&[n, h]));
        let mut out = vec![hidden; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let x_t = tape.index0(proj, t)?;
            let rec = tape.matmul(hidden, w_hh)?;
            let gates = tape.add(x_t, rec)?;
            let i = tape.sigmoid(tape.narrow(gates, 1, 0, h)?)?;
            let f = tape.sigmoid(tape.narrow(gates, 1, h, h)?)?;
            let g = tape.tanh(tape.narrow(gates, 1, 2 * h, h)?)?;
            let o = tape.sigmoid(tape.narrow(gates, 1, 3 * h, h)?)?;
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            hidden = tape.mul(o, tape.tanh(cell)?)?;
            out[t] = hidden;
        }
        Ok(out)
    }
}

/// Bidirectional layer: `h_t = W_f·h^f_t + W_b·h^b_t + b`.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub combine_forward: ParamId,
    pub combine_backward: ParamId,
    pub combine_bias: ParamId,
    pub out_dim: usize,
}

impl BiLstmLayer {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstmLayer {
            forward: LstmDirection::new(&mut b.sub("fwd"), input, hidden)?,
            backward: LstmDirection::new(&mut b.sub("bwd"), input, hidden)?,
            combine_forward: b.he("combine_fwd", &[hidden, hidden], 2 * hidden)?,
            combine_backward: b.he("combine_bwd", &[hidden, hidden], 2 * hidden)?,
            combine_bias: b.filled("combine_bias", &[hidden], 0.0),
            out_dim: hidden,
        })
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, seq: Sequence) -> Result<Sequence> {
        if seq.steps == 0 {
            return Err(Error::contract("BiLSTM over an empty sequence"));
        }
        let tape = pass.tape();
        let (steps, n) = (seq.steps, seq.batch);
        let hf = self.forward.run(pass, &seq, false)?;
        let hb = self.backward.run(pass, &seq, true)?;
        let hid = self.forward.hidden;
        let hf = tape.reshape(tape.stack(&hf)?, &[steps * n, hid])?;
        let hb = tape.reshape(tape.stack(&hb)?, &[steps * n, self.backward.hidden])?;
        let a = tape.matmul(hf, pass.param(self.combine_forward))?;
        let b = tape.matmul(hb, pass.param(self.combine_backward))?;
        let y = tape.add_bias_last(tape.add(a, b)?, pass.param(self.combine_bias))?;
        let var = tape.reshape(y, &[steps, n, self.out_dim])?;
        Ok(Sequence {
            var,
            steps,
            batch: n,
            dim: self.out_dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqHeadConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout_passes: usize,
    pub drop_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SeqHead {
    pub config: SeqHeadConfig,
    pub layers: Vec<BiLstmLayer>,
    pub classifier: Linear,
    pub classes: usize,
}

impl SeqHead {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        config: SeqHeadConfig,
        input: usize,
        classes: usize,
    ) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 {
            return Err(Error::contract(
                "sequence head needs a positive hidden size and layer count",
            ));
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut dim = input;
        for l in 0..config.layers {
            layers.push(BiLstmLayer::new(
                &mut b.sub(&format!("bilstm{l}")),
                dim,
                config.hidden,
            )?);
            dim = config.hidden;
        }
        let classifier = Linear::new(&mut b.sub("classifier"), dim, classes)?;
        Ok(SeqHead {
            config,
            layers,
            classifier,
            classes,
        })
    }

    pub fn dbilstm<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        v: VisualFeatureSequence,
    ) -> Result<ContextSequence> {
        self.layers
            .iter()
            .try_fold(v, |s, layer| layer.forward(pass, s))
    }

    /// Per-step log-probabilities `[T, N, classes]`.
    pub fn classify<T: Real>(&self, pass: &Pass<'_, T>, h: ContextSequence) -> Result<Var> {
        classify(pass, &self.classifier, h)
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, features: Var) -> Result<Var> {
        let v = collapse_height(pass, features)?;
        let v = temporal_dropout(
            pass,
            v,
            self.config.dropout_passes,
            self.config.drop_fraction,
        )?;
        let h = self.dbilstm(pass, v)?;
        self.classify(pass, h)
    }
}

pub fn classify<T: Real>(pass: &Pass<'_, T>, linear: &Linear, h: ContextSequence) -> Result<Var> {
    let tape = pass.tape();
    let flat = tape.reshape(h.var, &[h.steps * h.batch, h.dim])?;
    let logits = linear.forward(pass, flat)?;
    let lp = tape.log_softmax(logits)?;
    tape.reshape(lp, &[h.steps, h.batch, linear.out_features])
}
