//! Connectionist Temporal Classification: loss, gradient and decoding.
//!
//! All lattice arithmetic is done in `f64` log space. The blank label is
//! always the last class (`classes − 1`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// `T × C` matrix of per-step log-probabilities; blank is column `C − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix {
    steps: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogProbMatrix {
    pub fn zeros(steps: usize, classes: usize) -> Self {
        LogProbMatrix {
            steps,
            classes,
            data: vec![0.0; steps * classes],
        }
    }

    pub fn new(steps: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 1 || data.len() != steps * classes {
            return Err(Error::dim(format!(
                "{} values for a {steps}x{classes} log-probability matrix",
                data.len()
            )));
        }
        Ok(LogProbMatrix {
            steps,
            classes,
            data,
        })
    }

    /// Normalises each row of raw scores with log-softmax.
    pub fn from_logits(steps: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        let mut m = Self::new(steps, classes, logits.to_vec())?;
        for row in m.data.chunks_mut(classes) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(m)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }

    pub fn set(&mut self, t: usize, k: usize, v: f64) {
        self.data[t * self.classes + k] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames that can emit `target`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], steps: usize) -> bool {
    min_frames(target) <= steps
}

fn check_labels(m: &LogProbMatrix, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&l| l >= m.blank()) {
        return Err(Error::contract(format!(
            "target label {bad} is not a character class (blank is {})",
            m.blank()
        )));
    }
    Ok(())
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward(m: &LogProbMatrix, ext: &[usize]) -> Vec<f64> {
    let (steps, width, blank) = (m.steps, ext.len(), m.blank());
    let mut alpha = vec![f64::NEG_INFINITY; steps * width];
    alpha[0] = m.get(0, ext[0]);
    if width > 1 {
        alpha[1] = m.get(0, ext[1]);
    }
    for t in 1..steps {
        for s in 0..width {
            let prev = &alpha[(t - 1) * width..t * width];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * width + s] = acc + m.get(t, ext[s]);
        }
    }
    alpha
}

fn backward(m: &LogProbMatrix, ext: &[usize]) -> Vec<f64> {
    let (steps, width, blank) = (m.steps, ext.len(), m.blank());
    let mut beta = vec![f64::NEG_INFINITY; steps * width];
    let last = (steps - 1) * width;
    beta[last + width - 1] = m.get(steps - 1, ext[width - 1]);
    if width > 1 {
        beta[last + width - 2] = m.get(steps - 1, ext[width - 2]);
    }
    for t in (0..steps - 1).rev() {
        for s in 0..width {
            let next = &beta[(t + 1) * width..(t + 2) * width];
            let mut acc = next[s];
            if s + 1 < width {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < width && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * width + s] = acc + m.get(t, ext[s]);
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], steps: usize, width: usize) -> f64 {
    let last = &alpha[(steps - 1) * width..steps * width];
    if width > 1 {
        log_add(last[width - 1], last[width - 2])
    } else {
        last[0]
    }
}

/// Negative log-likelihood of `target` under `m`, summed over every
/// alignment. Returns `+∞` when no alignment fits in `m.steps()` frames.
pub fn ctc_loss(m: &LogProbMatrix, target: &[usize]) -> Result<f64> {
    check_labels(m, target)?;
    if m.steps == 0 || !is_feasible(target, m.steps) {
        return Ok(f64::INFINITY);
    }
    let ext = extended(target, m.blank());
    let alpha = forward(m, &ext);
    Ok(-total_log_prob(&alpha, m.steps, ext.len()))
}

/// Loss and its gradient with respect to every entry of `m`, treating the
/// entries as free variables (no row-normalisation constraint).
pub fn ctc_loss_and_grad(m: &LogProbMatrix, target: &[usize]) -> Result<(f64, LogProbMatrix)> {
    check_labels(m, target)?;
    if m.steps == 0 || !is_feasible(target, m.steps) {
        return Err(Error::Numeric(format!(
            "no feasible alignment: {} labels need {} frames, only {} available",
            target.len(),
            min_frames(target),
            m.steps
        )));
    }
    let ext = extended(target, m.blank());
    let width = ext.len();
    let alpha = forward(m, &ext);
    let beta = backward(m, &ext);
    let log_p = total_log_prob(&alpha, m.steps, width);
    let mut grad = LogProbMatrix::zeros(m.steps, m.classes);
    for t in 0..m.steps {
        for (s, &label) in ext.iter().enumerate() {
            let ab = alpha[t * width + s] + beta[t * width + s];
            if ab == f64::NEG_INFINITY {
                continue;
            }
            let occupancy = (ab - m.get(t, label) - log_p).exp();
            grad.data[t * m.classes + label] -= occupancy;
        }
    }
    Ok((-log_p, grad))
}

/// Best-path decoding: per-step argmax, merge repeats, drop blanks.
pub fn greedy_decode(m: &LogProbMatrix) -> Vec<usize> {
    let blank = m.blank();
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..m.steps {
        let row = m.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// A decoded label sequence with its total (all-alignment) log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search.
///
/// Without pruning the prefix scores are exact, so a beam at least as wide
/// as the number of reachable prefixes returns the most probable collapsed
/// transcript. A single pruned search is not monotone in its width, so the
/// result is the best exactly-rescored winner over widths `1..=beam_width`;
/// widening therefore never lowers the returned probability. Width 1 is not
/// guaranteed to agree with [`greedy_decode`].
pub fn beam_decode(m: &LogProbMatrix, beam_width: usize) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let mut best: Option<Hypothesis> = None;
    for width in 1..=beam_width {
        let (labels, pruned) = prefix_search(m, width);
        if best.as_ref().is_none_or(|b| b.labels != labels) {
            let log_prob = -ctc_loss(m, &labels)?;
            if best.as_ref().is_none_or(|b| log_prob > b.log_prob) {
                best = Some(Hypothesis { labels, log_prob });
            }
        }
        // Wider searches repeat an unpruned one exactly.
        if !pruned {
            break;
        }
    }
    Ok(best.expect("width at least 1"))
}

/// Top prefix of one search keeping `beam_width` prefixes per step, and
/// whether any prefix was discarded.
fn prefix_search(m: &LogProbMatrix, beam_width: usize) -> (Vec<usize>, bool) {
    let mut pruned = false;
    let blank = m.blank();
    let mut beams: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..m.steps {
        let row = m.row(t);
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            entry.blank = log_add(entry.blank, total + row[blank]);
            for (k, &lp) in row.iter().enumerate().take(blank) {
                let mut extended = prefix.clone();
                extended.push(k);
                if prefix.last() == Some(&k) {
                    let e = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    e.non_blank = log_add(e.non_blank, score.blank + lp);
                    let same = next.get_mut(prefix).expect("inserted above");
                    same.non_blank = log_add(same.non_blank, score.non_blank + lp);
                } else {
                    let e = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    e.non_blank = log_add(e.non_blank, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
        // Stable sort keeps lexicographic order among equal scores.
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
        pruned |= ranked.len() > beam_width;
        ranked.truncate(beam_width);
        beams = ranked;
    }
    (
        beams.into_iter().next().expect("beam never empty").0,
        pruned,
    )
}
