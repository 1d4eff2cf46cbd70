//! Edit-distance character accuracy and per-character breakdowns.
//!
//! Transcripts are compared as sequences of Unicode scalar values; no
//! normalisation is applied here.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_distance_str(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// A prediction paired with its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub pred: String,
    pub gt: String,
}

impl Pair {
    pub fn new(pred: impl Into<String>, gt: impl Into<String>) -> Self {
        Pair {
            pred: pred.into(),
            gt: gt.into(),
        }
    }
}

/// Corpus-level `(Σ|GT| − Σ ED) / Σ|GT|`. Negative when the predictions
/// are further from the ground truth than its own length.
pub fn char_accuracy(pairs: &[Pair]) -> Result<f64> {
    let (gt_len, ed) = totals(pairs);
    if gt_len == 0 {
        return Err(Error::contract(
            "character accuracy needs at least one ground-truth character",
        ));
    }
    Ok((gt_len as f64 - ed as f64) / gt_len as f64)
}

fn totals(pairs: &[Pair]) -> (usize, usize) {
    pairs.iter().fold((0, 0), |(g, e), p| {
        (
            g + p.gt.chars().count(),
            e + edit_distance_str(&p.pred, &p.gt),
        )
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CharStat {
    pub hits: usize,
    pub total: usize,
}

impl CharStat {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Marks each ground-truth character as hit when the minimum-cost alignment
/// pairs it with an identical predicted character. On equal cost the
/// backtrace prefers substitution (or match), then insertion, then deletion.
pub fn aligned_hits(pred: &[char], gt: &[char]) -> Vec<bool> {
    let (n, m) = (gt.len(), pred.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(gt[i - 1] != pred[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut hits = vec![false; n];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(gt[i - 1] != pred[j - 1]) {
            hits[i - 1] = gt[i - 1] == pred[j - 1];
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    hits
}

/// Per-character hit counts over the ground-truth side of a corpus.
pub fn per_char_stats(pairs: &[Pair]) -> BTreeMap<char, CharStat> {
    let mut stats: BTreeMap<char, CharStat> = BTreeMap::new();
    for p in pairs {
        let gt: Vec<char> = p.gt.chars().collect();
        let pred: Vec<char> = p.pred.chars().collect();
        for (c, hit) in gt.iter().zip(aligned_hits(&pred, &gt)) {
            let s = stats.entry(*c).or_default();
            s.total += 1;
            s.hits += usize::from(hit);
        }
    }
    stats
}

pub fn per_char_accuracy(pairs: &[Pair]) -> BTreeMap<char, f64> {
    per_char_stats(pairs)
        .into_iter()
        .map(|(c, s)| (c, s.accuracy()))
        .collect()
}

/// Corpus evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total_gt_len: usize,
    pub total_edit_distance: usize,
    pub accuracy: f64,
    pub per_char: BTreeMap<char, CharStat>,
}

impl EvalReport {
    pub fn from_pairs(pairs: &[Pair]) -> Result<Self> {
        let (total_gt_len, total_edit_distance) = totals(pairs);
        Ok(EvalReport {
            total_gt_len,
            total_edit_distance,
            accuracy: char_accuracy(pairs)?,
            per_char: per_char_stats(pairs),
        })
    }

    /// Tab-separated table: one row per ground-truth character, then a
    /// summary row. Accuracies are printed in shortest round-trip form with
    /// a decimal point.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("char\tcodepoint\thits\ttotal\taccuracy\n");
        for (c, s) in &self.per_char {
            let shown: String = match c {
                ' ' => "<space>".into(),
                c => c.escape_default().collect(),
            };
            let _ = writeln!(
                out,
                "{shown}\tU+{:04X}\t{}\t{}\t{:?}",
                *c as u32,
                s.hits,
                s.total,
                s.accuracy()
            );
        }
        let _ = writeln!(
            out,
            "summary\tgt_chars={}\tedit_distance={}\taccuracy={:?}",
            self.total_gt_len, self.total_edit_distance, self.accuracy
        );
        out
    }
}
