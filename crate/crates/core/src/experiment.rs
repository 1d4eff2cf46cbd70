//! Dot-discrimination experiment: a high-resolution backbone against the
//! low-resolution baseline, trained on the same data under the same budget
//! and scored per character group on held-out lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::charset::CharSet;
use crate::config::Config;
use crate::dataset::{prepare_image, Prepared};
use crate::error::{Error, Result};
use crate::metrics::{per_char_stats, CharStat, Pair};
use crate::model::{BackboneKind, ModelConfig, Recognizer};
use crate::rng::derive_seed;
use crate::synth::{plan_lines, render_planned, GlyphAtlas, SynthConfig};
use crate::train::{prediction_pairs, train, TrainConfig};

const TRAIN_DATA_STREAM: u64 = 11;
const TEST_DATA_STREAM: u64 = 12;
const INIT_STREAM: u64 = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct DotsConfig {
    pub high: BackboneKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub train_lines: usize,
    pub test_lines: usize,
    pub seeds: Vec<u64>,
}

impl DotsConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let high: BackboneKind = cfg.get_or("experiment", "high", BackboneKind::UNet)?;
        if high == BackboneKind::LowRes {
            return Err(Error::Config(
                "experiment.high must be a high-resolution backbone".into(),
            ));
        }
        let seeds = match cfg.get("experiment", "seeds") {
            None => vec![0, 1, 2],
            Some(s) => s
                .split(',')
                .map(|v| v.trim().parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::Config(format!("experiment.seeds {s:?} is not a comma list"))
                })?,
        };
        if seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        Ok(DotsConfig {
            high,
            model: ModelConfig::from_config(cfg)?,
            train: TrainConfig::from_config(cfg)?,
            synth: SynthConfig::from_config(cfg)?,
            train_lines: cfg.get_or("experiment", "train_lines", 256)?,
            test_lines: cfg.get_or("experiment", "test_lines", 128)?,
            seeds,
        })
    }

    pub fn write_to(&self, cfg: &mut Config) {
        self.model.write_to(cfg);
        self.train.write_to(cfg);
        self.synth.write_to(cfg);
        cfg.set("experiment", "high", self.high.name());
        cfg.set("experiment", "train_lines", self.train_lines.to_string());
        cfg.set("experiment", "test_lines", self.test_lines.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        cfg.set("experiment", "seeds", seeds.join(","));
    }
}

/// Pooled hits over a group of characters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupScore {
    pub hits: usize,
    pub total: usize,
}

impl GroupScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub backbone: BackboneKind,
    pub seed: u64,
    pub dot_group: GroupScore,
    pub unique_group: GroupScore,
    pub per_char: BTreeMap<char, CharStat>,
    pub iterations: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DotsReport {
    pub dot_chars: Vec<char>,
    pub unique_chars: Vec<char>,
    pub runs: Vec<RunResult>,
}

impl DotsReport {
    fn find(&self, backbone: BackboneKind, seed: u64) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.backbone == backbone && r.seed == seed)
    }

    /// Seeds where the high-resolution backbone's dot-group accuracy is at
    /// least the baseline's.
    pub fn high_wins(&self, high: BackboneKind) -> Vec<(u64, bool)> {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|s| {
                let h = self.find(high, s)?;
                let l = self.find(BackboneKind::LowRes, s)?;
                Some((s, h.dot_group.accuracy() >= l.dot_group.accuracy()))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let chars = |cs: &[char]| cs.iter().collect::<String>();
        let _ = writeln!(out, "dot_group\t{}", chars(&self.dot_chars));
        let _ = writeln!(out, "unique_group\t{}", chars(&self.unique_chars));
        let _ = writeln!(out, "backbone\tseed\tgroup\thits\ttotal\taccuracy");
        for r in &self.runs {
            for (name, g) in [("dot", r.dot_group), ("unique", r.unique_group)] {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{name}\t{}\t{}\t{:.6}",
                    r.backbone,
                    r.seed,
                    g.hits,
                    g.total,
                    g.accuracy()
                );
            }
        }
        let _ = writeln!(out, "\nper_character");
        let _ = writeln!(out, "backbone\tseed\tchar\thits\ttotal");
        for r in &self.runs {
            for (c, s) in &r.per_char {
                let shown = if *c == ' ' {
                    "<space>".to_string()
                } else {
                    c.to_string()
                };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{shown}\t{}\t{}",
                    r.backbone, r.seed, s.hits, s.total
                );
            }
        }
        out
    }
}

fn group_score(stats: &BTreeMap<char, CharStat>, group: &[char]) -> GroupScore {
    group
        .iter()
        .filter_map(|c| stats.get(c))
        .fold(GroupScore::default(), |g, s| GroupScore {
            hits: g.hits + s.hits,
            total: g.total + s.total,
        })
}

/// Renders `n` lines in memory, augmented as configured, and prepares them
/// for a model of input height `height`.
pub fn synth_prepared(
    n: usize,
    synth: &SynthConfig,
    atlas: &GlyphAtlas,
    charset: &CharSet,
    height: usize,
    seed: u64,
) -> Result<Vec<Prepared>> {
    plan_lines(n, synth, atlas, seed)?
        .iter()
        .map(|line| {
            let (img, gt) = render_planned(line, synth, atlas, seed)?;
            let (ink, width) = prepare_image(&img, height, true);
            Ok(Prepared {
                ink,
                width,
                height,
                labels: charset.encode(&gt)?,
                text: gt,
            })
        })
        .collect()
}

/// Runs both backbones for every seed. `progress` receives one line per
/// finished run.
pub fn run_dots_experiment(
    cfg: &DotsConfig,
    progress: &mut dyn FnMut(&RunResult),
) -> Result<DotsReport> {
    let atlas = GlyphAtlas::desk();
    let charset = CharSet::new(atlas.chars().to_vec())?;
    let dot_chars = atlas.dot_distinguished();
    let unique_chars = atlas.base_unique();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let train_set = synth_prepared(
            cfg.train_lines,
            &cfg.synth,
            &atlas,
            &charset,
            cfg.model.height,
            derive_seed(seed, TRAIN_DATA_STREAM),
        )?;
        let test_set = synth_prepared(
            cfg.test_lines,
            &cfg.synth,
            &atlas,
            &charset,
            cfg.model.height,
            derive_seed(seed, TEST_DATA_STREAM),
        )?;
        for backbone in [cfg.high, BackboneKind::LowRes] {
            let mc = ModelConfig {
                backbone,
                ..cfg.model.clone()
            };
            let mut model =
                Recognizer::<f32>::new(mc, charset.classes(), derive_seed(seed, INIT_STREAM))?;
            let tc = TrainConfig {
                seed,
                eval_every: 0,
                target_accuracy: None,
                ..cfg.train.clone()
            };
            let report = train(
                &mut model,
                &train_set,
                None,
                &tc,
                &mut std::io::sink(),
                None,
            )?;
            let pairs: Vec<Pair> =
                prediction_pairs(&model, &test_set, &charset, tc.batch_size, None)?;
            let per_char = per_char_stats(&pairs);
            let run = RunResult {
                backbone,
                seed,
                dot_group: group_score(&per_char, &dot_chars),
                unique_group: group_score(&per_char, &unique_chars),
                per_char,
                iterations: report.iterations,
                final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(DotsReport {
        dot_chars,
        unique_chars,
        runs,
    })
}
