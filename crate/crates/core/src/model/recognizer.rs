//! Full recognizer: backbone, sequence head and per-step classifier.

use std::fmt;
use std::str::FromStr;

use super::hrnet::{HrNet, HrNetConfig};
use super::layers::Builder;
use super::lowres::{LowRes, LowResConfig};
use super::params::{ParamStore, Pass};
use super::seqhead::{SeqHead, SeqHeadConfig};
use super::unet::{UNet, UNetConfig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::rng_for;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    UNet,
    HrNet,
    LowRes,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::UNet => "unet",
            BackboneKind::HrNet => "hrnet",
            BackboneKind::LowRes => "lowres-baseline",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(BackboneKind::UNet),
            "hrnet" => Ok(BackboneKind::HrNet),
            "lowres-baseline" | "lowres" => Ok(BackboneKind::LowRes),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?}; expected unet | hrnet | lowres-baseline"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub unet_base: usize,
    pub hrnet_widths: [usize; 4],
    pub hrnet_blocks: usize,
    pub lowres_base: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub dropout_passes: usize,
    pub drop_fraction: f64,
    /// Input line height in pixels.
    pub height: usize,
}

impl ModelConfig {
    /// Verification-sized model.
    pub fn tiny(backbone: BackboneKind) -> Self {
        ModelConfig {
            backbone,
            unet_base: 16,
            hrnet_widths: [16, 32, 64, 128],
            hrnet_blocks: 2,
            lowres_base: 16,
            hidden: 32,
            lstm_layers: 2,
            dropout_passes: 5,
            drop_fraction: 0.5,
            height: 32,
        }
    }

    /// Paper-scale model (roughly 10M parameters for the U-Net variant).
    pub fn full(backbone: BackboneKind) -> Self {
        ModelConfig {
            backbone,
            unet_base: 64,
            hrnet_widths: [64, 128, 256, 512],
            hrnet_blocks: 4,
            lowres_base: 64,
            hidden: 256,
            ..Self::tiny(backbone)
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let backbone: BackboneKind = cfg.get_or("model", "backbone", BackboneKind::UNet)?;
        let preset = match cfg.get("model", "preset").unwrap_or("tiny") {
            "tiny" => Self::tiny(backbone),
            "full" => Self::full(backbone),
            other => {
                return Err(Error::Config(format!(
                    "unknown model.preset {other:?}; expected tiny | full"
                )))
            }
        };
        let widths = match cfg.get("model", "hrnet_widths") {
            None => preset.hrnet_widths,
            Some(s) => parse_widths(s)?,
        };
        let c = ModelConfig {
            backbone,
            unet_base: cfg.get_or("model", "unet_base", preset.unet_base)?,
            hrnet_widths: widths,
            hrnet_blocks: cfg.get_or("model", "hrnet_blocks", preset.hrnet_blocks)?,
            lowres_base: cfg.get_or("model", "lowres_base", preset.lowres_base)?,
            hidden: cfg.get_or("model", "hidden", preset.hidden)?,
            lstm_layers: cfg.get_or("model", "lstm_layers", preset.lstm_layers)?,
            dropout_passes: cfg.get_or("model", "dropout_passes", preset.dropout_passes)?,
            drop_fraction: cfg.get_or("model", "drop_fraction", preset.drop_fraction)?,
            height: cfg.get_or("model", "height", preset.height)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Writes every field into `cfg` under `[model]`.
    pub fn write_to(&self, cfg: &mut Config) {
        let w = self.hrnet_widths;
        cfg.set("model", "backbone", self.backbone.name());
        cfg.set("model", "unet_base", self.unet_base.to_string());
        cfg.set(
            "model",
            "hrnet_widths",
            format!("{},{},{},{}", w[0], w[1], w[2], w[3]),
        );
        cfg.set("model", "hrnet_blocks", self.hrnet_blocks.to_string());
        cfg.set("model", "lowres_base", self.lowres_base.to_string());
        cfg.set("model", "hidden", self.hidden.to_string());
        cfg.set("model", "lstm_layers", self.lstm_layers.to_string());
        cfg.set("model", "dropout_passes", self.dropout_passes.to_string());
        cfg.set("model", "drop_fraction", self.drop_fraction.to_string());
        cfg.set("model", "height", self.height.to_string());
    }

    pub fn validate(&self) -> Result<()> {
        let hm = self.height_multiple();
        if self.height == 0 || self.height % hm != 0 {
            return Err(Error::Config(format!(
                "model.height {} must be a positive multiple of {hm} for backbone {}",
                self.height, self.backbone
            )));
        }
        if self.dropout_passes == 0 {
            return Err(Error::Config(
                "model.dropout_passes must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(
                "model.drop_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Padded image widths must be multiples of this.
    pub fn width_multiple(&self) -> usize {
        match self.backbone {
            BackboneKind::UNet => 16,
            BackboneKind::HrNet => 8,
            BackboneKind::LowRes => LowRes::WIDTH_FACTOR,
        }
    }

    pub fn height_multiple(&self) -> usize {
        match self.backbone {
            BackboneKind::UNet => 16,
            BackboneKind::HrNet => 8,
            BackboneKind::LowRes => LowRes::HEIGHT_FACTOR,
        }
    }

    /// Image columns per output timestep.
    pub fn time_stride(&self) -> usize {
        match self.backbone {
            BackboneKind::LowRes => LowRes::WIDTH_FACTOR,
            _ => 1,
        }
    }

    /// Output frames covering an unpadded image of width `width`.
    pub fn frames_for_width(&self, width: usize) -> usize {
        width.div_ceil(self.time_stride())
    }

    pub fn padded_width(&self, width: usize) -> usize {
        let m = self.width_multiple();
        width.max(1).div_ceil(m) * m
    }
}

fn parse_widths(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::Config(format!(
                "model.hrnet_widths {s:?} is not a comma list of integers"
            ))
        })?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("model.hrnet_widths {s:?} needs exactly 4 entries")))
}

#[derive(Clone, Debug)]
pub enum Backbone {
    UNet(UNet),
    HrNet(HrNet),
    LowRes(LowRes),
}

impl Backbone {
    pub fn out_channels(&self) -> usize {
        match self {
            Backbone::UNet(m) => m.out_channels(),
            Backbone::HrNet(m) => m.out_channels(),
            Backbone::LowRes(m) => m.out_channels(),
        }
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, image: Var) -> Result<Var> {
        match self {
            Backbone::UNet(m) => m.forward(pass, image),
            Backbone::HrNet(m) => m.forward(pass, image),
            Backbone::LowRes(m) => m.forward(pass, image),
        }
    }
}

/// Parameters plus architecture; `classes` includes the CTC blank.
#[derive(Clone, Debug)]
pub struct Recognizer<T> {
    pub config: ModelConfig,
    pub classes: usize,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: SeqHead,
}

impl<T: Real> Recognizer<T> {
    pub fn new(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::contract(
                "need at least one character plus the blank",
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = match config.backbone {
            BackboneKind::UNet => Backbone::UNet(UNet::new(
                &mut b.sub("unet"),
                UNetConfig {
                    base_channels: config.unet_base,
                },
                1,
            )?),
            BackboneKind::HrNet => Backbone::HrNet(HrNet::new(
                &mut b.sub("hrnet"),
                HrNetConfig {
                    widths: config.hrnet_widths,
                    blocks: config.hrnet_blocks,
                },
                1,
            )?),
            BackboneKind::LowRes => Backbone::LowRes(LowRes::new(
                &mut b.sub("lowres"),
                LowResConfig {
                    base_channels: config.lowres_base,
                },
                1,
            )?),
        };
        let head = SeqHead::new(
            &mut b.sub("head"),
            SeqHeadConfig {
                hidden: config.hidden,
                layers: config.lstm_layers,
                dropout_passes: config.dropout_passes,
                drop_fraction: config.drop_fraction,
            },
            backbone.out_channels(),
            classes,
        )?;
        Ok(Recognizer {
            config,
            classes,
            store,
            backbone,
            head,
        })
    }

    /// `[N,1,H,W]` images to `[T,N,classes]` log-probabilities.
    pub fn forward(&self, pass: &Pass<'_, T>, images: Var) -> Result<Var> {
        let s = pass.tape().shape(images);
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::dim(format!(
                "recognizer expects [N,1,H,W] images, got {s:?}"
            )));
        }
        let features = self.backbone.forward(pass, images)?;
        self.head.forward(pass, features)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Same architecture with values converted to another precision.
    pub fn cast<U: Real>(&self) -> Recognizer<U> {
        let mut store = ParamStore::new();
        for (t, n) in self.store.params().iter().zip(self.store.param_names()) {
            store.add_param(n.clone(), t.cast());
        }
        for (t, n) in self.store.buffers().iter().zip(self.store.buffer_names()) {
            store.add_buffer(n.clone(), t.cast());
        }
        Recognizer {
            config: self.config.clone(),
            classes: self.classes,
            store,
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }
}
