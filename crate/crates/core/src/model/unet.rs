//! Five-level encoder–decoder backbone with skip connections.
//!
//! Level `r` (1-based) works at `1/2^(r-1)` of the input resolution. The
//! encoder keeps the pre-pooling map `M_r` of each level as a skip; the
//! decoder computes `F_r = block(concat(upsample(F_{r+1}), M_r))` back up to
//! full resolution.

use super::layers::{Builder, ConvBn};
use super::params::Pass;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Var;

pub const UNET_LEVELS: usize = 5;

/// Per-level channel multipliers relative to `base_channels`.
pub const UNET_MULTIPLIERS: [usize; UNET_LEVELS] = [1, 2, 4, 6, 8];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_channels: usize,
}

impl UNetConfig {
    pub fn channels(&self) -> [usize; UNET_LEVELS] {
        UNET_MULTIPLIERS.map(|m| m * self.base_channels)
    }

    /// Spatial extents must survive four exact halvings.
    pub fn size_multiple(&self) -> usize {
        1 << (UNET_LEVELS - 1)
    }
}

/// Two 3×3 conv + batch-norm + relu layers.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl DoubleConv {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        Ok(DoubleConv {
            first: ConvBn::new(&mut b.sub("0"), cin, cout, 3, 1, true)?,
            second: ConvBn::new(&mut b.sub("1"), cout, cout, 3, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(pass, x)?;
        self.second.forward(pass, y)
    }
}

/// Encoder outputs `M_1..M_5` and decoder outputs `F_5..F_1` of one forward.
#[derive(Clone, Debug, Default)]
pub struct PyramidState {
    pub down_maps: Vec<Var>,
    pub up_maps: Vec<Var>,
}

pub struct EncodeOutput {
    /// Pre-pooling features, kept as the skip `M_r`.
    pub skip: Var,
    /// Pooled features handed to the next level.
    pub down: Var,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub encoders: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    pub decoders: Vec<DoubleConv>,
}

impl UNet {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        config: UNetConfig,
        in_channels: usize,
    ) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::contract("base_channels must be positive"));
        }
        let ch = config.channels();
        let mut encoders = Vec::new();
        let mut cin = in_channels;
        for (r, &c) in ch.iter().enumerate().take(UNET_LEVELS - 1) {
            encoders.push(DoubleConv::new(
                &mut b.sub(&format!("enc{}", r + 1)),
                cin,
                c,
            )?);
            cin = c;
        }
        let bottleneck = DoubleConv::new(&mut b.sub("bottleneck"), cin, ch[UNET_LEVELS - 1])?;
        let mut decoders = Vec::new();
        for r in 0..UNET_LEVELS - 1 {
            decoders.push(DoubleConv::new(
                &mut b.sub(&format!("dec{}", r + 1)),
                ch[r + 1] + ch[r],
                ch[r],
            )?);
        }
        Ok(UNet {
            config,
            encoders,
            bottleneck,
            decoders,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.channels()[0]
    }

    /// Level `level` (1-based, 1..=4): conv blocks, then 2×2 max-pool.
    pub fn encode_step<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        level: usize,
        x: Var,
    ) -> Result<EncodeOutput> {
        let block = self.encoders.get(level.wrapping_sub(1)).ok_or_else(|| {
            Error::contract(format!(
                "encoder level {level} outside 1..={}",
                UNET_LEVELS - 1
            ))
        })?;
        let s = pass.tape().shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim(format!(
                "encode_step needs even spatial extents, got {s:?}"
            )));
        }
        let skip = block.forward(pass, x)?;
        let down = pass.tape().max_pool(skip, 2, 2)?;
        Ok(EncodeOutput { skip, down })
    }

    /// Level `level` (1-based, 1..=4): upsample `f_next` ×2, concatenate
    /// the skip, conv blocks.
    pub fn decode_step<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        level: usize,
        f_next: Var,
        skip: Var,
    ) -> Result<Var> {
        let block = self.decoders.get(level.wrapping_sub(1)).ok_or_else(|| {
            Error::contract(format!(
                "decoder level {level} outside 1..={}",
                UNET_LEVELS - 1
            ))
        })?;
        let tape = pass.tape();
        let up = tape.upsample_bilinear(f_next, 2)?;
        let (su, ss) = (tape.shape(up), tape.shape(skip));
        if su.len() != 4 || ss.len() != 4 || su[0] != ss[0] || su[2..] != ss[2..] {
            return Err(Error::dim(format!(
                "decode_step: upsampled {su:?} does not match skip {ss:?}"
            )));
        }
        let joined = tape.concat_channels(up, skip)?;
        block.forward(pass, joined)
    }

    pub fn forward_with_state<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        image: Var,
    ) -> Result<(Var, PyramidState)> {
        let s = pass.tape().shape(image);
        let m = self.config.size_multiple();
        if s.len() != 4 || s[2] % m != 0 || s[3] % m != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::dim(format!(
                "U-Net input {s:?}: height and width must be positive multiples of {m}; \
                 resize or pad the image accordingly"
            )));
        }
        let mut state = PyramidState::default();
        let mut x = image;
        for level in 1..UNET_LEVELS {
            let out = self.encode_step(pass, level, x)?;
            state.down_maps.push(out.skip);
            x = out.down;
        }
        let mut f = self.bottleneck.forward(pass, x)?;
        state.down_maps.push(f);
        state.up_maps.push(f);
        for level in (1..UNET_LEVELS).rev() {
            f = self.decode_step(pass, level, f, state.down_maps[level - 1])?;
            state.up_maps.push(f);
        }
        Ok((f, state))
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, image: Var) -> Result<Var> {
        Ok(self.forward_with_state(pass, image)?.0)
    }
}
