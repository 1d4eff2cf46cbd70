//! Conventional stride-reducing CNN used as the low-resolution baseline.
//!
//! Pools height by 16 and width by 4; nothing is upsampled, so the final
//! feature map has lost the fine detail the high-resolution backbones keep.

use super::layers::{Builder, ConvBn};
use super::params::Pass;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LowResConfig {
    pub base_channels: usize,
}

#[derive(Clone, Debug)]
pub struct LowRes {
    pub config: LowResConfig,
    pub convs: Vec<ConvBn>,
}

/// `(conv index after which to pool, pool window)`.
const POOLS: [(usize, (usize, usize)); 4] = [(0, (2, 2)), (1, (2, 2)), (3, (2, 1)), (4, (2, 1))];

impl LowRes {
    pub const HEIGHT_FACTOR: usize = 16;
    pub const WIDTH_FACTOR: usize = 4;

    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        config: LowResConfig,
        in_channels: usize,
    ) -> Result<Self> {
        let c = config.base_channels;
        if c == 0 {
            return Err(Error::contract("base_channels must be positive"));
        }
        let plan = [
            (in_channels, c),
            (c, 2 * c),
            (2 * c, 4 * c),
            (4 * c, 4 * c),
            (4 * c, 8 * c),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                ConvBn::new(&mut b.sub(&format!("conv{i}")), cin, cout, 3, 1, true)
            })
            .collect::<Result<_>>()?;
        Ok(LowRes { config, convs })
    }

    pub fn out_channels(&self) -> usize {
        8 * self.config.base_channels
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, image: Var) -> Result<Var> {
        let s = pass.tape().shape(image);
        if s.len() != 4 || s[2] % Self::HEIGHT_FACTOR != 0 || s[3] % Self::WIDTH_FACTOR != 0 {
            return Err(Error::dim(format!(
                "baseline input {s:?}: height must be a multiple of {} and width of {}",
                Self::HEIGHT_FACTOR,
                Self::WIDTH_FACTOR
            )));
        }
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(pass, x)?;
            if let Some(&(_, (kh, kw))) = POOLS.iter().find(|(at, _)| *at == i) {
                x = pass.tape().max_pool(x, kh, kw)?;
            }
        }
        Ok(x)
    }
}
