//! Four-stage backbone that keeps parallel resolution streams.
//!
//! Stage `I` receives `I` streams; stream `r` (1-based) is at `1/2^(r-1)` of
//! the input resolution with `widths[r-1]` channels. After its residual
//! blocks a stage fuses the streams into the next stage's inputs:
//!
//! ```text
//! out_r = relu( Σ_i f_ir(stream_i) )
//! ```
//!
//! where `f_ir` is the identity for `i == r`, `r - i` strided 3×3 convolutions
//! for `i < r`, and a 1×1 convolution followed by bilinear upsampling by
//! `2^(i-r)` for `i > r`. Stages 1–3 emit one more stream than they receive;
//! stage 4 fuses its four streams in place. The head upsamples every stream
//! to full resolution and concatenates them.

use super::layers::{Builder, ConvBn};
use super::params::Pass;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Var;

pub const HRNET_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HrNetConfig {
    /// Channel width of streams 1..=4.
    pub widths: [usize; HRNET_STAGES],
    /// Residual blocks per stream per stage.
    pub blocks: usize,
}

impl HrNetConfig {
    pub fn size_multiple(&self) -> usize {
        1 << (HRNET_STAGES - 1)
    }

    /// Streams leaving stage `stage` (1-based).
    pub fn outputs_of(stage: usize) -> usize {
        (stage + 1).min(HRNET_STAGES)
    }
}

/// Resolution-indexed feature map `R_r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolutionStream {
    pub r: usize,
    pub tensor: Var,
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl BasicBlock {
    fn new<T: Real>(b: &mut Builder<'_, T>, width: usize) -> Result<Self> {
        Ok(BasicBlock {
            first: ConvBn::new(&mut b.sub("0"), width, width, 3, 1, true)?,
            second: ConvBn::new(&mut b.sub("1"), width, width, 3, 1, false)?,
        })
    }

    fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(pass, x)?;
        let y = self.second.forward(pass, y)?;
        let sum = pass.tape().add(y, x)?;
        pass.tape().relu(sum)
    }
}

/// The transform `f_ir` from stream `from` to resolution `to`.
#[derive(Clone, Debug)]
pub enum Transform {
    Identity,
    /// Strided 3×3 convolutions, one per halving; relu between them.
    Down(Vec<ConvBn>),
    /// Channel-matching 1×1 convolution then bilinear upsampling.
    Up {
        conv: ConvBn,
        factor: usize,
    },
}

impl Transform {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        widths: &[usize],
        from: usize,
        to: usize,
    ) -> Result<Self> {
        if from == 0 || to == 0 || from > widths.len() || to > widths.len() {
            return Err(Error::contract(format!(
                "transform indices {from}->{to} invalid"
            )));
        }
        let (wi, wr) = (widths[from - 1], widths[to - 1]);
        Ok(if from == to {
            Transform::Identity
        } else if from < to {
            let steps = to - from;
            let mut convs = Vec::with_capacity(steps);
            for s in 0..steps {
                let last = s + 1 == steps;
                let cout = if last { wr } else { wi };
                convs.push(ConvBn::new(
                    &mut b.sub(&format!("{s}")),
                    wi,
                    cout,
                    3,
                    2,
                    !last,
                )?);
            }
            Transform::Down(convs)
        } else {
            Transform::Up {
                conv: ConvBn::new(&mut b.sub("proj"), wi, wr, 1, 1, false)?,
                factor: 1 << (from - to),
            }
        })
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Down(convs) => convs.iter().try_fold(x, |y, c| c.forward(pass, y)),
            Transform::Up { conv, factor } => {
                let y = conv.forward(pass, x)?;
                pass.tape().upsample_bilinear(y, *factor)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    pub branches: Vec<Vec<BasicBlock>>,
    /// `fusion[r-1][i-1]` is `f_ir`.
    pub fusion: Vec<Vec<Transform>>,
}

#[derive(Clone, Debug)]
pub struct HrNet {
    pub config: HrNetConfig,
    pub stem: [ConvBn; 2],
    pub stages: Vec<Stage>,
}

/// Stream counts observed while running the network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HrNetTrace {
    pub stage_inputs: Vec<usize>,
    pub stage_outputs: Vec<usize>,
    /// Extents of stream 1 after every stage.
    pub top_extents: Vec<(usize, usize)>,
}

impl HrNet {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        config: HrNetConfig,
        in_channels: usize,
    ) -> Result<Self> {
        if config.widths.contains(&0) {
            return Err(Error::contract("stream widths must be positive"));
        }
        let w = config.widths;
        let stem = [
            ConvBn::new(&mut b.sub("stem0"), in_channels, w[0], 3, 1, true)?,
            ConvBn::new(&mut b.sub("stem1"), w[0], w[0], 3, 1, true)?,
        ];
        let mut stages = Vec::with_capacity(HRNET_STAGES);
        for index in 1..=HRNET_STAGES {
            let mut sb = b.sub(&format!("stage{index}"));
            let mut branches = Vec::with_capacity(index);
            for r in 1..=index {
                let mut blocks = Vec::with_capacity(config.blocks);
                for k in 0..config.blocks {
                    blocks.push(BasicBlock::new(
                        &mut sb.sub(&format!("branch{r}.{k}")),
                        w[r - 1],
                    )?);
                }
                branches.push(blocks);
            }
            let mut fusion = Vec::new();
            for r in 1..=HrNetConfig::outputs_of(index) {
                let mut row = Vec::with_capacity(index);
                for i in 1..=index {
                    row.push(Transform::new(
                        &mut sb.sub(&format!("fuse{i}to{r}")),
                        &w,
                        i,
                        r,
                    )?);
                }
                fusion.push(row);
            }
            stages.push(Stage {
                index,
                branches,
                fusion,
            });
        }
        Ok(HrNet {
            config,
            stem,
            stages,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.widths.iter().sum()
    }

    fn check_streams<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        streams: &[ResolutionStream],
    ) -> Result<()> {
        let tape = pass.tape();
        let top = tape.shape(streams[0].tensor);
        for (k, s) in streams.iter().enumerate() {
            let shape = tape.shape(s.tensor);
            let scale = 1 << k;
            let expect_c = self.config.widths[k];
            if s.r != k + 1
                || shape.len() != 4
                || shape[1] != expect_c
                || shape[2] * scale != top[2]
                || shape[3] * scale != top[3]
            {
                return Err(Error::dim(format!(
                    "stream {} has shape {shape:?}; expected {expect_c} channels at 1/{scale} of {:?}",
                    s.r,
                    &top[2..]
                )));
            }
        }
        Ok(())
    }

    /// Applies `f_ir` for one pair of stream indices of stage `stage`.
    pub fn transform<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        stage: usize,
        input: ResolutionStream,
        to: usize,
    ) -> Result<Var> {
        let st = self
            .stages
            .get(stage.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("stage {stage} outside 1..={HRNET_STAGES}")))?;
        let f = st
            .fusion
            .get(to.wrapping_sub(1))
            .and_then(|row| row.get(input.r.wrapping_sub(1)))
            .ok_or_else(|| {
                Error::contract(format!("no transform {}->{to} in stage {stage}", input.r))
            })?;
        f.forward(pass, input.tensor)
    }

    /// Multi-resolution fusion at the end of stage `stage`.
    pub fn fuse_streams<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        streams: &[ResolutionStream],
        stage: usize,
    ) -> Result<Vec<ResolutionStream>> {
        if stage == 0 || stage > HRNET_STAGES || streams.len() != stage {
            return Err(Error::contract(format!(
                "stage {stage} fusion needs exactly {stage} streams, got {}",
                streams.len()
            )));
        }
        self.check_streams(pass, streams)?;
        let tape = pass.tape();
        let mut out = Vec::with_capacity(HrNetConfig::outputs_of(stage));
        for r in 1..=HrNetConfig::outputs_of(stage) {
            let mut acc: Option<Var> = None;
            for s in streams {
                let term = self.transform(pass, stage, *s, r)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            let sum = acc.expect("at least one stream");
            out.push(ResolutionStream {
                r,
                tensor: tape.relu(sum)?,
            });
        }
        Ok(out)
    }

    pub fn run_branches<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        streams: &[ResolutionStream],
        stage: usize,
    ) -> Result<Vec<ResolutionStream>> {
        let st = &self.stages[stage - 1];
        streams
            .iter()
            .zip(&st.branches)
            .map(|(s, blocks)| {
                let t = blocks
                    .iter()
                    .try_fold(s.tensor, |x, b| b.forward(pass, x))?;
                Ok(ResolutionStream { r: s.r, tensor: t })
            })
            .collect()
    }

    pub fn forward_traced<T: Real>(
        &self,
        pass: &Pass<'_, T>,
        image: Var,
    ) -> Result<(Var, HrNetTrace)> {
        let tape = pass.tape();
        let s = tape.shape(image);
        let m = self.config.size_multiple();
        if s.len() != 4 || s[2] % m != 0 || s[3] % m != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::dim(format!(
                "multi-resolution backbone input {s:?}: height and width must be positive multiples of {m}; \
                 resize or pad the image accordingly"
            )));
        }
        let x = self.stem[0].forward(pass, image)?;
        let x = self.stem[1].forward(pass, x)?;
        let mut streams = vec![ResolutionStream { r: 1, tensor: x }];
        let mut trace = HrNetTrace::default();
        for stage in 1..=HRNET_STAGES {
            trace.stage_inputs.push(streams.len());
            let processed = self.run_branches(pass, &streams, stage)?;
            streams = self.fuse_streams(pass, &processed, stage)?;
            trace.stage_outputs.push(streams.len());
            let top = tape.shape(streams[0].tensor);
            trace.top_extents.push((top[2], top[3]));
        }
        let mut head = streams[0].tensor;
        for s in &streams[1..] {
            let up = tape.upsample_bilinear(s.tensor, 1 << (s.r - 1))?;
            head = tape.concat_channels(head, up)?;
        }
        Ok((head, trace))
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, image: Var) -> Result<Var> {
        Ok(self.forward_traced(pass, image)?.0)
    }
}
