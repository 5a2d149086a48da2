//! Point-level motion module: flow-feature construction and multi-scale
//! extraction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Params};
use crate::tensor::{Align, Tape, Var};

/// Number of stride-2 stages; the input must be divisible by `2^STAGES`.
pub const STAGES: usize = 3;

#[derive(Clone, Debug)]
pub struct Pmm {
    stages: Vec<Conv2d>,
    fuse: Conv2d,
    pub widths: [usize; STAGES],
    pub fused: usize,
}

impl Pmm {
    pub fn new(store: &mut ParamStore, channels: usize, widths: [usize; STAGES], fused: usize, rng: &mut impl Rng) -> Self {
        let mut c_in = 2 * channels + 1;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("pmm.stage{i}"), c_in, w, 3, 2, rng));
            c_in = w;
        }
        let fuse = Conv2d::new(store, "pmm.fuse", widths.iter().sum(), fused, 1, 1, rng);
        Pmm {
            stages,
            fuse,
            widths,
            fused,
        }
    }

    /// Channel concatenation in the fixed order (mask, template, current).
    pub fn build_flow_feature(tape: &mut Tape, mask: Var, template: Var, current: Var) -> Result<Var> {
        let (ms, ts, cs) = (tape.shape(mask).to_vec(), tape.shape(template).to_vec(), tape.shape(current).to_vec());
        if ms.len() != 3 || ts.len() != 3 || cs.len() != 3 || ms[1..] != ts[1..] || ts[1..] != cs[1..] {
            return Err(Error::Config(format!(
                "flow feature inputs disagree on grid: mask {ms:?}, template {ts:?}, current {cs:?}"
            )));
        }
        tape.concat(&[mask, template, current])
    }

    /// Three stride-2 conv+ReLU stages.
    pub fn multiscale_extract(&self, tape: &mut Tape, p: &Params, f: Var) -> Result<[Var; STAGES]> {
        let (_, h, w) = tape.value(f).dims3()?;
        let k = 1 << STAGES;
        if h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("flow feature {h}x{w} is not divisible by {k}")));
        }
        let mut x = f;
        let mut out = [f; STAGES];
        for (i, stage) in self.stages.iter().enumerate() {
            let y = stage.forward(tape, p, x)?;
            x = tape.relu(y);
            out[i] = x;
        }
        Ok(out)
    }

    /// Upsample every level back to the input resolution, concatenate, and
    /// mix with a 1×1 convolution. Center-aligned sampling keeps the module
    /// covariant under shifts by multiples of the coarsest stride.
    pub fn fuse_scales(&self, tape: &mut Tape, p: &Params, pyramid: &[Var; STAGES]) -> Result<Var> {
        let mut ups = Vec::with_capacity(STAGES);
        for (i, level) in pyramid.iter().enumerate() {
            ups.push(tape.upsample_bilinear_aligned(*level, 2 << i, Align::Centers)?);
        }
        let cat = tape.concat(&ups)?;
        self.fuse.forward(tape, p, cat)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, f: Var) -> Result<Var> {
        let pyramid = self.multiscale_extract(tape, p, f)?;
        self.fuse_scales(tape, p, &pyramid)
    }
}
