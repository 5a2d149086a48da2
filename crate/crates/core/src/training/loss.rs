//! Training objective: flow, motion, z and orientation terms.

use serde::{Deserialize, Serialize};

use crate::bev::TargetMask;
use crate::error::Result;
use crate::ifh::ThetaEncoding;
use crate::model::ModelOutput;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub flow: f64,
    pub motion: f64,
    pub z: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            flow: 1.0,
            motion: 2.0,
            z: 1.0,
            theta: 1.0,
        }
    }
}

/// Supervision for one sample, on the head grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[2, h, w]` rigid flow; zero outside the footprint.
    pub flow: Tensor,
    /// Template box footprint on the head grid.
    pub footprint: TargetMask,
    pub motion: [f64; 2],
    /// z target, absolute or relative to the template box.
    pub z: f64,
    /// Orientation target, absolute or relative to the template box.
    pub theta: f64,
}

/// Unweighted terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub flow: Var,
    pub motion: Var,
    pub z: Var,
    pub theta: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub flow: f64,
    pub motion: f64,
    pub z: f64,
    pub theta: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            flow: tape.value(self.flow).item(),
            motion: tape.value(self.motion).item(),
            z: tape.value(self.z).item(),
            theta: tape.value(self.theta).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Orientation target map in the head's encoding.
pub fn theta_target(theta: f64, encoding: ThetaEncoding, h: usize, w: usize) -> Tensor {
    let n = h * w;
    match encoding {
        ThetaEncoding::SinCos => {
            let (s, c) = theta.sin_cos();
            Tensor::from_fn(&[2, h, w], |k| if k < n { s } else { c })
        }
        ThetaEncoding::Raw => Tensor::full(&[1, h, w], theta),
    }
}

pub fn compute_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    targets: &Targets,
    weights: &LossWeights,
    encoding: ThetaEncoding,
) -> Result<LossVars> {
    let s = targets.footprint.mask.shape();
    let (h, w) = (s[1], s[2]);

    let flow_t = tape.constant(targets.flow.clone());
    let flow_m = tape.constant(targets.footprint.repeated(2));
    let flow = tape.masked_l1(out.maps.flow, flow_t, flow_m)?;

    let motion_t = tape.constant(Tensor::new(&[2], targets.motion.to_vec())?);
    let ones = tape.constant(Tensor::full(&[2], 1.0));
    let motion = tape.masked_l1(out.motion, motion_t, ones)?;

    let z_t = tape.constant(Tensor::full(&[1, h, w], targets.z));
    let z_m = tape.constant(targets.footprint.mask.clone());
    let z = tape.masked_l1(out.maps.z, z_t, z_m)?;

    let k = encoding.channels();
    let th_t = tape.constant(theta_target(targets.theta, encoding, h, w));
    let th_m = tape.constant(targets.footprint.repeated(k));
    let theta = tape.masked_l1(out.maps.theta, th_t, th_m)?;

    let terms = [
        tape.scale(flow, weights.flow),
        tape.scale(motion, weights.motion),
        tape.scale(z, weights.z),
        tape.scale(theta, weights.theta),
    ];
    let a = tape.add(terms[0], terms[1])?;
    let b = tape.add(terms[2], terms[3])?;
    let total = tape.add(a, b)?;
    Ok(LossVars {
        flow,
        motion,
        z,
        theta,
        total,
    })
}
