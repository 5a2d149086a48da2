//! Instance flow head: per-cell prediction maps and their reduction to one
//! rigid motion of the target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::TargetMask;
use crate::error::Result;
use crate::geometry::{wrap_angle, Box3D, Pose2};
use crate::nn::{Conv2d, ParamStore, Params};
use crate::tensor::{Tape, Tensor, Var, EPS};

/// How the orientation head encodes angles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaEncoding {
    /// Two channels `(sin θ, cos θ)`, read out with `atan2`.
    #[default]
    SinCos,
    /// One channel holding the angle itself.
    Raw,
}

impl ThetaEncoding {
    pub fn channels(self) -> usize {
        match self {
            ThetaEncoding::SinCos => 2,
            ThetaEncoding::Raw => 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    hidden: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, c: usize, out: usize, rng: &mut impl Rng) -> Self {
        Branch {
            hidden: Conv2d::new(store, &format!("{name}.hidden"), c, c, 3, 1, rng),
            out: Conv2d::new(store, &format!("{name}.out"), c, out, 1, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Params, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, p, h)
    }
}

/// The four prediction maps on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps {
    /// `[2, h, w]` planar flow in meters.
    pub flow: Var,
    /// `[1, h, w]` nonnegative flow weights.
    pub weight: Var,
    /// `[1, h, w]` z location.
    pub z: Var,
    /// `[2, h, w]` or `[1, h, w]` orientation, see [`ThetaEncoding`].
    pub theta: Var,
}

impl HeadMaps {
    /// Weighted instance motion `[2]`.
    pub fn motion(&self, tape: &mut Tape) -> Result<Var> {
        tape.weighted_mean(self.flow, self.weight)
    }

    pub fn values(&self, tape: &Tape, encoding: ThetaEncoding) -> HeadValues {
        HeadValues {
            flow: tape.value(self.flow).clone(),
            weight: tape.value(self.weight).clone(),
            z: tape.value(self.z).clone(),
            theta: tape.value(self.theta).clone(),
            encoding,
        }
    }
}

/// Detached copies of the prediction maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub flow: Tensor,
    pub weight: Tensor,
    pub z: Tensor,
    pub theta: Tensor,
    pub encoding: ThetaEncoding,
}

#[derive(Clone, Debug)]
pub struct Ifh {
    flow: Branch,
    weight: Branch,
    z: Branch,
    theta: Branch,
    pub stride: usize,
    pub encoding: ThetaEncoding,
}

impl Ifh {
    pub fn new(store: &mut ParamStore, c: usize, stride: usize, encoding: ThetaEncoding, rng: &mut impl Rng) -> Self {
        Ifh {
            flow: Branch::new(store, "ifh.flow", c, 2, rng),
            weight: Branch::new(store, "ifh.weight", c, 1, rng),
            z: Branch::new(store, "ifh.z", c, 1, rng),
            theta: Branch::new(store, "ifh.theta", c, encoding.channels(), rng),
            stride,
            encoding,
        }
    }

    /// Pool the fused flow feature to the head stride and run the four
    /// independent branches. Weights pass through softplus.
    pub fn predict_maps(&self, tape: &mut Tape, p: &Params, fused: Var) -> Result<HeadMaps> {
        let pooled = tape.avg_pool(fused, self.stride)?;
        let flow = self.flow.forward(tape, p, pooled)?;
        let w = self.weight.forward(tape, p, pooled)?;
        let weight = tape.softplus(w);
        let z = self.z.forward(tape, p, pooled)?;
        let theta = self.theta.forward(tape, p, pooled)?;
        Ok(HeadMaps { flow, weight, z, theta })
    }
}

/// `Σ M_P·W / max(Σ W, ε)` per planar component.
pub fn flow_to_motion(v: &HeadValues) -> [f64; 2] {
    let w = v.weight.data();
    let denom = w.iter().sum::<f64>().max(EPS);
    let n = w.len();
    let f = v.flow.data();
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        *o = f[c * n..(c + 1) * n].iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / denom;
    }
    out
}

/// Weighted z average and weighted circular mean of θ over the mask cells.
/// An empty mask falls back to all cells.
pub fn reduce_z_theta(v: &HeadValues, mask: &TargetMask) -> (f64, f64) {
    let w = v.weight.data();
    let m = mask.mask.data();
    debug_assert_eq!(w.len(), m.len());
    let mut weights: Vec<f64> = w.iter().zip(m).map(|(a, b)| a * b).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        log::warn!("no head cell inside the target mask; reducing z and orientation over the whole map");
        weights = w.to_vec();
    }
    let denom = weights.iter().sum::<f64>().max(EPS);
    let z = v.z.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() / denom;
    let n = weights.len();
    let t = v.theta.data();
    let (mut s, mut c) = (0.0, 0.0);
    for (k, wk) in weights.iter().enumerate() {
        let (sk, ck) = match v.encoding {
            ThetaEncoding::SinCos => (t[k], t[n + k]),
            ThetaEncoding::Raw => t[k].sin_cos(),
        };
        s += wk * sk;
        c += wk * ck;
    }
    (z, wrap_angle(s.atan2(c)))
}

/// Compose the output box from the previous box (in the compensated previous
/// frame), the planar motion, and the absolute z / orientation; then map it
/// into the current frame with `to_current`.
pub fn compose_box(prev: &Box3D, delta_xy: [f64; 2], z: f64, theta: f64, to_current: &Pose2) -> Box3D {
    let moved = Box3D {
        center: [prev.center[0] + delta_xy[0], prev.center[1] + delta_xy[1], z],
        size: prev.size,
        yaw: wrap_angle(theta),
    };
    to_current.apply_box(&moved)
}
