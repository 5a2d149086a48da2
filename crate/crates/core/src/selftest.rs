//! Built-in correctness checks: finite-difference gradients, the rigid-flow
//! oracle, analytic motion recovery and metric oracles. Used by the
//! `selftest` command and the acceptance suite.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{pillarize, BevGrid, PillarEncoder};
use crate::error::Result;
use crate::eval::{ope_precision, ope_success, FrameResult, TrackResult};
use crate::geometry::{
    flow_ground_truth, transform_box, wrap_angle, Box3D, CoordMap, PointFrame, Pose2, RelativeMotion, RotationCenter,
};
use crate::him::Him;
use crate::ifh::{flow_to_motion, HeadValues, Ifh, ThetaEncoding};
use crate::model::{FlowTrackNet, ModelConfig, ModelInputs};
use crate::nn::{sinusoidal_2d, ParamStore, Params};
use crate::pmm::Pmm;
use crate::synth::ScenarioClass;
use crate::tensor::{check_gradients, Align, GradCheckReport, Tape, Tensor, Var};
use crate::training::{compute_loss, LossWeights, Targets};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_report(r: &GradCheckReport) -> Self {
        Check::new(
            &format!("gradient {}", r.name),
            r.passed(),
            format!("max rel err {:.2e} over {} coords", r.max_rel_error, r.checked),
        )
    }
}

fn wavy(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.731 + phase).sin())
}

/// Weighted sum so that every output coordinate reaches the gradient.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(Tensor::from_fn(tape.shape(y), |i| (i as f64 * 0.37).cos()));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Replace every parameter with small random values. Zero-initialized
/// projections would otherwise hide whole gradient paths.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add_sub_mul", vec![wavy(&[2, 3], 0.0), wavy(&[2, 3], 1.0)], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.scale(c, 1.7);
            probe(t, d)
        })),
        ("matmul_transpose", vec![wavy(&[3, 4], 0.0), wavy(&[4, 2], 1.0)], Box::new(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let y = t.transpose(m)?;
            probe(t, y)
        })),
        ("biases", vec![wavy(&[2, 3, 3], 0.0), wavy(&[2], 1.0), wavy(&[3], 2.0)], Box::new(|t, v| {
            let a = t.add_channel_bias(v[0], v[1])?;
            let r = t.reshape(a, &[6, 3])?;
            let b = t.add_row_bias(r, v[2])?;
            probe(t, b)
        })),
        ("conv2d", vec![wavy(&[2, 6, 6], 0.0), wavy(&[3, 2, 3, 3], 1.0)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            probe(t, y)
        })),
        ("relu_softplus", vec![wavy(&[7], 0.4)], Box::new(|t, v| {
            let r = t.relu(v[0]);
            let s = t.softplus(r);
            probe(t, s)
        })),
        ("softmax_rows", vec![wavy(&[3, 5], 0.0)], Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y)
        })),
        ("layer_norm", vec![wavy(&[3, 6], 0.0), wavy(&[6], 1.0), wavy(&[6], 2.0)], Box::new(|t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2])?;
            probe(t, y)
        })),
        ("attention", vec![wavy(&[3, 4], 0.0), wavy(&[5, 4], 1.0), wavy(&[5, 4], 2.0)], Box::new(|t, v| {
            let y = t.attention(v[0], v[1], v[2], 2)?;
            probe(t, y)
        })),
        ("concat_reshape", vec![wavy(&[2, 3], 0.0), wavy(&[1, 3], 1.0)], Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let y = t.reshape(c, &[9])?;
            probe(t, y)
        })),
        ("upsample_corners", vec![wavy(&[2, 3, 2], 0.0)], Box::new(|t, v| {
            let y = t.upsample_bilinear(v[0], 4)?;
            probe(t, y)
        })),
        ("upsample_centers", vec![wavy(&[2, 3, 2], 0.5)], Box::new(|t, v| {
            let y = t.upsample_bilinear_aligned(v[0], 2, Align::Centers)?;
            probe(t, y)
        })),
        ("avg_pool", vec![wavy(&[2, 4, 6], 0.0)], Box::new(|t, v| {
            let y = t.avg_pool(v[0], 2)?;
            probe(t, y)
        })),
        ("masked_l1", vec![wavy(&[6], 0.0), wavy(&[6], 1.5)], Box::new(|t, v| {
            let m = t.constant(Tensor::new(&[6], vec![1., 0., 1., 1., 0., 1.])?);
            t.masked_l1(v[0], v[1], m)
        })),
        ("weighted_mean", vec![wavy(&[2, 3, 3], 0.0), wavy(&[1, 3, 3], 1.0)], Box::new(|t, v| {
            let w = t.softplus(v[1]);
            let y = t.weighted_mean(v[0], w)?;
            probe(t, y)
        })),
    ]
}

/// Gradient checks for every tape operation and for each module of the
/// tiny configuration (4 channels, 32×32 grid).
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, inputs, build) in op_cases() {
        out.push(Check::from_report(&check_gradients(name, &inputs, None, |t, v| build(t, v))?));
    }

    let cfg = ModelConfig::tiny();
    let (c, n) = (cfg.channels, cfg.grid_cells);
    let spec = cfg.grid_at([0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<[f64; 3]> = (0..300)
        .map(|_| [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-2.5..0.5)])
        .collect();
    let frame = PointFrame {
        points,
        ego_pose: Pose2::identity(),
        timestamp: 0,
    };
    let stats = pillarize(&frame, &spec);
    let target = Box3D::new([0.3, -0.2, -1.0], [1.9, 4.4, 1.6], 0.4);
    let mask = crate::bev::rasterize_mask(&target, &spec);

    // pillar encoder
    let mut store = ParamStore::new();
    let enc = PillarEncoder::new(&mut store, c, &mut rng);
    randomize(&mut store, 2);
    let r = check_gradients("encoder", store.tensors(), Some(8), |t, v| {
        let g = enc.encode(t, &Params::from_vars(v.to_vec()), &stats)?;
        probe(t, g.rows)
    })?;
    out.push(Check::from_report(&r));

    // historical fusion, full stack
    let mut store = ParamStore::new();
    let him = Him::new(&mut store, c, cfg.query_count, cfg.heads, cfg.layers, &mut rng)?;
    randomize(&mut store, 3);
    let np = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(wavy(&[n * n, c], 0.0));
    inputs.push(wavy(&[n * n, c], 1.3));
    let pos_t = sinusoidal_2d(n, n, c);
    let grid = |rows: Var| BevGrid {
        rows,
        spec,
        channels: c,
        timestamp: 0,
    };
    let r = check_gradients("him", &inputs, Some(6), |t, v| {
        let p = Params::from_vars(v[..np].to_vec());
        let (template, hist) = (grid(v[np]), grid(v[np + 1]));
        let pos = t.constant(pos_t.clone());
        let m = him.mask_enhance(t, &p, &template, &mask)?;
        let q = him.update_query(t, &p, m, pos)?;
        let q = him.aggregate_history(t, &p, q, &[hist], &template, pos)?;
        let e = him.enhance_template(t, &p, &template, q, pos)?;
        probe(t, e.rows)
    })?;
    out.push(Check::from_report(&r));

    // point-level motion module
    let mut store = ParamStore::new();
    let pmm = Pmm::new(&mut store, c, cfg.pyramid_widths, cfg.fused_channels, &mut rng);
    randomize(&mut store, 4);
    let np = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(wavy(&[2 * c + 1, n, n], 0.2));
    let r = check_gradients("pmm", &inputs, Some(8), |t, v| {
        let y = pmm.forward(t, &Params::from_vars(v[..np].to_vec()), v[np])?;
        probe(t, y)
    })?;
    out.push(Check::from_report(&r));

    // instance flow head, one check per branch
    let mut store = ParamStore::new();
    let ifh = Ifh::new(&mut store, cfg.fused_channels, cfg.head_stride, cfg.theta_encoding, &mut rng);
    randomize(&mut store, 5);
    let np = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(wavy(&[cfg.fused_channels, n, n], 0.5));
    for (b, name) in ["ifh flow", "ifh weight", "ifh z", "ifh theta"].iter().enumerate() {
        let r = check_gradients(name, &inputs, Some(8), |t, v| {
            let maps = ifh.predict_maps(t, &Params::from_vars(v[..np].to_vec()), v[np])?;
            probe(t, [maps.flow, maps.weight, maps.z, maps.theta][b])
        })?;
        out.push(Check::from_report(&r));
    }

    // full training loss through the whole network
    let mut net = FlowTrackNet::new(cfg.clone())?;
    for t in net.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let moved: Vec<[f64; 3]> = frame.points.iter().map(|p| [p[0] + 0.6, p[1] - 0.3, p[2]]).collect();
    let current = pillarize(
        &PointFrame {
            points: moved,
            ..frame.clone()
        },
        &spec,
    );
    let inputs = ModelInputs {
        template: stats.clone(),
        current,
        history: vec![stats.clone()],
        mask: mask.clone(),
    };
    let head = spec.downsampled(cfg.head_stride)?;
    let motion = RelativeMotion::new([0.6, -0.3, 0.0], 0.05);
    let fm = flow_ground_truth(&head.coord_map(), &target, &motion, RotationCenter::BoxCenter);
    let cells = fm.h * fm.w;
    let targets = Targets {
        flow: Tensor::from_fn(&[2, fm.h, fm.w], |k| fm.flow[k % cells][k / cells]),
        // a larger box so that the coarse head grid sees a footprint
        footprint: crate::bev::rasterize_mask(&Box3D::new(target.center, [4.0, 6.0, 1.6], target.yaw), &head),
        motion: [0.6, -0.3],
        z: -1.0,
        theta: 0.45,
    };
    let r = check_gradients("full loss", net.store.tensors(), Some(2), |t, v| {
        let o = net.forward(t, &Params::from_vars(v.to_vec()), &inputs)?;
        Ok(compute_loss(t, &o, &targets, &LossWeights::default(), cfg.theta_encoding)?.total)
    })?;
    out.push(Check::from_report(&r));
    Ok(out)
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn homogeneous(t: [f64; 2], theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, t[0]], [s, c, t[1]], [0.0, 0.0, 1.0]]
}

/// Brute-force flow of one point: translate the box center to the origin,
/// rotate, translate back and add the motion, as one homogeneous product.
fn oracle_flow(p: [f64; 2], center: [f64; 2], m: &RelativeMotion) -> [f64; 2] {
    let back = homogeneous([center[0] + m.translation[0], center[1] + m.translation[1]], 0.0);
    let rot = homogeneous([0.0, 0.0], m.rotation);
    let to_origin = homogeneous([-center[0], -center[1]], 0.0);
    let t = mat_mul(&back, &mat_mul(&rot, &to_origin));
    [
        t[0][0] * p[0] + t[0][1] * p[1] + t[0][2] - p[0],
        t[1][0] * p[0] + t[1][1] * p[1] + t[1][2] - p[1],
    ]
}

fn random_box(rng: &mut impl Rng) -> Box3D {
    Box3D::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..1.0)],
        [rng.random_range(0.5..3.0), rng.random_range(0.5..6.0), rng.random_range(0.5..3.0)],
        rng.random_range(-PI..PI),
    )
}

fn random_motion(rng: &mut impl Rng) -> RelativeMotion {
    RelativeMotion::new(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5)],
        rng.random_range(-PI..PI),
    )
}

/// Compare rasterized ground-truth flow with the matrix oracle on `pairs`
/// random (box, motion) pairs, and check the box round trip.
pub fn flow_oracle(pairs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut flow_err, mut trip_err): (f64, f64) = (0.0, 0.0);
    let mut cells = 0;
    for _ in 0..pairs {
        let b = random_box(&mut rng);
        let m = random_motion(&mut rng);
        let coords = CoordMap::regular([b.center[0] - 4.0, b.center[1] - 4.0], 0.4, 20, 20);
        let fm = flow_ground_truth(&coords, &b, &m, RotationCenter::BoxCenter);
        for i in 0..fm.h {
            for j in 0..fm.w {
                let k = i * fm.w + j;
                if fm.valid[k] {
                    let o = oracle_flow(coords.at(i, j), b.center_xy(), &m);
                    flow_err = flow_err.max((fm.flow[k][0] - o[0]).abs()).max((fm.flow[k][1] - o[1]).abs());
                    cells += 1;
                }
            }
        }
        let back = transform_box(&transform_box(&b, &m), &m.inverse());
        for k in 0..3 {
            trip_err = trip_err.max((back.center[k] - b.center[k]).abs());
        }
        trip_err = trip_err.max(wrap_angle(back.yaw - b.yaw).abs());
    }
    vec![
        Check::new(
            "flow ground truth vs matrix oracle",
            flow_err <= 1e-9 && cells > 0,
            format!("max error {flow_err:.2e} m over {cells} cells of {pairs} pairs"),
        ),
        Check::new("box transform round trip", trip_err <= 1e-10, format!("max error {trip_err:.2e}")),
    ]
}

/// Feed exact ground-truth flow with uniform footprint weights to the
/// motion reduction on pure translations, and rescale the weights.
pub fn ifh_recovery(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::desk();
    let (mut err, mut scale_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let mut b = random_box(&mut rng);
        b.size = [rng.random_range(1.6..2.2), rng.random_range(3.8..5.0), 1.6];
        let t = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let m = RelativeMotion::new([t[0], t[1], 0.0], 0.0);
        let spec = cfg.grid_at(b.center_xy());
        let head = match spec.downsampled(2) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let fm = flow_ground_truth(&head.coord_map(), &b, &m, RotationCenter::BoxCenter);
        let (h, w) = (fm.h, fm.w);
        let n = h * w;
        let values = |weight: Tensor| HeadValues {
            flow: Tensor::from_fn(&[2, h, w], |k| fm.flow[k % n][k / n]),
            weight,
            z: Tensor::zeros(&[1, h, w]),
            theta: Tensor::zeros(&[2, h, w]),
            encoding: ThetaEncoding::SinCos,
        };
        let uniform = Tensor::from_fn(&[1, h, w], |k| if fm.valid[k] { 1.0 } else { 0.0 });
        let got = flow_to_motion(&values(uniform));
        err = err.max((got[0] - t[0]).abs()).max((got[1] - t[1]).abs());

        let raw = Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.01..2.0));
        let c = rng.random_range(0.01..100.0);
        let scaled = Tensor::from_fn(&[1, h, w], |k| raw.data()[k] * c);
        let (a, s) = (flow_to_motion(&values(raw)), flow_to_motion(&values(scaled)));
        scale_err = scale_err.max((a[0] - s[0]).abs()).max((a[1] - s[1]).abs());
    }
    vec![
        Check::new("translation recovery from ground-truth flow", err <= 1e-6, format!("max error {err:.2e} m")),
        Check::new("weight rescaling invariance", scale_err <= 1e-10, format!("max change {scale_err:.2e} m")),
    ]
}

fn synthetic_result(frames: &[(f64, f64)]) -> TrackResult {
    TrackResult {
        sequence: "oracle".into(),
        class: ScenarioClass::Easy,
        frames: frames
            .iter()
            .enumerate()
            .map(|(i, (iou, d))| FrameResult {
                frame: i + 1,
                pred: Box3D::new([0.0; 3], [1.0; 3], 0.0),
                iou: *iou,
                center_dist: *d,
                fallback: false,
            })
            .collect(),
    }
}

/// Name, per-frame (IoU, distance), expected Success (NaN to skip) and
/// expected Precision.
type MetricCase = (&'static str, Vec<(f64, f64)>, f64, f64);

/// Success and Precision on hand-built results with known areas.
pub fn metric_oracles() -> Vec<Check> {
    let cases: [MetricCase; 4] = [
        ("all perfect", vec![(1.0, 0.0); 10], 100.0, 100.0),
        ("all failed", vec![(0.0, 5.0); 10], 0.0, 0.0),
        ("half and half", [(1.0, 0.0), (0.0, 5.0)].repeat(5), 50.0, 50.0),
        ("constant 1 m", vec![(0.5, 1.0); 10], f64::NAN, 50.0),
    ];
    cases
        .iter()
        .map(|(name, frames, s, p)| {
            let r = [synthetic_result(frames)];
            let (gs, gp) = (ope_success(&r), ope_precision(&r));
            let ok_s = s.is_nan() || (gs - s).abs() <= 0.5;
            let ok_p = (gp - p).abs() <= 0.5;
            Check::new(&format!("metrics {name}"), ok_s && ok_p, format!("Success {gs:.2}, Precision {gp:.2}"))
        })
        .collect()
}

/// Every check above, in order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = gradient_suite()?;
    out.extend(flow_oracle(1000, 7));
    out.extend(ifh_recovery(200, 8));
    out.extend(metric_oracles());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_flow_of_pure_rotation() {
        let f = oracle_flow([3.0, 3.0], [2.0, 3.0], &RelativeMotion::new([0.0; 3], PI / 2.0));
        assert!((f[0] + 1.0).abs() < 1e-12 && (f[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_oracles_pass() {
        assert!(metric_oracles().iter().all(|c| c.passed));
    }
}
