//! Deterministic synthetic LiDAR-like sequences of a rigid target.
//!
//! A sensor drives forward with a gently oscillating heading while a
//! box-shaped target moves under a constant-velocity + yaw-rate model.
//! Target returns are sampled on the faces visible from the sensor;
//! distractors of the same size travel on parallel tracks; static clutter
//! and ground returns fill the rest of the sweep.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, wrap_angle, Box3D, PointFrame, Pose2};

/// Height of the sensor above the ground plane.
pub const SENSOR_HEIGHT: f64 = 1.73;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioClass {
    /// Dense returns, smooth motion.
    Easy,
    /// Sharp turns with same-size distractors alongside.
    Turning,
    /// A window of frames in which most target returns disappear.
    Occlusion,
    /// Very few target returns per frame.
    Sparse,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 4] = [
        ScenarioClass::Easy,
        ScenarioClass::Turning,
        ScenarioClass::Occlusion,
        ScenarioClass::Sparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioClass::Easy => "easy",
            ScenarioClass::Turning => "turning",
            ScenarioClass::Occlusion => "occlusion",
            ScenarioClass::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub start: usize,
    pub frames: usize,
    /// Yaw rate in rad/frame during the turn.
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionWindow {
    /// First frame of the window.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    /// Extra fraction of target returns removed inside the window.
    pub rate: f64,
}

impl OcclusionWindow {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub class: ScenarioClass,
    pub frames: usize,
    /// `(w, l, h)` in meters.
    pub target_size: [f64; 3],
    /// Initial target position relative to the first sensor pose.
    pub start: [f64; 2],
    pub start_heading: f64,
    /// Meters per frame.
    pub speed: f64,
    /// Radians per frame.
    pub yaw_rate: f64,
    pub speed_noise: f64,
    pub yaw_noise: f64,
    pub turn: Option<TurnEvent>,
    pub points_min: usize,
    pub points_max: usize,
    pub dropout: f64,
    /// Standard deviation of per-point range noise, meters.
    pub point_noise: f64,
    pub distractors: usize,
    pub distractor_spacing: f64,
    pub ego_speed: f64,
    pub ego_yaw_amplitude: f64,
    pub background_points: usize,
    pub clutter_objects: usize,
    pub occlusions: Vec<OcclusionWindow>,
}

impl ScenarioConfig {
    /// Noise-free, clutter-free constant-velocity scene.
    pub fn clean(seed: u64, frames: usize) -> Self {
        ScenarioConfig {
            seed,
            class: ScenarioClass::Easy,
            frames,
            target_size: [1.9, 4.5, 1.6],
            start: [10.0, 0.0],
            start_heading: 0.0,
            speed: 0.0,
            yaw_rate: 0.0,
            speed_noise: 0.0,
            yaw_noise: 0.0,
            turn: None,
            points_min: 200,
            points_max: 200,
            dropout: 0.0,
            point_noise: 0.0,
            distractors: 0,
            distractor_spacing: 4.0,
            ego_speed: 0.0,
            ego_yaw_amplitude: 0.0,
            background_points: 0,
            clutter_objects: 0,
            occlusions: Vec::new(),
        }
    }

    /// Randomized scenario of the given class, fully determined by `seed`.
    pub fn sample(class: ScenarioClass, seed: u64, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let ego_speed = rng.random_range(0.3..0.9);
        let mut cfg = ScenarioConfig {
            seed,
            class,
            frames,
            target_size: [rng.random_range(1.7..2.1), rng.random_range(3.9..4.9), rng.random_range(1.4..1.8)],
            start: [rng.random_range(7.0..13.0), rng.random_range(-4.0..4.0)],
            start_heading: rng.random_range(-0.5..0.5),
            speed: ego_speed + rng.random_range(-0.2..0.4),
            yaw_rate: rng.random_range(-0.01..0.01),
            speed_noise: 0.02,
            yaw_noise: 0.005,
            turn: None,
            points_min: 250,
            points_max: 400,
            dropout: 0.0,
            point_noise: 0.02,
            distractors: 0,
            distractor_spacing: 4.0,
            ego_speed,
            ego_yaw_amplitude: rng.random_range(0.0..0.03),
            background_points: 600,
            clutter_objects: 6,
            occlusions: Vec::new(),
        };
        match class {
            ScenarioClass::Easy => {}
            ScenarioClass::Turning => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                cfg.turn = Some(TurnEvent {
                    start: rng.random_range(frames / 4..frames / 2),
                    frames: rng.random_range(4..7),
                    rate: sign * rng.random_range(0.18..0.3),
                });
                cfg.points_min = 120;
                cfg.points_max = 250;
                cfg.dropout = 0.1;
                cfg.distractors = 2;
                cfg.distractor_spacing = rng.random_range(3.2..4.2);
            }
            ScenarioClass::Occlusion => {
                let start = rng.random_range(frames / 4..frames / 2);
                cfg.occlusions.push(OcclusionWindow {
                    start,
                    end: (start + rng.random_range(3..6)).min(frames),
                    rate: rng.random_range(0.85..1.0),
                });
                cfg.points_min = 150;
                cfg.points_max = 300;
            }
            ScenarioClass::Sparse => {
                cfg.points_min = 200;
                cfg.points_max = 200;
                cfg.dropout = 0.95;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if self.points_min > self.points_max {
            return Err(Error::Config("points_min exceeds points_max".into()));
        }
        if self.frames == 0 || self.target_size.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("need at least one frame and a positive target size".into()));
        }
        for w in &self.occlusions {
            if w.start > w.end || w.end > self.frames || !(0.0..=1.0).contains(&w.rate) {
                return Err(Error::Config(format!("invalid occlusion window {w:?}")));
            }
        }
        Ok(())
    }
}

/// One frame of a generated sequence. The first `target_points` entries of
/// `frame.points` are target returns.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqFrame {
    pub frame: PointFrame,
    /// Ground-truth box in this frame's sensor coordinates.
    pub gt_box: Box3D,
    pub target_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub class: ScenarioClass,
    pub seed: u64,
    pub frames: Vec<SeqFrame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Derive an independent per-item seed from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| v as f32 as f64)
}

/// World-frame state of every moving box at one instant.
struct WorldState {
    ego: Pose2,
    target: Box3D,
    distractors: Vec<Box3D>,
}

fn simulate(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<WorldState> {
    let speed_n = Normal::new(0.0, cfg.speed_noise.max(0.0)).expect("finite std");
    let yaw_n = Normal::new(0.0, cfg.yaw_noise.max(0.0)).expect("finite std");
    let ground_z = -SENSOR_HEIGHT + cfg.target_size[2] / 2.0;
    let mut pos = cfg.start;
    let mut heading = cfg.start_heading;
    let mut speed = cfg.speed;
    let mut ego = Pose2::identity();
    let lanes: Vec<(f64, f64, f64)> = (0..cfg.distractors)
        .map(|k| {
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            let lateral = side * cfg.distractor_spacing * (k / 2 + 1) as f64;
            (lateral, rng.random_range(-2.0..2.0), rng.random_range(-0.05..0.05))
        })
        .collect();
    let period = 40.0;
    let mut states = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let target = Box3D::new([pos[0], pos[1], ground_z], cfg.target_size, heading);
        let distractors = lanes
            .iter()
            .map(|&(lat, lon, drift)| {
                let off = rotate(heading, [lon + drift * t as f64, lat]);
                Box3D::new([pos[0] + off[0], pos[1] + off[1], ground_z], cfg.target_size, heading)
            })
            .collect();
        states.push(WorldState { ego, target, distractors });

        let mut rate = cfg.yaw_rate + yaw_n.sample(rng);
        if let Some(turn) = cfg.turn {
            if t >= turn.start && t < turn.start + turn.frames {
                rate += turn.rate;
            }
        }
        heading = wrap_angle(heading + rate);
        speed = (speed + speed_n.sample(rng)).max(0.0);
        pos = [pos[0] + speed * heading.cos(), pos[1] + speed * heading.sin()];
        let ego_yaw = cfg.ego_yaw_amplitude * (2.0 * PI * (t + 1) as f64 / period).sin();
        let step = rotate(ego.yaw, [cfg.ego_speed, 0.0]);
        ego = Pose2::new(ego.x + step[0], ego.y + step[1], ego_yaw);
    }
    states
}

/// Sample `n` points on the faces of `b` that face the sensor at `sensor`.
fn sample_surface(b: &Box3D, sensor: [f64; 2], n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let (hw, hl, hh) = (b.width() / 2.0, b.length() / 2.0, b.height() / 2.0);
    // (outward normal in body frame, face area)
    let sides: [([f64; 2], f64); 4] = [
        ([1.0, 0.0], b.width() * b.height()),
        ([-1.0, 0.0], b.width() * b.height()),
        ([0.0, 1.0], b.length() * b.height()),
        ([0.0, -1.0], b.length() * b.height()),
    ];
    let rel = rotate(-b.yaw, [sensor[0] - b.center[0], sensor[1] - b.center[1]]);
    let mut faces: Vec<(usize, f64)> = sides
        .iter()
        .enumerate()
        .filter(|(_, (nrm, _))| {
            let fc = [nrm[0] * hl, nrm[1] * hw];
            nrm[0] * (rel[0] - fc[0]) + nrm[1] * (rel[1] - fc[1]) > 0.0
        })
        .map(|(i, (_, a))| (i, *a))
        .collect();
    // the top is seen at grazing angles, so it gets fewer returns
    faces.push((4, 0.3 * b.width() * b.length()));
    let total: f64 = faces.iter().map(|f| f.1).sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = faces[faces.len() - 1].0;
        for (i, a) in &faces {
            if pick < *a {
                face = *i;
                break;
            }
            pick -= a;
        }
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let local = match face {
            0 => [hl, u * hw, v * hh],
            1 => [-hl, u * hw, v * hh],
            2 => [u * hl, hw, v * hh],
            3 => [u * hl, -hw, v * hh],
            _ => [u * hl, v * hw, hh],
        };
        let xy = rotate(b.yaw, [local[0], local[1]]);
        out.push([xy[0] + b.center[0], xy[1] + b.center[1], local[2] + b.center[2]]);
    }
    out
}

fn to_sensor(ego: &Pose2, p: [f64; 3]) -> [f64; 3] {
    let q = ego.inverse().apply([p[0], p[1]]);
    [q[0], q[1], p[2]]
}

/// Build one sequence from its scenario description.
pub fn generate_sequence(cfg: &ScenarioConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states = simulate(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.point_noise.max(0.0)).expect("finite std");

    let clutter: Vec<Box3D> = (0..cfg.clutter_objects)
        .map(|_| {
            let size = [rng.random_range(0.3..1.2), rng.random_range(0.3..2.5), rng.random_range(0.8..2.5)];
            let c = [rng.random_range(-5.0..30.0), rng.random_range(-15.0..15.0)];
            Box3D::new([c[0], c[1], -SENSOR_HEIGHT + size[2] / 2.0], size, rng.random_range(-PI..PI))
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    for (t, st) in states.iter().enumerate() {
        let sensor = [st.ego.x, st.ego.y];
        let jitter = |p: [f64; 3], rng: &mut ChaCha8Rng| -> [f64; 3] {
            if cfg.point_noise > 0.0 {
                [p[0] + noise.sample(rng), p[1] + noise.sample(rng), p[2] + noise.sample(rng)]
            } else {
                p
            }
        };

        let base = rng.random_range(cfg.points_min..=cfg.points_max);
        let kept = (0..base).filter(|_| !rng.random_bool(cfg.dropout)).count();
        let mut points: Vec<[f64; 3]> = sample_surface(&st.target, sensor, kept, &mut rng)
            .into_iter()
            .map(|p| quantize(to_sensor(&st.ego, jitter(p, &mut rng))))
            .collect();
        let mut target_points = points.len();

        let mut frame = PointFrame {
            points: Vec::new(),
            ego_pose: st.ego,
            timestamp: t as u64,
        };
        for w in cfg.occlusions.iter().filter(|w| w.contains(t)) {
            let occluded = apply_occlusion(
                &SeqFrame {
                    frame: PointFrame {
                        points: std::mem::take(&mut points),
                        ..frame.clone()
                    },
                    gt_box: st.target,
                    target_points,
                },
                w.rate,
                &mut rng,
            );
            target_points = occluded.target_points;
            points = occluded.frame.points;
        }

        for d in &st.distractors {
            let n = rng.random_range(cfg.points_min..=cfg.points_max);
            let kept = (0..n).filter(|_| !rng.random_bool(cfg.dropout)).count();
            for p in sample_surface(d, sensor, kept, &mut rng) {
                points.push(quantize(to_sensor(&st.ego, jitter(p, &mut rng))));
            }
        }
        for c in &clutter {
            for p in sample_surface(c, sensor, 40, &mut rng) {
                points.push(quantize(to_sensor(&st.ego, jitter(p, &mut rng))));
            }
        }
        for _ in 0..cfg.background_points {
            let r = rng.random_range(2.0..25.0f64).sqrt() * 5.0;
            let a = rng.random_range(-PI..PI);
            let local = [r * a.cos(), r * a.sin(), -SENSOR_HEIGHT + rng.random_range(-0.03..0.03)];
            points.push(quantize(local));
        }

        frame.points = points;
        let inv = st.ego.inverse();
        frames.push(SeqFrame {
            frame,
            gt_box: inv.apply_box(&st.target),
            target_points,
        });
    }
    Ok(Sequence {
        id: format!("{}_{:016x}", cfg.class.name(), cfg.seed),
        class: cfg.class,
        seed: cfg.seed,
        frames,
    })
}

/// Remove each target return with probability `rate`. Ground-truth boxes
/// and non-target returns are untouched.
pub fn apply_occlusion(frame: &SeqFrame, rate: f64, rng: &mut impl Rng) -> SeqFrame {
    let rate = rate.clamp(0.0, 1.0);
    let mut points = Vec::with_capacity(frame.frame.points.len());
    let mut kept = 0;
    for (i, p) in frame.frame.points.iter().enumerate() {
        if i < frame.target_points {
            if rate > 0.0 && rng.random_bool(rate) {
                continue;
            }
            kept += 1;
        }
        points.push(*p);
    }
    SeqFrame {
        frame: PointFrame {
            points,
            ..frame.frame.clone()
        },
        gt_box: frame.gt_box,
        target_points: kept,
    }
}

/// Scenario mix used for dataset generation: sequence `i` gets class
/// `classes[i % classes.len()]` and a seed derived from `base_seed`.
pub fn generate_dataset(
    classes: &[ScenarioClass],
    count: usize,
    frames: usize,
    base_seed: u64,
    exec: crate::par::Execution,
) -> Result<Vec<Sequence>> {
    if classes.is_empty() {
        return Err(Error::Config("no scenario classes selected".into()));
    }
    let jobs: Vec<ScenarioConfig> = (0..count)
        .map(|i| ScenarioConfig::sample(classes[i % classes.len()], derive_seed(base_seed, i as u64), frames))
        .collect();
    exec.map(&jobs, generate_sequence).into_iter().collect()
}
