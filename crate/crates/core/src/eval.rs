//! Frame-by-frame tracking, the constant-velocity baseline, and
//! one-pass-evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compensate_box, flow_ground_truth, iou_3d, transform_box, Box3D, Pose2, RelativeMotion, RotationCenter};
use crate::ifh::HeadValues;
use crate::model::{FlowTrackNet, ModelConfig, PoseHeads};
use crate::par::Execution;
use crate::pipeline::{build_step, decode_box, StepInputs};
use crate::synth::{ScenarioClass, Sequence};
use crate::tensor::Tensor;

/// IoU thresholds `0, 0.05, …, 1`.
pub const IOU_STEPS: usize = 20;
/// Center-distance thresholds `0, 0.1, …, 2` m.
pub const DIST_STEPS: usize = 20;
pub const DIST_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub pred: Box3D,
    pub iou: f64,
    pub center_dist: f64,
    /// The prediction came from constant-velocity extrapolation.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub sequence: String,
    pub class: ScenarioClass,
    /// One entry per frame after the initial one.
    pub frames: Vec<FrameResult>,
}

impl TrackResult {
    pub fn mean_center_error(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(|f| f.center_dist).sum::<f64>() / self.frames.len() as f64
    }

    pub fn fallback_count(&self) -> usize {
        self.frames.iter().filter(|f| f.fallback).count()
    }
}

/// What a step predictor may look at besides the network inputs. Learned
/// models ignore it; the geometric oracle reads the ground truth.
pub struct StepContext<'a> {
    pub sequence: &'a Sequence,
    pub t: usize,
    pub prev_box: &'a Box3D,
}

pub trait StepModel: Sync {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, step: &StepInputs, ctx: &StepContext<'_>) -> Result<HeadValues>;
}

impl StepModel for FlowTrackNet {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict(&self, step: &StepInputs, _ctx: &StepContext<'_>) -> Result<HeadValues> {
        self.infer(&step.inputs)
    }
}

/// Emits the ground-truth rigid flow of the template box with uniform
/// weights on its footprint, plus exact z and orientation.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub config: ModelConfig,
}

impl StepModel for OracleModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict(&self, step: &StepInputs, ctx: &StepContext<'_>) -> Result<HeadValues> {
        let (prev, cur) = (&ctx.sequence.frames[ctx.t - 1], &ctx.sequence.frames[ctx.t]);
        let target = compensate_box(&cur.gt_box, &cur.frame.ego_pose, &prev.frame.ego_pose);
        let motion = RelativeMotion::between(ctx.prev_box, &target);
        let fm = flow_ground_truth(&step.head_grid.coord_map(), ctx.prev_box, &motion, RotationCenter::BoxCenter);
        let (h, w) = (fm.h, fm.w);
        let n = h * w;
        let (z, theta) = match self.config.pose_heads {
            PoseHeads::Absolute => (target.center[2], target.yaw),
            PoseHeads::Residual => (target.center[2] - ctx.prev_box.center[2], motion.rotation),
        };
        let weight = Tensor::from_fn(&[1, h, w], |k| if fm.valid[k] { 1.0 } else { 0.0 });
        Ok(HeadValues {
            flow: Tensor::from_fn(&[2, h, w], |k| fm.flow[k % n][k / n]),
            weight,
            z: Tensor::full(&[1, h, w], z),
            theta: crate::training::loss::theta_target(theta, self.config.theta_encoding, h, w),
            encoding: self.config.theta_encoding,
        })
    }
}

/// Repeat the displacement from `older` to `prev` once more. Boxes are given
/// in their own sensor frames; the result is in `current_pose`'s frame.
pub fn extrapolate_cv(older: Option<(&Box3D, &Pose2)>, prev: (&Box3D, &Pose2), current_pose: &Pose2) -> Box3D {
    let (b1, p1) = prev;
    let motion = match older {
        Some((b0, p0)) => RelativeMotion::between(&compensate_box(b0, p0, p1), b1),
        None => RelativeMotion::zero(),
    };
    Pose2::relative(current_pose, p1).apply_box(&transform_box(b1, &motion))
}

fn frame_result(seq: &Sequence, t: usize, pred: Box3D, fallback: bool) -> FrameResult {
    let gt = &seq.frames[t].gt_box;
    FrameResult {
        frame: t,
        pred,
        iou: iou_3d(&pred, gt),
        center_dist: pred.center_distance(gt),
        fallback,
    }
}

fn finite_box(b: &Box3D) -> bool {
    b.center.iter().all(|v| v.is_finite()) && b.yaw.is_finite()
}

/// One-pass tracking: initialize from the ground truth in frame 0, then
/// feed each prediction back as the next template box. `history` counts
/// input frames up to t - 1, so 1 is the plain two-frame tracker.
pub fn track_sequence<M: StepModel + ?Sized>(model: &M, seq: &Sequence, history: usize) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(Error::Contract(format!("sequence {} has fewer than 2 frames", seq.id)));
    }
    if history == 0 {
        return Err(Error::Config("history must be at least 1".into()));
    }
    let cfg = model.config();
    let mut boxes = vec![seq.frames[0].gt_box];
    let mut frames = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let (prev, cur) = (&seq.frames[t - 1].frame, &seq.frames[t].frame);
        let prev_box = boxes[t - 1];
        let hist: Vec<_> = (0..(history - 1).min(t - 1)).map(|k| &seq.frames[t - 2 - k].frame).collect();
        let step = build_step(cfg, &prev_box, prev, cur, &hist)?;
        let mut pred = None;
        if step.inputs.current.occupied() > 0 {
            let ctx = StepContext {
                sequence: seq,
                t,
                prev_box: &prev_box,
            };
            let values = model.predict(&step, &ctx)?;
            let b = decode_box(cfg.pose_heads, &values, &step.head_mask, &prev_box, &prev.ego_pose, &cur.ego_pose);
            if finite_box(&b) {
                pred = Some(b);
            } else {
                log::warn!("{} frame {t}: non-finite prediction, extrapolating", seq.id);
            }
        } else {
            log::debug!("{} frame {t}: no points in the search area, extrapolating", seq.id);
        }
        let fallback = pred.is_none();
        let b = pred.unwrap_or_else(|| {
            let older = (t >= 2).then(|| (&boxes[t - 2], &seq.frames[t - 2].frame.ego_pose));
            extrapolate_cv(older, (&prev_box, &prev.ego_pose), &cur.ego_pose)
        });
        boxes.push(b);
        frames.push(frame_result(seq, t, b, fallback));
    }
    Ok(TrackResult {
        sequence: seq.id.clone(),
        class: seq.class,
        frames,
    })
}

/// Constant-velocity baseline. Its state at initialization is the ground
/// truth box of frame 0 and the displacement from frame 0 to frame 1; it
/// never looks at points or later ground truth.
pub fn cv_baseline(seq: &Sequence) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(Error::Contract(format!("sequence {} has fewer than 2 frames", seq.id)));
    }
    let f0 = &seq.frames[0];
    let f1 = &seq.frames[1];
    let init = RelativeMotion::between(&f0.gt_box, &compensate_box(&f1.gt_box, &f1.frame.ego_pose, &f0.frame.ego_pose));
    // virtual box at t = -1 so that frame 1 repeats the initial displacement
    let before = transform_box(&f0.gt_box, &init.inverse());
    let mut boxes = vec![f0.gt_box];
    let mut frames = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let p1 = seq.frames[t - 1].frame.ego_pose;
        let older = if t >= 2 {
            (boxes[t - 2], seq.frames[t - 2].frame.ego_pose)
        } else {
            (before, p1)
        };
        let b = extrapolate_cv(Some((&older.0, &older.1)), (&boxes[t - 1], &p1), &seq.frames[t].frame.ego_pose);
        boxes.push(b);
        frames.push(frame_result(seq, t, b, false));
    }
    Ok(TrackResult {
        sequence: seq.id.clone(),
        class: seq.class,
        frames,
    })
}

/// Track every sequence, possibly concurrently, over a frozen model.
pub fn track_all<M: StepModel>(model: &M, seqs: &[Sequence], history: usize, exec: Execution) -> Result<Vec<TrackResult>> {
    exec.map(seqs, |s| track_sequence(model, s, history)).into_iter().collect()
}

pub fn cv_all(seqs: &[Sequence], exec: Execution) -> Result<Vec<TrackResult>> {
    exec.map(seqs, cv_baseline).into_iter().collect()
}

fn pooled(results: &[TrackResult]) -> impl Iterator<Item = &FrameResult> + Clone {
    results.iter().flat_map(|r| &r.frames)
}

/// Area under the success curve: for each IoU threshold `τ_k = k/20`,
/// `k < 20`, the fraction of frames with IoU above it, held over the step.
pub fn ope_success(results: &[TrackResult]) -> f64 {
    let frames = pooled(results);
    let n = frames.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mut area = 0.0;
    for k in 0..IOU_STEPS {
        let tau = k as f64 / IOU_STEPS as f64;
        area += frames.clone().filter(|f| f.iou > tau).count() as f64 / n as f64;
    }
    100.0 * area / IOU_STEPS as f64
}

/// Area under the precision curve: for each distance threshold
/// `d_k = 0.1·k` m, `k ≥ 1`, the fraction of frames closer than it.
pub fn ope_precision(results: &[TrackResult]) -> f64 {
    let frames = pooled(results);
    let n = frames.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mut area = 0.0;
    for k in 1..=DIST_STEPS {
        let d = DIST_MAX * k as f64 / DIST_STEPS as f64;
        area += frames.clone().filter(|f| f.center_dist < d).count() as f64 / n as f64;
    }
    100.0 * area / DIST_STEPS as f64
}

pub fn mean_center_error(results: &[TrackResult]) -> f64 {
    let (s, n) = pooled(results).fold((0.0, 0usize), |(s, n), f| (s + f.center_dist, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub sequences: usize,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
    pub center_error: f64,
}

/// Per-class scores plus a final `mean` row over all frames.
pub fn score_by_class(results: &[TrackResult]) -> Vec<ClassScore> {
    let mut groups: BTreeMap<ScenarioClass, Vec<TrackResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.class).or_default().push(r.clone());
    }
    let score = |name: &str, rs: &[TrackResult]| ClassScore {
        class: name.to_string(),
        sequences: rs.len(),
        frames: rs.iter().map(|r| r.frames.len()).sum(),
        success: ope_success(rs),
        precision: ope_precision(rs),
        center_error: mean_center_error(rs),
    };
    let mut rows: Vec<ClassScore> = groups.iter().map(|(c, rs)| score(c.name(), rs)).collect();
    rows.push(score("mean", results));
    rows
}

pub fn format_report(title: &str, rows: &[ClassScore]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>6} {:>8} {:>9} {:>11}",
        "class", "seqs", "frames", "Success", "Precision", "center_err"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>6} {:>8.2} {:>9.2} {:>11.3}",
            r.class, r.sequences, r.frames, r.success, r.precision, r.center_error
        );
    }
    s
}

pub const RESULT_HEADER: &str = "frame,x,y,z,theta,iou,center_dist,fallback";

pub fn write_track_result(r: &TrackResult, path: &Path) -> Result<()> {
    let mut s = format!("# sequence={} class={}\n{RESULT_HEADER}\n", r.sequence, r.class.name());
    for f in &r.frames {
        let _ = writeln!(
            s,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            f.frame,
            f.pred.center[0],
            f.pred.center[1],
            f.pred.center[2],
            f.pred.yaw,
            f.iou,
            f.center_dist,
            u8::from(f.fallback)
        );
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Read a result file. Box sizes are not stored and come back as zero.
pub fn read_track_result(path: &Path) -> Result<TrackResult> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, why: &str| Error::Format(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let mut sequence = None;
    let mut class = None;
    for kv in head.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("sequence", v)) => sequence = Some(v.to_string()),
            Some(("class", v)) => class = Some(ScenarioClass::parse(v)?),
            _ => return Err(bad(1, "expected `# sequence=<id> class=<class>`")),
        }
    }
    let (sequence, class) = sequence.zip(class).ok_or_else(|| bad(1, "missing sequence or class"))?;
    match lines.next() {
        Some((_, h)) if h.trim() == RESULT_HEADER => {}
        _ => return Err(bad(2, "missing column header")),
    }
    let mut frames = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad(i + 1, "expected 8 columns"));
        }
        let num = |k: usize| cols[k].trim().parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        frames.push(FrameResult {
            frame: cols[0].trim().parse().map_err(|_| bad(i + 1, "bad frame index"))?,
            pred: Box3D {
                center: [num(1)?, num(2)?, num(3)?],
                size: [0.0; 3],
                yaw: num(4)?,
            },
            iou: num(5)?,
            center_dist: num(6)?,
            fallback: match cols[7].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad(i + 1, "fallback flag must be 0 or 1")),
            },
        });
    }
    Ok(TrackResult { sequence, class, frames })
}

