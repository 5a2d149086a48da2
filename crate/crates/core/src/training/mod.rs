//! Supervised training on synthetic sequences.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compensate_box, flow_ground_truth, wrap_angle, Box3D, RelativeMotion, RotationCenter};
use crate::model::{FlowTrackNet, ModelConfig, ModelInputs, PoseHeads};
use crate::nn::Params;
use crate::par::Execution;
use crate::pipeline::build_step;
use crate::synth::{derive_seed, Sequence};
use crate::tensor::{Tape, Tensor};

pub use loss::{compute_loss, LossValues, LossWeights, Targets};
pub use optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Largest frame count N drawn per sample. A sample with count N sees
    /// the template frame plus N - 1 older frames.
    pub history: usize,
    /// Half-widths of the uniform template box perturbation: planar
    /// offset per axis (m) and yaw (rad).
    pub jitter_xy: f64,
    pub jitter_yaw: f64,
    pub loss: LossWeights,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            lr_floor: 0.05,
            weight_decay: 0.01,
            history: 3,
            jitter_xy: 0.2,
            jitter_yaw: 0.05,
            loss: LossWeights::default(),
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("batch_size must be positive, lr and weight_decay nonnegative".into()));
        }
        if self.history == 0 {
            return Err(Error::Config("history must be at least 1".into()));
        }
        if self.jitter_xy < 0.0 || self.jitter_yaw < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("jitter and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = if self.steps <= 1 { 0.0 } else { step as f64 / (self.steps - 1) as f64 };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

/// Index of one training pair: predict frame `t` of sequence `seq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub seq: usize,
    pub t: usize,
}

pub fn sample_refs(seqs: &[Sequence]) -> Vec<SampleRef> {
    seqs.iter()
        .enumerate()
        .flat_map(|(seq, s)| (1..s.len()).map(move |t| SampleRef { seq, t }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub inputs: ModelInputs,
    pub targets: Targets,
}

/// Build one supervised sample. The template box is the ground truth at
/// `t - 1` perturbed with `rng`; the targets describe the move from that
/// perturbed box onto the ground truth at `t`, all in frame `t - 1`.
/// `history` counts frames up to and including the template, so 1 means
/// no older frames.
pub fn build_sample(
    cfg: &TrainConfig,
    seq: &Sequence,
    t: usize,
    history: usize,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    if t == 0 || t >= seq.len() {
        return Err(Error::Contract(format!("frame {t} has no predecessor in a {}-frame sequence", seq.len())));
    }
    let (prev, cur) = (&seq.frames[t - 1], &seq.frames[t]);
    let g = prev.gt_box;
    let jitter = |rng: &mut dyn rand::RngCore, s: f64| if s > 0.0 { rng.random_range(-s..s) } else { 0.0 };
    let template = Box3D {
        center: [g.center[0] + jitter(rng, cfg.jitter_xy), g.center[1] + jitter(rng, cfg.jitter_xy), g.center[2]],
        size: g.size,
        yaw: wrap_angle(g.yaw + jitter(rng, cfg.jitter_yaw)),
    };
    let n = history.saturating_sub(1).min(t - 1);
    let hist: Vec<_> = (0..n).map(|k| &seq.frames[t - 2 - k].frame).collect();
    let step = build_step(&cfg.model, &template, &prev.frame, &cur.frame, &hist)?;

    let target_box = compensate_box(&cur.gt_box, &cur.frame.ego_pose, &prev.frame.ego_pose);
    let motion = RelativeMotion::between(&template, &target_box);
    let fm = flow_ground_truth(&step.head_grid.coord_map(), &template, &motion, RotationCenter::BoxCenter);
    let cells = fm.h * fm.w;
    let flow = Tensor::from_fn(&[2, fm.h, fm.w], |k| fm.flow[k % cells][k / cells]);
    let (z, theta) = match cfg.model.pose_heads {
        PoseHeads::Absolute => (target_box.center[2], target_box.yaw),
        PoseHeads::Residual => (target_box.center[2] - template.center[2], motion.rotation),
    };
    Ok(TrainSample {
        id: format!("{}#{t}", seq.id),
        inputs: step.inputs,
        targets: Targets {
            flow,
            footprint: step.head_mask,
            motion: [motion.translation[0], motion.translation[1]],
            z,
            theta,
        },
    })
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(net: &FlowTrackNet, cfg: &TrainConfig, sample: &TrainSample) -> Result<(LossValues, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = Params::bind(&mut tape, &net.store);
    let out = net.forward(&mut tape, &p, &sample.inputs)?;
    let loss = compute_loss(&mut tape, &out, &sample.targets, &cfg.loss, net.config.theta_encoding)?;
    let values = loss.values(&tape);
    if !values.total.is_finite() {
        return Err(Error::NonFinite {
            sample: sample.id.clone(),
            detail: format!("{values:?}"),
        });
    }
    tape.backward(loss.total)?;
    Ok((values, p.grads(&mut tape)))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossValues,
}

pub const LOG_HEADER: &str = "step,flow,motion,z,theta,total,lr,grad_norm";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6e},{:.6e}",
            self.step, l.flow, l.motion, l.z, l.theta, l.total, self.lr, self.grad_norm
        )
    }
}

/// Deterministic batch trainer. Per-sample gradients may be computed in
/// parallel; they are always reduced in batch order.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub net: FlowTrackNet,
    opt: Adam,
    seqs: &'a [Sequence],
    refs: Vec<SampleRef>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: usize,
    exec: Execution,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, seqs: &'a [Sequence], exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let refs = sample_refs(seqs);
        if refs.is_empty() {
            return Err(Error::Config("training data has no frame pairs".into()));
        }
        let net = FlowTrackNet::new(cfg.model.clone())?;
        let opt = Adam::new(net.store.tensors(), cfg.weight_decay);
        let mut t = Trainer {
            order: Vec::new(),
            cfg,
            net,
            opt,
            seqs,
            refs,
            cursor: 0,
            epoch: 0,
            step: 0,
            exec,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1_000_000 + self.epoch));
        self.order = (0..self.refs.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self) -> Vec<(SampleRef, u64)> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for i in 0..self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            let r = self.refs[self.order[self.cursor]];
            self.cursor += 1;
            out.push((r, derive_seed(self.cfg.seed, (self.step * self.cfg.batch_size + i) as u64)));
        }
        out
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Run one optimizer step and return its log row.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch();
        let (net, cfg, seqs) = (&self.net, &self.cfg, self.seqs);
        let results = self.exec.map(&batch, |(r, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let n = rng.random_range(1..=cfg.history);
            let sample = build_sample(cfg, &seqs[r.seq], r.t, n, &mut rng)?;
            sample_gradients(net, cfg, &sample)
        });

        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossValues::default();
        let mut grads: Vec<Tensor> = net.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for res in results {
            let (l, g) = res?;
            mean.flow += l.flow * scale;
            mean.motion += l.motion * scale;
            mean.z += l.z * scale;
            mean.theta += l.theta * scale;
            mean.total += l.total * scale;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b * scale;
                }
            }
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                sample: format!("batch at step {}", self.step),
                detail: "gradient norm is not finite".into(),
            });
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let k = self.cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
        let lr = self.cfg.lr_at(self.step);
        self.opt.step(self.net.store.tensors_mut(), &grads, lr)?;
        let row = LogRow {
            step: self.step,
            lr,
            grad_norm: norm,
            loss: mean,
        };
        self.step += 1;
        Ok(row)
    }

    /// Train for `cfg.steps` steps, writing one CSV row per step to `log`.
    pub fn run(mut self, mut log: Option<&mut dyn Write>) -> Result<(FlowTrackNet, Vec<LogRow>)> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        let mut rows = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let row = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            if row.step % 50 == 0 || row.step + 1 == self.cfg.steps {
                log::info!("step {} loss {:.4} (motion {:.4})", row.step, row.loss.total, row.loss.motion);
            }
            rows.push(row);
        }
        Ok((self.net, rows))
    }
}

/// Convenience wrapper: build a trainer and run it to completion.
pub fn train(
    cfg: &TrainConfig,
    seqs: &[Sequence],
    exec: Execution,
    log: Option<&mut dyn Write>,
) -> Result<(FlowTrackNet, Vec<LogRow>)> {
    Trainer::new(cfg.clone(), seqs, exec)?.run(log)
}
