//! Glue between raw sweeps and the network: building one step's inputs in
//! the previous frame's coordinates and turning head outputs into a box.

use crate::bev::{pillarize, rasterize_mask, GridSpec, TargetMask};
use crate::error::Result;
use crate::geometry::{ego_compensate, wrap_angle, Box3D, PointFrame, Pose2};
use crate::ifh::{compose_box, flow_to_motion, reduce_z_theta, HeadValues};
use crate::model::{ModelConfig, ModelInputs, PoseHeads};

/// Inputs for one step plus the grids they were built on.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub inputs: ModelInputs,
    pub grid: GridSpec,
    pub head_grid: GridSpec,
    /// Template box footprint on the head grid.
    pub head_mask: TargetMask,
}

/// Build the network inputs for predicting the target in `current` given
/// its box `prev_box` in `prev`'s sensor frame. `history` is ordered most
/// recent first. Every sweep is re-expressed in `prev`'s frame and
/// rasterized on a grid centered at the previous box.
pub fn build_step(
    cfg: &ModelConfig,
    prev_box: &Box3D,
    prev: &PointFrame,
    current: &PointFrame,
    history: &[&PointFrame],
) -> Result<StepInputs> {
    let grid = cfg.grid_at(prev_box.center_xy());
    let head_grid = grid.downsampled(cfg.head_stride)?;
    let pose = prev.ego_pose;
    let template = pillarize(prev, &grid);
    let current = pillarize(&ego_compensate(current, &pose), &grid);
    let history = history
        .iter()
        .map(|f| pillarize(&ego_compensate(f, &pose), &grid))
        .collect();
    Ok(StepInputs {
        inputs: ModelInputs {
            template,
            current,
            history,
            mask: rasterize_mask(prev_box, &grid),
        },
        grid,
        head_grid,
        head_mask: rasterize_mask(prev_box, &head_grid),
    })
}

/// Reduce head outputs to the new box, expressed in the current frame.
pub fn decode_box(
    heads: PoseHeads,
    values: &HeadValues,
    head_mask: &TargetMask,
    prev_box: &Box3D,
    prev_pose: &Pose2,
    current_pose: &Pose2,
) -> Box3D {
    let delta = flow_to_motion(values);
    let (z, theta) = reduce_z_theta(values, head_mask);
    let (z, theta) = match heads {
        PoseHeads::Absolute => (z, theta),
        PoseHeads::Residual => (prev_box.center[2] + z, wrap_angle(prev_box.yaw + theta)),
    };
    compose_box(prev_box, delta, z, theta, &Pose2::relative(current_pose, prev_pose))
}
