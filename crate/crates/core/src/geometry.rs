//! Rigid-motion algebra in the bird's-eye-view plane, ego-motion
//! compensation, per-cell flow ground truth, and rotated-box overlap.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// 2×2 rotation matrix, row-major.
pub fn yaw_rotation(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn rotate(theta: f64, p: [f64; 2]) -> [f64; 2] {
    let r = yaw_rotation(theta);
    [r[0][0] * p[0] + r[0][1] * p[1], r[1][0] * p[0] + r[1][1] * p[1]]
}

/// 7-DoF target box. `size` is `(w, l, h)`; the length axis points along
/// the yaw direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        debug_assert!(size.iter().all(|s| *s > 0.0), "box size must be positive");
        Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn center_xy(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }

    /// BEV corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|p| {
            let r = rotate(self.yaw, p);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }

    /// Strict interior test of a BEV point against the rotated rectangle.
    pub fn contains_bev(&self, p: [f64; 2]) -> bool {
        let local = rotate(-self.yaw, [p[0] - self.center[0], p[1] - self.center[1]]);
        local[0].abs() < self.length() / 2.0 && local[1].abs() < self.width() / 2.0
    }

    /// Interior test with the rectangle grown by `margin` on every side.
    pub fn contains_bev_with_margin(&self, p: [f64; 2], margin: f64) -> bool {
        let local = rotate(-self.yaw, [p[0] - self.center[0], p[1] - self.center[1]]);
        local[0].abs() < self.length() / 2.0 + margin && local[1].abs() < self.width() / 2.0 + margin
    }

    pub fn bev_area(&self) -> f64 {
        self.width() * self.length()
    }

    pub fn volume(&self) -> f64 {
        self.bev_area() * self.height()
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (0..3)
            .map(|i| (self.center[i] - other.center[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Instance-level rigid motion between two frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeMotion {
    pub translation: [f64; 3],
    pub rotation: f64,
}

impl RelativeMotion {
    pub fn new(translation: [f64; 3], rotation: f64) -> Self {
        RelativeMotion {
            translation,
            rotation: wrap_angle(rotation),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Motion taking `from` onto `to` (both in the same coordinate frame).
    pub fn between(from: &Box3D, to: &Box3D) -> Self {
        Self::new(
            [
                to.center[0] - from.center[0],
                to.center[1] - from.center[1],
                to.center[2] - from.center[2],
            ],
            to.yaw - from.yaw,
        )
    }

    pub fn inverse(&self) -> Self {
        let t = self.translation;
        Self::new([-t[0], -t[1], -t[2]], -self.rotation)
    }
}

/// Apply an instance motion to a box. Size never changes.
pub fn transform_box(b: &Box3D, m: &RelativeMotion) -> Box3D {
    Box3D {
        center: [
            b.center[0] + m.translation[0],
            b.center[1] + m.translation[1],
            b.center[2] + m.translation[2],
        ],
        size: b.size,
        yaw: wrap_angle(b.yaw + m.rotation),
    }
}

/// Planar sensor pose in the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Map a point from this pose's local frame into the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let r = rotate(self.yaw, p);
        [r[0] + self.x, r[1] + self.y]
    }

    pub fn inverse(&self) -> Pose2 {
        let t = rotate(-self.yaw, [-self.x, -self.y]);
        Pose2::new(t[0], t[1], -self.yaw)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.apply([other.x, other.y]);
        Pose2::new(t[0], t[1], self.yaw + other.yaw)
    }

    /// Transform taking coordinates in `from`'s sensor frame to `to`'s.
    pub fn relative(to: &Pose2, from: &Pose2) -> Pose2 {
        let t = rotate(-to.yaw, [from.x - to.x, from.y - to.y]);
        Pose2::new(t[0], t[1], from.yaw - to.yaw)
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let c = self.apply(b.center_xy());
        Box3D {
            center: [c[0], c[1], b.center[2]],
            size: b.size,
            yaw: wrap_angle(b.yaw + self.yaw),
        }
    }
}

/// One timestamped sensor sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFrame {
    pub points: Vec<[f64; 3]>,
    pub ego_pose: Pose2,
    pub timestamp: u64,
}

/// Re-express `frame` in the sensor frame of `pose_prev`.
pub fn ego_compensate(frame: &PointFrame, pose_prev: &Pose2) -> PointFrame {
    let rel = Pose2::relative(pose_prev, &frame.ego_pose);
    PointFrame {
        points: frame
            .points
            .iter()
            .map(|p| {
                let q = rel.apply([p[0], p[1]]);
                [q[0], q[1], p[2]]
            })
            .collect(),
        ego_pose: *pose_prev,
        timestamp: frame.timestamp,
    }
}

/// Re-express a box given in the sensor frame at `pose_from` in the sensor
/// frame at `pose_to`.
pub fn compensate_box(b: &Box3D, pose_from: &Pose2, pose_to: &Pose2) -> Box3D {
    Pose2::relative(pose_to, pose_from).apply_box(b)
}

/// Regular grid of BEV cell-center coordinates. Row `i` runs along y,
/// column `j` along x.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMap {
    pub origin: [f64; 2],
    pub cell: f64,
    pub h: usize,
    pub w: usize,
}

impl CoordMap {
    pub fn regular(origin: [f64; 2], cell: f64, h: usize, w: usize) -> Self {
        CoordMap { origin, cell, h, w }
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (j as f64 + 0.5) * self.cell,
            self.origin[1] + (i as f64 + 0.5) * self.cell,
        ]
    }

    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (
            self.origin,
            [
                self.origin[0] + self.w as f64 * self.cell,
                self.origin[1] + self.h as f64 * self.cell,
            ],
        )
    }

    /// Mask of cells whose centers lie strictly inside the box.
    pub fn footprint(&self, b: &Box3D) -> Vec<bool> {
        let mut out = vec![false; self.h * self.w];
        for i in 0..self.h {
            for j in 0..self.w {
                out[i * self.w + j] = b.contains_bev(self.at(i, j));
            }
        }
        out
    }

    pub fn covers_box(&self, b: &Box3D) -> bool {
        let (lo, hi) = self.extent();
        b.corners_bev()
            .iter()
            .all(|c| c[0] >= lo[0] && c[0] <= hi[0] && c[1] >= lo[1] && c[1] <= hi[1])
    }
}

/// Per-cell planar displacement with its supervision mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub h: usize,
    pub w: usize,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Pivot for the rotational part of the ground-truth flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationCenter {
    /// Rotate about the previous box's BEV center.
    #[default]
    BoxCenter,
    /// Rotate about the coordinate origin.
    Origin,
}

/// Displacement of a single BEV point that moves rigidly with the target.
pub fn rigid_flow_at(p: [f64; 2], box_prev: &Box3D, motion: &RelativeMotion, pivot: RotationCenter) -> [f64; 2] {
    let c = match pivot {
        RotationCenter::BoxCenter => box_prev.center_xy(),
        RotationCenter::Origin => [0.0, 0.0],
    };
    let r = rotate(motion.rotation, [p[0] - c[0], p[1] - c[1]]);
    [
        r[0] + c[0] + motion.translation[0] - p[0],
        r[1] + c[1] + motion.translation[1] - p[1],
    ]
}

/// Ground-truth point-level flow on the previous box's footprint.
pub fn flow_ground_truth(
    coords: &CoordMap,
    box_prev: &Box3D,
    motion: &RelativeMotion,
    pivot: RotationCenter,
) -> FlowMap {
    if !coords.covers_box(box_prev) {
        log::warn!("target footprint extends outside the grid; outside cells are not supervised");
    }
    let valid = coords.footprint(box_prev);
    let mut flow = vec![[0.0; 2]; coords.h * coords.w];
    for i in 0..coords.h {
        for j in 0..coords.w {
            let k = i * coords.w + j;
            if valid[k] {
                flow[k] = rigid_flow_at(coords.at(i, j), box_prev, motion, pivot);
            }
        }
    }
    FlowMap {
        h: coords.h,
        w: coords.w,
        flow,
        valid,
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    s.abs() / 2.0
}

/// Sutherland–Hodgman clip of `subject` against a convex counter-clockwise `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(intersect(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(intersect(prev, cur, a, b));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Overlap area of the two BEV rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.corners_bev(), &b.corners_bev()))
}

/// Intersection over union of the BEV rectangles.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: BEV overlap times the overlap of the height intervals.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (az0, az1) = (a.center[2] - a.height() / 2.0, a.center[2] + a.height() / 2.0);
    let (bz0, bz1) = (b.center[2] - b.height() / 2.0, b.center[2] + b.height() / 2.0);
    let dz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_box(center: [f64; 3], yaw: f64) -> Box3D {
        Box3D::new(center, [2.0, 2.0, 1.0], yaw)
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(yaw_rotation(0.0), [[1.0, -0.0], [0.0, 1.0]]);
        let q = yaw_rotation(FRAC_PI_2);
        assert!((q[0][0]).abs() < 1e-15 && (q[0][1] + 1.0).abs() < 1e-15);
        assert!((q[1][0] - 1.0).abs() < 1e-15 && (q[1][1]).abs() < 1e-15);
        let p = rotate(-0.3, rotate(0.3, [1.7, -0.4]));
        assert!((p[0] - 1.7).abs() < 1e-12 && (p[1] + 0.4).abs() < 1e-12);
        let r = yaw_rotation(0.81);
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        assert!((det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.5) - (3.5 - 2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn transform_box_examples() {
        let b = unit_box([0.0, 0.0, 0.0], 0.0);
        assert_eq!(transform_box(&b, &RelativeMotion::zero()), b);
        let moved = transform_box(&b, &RelativeMotion::new([1.0, 2.0, 0.0], 0.0));
        assert_eq!(moved.center, [1.0, 2.0, 0.0]);
        let spun = transform_box(&unit_box([0.0; 3], 3.0), &RelativeMotion::new([0.0; 3], 0.5));
        assert!((spun.yaw - (3.5 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(spun.size, b.size);
    }

    #[test]
    fn ego_compensation_examples() {
        let frame = PointFrame {
            points: vec![[3.0, -1.0, 0.5]],
            ego_pose: Pose2::new(4.0, 2.0, 0.2),
            timestamp: 1,
        };
        assert_eq!(ego_compensate(&frame, &frame.ego_pose).points[0], [3.0, -1.0, 0.5]);

        // sensor moved +1 in x: a static world point at x=5 was at 5 before and 4 now
        let now = PointFrame {
            points: vec![[4.0, 0.0, 0.0]],
            ego_pose: Pose2::new(1.0, 0.0, 0.0),
            timestamp: 1,
        };
        let comp = ego_compensate(&now, &Pose2::identity());
        assert!((comp.points[0][0] - 5.0).abs() < 1e-12);

        // sensor yawed by π/2: a point straight ahead is on the previous frame's +y axis
        let turned = PointFrame {
            points: vec![[1.0, 0.0, 0.0]],
            ego_pose: Pose2::new(0.0, 0.0, FRAC_PI_2),
            timestamp: 1,
        };
        let comp = ego_compensate(&turned, &Pose2::identity());
        assert!(comp.points[0][0].abs() < 1e-12 && (comp.points[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flow_examples() {
        let coords = CoordMap::regular([-4.0, -4.0], 1.0, 8, 8);
        let b = Box3D::new([0.0, 0.0, 0.0], [3.0, 3.0, 1.0], 0.0);
        let zero = flow_ground_truth(&coords, &b, &RelativeMotion::zero(), RotationCenter::BoxCenter);
        assert!(zero.valid_count() > 0);
        assert!(zero.flow.iter().all(|f| *f == [0.0, 0.0]));

        let tr = RelativeMotion::new([2.0, -1.0, 0.0], 0.0);
        let f = flow_ground_truth(&coords, &b, &tr, RotationCenter::BoxCenter);
        for k in 0..64 {
            if f.valid[k] {
                assert_eq!(f.flow[k], [2.0, -1.0]);
            }
        }

        let quarter = RelativeMotion::new([0.0; 3], FRAC_PI_2);
        let d = rigid_flow_at([1.0, 0.0], &Box3D::new([0.0; 3], [4.0, 4.0, 1.0], 0.0), &quarter, RotationCenter::BoxCenter);
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let a = unit_box([0.0, 0.0, 0.0], 0.0);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&a, &unit_box([100.0, 0.0, 0.0], 0.3)), 0.0);
        let b = unit_box([1.0, 0.0, 0.0], 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let c = unit_box([0.0, 0.0, 0.5], 0.0);
        assert!((iou_3d(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    }
}
