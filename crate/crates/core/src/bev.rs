//! Bird's-eye-view rasterization: pillar statistics, the pointwise feature
//! encoder, and the template box mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CoordMap, PointFrame};
use crate::nn::{Linear, ParamStore, Params};
use crate::tensor::{Tape, Tensor, Var};

/// Number of statistics kept per occupied pillar.
pub const PILLAR_FEATURES: usize = 6;

/// Calibration between metric coordinates and grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell_size: f64,
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64), cell_size: f64) -> Result<Self> {
        let (dx, dy, dz) = (x_range.1 - x_range.0, y_range.1 - y_range.0, z_range.1 - z_range.0);
        if !(dx > 0.0 && dy > 0.0 && dz > 0.0 && cell_size > 0.0) {
            return Err(Error::Config(format!(
                "grid ranges must be nonempty and cell size positive (x {x_range:?}, y {y_range:?}, z {z_range:?}, cell {cell_size})"
            )));
        }
        Ok(GridSpec {
            x_range,
            y_range,
            z_range,
            cell_size,
            h: (dy / cell_size).round() as usize,
            w: (dx / cell_size).round() as usize,
        })
    }

    /// An `h × w` grid of `cell_size` cells centered on `center`.
    pub fn centered(center: [f64; 2], h: usize, w: usize, cell_size: f64, z_range: (f64, f64)) -> Self {
        let (hx, hy) = (w as f64 * cell_size / 2.0, h as f64 * cell_size / 2.0);
        GridSpec {
            x_range: (center[0] - hx, center[0] + hx),
            y_range: (center[1] - hy, center[1] + hy),
            z_range,
            cell_size,
            h,
            w,
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Coarser grid covering the same area with `k×k` cells merged.
    pub fn downsampled(&self, k: usize) -> Result<Self> {
        if k == 0 || !self.h.is_multiple_of(k) || !self.w.is_multiple_of(k) {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by stride {k}",
                self.h, self.w
            )));
        }
        Ok(GridSpec {
            cell_size: self.cell_size * k as f64,
            h: self.h / k,
            w: self.w / k,
            ..*self
        })
    }

    pub fn coord_map(&self) -> CoordMap {
        CoordMap::regular([self.x_range.0, self.y_range.0], self.cell_size, self.h, self.w)
    }

    /// Cell containing `p` under half-open `[lo, hi)` intervals.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<usize> {
        if p[2] < self.z_range.0 || p[2] >= self.z_range.1 {
            return None;
        }
        let col = ((p[0] - self.x_range.0) / self.cell_size).floor();
        let row = ((p[1] - self.y_range.0) / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.w as f64 || row >= self.h as f64 {
            return None;
        }
        Some(row as usize * self.w + col as usize)
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let (row, col) = (idx / self.w, idx % self.w);
        [
            self.x_range.0 + (col as f64 + 0.5) * self.cell_size,
            self.y_range.0 + (row as f64 + 0.5) * self.cell_size,
            (self.z_range.0 + self.z_range.1) / 2.0,
        ]
    }

    pub fn same_layout(&self, other: &GridSpec) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// Per-cell point statistics: count, mean offset from the cell center
/// `(dx, dy, dz)`, max z and min z. Empty cells hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarStats {
    pub spec: GridSpec,
    pub cells: Vec<[f64; PILLAR_FEATURES]>,
    pub timestamp: u64,
}

impl PillarStats {
    pub fn count(&self, idx: usize) -> usize {
        self.cells[idx][0] as usize
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c[0] > 0.0).count()
    }

    /// Encoder input rows `[H·W, 6]`; the count channel is log-compressed.
    pub fn encoder_input(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.cells.len() * PILLAR_FEATURES);
        for c in &self.cells {
            if c[0] > 0.0 {
                data.push(c[0].ln_1p());
                data.extend_from_slice(&c[1..]);
            } else {
                data.extend_from_slice(&[0.0; PILLAR_FEATURES]);
            }
        }
        Tensor::new(&[self.cells.len(), PILLAR_FEATURES], data).expect("row layout")
    }
}

/// Gather per-pillar statistics. Points outside the grid are dropped.
pub fn pillarize(frame: &PointFrame, spec: &GridSpec) -> PillarStats {
    let mut keyed: Vec<(usize, [f64; 3])> = frame
        .points
        .iter()
        .filter_map(|p| spec.cell_of(*p).map(|c| (c, *p)))
        .collect();
    // fixed accumulation order makes the statistics independent of input order
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
            .then(a.1[2].total_cmp(&b.1[2]))
    });
    let mut cells = vec![[0.0; PILLAR_FEATURES]; spec.cells()];
    let mut sums = vec![[0.0; 3]; spec.cells()];
    for (idx, p) in keyed {
        let center = spec.cell_center(idx);
        let c = &mut cells[idx];
        if c[0] == 0.0 {
            c[4] = p[2];
            c[5] = p[2];
        }
        c[0] += 1.0;
        c[4] = c[4].max(p[2]);
        c[5] = c[5].min(p[2]);
        for k in 0..3 {
            sums[idx][k] += p[k] - center[k];
        }
    }
    for (c, s) in cells.iter_mut().zip(&sums) {
        if c[0] > 0.0 {
            for k in 0..3 {
                c[1 + k] = s[k] / c[0];
            }
        }
    }
    PillarStats {
        spec: *spec,
        cells,
        timestamp: frame.timestamp,
    }
}

/// BEV feature map on the tape, kept as `[H·W, C]` token rows.
#[derive(Clone, Copy, Debug)]
pub struct BevGrid {
    pub rows: Var,
    pub spec: GridSpec,
    pub channels: usize,
    pub timestamp: u64,
}

impl BevGrid {
    /// Channel-first view `[C, H, W]`.
    pub fn features(&self, tape: &mut Tape) -> Result<Var> {
        let t = tape.transpose(self.rows)?;
        tape.reshape(t, &[self.channels, self.spec.h, self.spec.w])
    }
}

/// Shared pointwise 2-layer perceptron `6 → C → C` applied to every cell.
#[derive(Clone, Debug)]
pub struct PillarEncoder {
    pub hidden: Linear,
    pub out: Linear,
    pub channels: usize,
}

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl rand::Rng) -> Self {
        PillarEncoder {
            hidden: Linear::new(store, "encoder.hidden", PILLAR_FEATURES, channels, rng),
            out: Linear::new(store, "encoder.out", channels, channels, rng),
            channels,
        }
    }

    pub fn encode(&self, tape: &mut Tape, p: &Params, stats: &PillarStats) -> Result<BevGrid> {
        let x = tape.constant(stats.encoder_input());
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        let rows = self.out.forward(tape, p, h)?;
        Ok(BevGrid {
            rows,
            spec: stats.spec,
            channels: self.channels,
            timestamp: stats.timestamp,
        })
    }
}

/// Binary `[1, H, W]` mask of cells whose centers lie inside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    pub mask: Tensor,
}

impl TargetMask {
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|v| **v > 0.0).count()
    }

    /// The mask repeated over `channels` leading channels.
    pub fn repeated(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.mask.numel() * channels);
        for _ in 0..channels {
            data.extend_from_slice(self.mask.data());
        }
        let s = self.mask.shape();
        Tensor::new(&[channels, s[1], s[2]], data).expect("mask layout")
    }
}

pub fn rasterize_mask(b: &Box3D, spec: &GridSpec) -> TargetMask {
    let fp = spec.coord_map().footprint(b);
    let mask = Tensor::new(
        &[1, spec.h, spec.w],
        fp.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask layout");
    let m = TargetMask { mask };
    if m.count() == 0 {
        let inside = |p: [f64; 2]| {
            (spec.x_range.0..=spec.x_range.1).contains(&p[0]) && (spec.y_range.0..=spec.y_range.1).contains(&p[1])
        };
        if b.corners_bev().into_iter().any(inside) || inside(b.center_xy()) {
            // small boxes on coarse grids can fall between cell centers
            log::debug!("target box covers no grid cell center");
        } else {
            log::warn!("target box lies outside the grid");
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;

    fn frame(points: Vec<[f64; 3]>) -> PointFrame {
        PointFrame {
            points,
            ego_pose: Pose2::identity(),
            timestamp: 0,
        }
    }

    fn spec() -> GridSpec {
        GridSpec::new((0.0, 4.0), (0.0, 4.0), (-2.0, 2.0), 1.0).unwrap()
    }

    #[test]
    fn grid_dims_follow_ranges() {
        let s = GridSpec::new((-25.6, 25.6), (-25.6, 25.6), (-3.0, 1.0), 0.4).unwrap();
        assert_eq!((s.h, s.w), (128, 128));
        assert_eq!(s.downsampled(8).unwrap().h, 16);
        assert!(GridSpec::new((0.0, 0.0), (0.0, 1.0), (0.0, 1.0), 0.1).is_err());
    }

    #[test]
    fn centered_point_has_zero_offset() {
        let st = pillarize(&frame(vec![[1.5, 2.5, 0.3]]), &spec());
        let c = st.cells[2 * 4 + 1];
        assert_eq!(c[0], 1.0);
        assert_eq!((c[1], c[2]), (0.0, 0.0));
        assert_eq!((c[4], c[5]), (0.3, 0.3));
        assert_eq!(st.occupied(), 1);
    }

    #[test]
    fn symmetric_points_cancel() {
        let st = pillarize(&frame(vec![[1.2, 0.3, 0.0], [1.8, 0.7, 1.0]]), &spec());
        let c = st.cells[1];
        assert_eq!(c[0], 2.0);
        assert!(c[1].abs() < 1e-15 && c[2].abs() < 1e-15);
        assert_eq!((c[4], c[5]), (1.0, 0.0));
    }

    #[test]
    fn boundary_point_goes_to_upper_cell() {
        let s = spec();
        assert_eq!(s.cell_of([1.0, 0.5, 0.0]), Some(1));
        assert_eq!(s.cell_of([0.0, 0.0, 0.0]), Some(0));
        assert_eq!(s.cell_of([4.0, 0.5, 0.0]), None);
        assert_eq!(s.cell_of([0.5, 0.5, 2.0]), None);
    }

    #[test]
    fn empty_frame_is_all_empty() {
        let st = pillarize(&frame(vec![]), &spec());
        assert_eq!(st.occupied(), 0);
    }

    #[test]
    fn mask_examples() {
        let s = GridSpec::new((-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0), 0.5).unwrap();
        let b = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
        assert_eq!(rasterize_mask(&b, &s).count(), 16);
        let far = Box3D::new([50.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
        assert_eq!(rasterize_mask(&far, &s).count(), 0);
        let car = Box3D::new([0.1, -0.2, 0.0], [1.3, 3.1, 1.0], 0.4);
        let flipped = Box3D::new(car.center, car.size, car.yaw + std::f64::consts::PI);
        assert_eq!(rasterize_mask(&car, &s), rasterize_mask(&flipped, &s));
    }
}
