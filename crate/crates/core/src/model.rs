//! The full network: pillar encoder, history fusion, motion module and
//! flow head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{GridSpec, PillarEncoder, PillarStats, TargetMask};
use crate::error::{Error, Result};
use crate::him::Him;
use crate::ifh::{HeadMaps, HeadValues, Ifh, ThetaEncoding};
use crate::nn::{sinusoidal_2d, ParamStore, Params};
use crate::pmm::{Pmm, STAGES};
use crate::tensor::{Tape, Tensor, Var};

/// Whether the z and orientation heads regress absolute values or offsets
/// from the template box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseHeads {
    #[default]
    Absolute,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub query_count: usize,
    pub heads: usize,
    pub layers: usize,
    pub pyramid_widths: [usize; STAGES],
    pub fused_channels: usize,
    /// Cells per side of the square search grid.
    pub grid_cells: usize,
    pub cell_size: f64,
    pub z_range: (f64, f64),
    pub head_stride: usize,
    pub theta_encoding: ThetaEncoding,
    pub pose_heads: PoseHeads,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            query_count: 64,
            heads: 8,
            layers: 6,
            pyramid_widths: [64, 96, 128],
            fused_channels: 64,
            grid_cells: 128,
            cell_size: 0.4,
            z_range: (-3.0, 1.0),
            head_stride: 8,
            theta_encoding: ThetaEncoding::SinCos,
            pose_heads: PoseHeads::Absolute,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small model that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 16,
            query_count: 32,
            heads: 4,
            layers: 2,
            pyramid_widths: [16, 24, 32],
            fused_channels: 16,
            grid_cells: 40,
            ..Self::default()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 4,
            query_count: 4,
            heads: 2,
            layers: 1,
            pyramid_widths: [4, 6, 8],
            fused_channels: 4,
            grid_cells: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = 1 << STAGES;
        if self.grid_cells == 0 || !self.grid_cells.is_multiple_of(k) {
            return Err(Error::Config(format!("grid_cells ({}) must be a positive multiple of {k}", self.grid_cells)));
        }
        if self.head_stride == 0 || !self.grid_cells.is_multiple_of(self.head_stride) {
            return Err(Error::Config(format!(
                "head_stride ({}) must divide grid_cells ({})",
                self.head_stride, self.grid_cells
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.cell_size <= 0.0 || self.z_range.1 <= self.z_range.0 {
            return Err(Error::Config("cell_size must be positive and z_range nonempty".into()));
        }
        Ok(())
    }

    /// Search grid centered on a BEV point.
    pub fn grid_at(&self, center: [f64; 2]) -> GridSpec {
        GridSpec::centered(center, self.grid_cells, self.grid_cells, self.cell_size, self.z_range)
    }
}

/// Everything the network consumes for one tracking step. All inputs live
/// in the template frame's sensor coordinates on one shared grid.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub template: PillarStats,
    pub current: PillarStats,
    /// Older frames, most recent first. Empty for two-frame tracking.
    pub history: Vec<PillarStats>,
    pub mask: TargetMask,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub maps: HeadMaps,
    /// `[2]` planar instance motion.
    pub motion: Var,
}

#[derive(Clone, Debug)]
pub struct FlowTrackNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: PillarEncoder,
    him: Him,
    pmm: Pmm,
    ifh: Ifh,
    pos: Tensor,
}

impl FlowTrackNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let encoder = PillarEncoder::new(&mut store, c, &mut rng);
        let him = Him::new(&mut store, c, config.query_count, config.heads, config.layers, &mut rng)?;
        let pmm = Pmm::new(&mut store, c, config.pyramid_widths, config.fused_channels, &mut rng);
        let ifh = Ifh::new(&mut store, config.fused_channels, config.head_stride, config.theta_encoding, &mut rng);
        let pos = sinusoidal_2d(config.grid_cells, config.grid_cells, c);
        Ok(FlowTrackNet {
            config,
            store,
            encoder,
            him,
            pmm,
            ifh,
            pos,
        })
    }

    pub fn encoder(&self) -> &PillarEncoder {
        &self.encoder
    }

    pub fn him(&self) -> &Him {
        &self.him
    }

    pub fn pmm(&self) -> &Pmm {
        &self.pmm
    }

    pub fn ifh(&self) -> &Ifh {
        &self.ifh
    }

    pub fn positional(&self, tape: &mut Tape) -> Var {
        tape.constant(self.pos.clone())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Params, inputs: &ModelInputs) -> Result<ModelOutput> {
        let n = self.config.grid_cells;
        let spec = inputs.template.spec;
        if spec.h != n || spec.w != n || !spec.same_layout(&inputs.current.spec) {
            return Err(Error::Config(format!(
                "inputs must share the model's {n}x{n} grid (template {}x{}, current {}x{})",
                spec.h, spec.w, inputs.current.spec.h, inputs.current.spec.w
            )));
        }
        let pos = self.positional(tape);
        let template = self.encoder.encode(tape, p, &inputs.template)?;
        let current = self.encoder.encode(tape, p, &inputs.current)?;
        let history = inputs
            .history
            .iter()
            .map(|h| self.encoder.encode(tape, p, h))
            .collect::<Result<Vec<_>>>()?;

        let masked = self.him.mask_enhance(tape, p, &template, &inputs.mask)?;
        let query = self.him.update_query(tape, p, masked, pos)?;
        let query = self.him.aggregate_history(tape, p, query, &history, &template, pos)?;
        let enhanced = self.him.enhance_template(tape, p, &template, query, pos)?;

        let mask = tape.constant(inputs.mask.mask.clone());
        let t_feat = enhanced.features(tape)?;
        let c_feat = current.features(tape)?;
        let f = Pmm::build_flow_feature(tape, mask, t_feat, c_feat)?;
        let fused = self.pmm.forward(tape, p, f)?;
        let maps = self.ifh.predict_maps(tape, p, fused)?;
        let motion = maps.motion(tape)?;
        Ok(ModelOutput { maps, motion })
    }

    /// Forward pass on a throwaway tape, returning detached head maps.
    pub fn infer(&self, inputs: &ModelInputs) -> Result<HeadValues> {
        let mut tape = Tape::new();
        let p = Params::bind(&mut tape, &self.store);
        let out = self.forward(&mut tape, &p, inputs)?;
        Ok(out.maps.values(&tape, self.config.theta_encoding))
    }
}
