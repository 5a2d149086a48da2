//! Historical information fusion through a learnable target query.
//!
//! The query is first filled from the mask-enhanced template, then gathers
//! target evidence from older frames, and finally writes that evidence back
//! into the template features.

use rand::Rng;

use crate::bev::{BevGrid, TargetMask};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, AttentionBlock, Conv2d, FeedForward, Linear, ParamId, ParamStore, Params};
use crate::tensor::{Tape, Var};

/// Learnable target feature `X ∈ R^{N_q × C}`.
#[derive(Clone, Debug)]
pub struct TargetQuery {
    pub rows: ParamId,
    pub count: usize,
}

#[derive(Clone, Debug)]
struct QueryLayer {
    self_attn: AttentionBlock,
    cross_attn: AttentionBlock,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Him {
    pub query: TargetQuery,
    query_in: Linear,
    mask_conv: Conv2d,
    update: Vec<QueryLayer>,
    history: Vec<AttentionBlock>,
    enhance: Vec<AttentionBlock>,
    channels: usize,
}

impl Him {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        query_count: usize,
        heads: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if query_count == 0 || layers == 0 {
            return Err(Error::Config("target query needs at least one row and one layer".into()));
        }
        let rows = store.add("him.query", kaiming_uniform(&[query_count, channels], channels, rng));
        let query_in = Linear::new(store, "him.query_in", channels, channels, rng);
        let mask_conv = Conv2d::new(store, "him.mask_conv", channels + 1, channels, 1, 1, rng);
        let mut update = Vec::with_capacity(layers);
        let mut history = Vec::with_capacity(layers);
        let mut enhance = Vec::with_capacity(layers);
        for l in 0..layers {
            update.push(QueryLayer {
                self_attn: AttentionBlock::new(store, &format!("him.update{l}.self"), channels, heads, rng)?,
                cross_attn: AttentionBlock::new(store, &format!("him.update{l}.cross"), channels, heads, rng)?,
                ffn: FeedForward::new(store, &format!("him.update{l}.ffn"), channels, rng),
            });
            history.push(AttentionBlock::new(store, &format!("him.history{l}"), channels, heads, rng)?);
            enhance.push(AttentionBlock::new(store, &format!("him.enhance{l}"), channels, heads, rng)?);
        }
        Ok(Him {
            query: TargetQuery { rows, count: query_count },
            query_in,
            mask_conv,
            update,
            history,
            enhance,
            channels,
        })
    }

    /// Concatenate the mask in front of the template channels and mix back to
    /// `C` channels with a 1×1 convolution. Returns `[C, H, W]`.
    pub fn mask_enhance(&self, tape: &mut Tape, p: &Params, template: &BevGrid, mask: &TargetMask) -> Result<Var> {
        let s = mask.mask.shape();
        if s[1] != template.spec.h || s[2] != template.spec.w {
            return Err(Error::Config(format!(
                "mask {}x{} does not match template grid {}x{}",
                s[1], s[2], template.spec.h, template.spec.w
            )));
        }
        let m = tape.constant(mask.mask.clone());
        let f = template.features(tape)?;
        let cat = tape.concat(&[m, f])?;
        self.mask_conv.forward(tape, p, cat)
    }

    /// Fill the target query from the enhanced template:
    /// `X' = CA(SA(Linear(X)), V', V')`, repeated per layer with residuals.
    pub fn update_query(&self, tape: &mut Tape, p: &Params, enhanced: Var, pos: Var) -> Result<Var> {
        let (c, h, w) = tape.value(enhanced).dims3()?;
        if c != self.channels {
            return Err(Error::Config(format!("template has {c} channels, query has {}", self.channels)));
        }
        let flat = tape.reshape(enhanced, &[c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let mut x = self.query_in.forward(tape, p, p.var(self.query.rows))?;
        for layer in &self.update {
            x = layer.self_attn.self_attend(tape, p, x)?;
            x = layer.cross_attn.cross(tape, p, x, None, tokens, Some(pos))?;
            x = layer.ffn.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// Gather target evidence from history frames into the query. With no
    /// history the query passes through untouched.
    pub fn aggregate_history(
        &self,
        tape: &mut Tape,
        p: &Params,
        query: Var,
        history: &[BevGrid],
        template: &BevGrid,
        pos: Var,
    ) -> Result<Var> {
        if history.is_empty() {
            return Ok(query);
        }
        for g in history {
            if !g.spec.same_layout(&template.spec) || g.channels != template.channels {
                return Err(Error::Config(format!(
                    "history grid {}x{}x{} does not match template {}x{}x{}",
                    g.channels, g.spec.h, g.spec.w, template.channels, template.spec.h, template.spec.w
                )));
            }
        }
        let rows: Vec<Var> = history.iter().map(|g| g.rows).collect();
        let memory = tape.concat(&rows)?;
        let pos_rep = vec![pos; history.len()];
        let mem_pos = tape.concat(&pos_rep)?;
        let mut x = query;
        for block in &self.history {
            x = block.cross(tape, p, x, None, memory, Some(mem_pos))?;
        }
        Ok(x)
    }

    /// Write the query back into the template: template tokens attend to the
    /// query rows, added residually.
    pub fn enhance_template(&self, tape: &mut Tape, p: &Params, template: &BevGrid, query: Var, pos: Var) -> Result<BevGrid> {
        let mut x = template.rows;
        for block in &self.enhance {
            x = block.cross(tape, p, x, Some(pos), query, None)?;
        }
        Ok(BevGrid { rows: x, ..*template })
    }
}
