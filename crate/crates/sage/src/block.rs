//! Dual-path layer: a backbone transform fused with a routed expert path
//! through a learnable scalar gate.
//!
//! The differentiable path mirrors the value-level routing ops node for
//! node (same operation order), so the recorded decision equals what the
//! graph computed bitwise. Top-K selection itself is hard: gradients flow
//! through the gate weights, the noise scale, the shared gate and the
//! adapters, never through the index choice.

use crate::error::{Result, SageError};
use crate::experts::{run_expert, BackboneBlock, Conv3x3Params, ExpertPool, Linear};
use crate::hub::{aggregate, Hub, ShapeSig};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::routing::{
    modulate_logits, select_topk, GateVariant, Mode, RouterParams, RoutingDecision, GS_CLAMP,
};
use crate::tensor::{Tape, Var};

/// Which family a layer's backbone belongs to (telemetry splits on this).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Attn,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Attn => "attn",
        }
    }
}

/// Per-stage resolution/layout change ahead of the backbone block.
#[derive(Debug, Clone)]
pub enum Stem {
    /// 2x nearest-neighbor downsample, channels unchanged.
    Downsample,
    /// 2x downsample then a 3x3 channel projection.
    DownProject(Conv3x3Params),
    /// Patchify into tokens and project to the token dimension.
    PatchEmbed { p: usize, proj: Linear },
    Identity,
}

impl Stem {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Stem::Downsample => tape.downsample2x(x),
            Stem::DownProject(conv) => {
                let x = tape.downsample2x(x)?;
                conv.forward(tape, store, x)
            }
            Stem::PatchEmbed { p, proj } => {
                let tok = tape.patchify(x, *p)?;
                proj.forward(tape, store, tok)
            }
            Stem::Identity => Ok(x),
        }
    }
}

/// One SAGE layer.
#[derive(Debug)]
pub struct SageBlock {
    pub layer_index: usize,
    pub kind: LayerKind,
    pub stem: Stem,
    /// Backbone block executed by the main path (index into the shared
    /// block list; the same block is reachable as a fine-grained expert).
    pub block_idx: usize,
    pub router: RouterParams,
    /// Fusion parameter; `alpha = sigmoid(theta)`.
    pub theta: ParamId,
    pub input_sig: ShapeSig,
    pub output_sig: ShapeSig,
    pub top_k: usize,
    pub gating: GateVariant,
}

/// Everything a caller needs from one layer forward.
pub struct BlockOutput {
    pub z: Var,
    /// Full softmax over the modulated logits, on the graph (feeds the
    /// balance loss and telemetry).
    pub probs: Var,
    pub decision: RoutingDecision,
    pub z_main: Var,
    pub z_expert: Var,
}

/// Shared read-only state threaded through layer forwards.
pub struct LayerCtx<'a> {
    pub store: &'a ParamStore,
    pub pool: &'a ExpertPool,
    pub blocks: &'a [BackboneBlock],
    pub hub: &'a Hub,
}

impl SageBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &LayerCtx,
        z_prev: Var,
        mode: Mode,
        noise_rng: Option<&mut Rng>,
        frozen_topk: Option<&[usize]>,
    ) -> Result<BlockOutput> {
        let store = ctx.store;
        let m = ctx.pool.size();

        // Main path.
        let stem_out = self.stem.forward(tape, store, z_prev)?;
        let z_main = ctx.blocks[self.block_idx].forward(tape, store, stem_out)?;

        // Pooled context drives every routing quantity.
        let pooled = tape.mean_pool(z_prev)?;
        let d = tape.shape(pooled)[0];
        let pooled_row = tape.reshape(pooled, &[1, d])?;

        // Shared gate g_s.
        let w_gate = tape.param(store, self.router.w_gate);
        let b_gate = tape.param(store, self.router.b_gate);
        let gate_pre = tape.matmul(pooled_row, w_gate)?;
        let gate_pre = tape.reshape(gate_pre, &[1])?;
        let gate_pre = tape.add(gate_pre, b_gate)?;
        if !tape.scalar_value(gate_pre).is_finite() {
            return Err(SageError::numeric(format!(
                "layer {}: non-finite shared-gate pre-activation",
                self.layer_index
            )));
        }
        let gs = tape.sigmoid(gate_pre);
        let gs_val = tape.scalar_value(gs);

        // Affinity logits with learned, input-adaptive noise scale.
        let w_q = tape.param(store, self.router.w_q);
        let keys = tape.param(store, self.router.keys);
        let w_noise = tape.param(store, self.router.w_noise);
        let q = tape.matmul(pooled_row, w_q)?;
        let keys_t = tape.transpose(keys)?;
        let affinity = tape.matmul(q, keys_t)?;
        let affinity = tape.mul_scalar(affinity, 1.0 / (self.router.d_k as f64).sqrt());
        let affinity = tape.reshape(affinity, &[m])?;
        let noise_pre = tape.matmul(pooled_row, w_noise)?;
        let noise_pre = tape.reshape(noise_pre, &[m])?;
        let noise_scale = tape.softplus(noise_pre);

        let base = match (mode, noise_rng) {
            (Mode::Train, Some(rng)) => {
                let eps: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
                let eps = tape.constant(&[m], eps);
                let noise = tape.mul(noise_scale, eps)?;
                tape.add(affinity, noise)?
            }
            (Mode::Train, None) => {
                return Err(SageError::contract(
                    "train-mode forward requires a noise generator",
                ))
            }
            (Mode::Eval, _) => affinity,
        };

        // Log-space group modulation.
        let gs_clamped = tape.clamp(gs, GS_CLAMP, 1.0 - GS_CLAMP);
        let neg = tape.neg(gs_clamped);
        let one_minus = tape.add_scalar(neg, 1.0);
        let log_g = tape.log(gs_clamped);
        let log_1mg = tape.log(one_minus);
        let mask = tape.constant(&[m], ctx.pool.mask_shared.clone());
        let inv_mask: Vec<f64> = ctx.pool.mask_shared.iter().map(|&x| 1.0 - x).collect();
        let inv_mask = tape.constant(&[m], inv_mask);
        let shift_shared = tape.mul_scalar_t(mask, log_g)?;
        let shift_fine = tape.mul_scalar_t(inv_mask, log_1mg)?;
        let shift = tape.add(shift_shared, shift_fine)?;
        let modulated = tape.add(base, shift)?;

        // The materialized modulated logits must agree with the pure op.
        debug_assert_eq!(
            tape.value(modulated),
            modulate_logits(tape.value(base), gs_val, &ctx.pool.mask_shared)?.as_slice()
        );

        // Hard selection (held fixed when the caller replays a decision).
        let selected = match frozen_topk {
            Some(idx) => idx.to_vec(),
            None => select_topk(tape.value(modulated), self.top_k)?,
        };

        // Gate weights over the selection, on the graph.
        let weights = match self.gating {
            GateVariant::Softmax => {
                // Factored softmax: exp(base - max) * group factor. Equal
                // group factors cancel exactly in the normalization.
                let base_sel = tape.gather(base, &selected)?;
                let max_sel = selected
                    .iter()
                    .map(|&j| tape.value(base)[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let centered = tape.add_scalar(base_sel, -max_sel);
                let unnorm = tape.exp(centered);
                let mask_sel: Vec<f64> =
                    selected.iter().map(|&j| ctx.pool.mask_shared[j]).collect();
                let inv_sel: Vec<f64> = mask_sel.iter().map(|&x| 1.0 - x).collect();
                let mask_sel = tape.constant(&[selected.len()], mask_sel);
                let inv_sel = tape.constant(&[selected.len()], inv_sel);
                let f_shared = tape.mul_scalar_t(mask_sel, gs_clamped)?;
                let f_fine = tape.mul_scalar_t(inv_sel, one_minus)?;
                let factors = tape.add(f_shared, f_fine)?;
                let scaled = tape.mul(unnorm, factors)?;
                let total = tape.sum(scaled);
                tape.div_scalar_t(scaled, total)?
            }
            GateVariant::Sigmoid => {
                let sel_logits = tape.gather(modulated, &selected)?;
                let sig = tape.sigmoid(sel_logits);
                let total = tape.sum(sig);
                if tape.scalar_value(total) == 0.0 {
                    let k = selected.len();
                    tape.constant(&[k], vec![1.0 / k as f64; k])
                } else {
                    tape.div_scalar_t(sig, total)?
                }
            }
        };

        // Full routing probabilities over all experts.
        let all: Vec<usize> = (0..m).collect();
        let probs = tape.softmax_over(modulated, &all)?;

        // Expert path: adapt in, run, adapt out, weighted sum.
        let mut outputs = Vec::with_capacity(selected.len());
        for (pos, &expert) in selected.iter().enumerate() {
            let pair = ctx.hub.pair(self.layer_index, expert);
            let adapted = pair.adapt_in(tape, store, z_prev)?;
            let result = run_expert(ctx.pool, ctx.blocks, expert, tape, store, adapted)?;
            let restored = pair.adapt_out(tape, store, result)?;
            let w_k = tape.gather(weights, &[pos])?;
            outputs.push((w_k, restored));
        }
        let z_expert = aggregate(tape, &outputs)?;

        // Dual-path fusion through alpha = sigmoid(theta).
        let theta = tape.param(store, self.theta);
        let alpha = tape.sigmoid(theta);
        let neg_alpha = tape.neg(alpha);
        let one_minus_alpha = tape.add_scalar(neg_alpha, 1.0);
        let main_part = tape.mul_scalar_t(z_main, alpha)?;
        let expert_part = tape.mul_scalar_t(z_expert, one_minus_alpha)?;
        let z = tape.add(main_part, expert_part)?;

        if !tape.value(z).iter().all(|v| v.is_finite()) {
            return Err(SageError::numeric(format!(
                "layer {}: non-finite output",
                self.layer_index
            )));
        }

        // Scatter the selected weights back to a length-M record.
        let mut full_weights = vec![0.0; m];
        for (pos, &j) in selected.iter().enumerate() {
            full_weights[j] = tape.value(weights)[pos];
        }
        let decision = RoutingDecision {
            gs: gs_val,
            base_logits: tape.value(base).to_vec(),
            modulated_logits: tape.value(modulated).to_vec(),
            topk_indices: selected,
            gate_weights: full_weights,
            noise_scale: tape.value(noise_scale).to_vec(),
        };

        Ok(BlockOutput { z, probs, decision, z_main, z_expert })
    }
}
