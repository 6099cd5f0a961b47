//! The global expert pool.
//!
//! Shared experts are small per-token MLPs available to every layer.
//! Fine-grained experts are the backbone's own blocks: the pool refers to
//! them by block index, so the expert path and the main path train the
//! same parameters.

use crate::error::{Result, SageError};
use crate::hub::ShapeSig;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    SharedMlp,
    ConvBlock,
    AttnBlock,
}

impl ExpertKind {
    pub fn is_shared(&self) -> bool {
        matches!(self, ExpertKind::SharedMlp)
    }
}

/// Linear layer: weight [in, out] plus bias [out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), group, &[d_in, d_out], init),
            b: store.add(format!("{name}.b"), group, &[d_out], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), group, &[d], Init::Ones),
            beta: store.add(format!("{name}.beta"), group, &[d], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3Params {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3Params {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Conv3x3Params {
            w: store.add(
                format!("{name}.w"),
                group,
                &[c_out, c_in, 3, 3],
                Init::GlorotUniform { fan_in: c_in * 9, fan_out: c_out * 9 },
            ),
            b: store.add(format!("{name}.b"), group, &[c_out], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3x3(x, w, b)
    }
}

/// Shared expert: per-token update `x + sigmoid(gate(x)) * value(x)`.
/// Two linear layers with a sigmoid-weighted residual; all-zero weights
/// and biases make it the identity.
#[derive(Debug, Clone)]
pub struct SharedMlp {
    pub gate: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl SharedMlp {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        SharedMlp {
            gate: Linear::register(
                store,
                &format!("{name}.gate"),
                ParamGroup::SharedExperts,
                dim,
                dim,
                Init::GlorotUniform { fan_in: dim, fan_out: dim },
            ),
            value: Linear::register(
                store,
                &format!("{name}.value"),
                ParamGroup::SharedExperts,
                dim,
                dim,
                Init::GlorotUniform { fan_in: dim, fan_out: dim },
            ),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = self.gate.forward(tape, store, x)?;
        let g = tape.sigmoid(g);
        let v = self.value.forward(tape, store, x)?;
        let update = tape.mul(g, v)?;
        tape.add(x, update)
    }
}

/// Backbone conv block: conv -> channel layer-norm -> gated activation ->
/// conv, residual. Channel count is fixed; spatial extents are free.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv3x3Params,
    pub ln: LayerNormParams,
    pub conv2: Conv3x3Params,
    pub channels: usize,
}

impl ConvBlock {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ConvBlock {
            conv1: Conv3x3Params::register(store, &format!("{name}.conv1"), ParamGroup::FineExperts, channels, channels),
            ln: LayerNormParams::register(store, &format!("{name}.ln"), ParamGroup::FineExperts, channels),
            conv2: Conv3x3Params::register(store, &format!("{name}.conv2"), ParamGroup::FineExperts, channels, channels),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [c, h, w] = tape.shape(x)[..] else {
            return Err(SageError::shape("conv block expects [c,h,w]".to_string()));
        };
        if c != self.channels {
            return Err(SageError::contract(format!(
                "conv block channels {} vs input {c}",
                self.channels
            )));
        }
        let y = self.conv1.forward(tape, store, x)?;
        // Normalize the channel vector at each spatial position.
        let tok = tape.patchify(y, 1)?;
        let tok = self.ln.forward(tape, store, tok)?;
        let tok = tape.silu(tok)?;
        let y = tape.unpatchify(tok, 1, c, h, w)?;
        let y = self.conv2.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

/// Backbone attention block: pre-norm single-head attention plus a
/// pre-norm gated MLP, both residual. Token dimension is fixed; sequence
/// length is free.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub dim: usize,
}

impl AttnBlock {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let proj = |store: &mut ParamStore, suffix: &str| {
            Linear::register(
                store,
                &format!("{name}.{suffix}"),
                ParamGroup::FineExperts,
                dim,
                dim,
                Init::GlorotUniform { fan_in: dim, fan_out: dim },
            )
        };
        let hidden = 2 * dim;
        AttnBlock {
            ln1: LayerNormParams::register(store, &format!("{name}.ln1"), ParamGroup::FineExperts, dim),
            wq: proj(store, "wq"),
            wk: proj(store, "wk"),
            wv: proj(store, "wv"),
            wo: proj(store, "wo"),
            ln2: LayerNormParams::register(store, &format!("{name}.ln2"), ParamGroup::FineExperts, dim),
            mlp1: Linear::register(
                store,
                &format!("{name}.mlp1"),
                ParamGroup::FineExperts,
                dim,
                hidden,
                Init::GlorotUniform { fan_in: dim, fan_out: hidden },
            ),
            mlp2: Linear::register(
                store,
                &format!("{name}.mlp2"),
                ParamGroup::FineExperts,
                hidden,
                dim,
                Init::GlorotUniform { fan_in: hidden, fan_out: dim },
            ),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, d] = tape.shape(x)[..] else {
            return Err(SageError::shape("attn block expects [t,d]".to_string()));
        };
        if d != self.dim {
            return Err(SageError::contract(format!(
                "attn block dim {} vs input {d}",
                self.dim
            )));
        }
        let h = self.ln1.forward(tape, store, x)?;
        let q = self.wq.forward(tape, store, h)?;
        let k = self.wk.forward(tape, store, h)?;
        let v = self.wv.forward(tape, store, h)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = self.wo.forward(tape, store, ctx)?;
        let x1 = tape.add(x, ctx)?;

        let h2 = self.ln2.forward(tape, store, x1)?;
        let m = self.mlp1.forward(tape, store, h2)?;
        let m = tape.silu(m)?;
        let m = self.mlp2.forward(tape, store, m)?;
        tape.add(x1, m)
    }
}

/// A backbone block reusable as a fine-grained expert.
#[derive(Debug, Clone)]
pub enum BackboneBlock {
    Conv(ConvBlock),
    Attn(AttnBlock),
}

impl BackboneBlock {
    pub fn kind(&self) -> ExpertKind {
        match self {
            BackboneBlock::Conv(_) => ExpertKind::ConvBlock,
            BackboneBlock::Attn(_) => ExpertKind::AttnBlock,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            BackboneBlock::Conv(b) => b.forward(tape, store, x),
            BackboneBlock::Attn(b) => b.forward(tape, store, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            BackboneBlock::Conv(b) => vec![
                b.conv1.w, b.conv1.b, b.ln.gamma, b.ln.beta, b.conv2.w, b.conv2.b,
            ],
            BackboneBlock::Attn(b) => vec![
                b.ln1.gamma, b.ln1.beta, b.wq.w, b.wq.b, b.wk.w, b.wk.b, b.wv.w, b.wv.b,
                b.wo.w, b.wo.b, b.ln2.gamma, b.ln2.beta, b.mlp1.w, b.mlp1.b, b.mlp2.w, b.mlp2.b,
            ],
        }
    }
}

/// One pool entry: kind plus the shape the expert natively consumes and
/// produces. Fine-grained entries carry the index of their backbone block.
#[derive(Debug, Clone)]
pub struct ExpertDesc {
    pub kind: ExpertKind,
    /// Native input/output signature. Shared experts are grid-free: the
    /// hub derives a per-layer token form for them.
    pub native: ShapeSig,
    /// Index into the backbone block list for fine-grained experts.
    pub block: Option<usize>,
}

/// Global pool: `S` shared experts followed by one fine-grained expert
/// per backbone block, in backbone order.
#[derive(Debug)]
pub struct ExpertPool {
    pub shared: Vec<SharedMlp>,
    pub experts: Vec<ExpertDesc>,
    /// 1.0 at shared indices, 0.0 elsewhere; length M.
    pub mask_shared: Vec<f64>,
    pub shared_dim: usize,
}

impl ExpertPool {
    pub fn size(&self) -> usize {
        self.experts.len()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }

    pub fn is_shared(&self, id: usize) -> bool {
        self.mask_shared[id] != 0.0
    }
}

/// Assemble the pool from the backbone. `hidden_dim` is the token width
/// shared experts operate on.
pub fn build_pool(
    store: &mut ParamStore,
    blocks: &[BackboneBlock],
    natives: &[ShapeSig],
    s: usize,
    hidden_dim: usize,
) -> Result<ExpertPool> {
    if blocks.is_empty() {
        return Err(SageError::config("expert pool needs at least one backbone block"));
    }
    if s > 0 && hidden_dim == 0 {
        return Err(SageError::config("shared experts need a positive hidden dim"));
    }
    debug_assert_eq!(blocks.len(), natives.len());
    let mut shared = Vec::with_capacity(s);
    let mut experts = Vec::with_capacity(s + blocks.len());
    for i in 0..s {
        shared.push(SharedMlp::register(store, &format!("shared{i}"), hidden_dim));
        experts.push(ExpertDesc {
            kind: ExpertKind::SharedMlp,
            native: ShapeSig::Tokens { t: 0, d: hidden_dim },
            block: None,
        });
    }
    for (i, (block, native)) in blocks.iter().zip(natives).enumerate() {
        experts.push(ExpertDesc {
            kind: block.kind(),
            native: native.clone(),
            block: Some(i),
        });
    }
    let m = experts.len();
    let mut mask_shared = vec![0.0; m];
    for w in mask_shared.iter_mut().take(s) {
        *w = 1.0;
    }
    Ok(ExpertPool {
        shared,
        experts,
        mask_shared,
        shared_dim: hidden_dim,
    })
}

/// Execute one expert on an already shape-adapted input.
pub fn run_expert(
    pool: &ExpertPool,
    blocks: &[BackboneBlock],
    id: usize,
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
) -> Result<Var> {
    let desc = &pool.experts[id];
    let shape = tape.shape(x).to_vec();
    match desc.kind {
        ExpertKind::SharedMlp => {
            if shape.len() != 2 || shape[1] != pool.shared_dim {
                return Err(SageError::contract(format!(
                    "shared expert {id} expects [t,{}], got {shape:?}",
                    pool.shared_dim
                )));
            }
            pool.shared[id].forward(tape, store, x)
        }
        ExpertKind::ConvBlock => {
            let block = &blocks[desc.block.expect("fine expert has a block")];
            let BackboneBlock::Conv(cb) = block else { unreachable!() };
            if shape.len() != 3 || shape[0] != cb.channels {
                return Err(SageError::contract(format!(
                    "conv expert {id} expects [{},h,w], got {shape:?}",
                    cb.channels
                )));
            }
            block.forward(tape, store, x)
        }
        ExpertKind::AttnBlock => {
            let block = &blocks[desc.block.expect("fine expert has a block")];
            let BackboneBlock::Attn(ab) = block else { unreachable!() };
            if shape.len() != 2 || shape[1] != ab.dim {
                return Err(SageError::contract(format!(
                    "attn expert {id} expects [t,{}], got {shape:?}",
                    ab.dim
                )));
            }
            block.forward(tape, store, x)
        }
    }
}
