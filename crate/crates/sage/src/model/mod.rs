//! The miniature hybrid encoder-decoder: two conv stages, two attention
//! stages (each wrapped as a SAGE layer over the global expert pool), a
//! skip-connected decoder, and a 1x1 segmentation head.

pub mod checkpoint;
pub mod metrics;

use crate::block::{LayerCtx, LayerKind, SageBlock, Stem};
use crate::error::{Result, SageError};
use crate::experts::{build_pool, AttnBlock, BackboneBlock, Conv3x3Params, ConvBlock, ExpertPool, Linear};
use crate::hub::{Hub, ShapeSig};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::routing::{GateVariant, Mode, RoutingDecision};
use crate::tensor::{Tape, Tensor, Var};

const NOISE_TAG: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the two conv stages.
    pub conv_channels: Vec<usize>,
    pub token_dim: usize,
    pub router_key_dim: usize,
    pub shared_experts: usize,
    pub top_k: usize,
    pub gating: GateVariant,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            height: 32,
            width: 32,
            conv_channels: vec![8, 16],
            token_dim: 32,
            router_key_dim: 16,
            shared_experts: 2,
            top_k: 2,
            gating: GateVariant::Sigmoid,
            num_classes: 2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 2 {
            return Err(SageError::config("exactly two conv stages are supported"));
        }
        if self.height != self.width {
            return Err(SageError::config("square inputs required"));
        }
        let down = 1usize << self.conv_channels.len();
        if self.height % down != 0 || self.width % down != 0 {
            return Err(SageError::config(format!(
                "input {}x{} not divisible by {down}",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(SageError::config("need at least two classes"));
        }
        if self.token_dim == 0 || self.in_channels == 0 {
            return Err(SageError::config("zero extent in model dims"));
        }
        let m = self.shared_experts + 4;
        if self.top_k == 0 || self.top_k > m {
            return Err(SageError::config(format!("top_k {} out of range for M={m}", self.top_k)));
        }
        Ok(())
    }

    /// Canonical key-value block (sorted keys), embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let chans: Vec<String> = self.conv_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "conv_channels = {}\ngating = {}\nheight = {}\nin_channels = {}\nnum_classes = {}\nrouter_key_dim = {}\nseed = {}\nshared_experts = {}\ntoken_dim = {}\ntop_k = {}\nwidth = {}\n",
            chans.join(","),
            self.gating.label(),
            self.height,
            self.in_channels,
            self.num_classes,
            self.router_key_dim,
            self.seed,
            self.shared_experts,
            self.token_dim,
            self.top_k,
            self.width,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SageError::config(format!("bad config line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key/value pair; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| SageError::config(format!("bad integer '{v}' for {key}")))
        };
        match key {
            "in_channels" => self.in_channels = parse_usize(value)?,
            "height" => self.height = parse_usize(value)?,
            "width" => self.width = parse_usize(value)?,
            "conv_channels" => {
                self.conv_channels = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| SageError::config(format!("bad conv_channels '{value}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "token_dim" => self.token_dim = parse_usize(value)?,
            "router_key_dim" => self.router_key_dim = parse_usize(value)?,
            "shared_experts" => self.shared_experts = parse_usize(value)?,
            "top_k" => self.top_k = parse_usize(value)?,
            "gating" => self.gating = GateVariant::parse(value)?,
            "num_classes" => self.num_classes = parse_usize(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| SageError::config(format!("bad seed '{value}'")))?;
            }
            other => return Err(SageError::config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.shared_experts + 4
    }
}

/// Stream key for the per-(step, sample, layer) routing noise.
#[derive(Debug, Clone, Copy)]
pub struct NoiseCtx {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

impl NoiseCtx {
    fn layer_rng(&self, layer: usize) -> Rng {
        Rng::derive(self.seed, &[NOISE_TAG, self.step, self.sample, layer as u64])
    }
}

/// Graph handles from one full forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Per-layer full routing probabilities (graph nodes).
    pub probs: Vec<Var>,
    pub decisions: Vec<RoutingDecision>,
}

/// Value-level prediction for evaluation and telemetry.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub decisions: Vec<RoutingDecision>,
}

impl Prediction {
    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn mask(&self) -> Vec<u8> {
        metrics::argmax_mask(&self.logits)
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: Conv3x3Params,
    pub layers: Vec<SageBlock>,
    pub blocks: Vec<BackboneBlock>,
    pub pool: ExpertPool,
    pub hub: Hub,
    dec_init: Linear,
    dec_fuse1: Conv3x3Params,
    dec_fuse2: Conv3x3Params,
    head: Linear,
    /// Grid side after stage 2, and the attention patch size.
    g2: usize,
    p_attn: usize,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let (c_in, h) = (config.in_channels, config.height);
        let (c1, c2) = (config.conv_channels[0], config.conv_channels[1]);
        let (g1, g2) = (h / 2, h / 4);
        let td = config.token_dim;
        // Patch size for the attention stages: 2 when the grid allows it.
        let p_attn = if g2 >= 2 && g2 % 2 == 0 { 2 } else { 1 };
        let t = (g2 / p_attn) * (g2 / p_attn);

        let stem = Conv3x3Params::register(&mut store, "stem.conv", ParamGroup::Stem, c_in, c1);

        let blocks = vec![
            BackboneBlock::Conv(ConvBlock::register(&mut store, "block0", c1)),
            BackboneBlock::Conv(ConvBlock::register(&mut store, "block1", c2)),
            BackboneBlock::Attn(AttnBlock::register(&mut store, "block2", td)),
            BackboneBlock::Attn(AttnBlock::register(&mut store, "block3", td)),
        ];
        let natives = vec![
            ShapeSig::Map { c: c1, h: g1, w: g1 },
            ShapeSig::Map { c: c2, h: g2, w: g2 },
            ShapeSig::Tokens { t, d: td },
            ShapeSig::Tokens { t, d: td },
        ];

        let layer_sigs: Vec<(ShapeSig, ShapeSig)> = vec![
            (ShapeSig::Map { c: c1, h, w: h }, ShapeSig::Map { c: c1, h: g1, w: g1 }),
            (ShapeSig::Map { c: c1, h: g1, w: g1 }, ShapeSig::Map { c: c2, h: g2, w: g2 }),
            (ShapeSig::Map { c: c2, h: g2, w: g2 }, ShapeSig::Tokens { t, d: td }),
            (ShapeSig::Tokens { t, d: td }, ShapeSig::Tokens { t, d: td }),
        ];

        let m = config.pool_size();
        let mut layers = Vec::with_capacity(4);
        for (i, (inp, out)) in layer_sigs.iter().enumerate() {
            let d = match inp {
                ShapeSig::Map { c, .. } => *c,
                ShapeSig::Tokens { d, .. } => *d,
            };
            let stem = match i {
                0 => Stem::Downsample,
                1 => Stem::DownProject(Conv3x3Params::register(
                    &mut store,
                    "layer1.stem",
                    ParamGroup::Stem,
                    c1,
                    c2,
                )),
                2 => Stem::PatchEmbed {
                    p: p_attn,
                    proj: Linear::register(
                        &mut store,
                        "layer2.stem",
                        ParamGroup::Stem,
                        c2 * p_attn * p_attn,
                        td,
                        Init::GlorotUniform { fan_in: c2 * p_attn * p_attn, fan_out: td },
                    ),
                },
                _ => Stem::Identity,
            };
            let router =
                crate::routing::RouterParams::register(&mut store, i, d, config.router_key_dim, m)?;
            // Start fusion near the main path for stability.
            let theta = store.add(format!("layer{i}.theta"), ParamGroup::Fusion, &[1], Init::Value(2.0));
            layers.push(SageBlock {
                layer_index: i,
                kind: if i < 2 { LayerKind::Conv } else { LayerKind::Attn },
                stem,
                block_idx: i,
                router,
                theta,
                input_sig: inp.clone(),
                output_sig: out.clone(),
                top_k: config.top_k,
                gating: config.gating,
            });
        }

        let pool = build_pool(&mut store, &blocks, &natives, config.shared_experts, td)?;
        let pool_natives: Vec<ShapeSig> = pool.experts.iter().map(|e| e.native.clone()).collect();
        let hub = Hub::build(&mut store, &layer_sigs, &pool_natives)?;

        let dec_init = Linear::register(
            &mut store,
            "dec.init",
            ParamGroup::Decoder,
            td,
            c2 * p_attn * p_attn,
            Init::GlorotUniform { fan_in: td, fan_out: c2 * p_attn * p_attn },
        );
        // Skip-connection arithmetic: stage input channels are the
        // upsampled channels plus the matching encoder stage's channels.
        let fuse1_in = c2 + c1;
        let fuse2_in = c1 + c1;
        let dec_fuse1 =
            Conv3x3Params::register(&mut store, "dec.fuse1", ParamGroup::Decoder, fuse1_in, c1);
        let dec_fuse2 =
            Conv3x3Params::register(&mut store, "dec.fuse2", ParamGroup::Decoder, fuse2_in, c1);
        let head = Linear::register(
            &mut store,
            "dec.head",
            ParamGroup::Decoder,
            c1,
            config.num_classes,
            Init::GlorotUniform { fan_in: c1, fan_out: config.num_classes },
        );

        let model = Model {
            config,
            store,
            stem,
            layers,
            blocks,
            pool,
            hub,
            dec_init,
            dec_fuse1,
            dec_fuse2,
            head,

            g2,
            p_attn,
        };
        model.verify_shape_closure()?;
        Ok(model)
    }

    /// Every (layer, expert) pair must map the layer input shape to the
    /// layer's main-path output shape through adapt_out . expert . adapt_in.
    fn verify_shape_closure(&self) -> Result<()> {
        for layer in &self.layers {
            for expert in 0..self.pool.size() {
                let mut tape = Tape::new();
                let dims = layer.input_sig.dims();
                let x = tape.constant(&dims, vec![0.0; dims.iter().product()]);
                let pair = self.hub.pair(layer.layer_index, expert);
                let adapted = pair.adapt_in(&mut tape, &self.store, x)?;
                let out = crate::experts::run_expert(
                    &self.pool,
                    &self.blocks,
                    expert,
                    &mut tape,
                    &self.store,
                    adapted,
                )?;
                let restored = pair.adapt_out(&mut tape, &self.store, out)?;
                if tape.shape(restored) != layer.output_sig.dims().as_slice() {
                    return Err(SageError::config(format!(
                        "shape closure broken at layer {} expert {expert}: {:?} vs {:?}",
                        layer.layer_index,
                        tape.shape(restored),
                        layer.output_sig
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn param_scalar_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn ctx(&self) -> LayerCtx<'_> {
        LayerCtx {
            store: &self.store,
            pool: &self.pool,
            blocks: &self.blocks,
            hub: &self.hub,
        }
    }

    /// Full differentiable forward. `frozen` pins each layer's top-K
    /// selection (used by the gradient oracle and decision replay).
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        mode: Mode,
        noise: Option<&NoiseCtx>,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<ForwardPass> {
        let want = [self.config.in_channels, self.config.height, self.config.width];
        if image.shape != want {
            return Err(SageError::shape(format!(
                "input {:?}, model expects {want:?}",
                image.shape
            )));
        }
        if !image.is_finite() {
            return Err(SageError::numeric("non-finite input image"));
        }
        let ctx = self.ctx();
        let x = tape.leaf(image);
        let z_stem = self.stem.forward(tape, &self.store, x)?;

        let mut z = z_stem;
        let mut skips = vec![z_stem];
        let mut probs = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut rng = noise.map(|n| n.layer_rng(layer.layer_index));
            let frozen_topk = frozen.map(|f| f[layer.layer_index].as_slice());
            let out = layer.forward(tape, &ctx, z, mode, rng.as_mut(), frozen_topk)?;
            z = out.z;
            skips.push(z);
            probs.push(out.probs);
            decisions.push(out.decision);
        }

        // Decoder: tokens back to a map, then two upsample+skip stages.
        let c2 = self.config.conv_channels[1];
        let tok = self.dec_init.forward(tape, &self.store, z)?;
        let bottleneck = tape.unpatchify(tok, self.p_attn, c2, self.g2, self.g2)?;

        let up1 = tape.upsample2x(bottleneck)?;
        let cat1 = tape.concat_channels(up1, skips[1])?; // stage-1 output at g1
        let d1 = self.dec_fuse1.forward(tape, &self.store, cat1)?;
        let d1 = tape.silu(d1)?;

        let up2 = tape.upsample2x(d1)?;
        let cat2 = tape.concat_channels(up2, skips[0])?; // stem output at full res
        let d2 = self.dec_fuse2.forward(tape, &self.store, cat2)?;
        let d2 = tape.silu(d2)?;

        // 1x1 head via per-position linear.
        let flat = tape.patchify(d2, 1)?;
        let logits = self.head.forward(tape, &self.store, flat)?;
        let logits = tape.unpatchify(
            logits,
            1,
            self.config.num_classes,
            self.config.height,
            self.config.width,
        )?;
        if !tape.value(logits).iter().all(|v| v.is_finite()) {
            return Err(SageError::numeric("decoder produced non-finite logits"));
        }

        Ok(ForwardPass { logits, probs, decisions })
    }

    /// Deterministic eval-mode prediction.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, Mode::Eval, None, None)?;
        let logits = Tensor::new(
            tape.shape(pass.logits).to_vec(),
            tape.value(pass.logits).to_vec(),
        )?;
        Ok(Prediction { logits, decisions: pass.decisions })
    }
}
