//! Shape-Adapting Hub: per-(layer, expert) input/output adapters.
//!
//! An adapter is a fixed pipeline of structural moves (patchify,
//! unpatchify, nearest-neighbor 2x resampling) around one learnable
//! linear projection. The input adapter brings a layer's feature into an
//! expert's native form; the output adapter reconstructs the expert's
//! result into the layer's main-path output shape so the two paths can be
//! fused elementwise. Projections start as rectangular identities with
//! zero bias, so same-layout equal-dim adapters begin as exact identities.

use crate::error::{Result, SageError};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::experts::Linear;
use crate::tensor::{Tape, Var};

/// Feature layout plus extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeSig {
    Map { c: usize, h: usize, w: usize },
    /// `t == 0` marks a grid-free token signature (shared experts): the
    /// hub picks a concrete token count per layer.
    Tokens { t: usize, d: usize },
}

impl ShapeSig {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            ShapeSig::Map { c, h, w } => vec![*c, *h, *w],
            ShapeSig::Tokens { t, d } => vec![*t, *d],
        }
    }
}

fn grid_side(t: usize) -> Result<usize> {
    let s = (t as f64).sqrt().round() as usize;
    if s * s != t {
        return Err(SageError::config(format!("token count {t} is not a square grid")));
    }
    Ok(s)
}

/// Structural, parameter-free move.
#[derive(Debug, Clone)]
enum Step {
    Patchify(usize),
    Unpatchify { p: usize, c: usize, h: usize, w: usize },
    Upsample2x,
    Downsample2x,
}

fn resample_steps(from: usize, to: usize) -> Result<Vec<Step>> {
    let mut steps = Vec::new();
    let mut cur = from;
    while cur > to {
        if cur % 2 != 0 {
            return Err(SageError::config(format!("cannot resample {from} -> {to}")));
        }
        steps.push(Step::Downsample2x);
        cur /= 2;
    }
    while cur < to {
        steps.push(Step::Upsample2x);
        cur *= 2;
    }
    if cur != to {
        return Err(SageError::config(format!("cannot resample {from} -> {to}")));
    }
    Ok(steps)
}

/// One direction of shape adaptation: structural steps around a single
/// per-token linear projection.
#[derive(Debug, Clone)]
pub struct Adapter {
    pre: Vec<Step>,
    proj: Linear,
    post: Vec<Step>,
    pub source: ShapeSig,
    pub target: ShapeSig,
}

impl Adapter {
    /// Plan the pipeline from `source` to `target` and register its
    /// projection. All grid arithmetic is validated here; a mismatch is a
    /// config error at construction, never at call time.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        source: &ShapeSig,
        target: &ShapeSig,
    ) -> Result<Adapter> {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let (d_in, d_out);

        match (source, target) {
            (ShapeSig::Map { c, h, w }, ShapeSig::Map { c: tc, h: th, w: tw }) => {
                // Resampling halves/doubles both extents together, so the
                // two grid ratios must match.
                if h * tw != w * th {
                    return Err(SageError::config(format!(
                        "map adapter: grid ratios disagree ({h}x{w} -> {th}x{tw})"
                    )));
                }
                pre.extend(resample_steps(*h, *th)?);
                pre.push(Step::Patchify(1));
                d_in = *c;
                d_out = *tc;
                post.push(Step::Unpatchify { p: 1, c: *tc, h: *th, w: *tw });
            }
            (ShapeSig::Map { c, h, w }, ShapeSig::Tokens { t, d }) => {
                if h != w {
                    return Err(SageError::config("map->tokens adapter needs a square map".to_string()));
                }
                let side = grid_side(*t)?;
                if *h >= side && h % side == 0 {
                    let p = h / side;
                    pre.push(Step::Patchify(p));
                    d_in = c * p * p;
                } else {
                    pre.extend(resample_steps(*h, side)?);
                    pre.push(Step::Patchify(1));
                    d_in = *c;
                }
                d_out = *d;
            }
            (ShapeSig::Tokens { t, d }, ShapeSig::Tokens { t: tt, d: td }) => {
                if t != tt {
                    let s = grid_side(*t)?;
                    let s2 = grid_side(*tt)?;
                    pre.push(Step::Unpatchify { p: 1, c: *d, h: s, w: s });
                    pre.extend(resample_steps(s, s2)?);
                    pre.push(Step::Patchify(1));
                }
                d_in = *d;
                d_out = *td;
            }
            (ShapeSig::Tokens { t, d }, ShapeSig::Map { c, h, w }) => {
                if h != w {
                    return Err(SageError::config("tokens->map adapter needs a square map".to_string()));
                }
                let s = grid_side(*t)?;
                d_in = *d;
                if *h >= s && h % s == 0 {
                    let p = h / s;
                    d_out = c * p * p;
                    post.push(Step::Unpatchify { p, c: *c, h: *h, w: *w });
                } else {
                    d_out = *c;
                    post.push(Step::Unpatchify { p: 1, c: *c, h: s, w: s });
                    post.extend(resample_steps(s, *h)?);
                }
            }
        }

        let proj = Linear::register(
            store,
            name,
            ParamGroup::Adapters,
            d_in,
            d_out,
            Init::IdentityExtended,
        );
        Ok(Adapter {
            pre,
            proj,
            post,
            source: source.clone(),
            target: target.clone(),
        })
    }

    fn run_steps(tape: &mut Tape, steps: &[Step], mut x: Var) -> Result<Var> {
        for step in steps {
            x = match step {
                Step::Patchify(p) => tape.patchify(x, *p)?,
                Step::Unpatchify { p, c, h, w } => tape.unpatchify(x, *p, *c, *h, *w)?,
                Step::Upsample2x => tape.upsample2x(x)?,
                Step::Downsample2x => tape.downsample2x(x)?,
            };
        }
        Ok(x)
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.shape(x) != self.source.dims().as_slice() {
            return Err(SageError::contract(format!(
                "adapter input {:?} does not match source {:?}",
                tape.shape(x),
                self.source
            )));
        }
        let x = Self::run_steps(tape, &self.pre, x)?;
        let x = self.proj.forward(tape, store, x)?;
        let x = Self::run_steps(tape, &self.post, x)?;
        debug_assert_eq!(tape.shape(x), self.target.dims().as_slice());
        Ok(x)
    }
}

/// Input/output adapters for one (layer, expert) pair.
#[derive(Debug, Clone)]
pub struct AdapterPair {
    pub s_in: Adapter,
    pub s_out: Adapter,
    /// Concrete shape the expert consumes and produces for this layer.
    pub expert_io: ShapeSig,
}

impl AdapterPair {
    /// Resolve a grid-free expert signature into a concrete token form for
    /// a layer, then build both directions. For maps the fallback patch
    /// size is 2 when the grid allows it, else 1.
    pub fn build(
        store: &mut ParamStore,
        layer: usize,
        expert: usize,
        layer_in: &ShapeSig,
        layer_out: &ShapeSig,
        native: &ShapeSig,
    ) -> Result<AdapterPair> {
        let expert_io = match native {
            ShapeSig::Tokens { t: 0, d } => match layer_in {
                ShapeSig::Map { h, .. } => {
                    let p = if *h >= 2 && h % 2 == 0 { 2 } else { 1 };
                    ShapeSig::Tokens { t: (h / p) * (h / p), d: *d }
                }
                ShapeSig::Tokens { t, .. } => ShapeSig::Tokens { t: *t, d: *d },
            },
            other => other.clone(),
        };
        let s_in = Adapter::build(
            store,
            &format!("adapter.l{layer}.e{expert}.in"),
            layer_in,
            &expert_io,
        )?;
        let s_out = Adapter::build(
            store,
            &format!("adapter.l{layer}.e{expert}.out"),
            &expert_io,
            layer_out,
        )?;
        Ok(AdapterPair { s_in, s_out, expert_io })
    }

    pub fn adapt_in(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        self.s_in.apply(tape, store, z)
    }

    pub fn adapt_out(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        self.s_out.apply(tape, store, y)
    }
}

/// All adapter pairs, indexed `[layer][expert]`. Built once at model
/// construction so parameter layout and initialization are independent of
/// routing order.
#[derive(Debug)]
pub struct Hub {
    pairs: Vec<Vec<AdapterPair>>,
}

impl Hub {
    pub fn build(
        store: &mut ParamStore,
        layer_sigs: &[(ShapeSig, ShapeSig)],
        natives: &[ShapeSig],
    ) -> Result<Hub> {
        let mut pairs = Vec::with_capacity(layer_sigs.len());
        for (li, (inp, out)) in layer_sigs.iter().enumerate() {
            let mut row = Vec::with_capacity(natives.len());
            for (ei, native) in natives.iter().enumerate() {
                row.push(AdapterPair::build(store, li, ei, inp, out, native)?);
            }
            pairs.push(row);
        }
        Ok(Hub { pairs })
    }

    pub fn pair(&self, layer: usize, expert: usize) -> &AdapterPair {
        &self.pairs[layer][expert]
    }

    pub fn layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn experts(&self) -> usize {
        self.pairs.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// Gating-weighted summation of adapted expert outputs. Weights are `[1]`
/// graph scalars so gradients flow back into the router.
pub fn aggregate(tape: &mut Tape, outputs: &[(Var, Var)]) -> Result<Var> {
    if outputs.is_empty() {
        return Err(SageError::contract("aggregate: empty expert output list"));
    }
    let mut acc = tape.mul_scalar_t(outputs[0].1, outputs[0].0)?;
    for (w, z) in &outputs[1..] {
        let term = tape.mul_scalar_t(*z, *w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(3)
    }

    #[test]
    fn same_layout_identity_init_is_exact_identity() {
        let mut st = store();
        let sig = ShapeSig::Map { c: 3, h: 4, w: 4 };
        let a = Adapter::build(&mut st, "id_map", &sig, &sig).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 4, 4], (0..48).map(|i| (i as f64).cos()).collect());
        let y = a.apply(&mut tape, &st, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let sig = ShapeSig::Tokens { t: 5, d: 6 };
        let a = Adapter::build(&mut st, "id_tok", &sig, &sig).unwrap();
        let x = tape.constant(&[5, 6], (0..30).map(|i| i as f64 * 0.3).collect());
        let y = a.apply(&mut tape, &st, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn patchify_hand_case_through_adapter() {
        // Map [1,2,2] {1,2,3,4} into a single 4-wide token with the
        // identity-extended projection.
        let mut st = store();
        let a = Adapter::build(
            &mut st,
            "p2",
            &ShapeSig::Map { c: 1, h: 2, w: 2 },
            &ShapeSig::Tokens { t: 1, d: 4 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = a.apply(&mut tape, &st, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4]);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tokens_to_map_raster_order() {
        let mut st = store();
        let a = Adapter::build(
            &mut st,
            "t2m",
            &ShapeSig::Tokens { t: 4, d: 1 },
            &ShapeSig::Map { c: 1, h: 2, w: 2 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 1], vec![10.0, 11.0, 12.0, 13.0]);
        let y = a.apply(&mut tape, &st, x).unwrap();
        // Token t lands at (t div 2, t mod 2).
        assert_eq!(tape.value(y), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn projection_slice_keeps_leading_features() {
        // Expert dim 4 -> out channels 2 with the identity-extended
        // projection keeps the first two features.
        let mut st = store();
        let a = Adapter::build(
            &mut st,
            "slice",
            &ShapeSig::Tokens { t: 1, d: 4 },
            &ShapeSig::Map { c: 2, h: 1, w: 1 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![7.0, 8.0, 9.0, 10.0]);
        let y = a.apply(&mut tape, &st, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        assert_eq!(tape.value(y), &[7.0, 8.0]);
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let mut st = store();
        let a = Adapter::build(
            &mut st,
            "z",
            &ShapeSig::Tokens { t: 4, d: 3 },
            &ShapeSig::Map { c: 2, h: 4, w: 4 },
        )
        .unwrap();
        st.get_mut(a.proj.w).tensor.values.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 3], vec![1.0; 12]);
        let y = a.apply(&mut tape, &st, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_layout_round_trip_shapes() {
        let mut st = store();
        let pair = AdapterPair::build(
            &mut st,
            0,
            0,
            &ShapeSig::Map { c: 3, h: 8, w: 8 },
            &ShapeSig::Map { c: 5, h: 4, w: 4 },
            &ShapeSig::Tokens { t: 16, d: 7 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 8, 8], vec![0.5; 192]);
        let t = pair.adapt_in(&mut tape, &st, x).unwrap();
        assert_eq!(tape.shape(t), &[16, 7]);
        let y = pair.adapt_out(&mut tape, &st, t).unwrap();
        assert_eq!(tape.shape(y), &[5, 4, 4]);
    }

    #[test]
    fn grid_free_signature_resolves_per_layer() {
        let mut st = store();
        let pair = AdapterPair::build(
            &mut st,
            1,
            0,
            &ShapeSig::Map { c: 4, h: 8, w: 8 },
            &ShapeSig::Map { c: 4, h: 4, w: 4 },
            &ShapeSig::Tokens { t: 0, d: 6 },
        )
        .unwrap();
        assert_eq!(pair.expert_io, ShapeSig::Tokens { t: 16, d: 6 });

        // Degenerate 1x1 grid falls back to p = 1.
        let pair = AdapterPair::build(
            &mut st,
            2,
            0,
            &ShapeSig::Map { c: 4, h: 1, w: 1 },
            &ShapeSig::Map { c: 4, h: 1, w: 1 },
            &ShapeSig::Tokens { t: 0, d: 6 },
        )
        .unwrap();
        assert_eq!(pair.expert_io, ShapeSig::Tokens { t: 1, d: 6 });
    }

    #[test]
    fn non_power_of_two_resample_is_config_error() {
        let mut st = store();
        let err = Adapter::build(
            &mut st,
            "bad",
            &ShapeSig::Map { c: 1, h: 6, w: 6 },
            &ShapeSig::Map { c: 1, h: 4, w: 4 },
        );
        assert!(err.is_err());
    }

    #[test]
    fn aggregate_hand_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w1 = tape.constant_scalar(1.0);
        let y = aggregate(&mut tape, &[(w1, z)]).unwrap();
        assert_eq!(tape.value(y), tape.value(z));

        // Convexity: identical inputs, any weights summing to 1.
        let w3 = tape.constant_scalar(0.3);
        let w7 = tape.constant_scalar(0.7);
        let y = aggregate(&mut tape, &[(w3, z), (w7, z)]).unwrap();
        for (a, b) in tape.value(y).to_vec().iter().zip(tape.value(z)) {
            assert!((a - b).abs() < 1e-15);
        }

        let twos = tape.constant(&[3], vec![2.0; 3]);
        let fours = tape.constant(&[3], vec![4.0; 3]);
        let half = tape.constant_scalar(0.5);
        let y = aggregate(&mut tape, &[(half, twos), (half, fours)]).unwrap();
        assert_eq!(tape.value(y), &[3.0, 3.0, 3.0]);

        assert!(aggregate(&mut tape, &[]).is_err());
    }
}
