//! Reverse-mode autodiff over a linear tape of primitive operations.
//!
//! A `Tape` records every primitive applied during one forward pass and
//! replays them in reverse to accumulate gradients. Gradients add across
//! multiple uses of a node. One tape per sample; parameters enter a tape
//! once each (cached by id) and their gradients are read back out after
//! `backward`.

use crate::error::{Result, SageError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{numel, sigmoid, softplus, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    MeanPool(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    Upsample2x(Var),
    Downsample2x(Var),
    Patchify { x: Var, p: usize },
    Unpatchify { x: Var, p: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SoftmaxRows(Var),
    SoftmaxOver { x: Var, indices: Vec<usize> },
    ConcatChannels(Var, Var),
    Sum(Var),
    Gather { x: Var, indices: Vec<usize> },
    MulScalarT { x: Var, s: Var },
    DivScalarT { x: Var, s: Var },
    AddRowBroadcast { m: Var, b: Var },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    param_cache: Vec<Option<Var>>,
    param_override: Option<(ParamId, usize, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_cache: Vec::new(),
            param_override: None,
        }
    }

    /// Add `delta` to one parameter scalar when that parameter enters the
    /// tape. The store itself stays untouched; finite differences use
    /// this to probe the loss without mutating the model.
    pub fn set_param_override(&mut self, id: ParamId, index: usize, delta: f64) {
        self.param_override = Some((id, index, delta));
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Gradient of the last `backward` with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Non-trainable input.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Var {
        self.push(Op::Leaf, shape.to_vec(), values, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(&[1], vec![v])
    }

    /// Leaf from a tensor; trainable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// Parameter leaf; one tape node per parameter regardless of how many
    /// times it is used, so gradient accumulation happens on the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_cache.len() < store.len() {
            self.param_cache.resize(store.len(), None);
        }
        if let Some(v) = self.param_cache[id.0] {
            return v;
        }
        let p = store.get(id);
        let mut values = p.tensor.values.clone();
        if let Some((oid, index, delta)) = self.param_override {
            if oid == id {
                values[index] += delta;
            }
        }
        let v = self.push(Op::Leaf, p.tensor.shape.clone(), values, p.tensor.requires_grad);
        self.nodes[v.0].param = Some(id);
        self.param_cache[id.0] = Some(v);
        v
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(SageError::shape(format!(
                "{ctx}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), values, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), values, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), values, req))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let req = self.requires(a);
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let req = self.requires(a);
        self.push(Op::MulScalar(a, c), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        let req = self.requires(a);
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|&x| softplus(x)).collect();
        let req = self.requires(a);
        self.push(Op::Softplus(a), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let req = self.requires(a);
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let req = self.requires(a);
        self.push(Op::Log(a), self.nodes[a.0].shape.clone(), values, req)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.requires(a);
        self.push(Op::Clamp(a, lo, hi), self.nodes[a.0].shape.clone(), values, req)
    }

    /// x * sigmoid(x), the gated activation used throughout the blocks.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SageError::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..m {
                for kk in 0..k {
                    let x = av[i * k + kk];
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(SageError::shape(format!("transpose expects a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], out, req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(SageError::shape(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let values = self.nodes[a.0].values.clone();
        let req = self.requires(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), values, req))
    }

    /// Row-wise affine map: `x [r,in] @ w [in,out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mm = self.matmul(x, w)?;
        self.add_row_broadcast(mm, b)
    }

    pub fn add_row_broadcast(&mut self, m: Var, b: Var) -> Result<Var> {
        let (sm, sb) = (&self.nodes[m.0].shape, &self.nodes[b.0].shape);
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(SageError::shape(format!("add_row_broadcast: {sm:?} + {sb:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let mv = &self.nodes[m.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + bv[j];
            }
        }
        let req = self.requires(m) || self.requires(b);
        Ok(self.push(Op::AddRowBroadcast { m, b }, vec![r, c], out, req))
    }

    // ── Pooling / resampling / reshaping between layouts ───────────

    /// Mean over all non-channel positions: `[c,h,w] -> [c]` or `[t,d] -> [d]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        let av = &self.nodes[a.0].values;
        let (out_dim, values) = match s.as_slice() {
            [c, h, w] => {
                let hw = h * w;
                if hw == 0 {
                    return Err(SageError::contract("mean_pool: zero spatial extent"));
                }
                let mut out = vec![0.0; *c];
                for ic in 0..*c {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += av[ic * hw + p];
                    }
                    out[ic] = acc / hw as f64;
                }
                (*c, out)
            }
            [t, d] => {
                if *t == 0 {
                    return Err(SageError::contract("mean_pool: zero token count"));
                }
                let mut out = vec![0.0; *d];
                for row in 0..*t {
                    for j in 0..*d {
                        out[j] += av[row * d + j];
                    }
                }
                for v in out.iter_mut() {
                    *v /= *t as f64;
                }
                (*d, out)
            }
            _ => return Err(SageError::shape(format!("mean_pool expects rank 2 or 3, got {s:?}"))),
        };
        let req = self.requires(a);
        Ok(self.push(Op::MeanPool(a), vec![out_dim], values, req))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        let [ci, h, wd] = sx[..] else {
            return Err(SageError::shape(format!("conv3x3 input {sx:?}")));
        };
        let [co, wci, kh, kw] = sw[..] else {
            return Err(SageError::shape(format!("conv3x3 kernel {sw:?}")));
        };
        if wci != ci || kh != 3 || kw != 3 || sb != [co] {
            return Err(SageError::shape(format!(
                "conv3x3: input {sx:?}, kernel {sw:?}, bias {sb:?}"
            )));
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; co * h * wd];
        for oc in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bv[oc];
                    for ic in 0..ci {
                        for ky in 0..3usize {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            for kx in 0..3usize {
                                let ix = xx + kx;
                                if ix < 1 || ix > wd {
                                    continue;
                                }
                                let ix = ix - 1;
                                acc += xv[(ic * h + iy) * wd + ix]
                                    * wv[((oc * ci + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(oc * h + y) * wd + xx] = acc;
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Conv3x3 { x, w, b }, vec![co, h, wd], out, req))
    }

    /// Nearest-neighbor 2x upsampling of a `[c,h,w]` map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let [c, h, w] = self.nodes[a.0].shape[..] else {
            return Err(SageError::shape("upsample2x expects [c,h,w]"));
        };
        let av = &self.nodes[a.0].values;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ic in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ic * oh + y) * ow + x] = av[(ic * h + y / 2) * w + x / 2];
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Upsample2x(a), vec![c, oh, ow], out, req))
    }

    /// Nearest-neighbor 2x downsampling (top-left of each 2x2 cell).
    pub fn downsample2x(&mut self, a: Var) -> Result<Var> {
        let [c, h, w] = self.nodes[a.0].shape[..] else {
            return Err(SageError::shape("downsample2x expects [c,h,w]"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SageError::shape(format!("downsample2x: odd extents [{c},{h},{w}]")));
        }
        let av = &self.nodes[a.0].values;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ic in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ic * oh + y) * ow + x] = av[(ic * h + 2 * y) * w + 2 * x];
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Downsample2x(a), vec![c, oh, ow], out, req))
    }

    /// Non-overlapping p x p patch extraction: `[c,h,w] -> [T, c*p*p]` with
    /// T = (h/p)*(w/p). Tokens in raster order; within a token, channels
    /// vary slowest and patch cells are row-major.
    pub fn patchify(&mut self, a: Var, p: usize) -> Result<Var> {
        let [c, h, w] = self.nodes[a.0].shape[..] else {
            return Err(SageError::shape("patchify expects [c,h,w]"));
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(SageError::config(format!(
                "patchify: grid {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let d = c * p * p;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; t * d];
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = ty * gw + tx;
                for ic in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            out[tok * d + (ic * p + py) * p + px] =
                                av[(ic * h + ty * p + py) * w + tx * p + px];
                        }
                    }
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Patchify { x: a, p }, vec![t, d], out, req))
    }

    /// Inverse of [`Tape::patchify`]: `[T, c*p*p] -> [c,h,w]`.
    pub fn unpatchify(&mut self, a: Var, p: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 || p == 0 || h % p != 0 || w % p != 0 {
            return Err(SageError::shape(format!("unpatchify: {s:?} -> [{c},{h},{w}] p={p}")));
        }
        let (gh, gw) = (h / p, w / p);
        if s[0] != gh * gw || s[1] != c * p * p {
            return Err(SageError::shape(format!(
                "unpatchify: {s:?} incompatible with [{c},{h},{w}] at p={p}"
            )));
        }
        let d = c * p * p;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; c * h * w];
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = ty * gw + tx;
                for ic in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            out[(ic * h + ty * p + py) * w + tx * p + px] =
                                av[tok * d + (ic * p + py) * p + px];
                        }
                    }
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Unpatchify { x: a, p }, vec![c, h, w], out, req))
    }

    // ── Normalization and softmax ───────────────────────────────────

    /// Per-row layer normalization of `[t,d]` with learnable gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(SageError::shape(format!("layer_norm expects [t,d], got {s:?}")));
        }
        let (t, d) = (s[0], s[1]);
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(SageError::shape("layer_norm: gain/shift must be [d]"));
        }
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut out = vec![0.0; t * d];
        for row in 0..t {
            let xs = &xv[row * d..(row + 1) * d];
            let mu = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[row * d + j] = gv[j] * ((xs[j] - mu) * inv) + bv[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, vec![t, d], out, req))
    }

    /// Full softmax applied to each row of a matrix, max-stabilized.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(SageError::shape(format!("softmax_rows expects [r,c], got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let xs = &av[row * c..(row + 1) * c];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (xs[j] - m).exp();
                out[row * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[row * c + j] /= sum;
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::SoftmaxRows(a), vec![r, c], out, req))
    }

    /// Softmax over a subset of a vector's entries; all other outputs are
    /// exactly zero. Selected outputs sum to 1 up to rounding.
    pub fn softmax_over(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 1 {
            return Err(SageError::shape(format!("softmax_over expects a vector, got {s:?}")));
        }
        if indices.is_empty() {
            return Err(SageError::contract("softmax_over: empty index set"));
        }
        let n = s[0];
        if indices.iter().any(|&i| i >= n) {
            return Err(SageError::contract("softmax_over: index out of bounds"));
        }
        let av = &self.nodes[a.0].values;
        let m = indices.iter().map(|&i| av[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; n];
        let mut sum = 0.0;
        for &i in indices {
            let e = (av[i] - m).exp();
            out[i] = e;
            sum += e;
        }
        for &i in indices {
            out[i] /= sum;
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::SoftmaxOver { x: a, indices: indices.to_vec() },
            vec![n],
            out,
            req,
        ))
    }

    // ── Structural ──────────────────────────────────────────────────

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let ([c1, h1, w1], [c2, h2, w2]) = (&sa[..], &sb[..]) else {
            return Err(SageError::shape(format!("concat_channels: {sa:?} + {sb:?}")));
        };
        if h1 != h2 || w1 != w2 {
            return Err(SageError::shape(format!("concat_channels: {sa:?} + {sb:?}")));
        }
        let mut values = self.nodes[a.0].values.clone();
        values.extend_from_slice(&self.nodes[b.0].values);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::ConcatChannels(a, b), vec![c1 + c2, *h1, *w1], values, req))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        let req = self.requires(a);
        self.push(Op::Sum(a), vec![1], vec![total], req)
    }

    /// Select entries of a vector: `out[k] = x[indices[k]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 1 {
            return Err(SageError::shape(format!("gather expects a vector, got {s:?}")));
        }
        if indices.iter().any(|&i| i >= s[0]) {
            return Err(SageError::contract("gather: index out of bounds"));
        }
        let av = &self.nodes[a.0].values;
        let values = indices.iter().map(|&i| av[i]).collect();
        let req = self.requires(a);
        Ok(self.push(
            Op::Gather { x: a, indices: indices.to_vec() },
            vec![indices.len()],
            values,
            req,
        ))
    }

    /// Multiply every entry of `x` by the `[1]` tensor `s`.
    pub fn mul_scalar_t(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(SageError::shape("mul_scalar_t: scale must be [1]"));
        }
        let c = self.nodes[s.0].values[0];
        let values = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Op::MulScalarT { x, s }, self.nodes[x.0].shape.clone(), values, req))
    }

    /// Divide every entry of `x` by the `[1]` tensor `s`.
    pub fn div_scalar_t(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(SageError::shape("div_scalar_t: divisor must be [1]"));
        }
        let c = self.nodes[s.0].values[0];
        let values = self.nodes[x.0].values.iter().map(|v| v / c).collect();
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Op::DivScalarT { x, s }, self.nodes[x.0].shape.clone(), values, req))
    }

    /// Mean negative log-softmax of the target class over rows.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(SageError::shape(format!(
                "cross_entropy_rows: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (r, c) = (s[0], s[1]);
        if targets.iter().any(|&t| t >= c) {
            return Err(SageError::contract("cross_entropy_rows: target class out of range"));
        }
        let av = &self.nodes[logits.0].values;
        let mut total = 0.0;
        for row in 0..r {
            let xs = &av[row * c..(row + 1) * c];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - xs[targets[row]];
        }
        let req = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
            vec![1],
            vec![total / r as f64],
            req,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills per-node gradients; fetch
    /// them with [`Tape::grad`] or merge parameter gradients with
    /// [`Tape::accumulate_param_grads`]. A second call restarts from zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(SageError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if self.grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = std::mem::take(&mut self.grads[idx]);
            self.apply_backward(idx, &op, &g);
            self.grads[idx] = g;
        }
        Ok(())
    }

    fn apply_backward(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(*a) {
                    for (d, s) in self.grads[a.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.requires(*b) {
                    for (d, s) in self.grads[b.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    for (d, s) in self.grads[a.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.requires(*b) {
                    for (d, s) in self.grads[b.0].iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        self.grads[a.0][i] += g[i] * self.nodes[b.0].values[i];
                    }
                }
                if self.requires(*b) {
                    for i in 0..g.len() {
                        self.grads[b.0][i] += g[i] * self.nodes[a.0].values[i];
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.requires(*a) {
                    for (d, s) in self.grads[a.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::MulScalar(a, c) => {
                if self.requires(*a) {
                    for (d, s) in self.grads[a.0].iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.requires(*a) {
                    // da = g . b^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * self.nodes[b.0].values[kk * n + j];
                            }
                            self.grads[a.0][i * k + kk] += acc;
                        }
                    }
                }
                if self.requires(*b) {
                    // db = a^T . g
                    for kk in 0..k {
                        for i in 0..m {
                            let x = self.nodes[a.0].values[i * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                self.grads[b.0][kk * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.requires(*a) {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            self.grads[a.0][i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.requires(*a) {
                    for (d, s) in self.grads[a.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        let y = self.nodes[idx].values[i];
                        self.grads[a.0][i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Softplus(a) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        self.grads[a.0][i] += g[i] * sigmoid(self.nodes[a.0].values[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        self.grads[a.0][i] += g[i] * self.nodes[idx].values[i];
                    }
                }
            }
            Op::Log(a) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        self.grads[a.0][i] += g[i] / self.nodes[a.0].values[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.requires(*a) {
                    for i in 0..g.len() {
                        let x = self.nodes[a.0].values[i];
                        if x >= *lo && x <= *hi {
                            self.grads[a.0][i] += g[i];
                        }
                    }
                }
            }
            Op::MeanPool(a) => {
                if self.requires(*a) {
                    match self.nodes[a.0].shape.as_slice() {
                        [c, h, w] => {
                            let hw = h * w;
                            let scale = 1.0 / hw as f64;
                            for ic in 0..*c {
                                let gi = g[ic] * scale;
                                for p in 0..hw {
                                    self.grads[a.0][ic * hw + p] += gi;
                                }
                            }
                        }
                        [t, d] => {
                            let scale = 1.0 / *t as f64;
                            for row in 0..*t {
                                for j in 0..*d {
                                    self.grads[a.0][row * d + j] += g[j] * scale;
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let [ci, h, wd] = self.nodes[x.0].shape[..] else { unreachable!() };
                let co = self.nodes[w.0].shape[0];
                for oc in 0..co {
                    for y in 0..h {
                        for xx in 0..wd {
                            let go = g[(oc * h + y) * wd + xx];
                            if go == 0.0 {
                                continue;
                            }
                            if self.requires(*b) {
                                self.grads[b.0][oc] += go;
                            }
                            for ic in 0..ci {
                                for ky in 0..3usize {
                                    let iy = y + ky;
                                    if iy < 1 || iy > h {
                                        continue;
                                    }
                                    let iy = iy - 1;
                                    for kx in 0..3usize {
                                        let ix = xx + kx;
                                        if ix < 1 || ix > wd {
                                            continue;
                                        }
                                        let ix = ix - 1;
                                        let xi = (ic * h + iy) * wd + ix;
                                        let wi = ((oc * ci + ic) * 3 + ky) * 3 + kx;
                                        if self.requires(*x) {
                                            self.grads[x.0][xi] += go * self.nodes[w.0].values[wi];
                                        }
                                        if self.requires(*w) {
                                            self.grads[w.0][wi] += go * self.nodes[x.0].values[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                if self.requires(*a) {
                    let [c, h, w] = self.nodes[a.0].shape[..] else { unreachable!() };
                    let (oh, ow) = (2 * h, 2 * w);
                    for ic in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                self.grads[a.0][(ic * h + y / 2) * w + x / 2] +=
                                    g[(ic * oh + y) * ow + x];
                            }
                        }
                    }
                }
            }
            Op::Downsample2x(a) => {
                if self.requires(*a) {
                    let [c, h, w] = self.nodes[a.0].shape[..] else { unreachable!() };
                    let (oh, ow) = (h / 2, w / 2);
                    for ic in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                self.grads[a.0][(ic * h + 2 * y) * w + 2 * x] +=
                                    g[(ic * oh + y) * ow + x];
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, p } => {
                if self.requires(*x) {
                    let [c, h, w] = self.nodes[x.0].shape[..] else { unreachable!() };
                    let (gh, gw) = (h / p, w / p);
                    let d = c * p * p;
                    for ty in 0..gh {
                        for tx in 0..gw {
                            let tok = ty * gw + tx;
                            for ic in 0..c {
                                for py in 0..*p {
                                    for px in 0..*p {
                                        self.grads[x.0][(ic * h + ty * p + py) * w + tx * p + px] +=
                                            g[tok * d + (ic * p + py) * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Unpatchify { x, p } => {
                if self.requires(*x) {
                    let [c, h, w] = self.nodes[idx].shape[..] else { unreachable!() };
                    let (gh, gw) = (h / p, w / p);
                    let d = c * p * p;
                    for ty in 0..gh {
                        for tx in 0..gw {
                            let tok = ty * gw + tx;
                            for ic in 0..c {
                                for py in 0..*p {
                                    for px in 0..*p {
                                        self.grads[x.0][tok * d + (ic * p + py) * p + px] +=
                                            g[(ic * h + ty * p + py) * w + tx * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                for row in 0..t {
                    let xs = &self.nodes[x.0].values[row * d..(row + 1) * d];
                    let mu = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gr = &g[row * d..(row + 1) * d];
                    if self.requires(*beta) {
                        for j in 0..d {
                            self.grads[beta.0][j] += gr[j];
                        }
                    }
                    if self.requires(*gamma) {
                        for j in 0..d {
                            self.grads[gamma.0][j] += gr[j] * ((xs[j] - mu) * inv);
                        }
                    }
                    if self.requires(*x) {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxhat = gr[j] * self.nodes[gamma.0].values[j];
                            let xhat = (xs[j] - mu) * inv;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxhat = gr[j] * self.nodes[gamma.0].values[j];
                            let xhat = (xs[j] - mu) * inv;
                            self.grads[x.0][row * d + j] += inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires(*a) {
                    let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    for row in 0..r {
                        let ys = &self.nodes[idx].values[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..c {
                            self.grads[a.0][row * c + j] += ys[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxOver { x, indices } => {
                if self.requires(*x) {
                    let ys = &self.nodes[idx].values;
                    let dot: f64 = indices.iter().map(|&i| ys[i] * g[i]).sum();
                    for &i in indices {
                        self.grads[x.0][i] += ys[i] * (g[i] - dot);
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].values.len();
                if self.requires(*a) {
                    for i in 0..na {
                        self.grads[a.0][i] += g[i];
                    }
                }
                if self.requires(*b) {
                    let nb = self.nodes[b.0].values.len();
                    for i in 0..nb {
                        self.grads[b.0][i] += g[na + i];
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires(*a) {
                    for d in self.grads[a.0].iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Gather { x, indices } => {
                if self.requires(*x) {
                    for (k, &i) in indices.iter().enumerate() {
                        self.grads[x.0][i] += g[k];
                    }
                }
            }
            Op::MulScalarT { x, s } => {
                let c = self.nodes[s.0].values[0];
                if self.requires(*x) {
                    for i in 0..g.len() {
                        self.grads[x.0][i] += g[i] * c;
                    }
                }
                if self.requires(*s) {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * self.nodes[x.0].values[i];
                    }
                    self.grads[s.0][0] += acc;
                }
            }
            Op::DivScalarT { x, s } => {
                let c = self.nodes[s.0].values[0];
                if self.requires(*x) {
                    for i in 0..g.len() {
                        self.grads[x.0][i] += g[i] / c;
                    }
                }
                if self.requires(*s) {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * self.nodes[x.0].values[i];
                    }
                    self.grads[s.0][0] += -acc / (c * c);
                }
            }
            Op::AddRowBroadcast { m, b } => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                if self.requires(*m) {
                    for i in 0..r * c {
                        self.grads[m.0][i] += g[i];
                    }
                }
                if self.requires(*b) {
                    for i in 0..r {
                        for j in 0..c {
                            self.grads[b.0][j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if self.requires(*logits) {
                    let (r, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let scale = g[0] / r as f64;
                    for row in 0..r {
                        let xs = &self.nodes[logits.0].values[row * c..(row + 1) * c];
                        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
                        for j in 0..c {
                            let p = (xs[j] - m).exp() / sum;
                            let y = if j == targets[row] { 1.0 } else { 0.0 };
                            self.grads[logits.0][row * c + j] += scale * (p - y);
                        }
                    }
                }
            }
        }
    }

    /// Merge this tape's parameter gradients into an accumulator.
    pub fn accumulate_param_grads(&self, acc: &mut Gradients) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                if let Some(g) = self.grads.get(i) {
                    if !g.is_empty() {
                        acc.add(id, g);
                    }
                }
            }
        }
    }
}
