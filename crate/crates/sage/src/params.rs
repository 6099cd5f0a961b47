//! Central parameter storage.
//!
//! Every learnable tensor lives here exactly once; modules hold `ParamId`s.
//! Fine-grained experts alias backbone blocks simply by holding the same
//! ids, so training through either path mutates the same values.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index into the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Learning-rate / reporting group a parameter belongs to. Each parameter
/// is in exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Full-resolution stem and per-stage stems (projections, patch embed).
    Stem,
    /// Backbone blocks, which double as the fine-grained experts.
    FineExperts,
    SharedExperts,
    Routers,
    Adapters,
    /// Per-layer fusion scalars.
    Fusion,
    /// Decoder stages and segmentation head.
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Stem,
        ParamGroup::FineExperts,
        ParamGroup::SharedExperts,
        ParamGroup::Routers,
        ParamGroup::Adapters,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem",
            ParamGroup::FineExperts => "fine_experts",
            ParamGroup::SharedExperts => "shared_experts",
            ParamGroup::Routers => "routers",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Decoder => "decoder",
        }
    }
}

/// How a parameter is filled at registration time.
pub enum Init {
    Zeros,
    Ones,
    Value(f64),
    /// Rectangular identity (ones on the diagonal of a [rows, cols] matrix,
    /// zeros elsewhere). Square case is the exact identity.
    IdentityExtended,
    /// Uniform in [-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
}

pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Flat, append-only parameter table. Registration order is fixed by the
/// model construction code, which makes initialization, checkpoints and
/// optimizer state deterministic for a given seed.
pub struct ParamStore {
    params: Vec<Param>,
    rng: Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            rng: Rng::derive(seed, &[0x7061_7261_6d73]), // "params" tag
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Value(v) => vec![v; n],
            Init::IdentityExtended => {
                assert_eq!(shape.len(), 2, "identity init needs a matrix");
                let (r, c) = (shape[0], shape[1]);
                let mut v = vec![0.0; n];
                for i in 0..r.min(c) {
                    v[i * c + i] = 1.0;
                }
                v
            }
            Init::GlorotUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.uniform_symmetric(bound)).collect()
            }
            Init::Normal { std } => (0..n).map(|_| self.rng.normal() * std).collect(),
        };
        let tensor = Tensor::with_grad_slot(shape.to_vec(), values);
        self.params.push(Param {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].tensor.values
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Per-parameter gradient accumulator, merged across samples in index order.
pub struct Gradients {
    by_param: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            by_param: store
                .params
                .iter()
                .map(|p| vec![0.0; p.tensor.values.len()])
                .collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        let dst = &mut self.by_param[id.0];
        debug_assert_eq!(dst.len(), g.len());
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.by_param {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.by_param[id.0]
    }
}
