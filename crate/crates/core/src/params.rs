//! Named parameter storage, initialization and per-evaluation binding.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Flat, ordered table of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a `normal(0, std)` parameter drawn from `init`'s stream for `name`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        init: &Init,
        shape: impl Into<Vec<usize>>,
        std: f64,
    ) -> ParamId {
        let name = name.into();
        let value = init.normal(&name, shape, std);
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(_, n, _)| pred(n))
            .map(|(_, _, v)| v.numel())
            .sum()
    }

    /// Binds every parameter as a leaf of `tape`, in id order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(ParamId(i), v))
            .collect()
    }
}

/// Seeded parameter initializer.
///
/// Every parameter draws from its own stream keyed by `(seed, name)`, so a
/// value does not depend on which other parameters were created before it.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, folded into the seed
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h.rotate_left(17))
    }

    /// Samples from `normal(0, std)` on the stream of `name`.
    pub fn normal(&self, name: &str, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut rng = self.stream(name);
        let dist = Normal::new(0.0, std).unwrap_or_else(|_| Normal::new(0.0, 1.0).unwrap());
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("element count matches shape")
    }
}

/// Standard deviation used for every weight matrix and per-dim scale.
pub const INIT_STD: f64 = 0.02;

/// Parameters bound to one tape for one evaluation.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    vars: Vec<Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &ParamStore) -> Self {
        Self {
            tape,
            vars: store.bind(tape),
        }
    }

    /// Binds explicitly supplied values (one per parameter id).
    pub fn from_vars(tape: &'a Tape, vars: Vec<Var>) -> Self {
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
