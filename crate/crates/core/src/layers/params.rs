use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(−a, a)` with `a = sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// First exit whose output depends on this parameter (1-based).
    pub exit: usize,
}

/// Named parameter collection, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// 64-bit FNV-1a; keys per-parameter initialization streams by name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total element count of parameters tagged with exit `≤ exit`.
    pub fn count_up_to(&self, exit: usize) -> usize {
        self.params.iter().filter(|p| p.exit <= exit).map(|p| p.tensor.numel()).sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    exit: p.exit,
                })
                .collect(),
        }
    }
}

/// Registers parameters while an architecture is being assembled.
pub struct Registry<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    /// Exit tag given to newly registered parameters.
    pub exit: usize,
}

impl<'a, T: Scalar> Registry<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed, exit: 1 }
    }

    /// Values depend only on `(seed, name)`, so equally named parameters in
    /// different architectures start identical.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.store.find(name).is_none(), "duplicate parameter {name}");
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            }
        };
        self.store.params.push(Param {
            name: name.to_string(),
            tensor,
            exit: self.exit,
        });
        ParamId(self.store.params.len() - 1)
    }
}

/// One forward pass: a graph, the parameters it reads, and train-mode noise.
///
/// Parameters are bound to graph leaves on first use, so layers that are
/// never evaluated (blocks above an early exit) never enter the graph.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            params,
            bound: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Uses caller-provided leaves for every parameter, in store order.
    pub fn with_bindings(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), params.len(), "one binding per parameter");
        Self {
            graph,
            params,
            bound: vars.iter().copied().map(Some).collect(),
            dropout: None,
        }
    }

    /// Enables dropout with probability `p`, masks drawn from `seed`.
    pub fn train_mode(mut self, p: f64, seed: u64) -> Self {
        self.dropout = (p > 0.0).then(|| (p, ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.params.get(id).tensor.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some((p, rng)) => self.graph.dropout(x, *p, rng),
            None => x,
        }
    }

    /// Parameters that entered the graph, with their gradients.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<T>) -> Vec<(ParamId, &'g [T])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let mut ra = Registry::new(&mut a, 5);
        ra.register("x", &[3], Init::Uniform { fan_in: 4 });
        let ida = ra.register("y", &[4], Init::Uniform { fan_in: 4 });
        let idb = Registry::new(&mut b, 5).register("y", &[4], Init::Uniform { fan_in: 4 });
        assert_eq!(a.get(ida).tensor, b.get(idb).tensor);
        assert!(a.get(ida).tensor.data().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn counts_by_exit() {
        let mut s = ParamStore::<f64>::new();
        let mut r = Registry::new(&mut s, 0);
        r.register("a", &[2, 3], Init::Zeros);
        r.exit = 2;
        r.register("b", &[4], Init::Ones);
        assert_eq!(s.count_up_to(1), 6);
        assert_eq!(s.count_up_to(2), 10);
        assert_eq!(s.total(), 10);
    }
}
