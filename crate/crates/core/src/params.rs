//! Named parameter registry shared by the denoiser, text encoder, and
//! mask head. Insertion order is the canonical order for checkpoint
//! serialization, optimizer state, and graph registration.

use crate::autodiff::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

/// Stable handle to one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Register a matrix initialized from N(0, std^2).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        self.add(name, value)
    }

    /// Register an all-zeros tensor.
    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Iterate (name, tensor) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count restricted to names with the given prefix.
    pub fn scalar_count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Register every parameter as a graph input, in store order. The
    /// returned vector is indexed by `ParamId`.
    pub fn register_all(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|v| g.input(v.clone())).collect()
    }
}

/// Adam optimizer over a `ParamStore`, with first/second-moment state in
/// store order and optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = store
            .values
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment tensors in store order, for checkpointing.
    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restore moments saved by `state`. Shapes must match the store.
    pub fn restore(&mut self, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "adam state length mismatch");
        assert_eq!(v.len(), self.v.len(), "adam state length mismatch");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.shape(), b.shape(), "adam state shape mismatch");
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// One update. `grads[i]` pairs with store parameter `i`; a missing
    /// gradient is treated as zero. `clip` bounds the global grad norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        clip: Option<f64>,
    ) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let mut scale = 1.0;
        if let Some(max_norm) = clip {
            let sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = &mut store.values[i];
            assert_eq!(grad.shape(), p.shape(), "gradient shape mismatch at {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
