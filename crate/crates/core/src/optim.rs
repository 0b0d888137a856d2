//! Named parameter store and the gradient-ascent optimizer with
//! per-parameter first/second-moment scaling (Adam-style, applied to a
//! minimized loss).

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Iteration order is the sorted name order, so
/// updates and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamStore { params: entries.into_iter().collect() }
    }

    /// Uniform(-scale, scale) initialized parameter.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut impl Rng) {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        self.insert(name, Tensor::new(shape, data).expect("shape/data consistent"));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Register every parameter as a leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        ParamBinding { vars }
    }
}

/// Tape handles for one forward pass over a bound parameter store.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {:?} not bound", name))
    }

    /// Collect gradients after `tape.backward`, zeros for untouched params.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &var)| (name.clone(), tape.grad_or_zero(var)))
            .collect()
    }
}

/// Sum per-example gradient maps in a fixed order (bit-exact regardless of
/// how the examples were computed).
pub fn sum_grads(parts: &[BTreeMap<String, Tensor>]) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    out
}

/// First/second-moment adaptive update. `step` minimizes the given loss
/// gradient (training code passes the gradient of a minimized objective).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

}
