//! Named parameter collections, graph binding, layer helpers and Adam.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over every name, shape and value, in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            t.feed_hash(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor as a graph leaf: trainable, or a constant when
    /// the group is frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Sets every value to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Parameter names mapped to graph nodes for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and bias for a
/// square-kernel convolution named `name`.
pub fn init_conv(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, kernel: usize) {
    let fan_in = (cin * kernel * kernel) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let w = (0..cout * cin * kernel * kernel)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let b = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
    ps.insert(format!("{name}.weight"), Tensor::from_parts(vec![cout, cin, kernel, kernel], w));
    ps.insert(format!("{name}.bias"), Tensor::from_parts(vec![cout], b));
}

/// Convolution using `{name}.weight` / `{name}.bias`; kernel size comes from
/// the weight shape and padding keeps "same" geometry for odd kernels when
/// `stride == 1`.
pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let k = g.shape(w)[2];
    let pad = if k == stride { 0 } else { k / 2 };
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor of `params` using the gradients of
    /// the nodes in `bound`. Tensors without a gradient path get a zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            let var = bound.get(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let grad = grads.get(var);
            for i in 0..value.len() {
                let gi = grad.map_or(0.0, |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g, true);
            let x = b.get("x").unwrap();
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut ps, &b, &grads).unwrap();
        }
        assert!(ps.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut g = Graph::new();
        let b = ps.bind(&mut g, true);
        let x = b.get("x").unwrap();
        let loss = g.sum(x);
        let grads = g.backward(loss);
        let mut opt = Adam::new(1e-4);
        opt.step(&mut ps, &b, &grads).unwrap();
        assert!((ps.get("x").unwrap().item() - (1.0 - 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn hash_tracks_values_and_names() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::full(&[2], 1.0));
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.get_mut("w").unwrap().data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(a.content_hash(), b.content_hash());
        let mut c = ParamSet::new();
        c.insert("v", Tensor::full(&[2], 1.0));
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
