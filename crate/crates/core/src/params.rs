//! Named parameter storage, keyed initialization, and the Adam optimizer.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Ordered map from parameter name to value.
///
/// Initial values are a pure function of `(seed, name)`, so two models that
/// share a parameter name start from identical values regardless of which
/// other parameter groups exist.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Mat>,
}

/// Deterministic RNG keyed by a seed and a string.
pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    /// Normal-ish (sum of uniforms) with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, seed: u64, name: &str, rows: usize, cols: usize, init: Init) {
        let value = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::filled(rows, cols, 1.0),
            Init::XavierUniform => {
                let mut rng = keyed_rng(seed, name);
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
            }
            Init::Normal(std) => {
                let mut rng = keyed_rng(seed, name);
                // Irwin-Hall with 12 terms has unit variance.
                Mat::from_fn(rows, cols, |_, _| {
                    let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                    (s - 6.0) * std
                })
            }
        };
        self.params.insert(name.to_string(), value);
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.params.get(name).ok_or_else(|| Error::InvalidArgument {
            arg: "param",
            reason: format!("no parameter named `{name}`"),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Overwrites an existing parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::InvalidArgument {
            arg: "param",
            reason: format!("no parameter named `{name}`"),
        })?;
        if slot.shape() != value.shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, m) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                *m = Mat::zeros(m.rows(), m.cols());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    /// Binds a parameter into a graph.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: IndexMap<String, Mat>,
    pub v: IndexMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads` that passes `trainable`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Mat>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if self.weight_decay > 0.0 {
                    *pi -= self.lr * self.weight_decay * *pi;
                }
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|m| m.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for m in grads.values_mut() {
            for v in m.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_init_is_independent_of_insertion_order() {
        let mut a = ParamStore::new();
        a.init(7, "x", 3, 2, Init::XavierUniform);
        a.init(7, "y", 2, 2, Init::Normal(0.1));
        let mut b = ParamStore::new();
        b.init(7, "y", 2, 2, Init::Normal(0.1));
        b.init(7, "x", 3, 2, Init::XavierUniform);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_eq!(a.get("y").unwrap(), b.get("y").unwrap());
        let mut c = ParamStore::new();
        c.init(8, "x", 3, 2, Init::XavierUniform);
        assert_ne!(a.get("x").unwrap(), c.get("x").unwrap());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Mat::filled(1, 2, 1.0));
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Mat::row_vector(&[1.0, -1.0]));
        let mut opt = Adam::new(0.1, 0.0);
        opt.update(&mut s, &grads, |_| true);
        let w = s.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) - 1.1).abs() < 1e-6);
        opt.update(&mut s, &grads, |n| n != "w");
        assert!((s.get("w").unwrap().get(0, 0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Mat::row_vector(&[3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads["a"].get(0, 0) - 0.6).abs() < 1e-12);
    }
}
