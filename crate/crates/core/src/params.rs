//! Named parameter storage, tape binding and the two optimizers.

use std::cell::RefCell;
use std::collections::BTreeMap;

use autoalign_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.requires_grad = true;
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| AlignError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| AlignError::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.map.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Fully connected layer `in → out` as `{name}.w: [in, out]` and
    /// `{name}.b: [out]`, uniform He initialization.
    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Bias-free projection matrix `[in, out]` with Xavier-uniform scale.
    pub fn init_matrix(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound)));
    }

    /// Convolution `{name}.w: [c_out, c_in, k, k]` and `{name}.b: [c_out]`.
    pub fn init_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize) {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }
}

/// Parameters recorded on one tape, plus the optional dropout stream.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: BTreeMap<String, Var>,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl<'t> Bound<'t> {
    /// Records every parameter as a differentiable leaf.
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        Self {
            tape,
            vars,
            rng: RefCell::new(None),
        }
    }

    /// Records parameters as constants (evaluation).
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| (k.clone(), tape.constant(t.shape(), t.data().to_vec()).expect("stored shapes are valid")))
            .collect();
        Self {
            tape,
            vars,
            rng: RefCell::new(None),
        }
    }

    /// Wraps leaves already recorded on `tape` (finite-difference checks).
    pub fn from_vars(tape: &'t Tape, names: &[String], vars: &[Var]) -> Self {
        Self {
            tape,
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            rng: RefCell::new(None),
        }
    }

    /// Enables stochastic layers (dropout) with the given stream.
    pub fn with_rng(self, rng: ChaCha8Rng) -> Self {
        *self.rng.borrow_mut() = Some(rng);
        self
    }

    pub fn training(&self) -> bool {
        self.rng.borrow().is_some()
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| AlignError::MissingParam(name.into()))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Keep-mask for inverted dropout, or `None` outside training.
    pub fn dropout_mask(&self, n: usize, p: f64) -> Option<Vec<f64>> {
        let mut guard = self.rng.borrow_mut();
        let rng = guard.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        Some((0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect())
    }

    /// `x · W + b` for a layer created by [`ParamStore::init_linear`].
    pub fn linear(&self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    pub fn conv(&self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        Ok(self.tape.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// Gradients of every bound parameter after `backward`; unreachable
    /// parameters get zeros.
    pub fn grads(&self, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let n = store.get(k).map(Tensor::len).unwrap_or(0);
                (k.clone(), self.tape.grad(v).unwrap_or_else(|| vec![0.0; n]))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adamw,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum,
            ..Self::default()
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::Adamw,
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Optimizer state for one group of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates `names` in place from `grads`.
    pub fn step(&mut self, store: &mut ParamStore, names: &[String], grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for n in names {
            if !grads.contains_key(n) {
                return Err(AlignError::MissingGradient(n.clone()));
            }
        }
        self.steps += 1;
        let c = self.cfg;
        for n in names {
            let g = &grads[n];
            let w = store.get_mut(n)?.data_mut();
            if g.len() != w.len() {
                return Err(AlignError::Dimension(format!("gradient for {n} has {} entries, parameter {}", g.len(), w.len())));
            }
            match c.kind {
                OptimKind::Sgd => {
                    let vel = self.m.entry(n.clone()).or_insert_with(|| vec![0.0; w.len()]);
                    for i in 0..w.len() {
                        vel[i] = c.momentum * vel[i] + g[i];
                        w[i] -= c.lr * vel[i];
                    }
                }
                OptimKind::Adamw => {
                    let m = self.m.entry(n.clone()).or_insert_with(|| vec![0.0; w.len()]);
                    let v = self.v.entry(n.clone()).or_insert_with(|| vec![0.0; w.len()]);
                    let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
                    for i in 0..w.len() {
                        w[i] -= c.lr * c.weight_decay * w[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[w.len()], w.to_vec()).unwrap());
        s
    }

    fn grads(g: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), g.to_vec())])
    }

    #[test]
    fn sgd_plain_step() {
        let mut s = store(&[0.0, 0.0]);
        let mut o = Optimizer::new(OptimConfig::sgd(0.1, 0.0));
        o.step(&mut s, &["w".into()], &grads(&[1.0, -2.0])).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] + 0.1).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_hand_formula() {
        let mut s = store(&[0.5, -1.0]);
        let cfg = OptimConfig::adamw(0.01, 0.1);
        let mut o = Optimizer::new(cfg);
        let g = [0.3, -2.0];
        o.step(&mut s, &["w".into()], &grads(&g)).unwrap();
        for (i, &w0) in [0.5f64, -1.0].iter().enumerate() {
            let decayed = w0 - 0.01 * 0.1 * w0;
            // first step: m̂ = g, v̂ = g²
            let expect = decayed - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((s.get("w").unwrap().data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        for cfg in [OptimConfig::adamw(0.1, 0.0), OptimConfig::sgd(0.1, 0.9)] {
            let mut s = store(&[0.7, -0.2]);
            let mut o = Optimizer::new(cfg);
            o.step(&mut s, &["w".into()], &grads(&[0.0, 0.0])).unwrap();
            assert_eq!(s.get("w").unwrap().data(), &[0.7, -0.2]);
        }
    }

    #[test]
    fn step_without_gradient_is_error() {
        let mut s = store(&[1.0]);
        let mut o = Optimizer::new(OptimConfig::default());
        let err = o.step(&mut s, &["w".into()], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, AlignError::MissingGradient(_)));
    }
}
