//! Named parameter stores, the adaptive optimizer, and the shared store used
//! by asynchronous workers.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, RwLock};

use super::layer::Sequential;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type Grads = BTreeMap<String, Tensor>;

/// Versioned `name → tensor` map. Only [`apply_update`] bumps the version.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    /// Merge another set, keeping names unique.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    pub fn checksums(&self) -> BTreeMap<String, u64> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.checksum())).collect()
    }
}

/// A model made of one or more layer chains.
pub trait Network {
    fn modules(&self) -> Vec<&Sequential>;
    fn modules_mut(&mut self) -> Vec<&mut Sequential>;

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for m in self.modules() {
            for l in &m.layers {
                for (name, t) in l.param_names().into_iter().zip(&l.params) {
                    p.insert(name, t.clone()).expect("parameter names are unique");
                }
            }
        }
        p
    }

    /// Copy values from `params`; every parameter of the network must be present.
    fn load(&mut self, params: &ParamSet) -> Result<()> {
        for m in self.modules_mut() {
            for l in &mut m.layers {
                for (name, t) in l.param_names().into_iter().zip(l.params.iter_mut()) {
                    let src = params.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                    if src.shape() != t.shape() {
                        return Err(Error::Shape {
                            layer: name,
                            expected: t.shape().to_vec(),
                            got: src.shape().to_vec(),
                        });
                    }
                    t.data_mut().copy_from_slice(src.data());
                }
            }
        }
        Ok(())
    }

    fn grads(&self) -> Grads {
        let mut g = Grads::new();
        for m in self.modules() {
            for l in &m.layers {
                for (name, t) in l.param_names().into_iter().zip(&l.grads) {
                    g.insert(name, t.clone());
                }
            }
        }
        g
    }

    fn zero_grads(&mut self) {
        for m in self.modules_mut() {
            m.zero_grads();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    RmsProp { lr: f64, decay: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::RmsProp {
            lr: 7e-4,
            decay: 0.99,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    accumulators: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.accumulators.get(name)
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.kind {
            OptimizerKind::RmsProp { lr, .. } | OptimizerKind::Sgd { lr } => *lr = new_lr,
        }
    }
}

/// One optimizer step: `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − lr·g/√(acc+ε)`
/// (or plain SGD). Grads are zeroed and the version incremented. A non-finite
/// gradient rejects the whole update and leaves everything untouched.
pub fn apply_update(params: &mut ParamSet, grads: &mut Grads, opt: &mut OptimizerState) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.entries.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                layer: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    for (name, g) in grads.iter_mut() {
        let p = params.entries.get_mut(name).unwrap();
        match opt.kind {
            OptimizerKind::Sgd { lr } => {
                for (t, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *t -= lr * gv;
                }
            }
            OptimizerKind::RmsProp { lr, decay, eps } => {
                let acc = opt
                    .accumulators
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                for ((t, a), gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                    *a = decay * *a + (1.0 - decay) * gv * gv;
                    *t -= lr * gv / (*a + eps).sqrt();
                }
            }
        }
        g.fill(0.0);
    }
    params.version += 1;
    Ok(())
}

/// Single-owner parameters plus optimizer state, for sequential training.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: ParamSet,
    pub opt: OptimizerState,
}

impl Learner {
    pub fn new(params: ParamSet, kind: OptimizerKind) -> Self {
        Self {
            params,
            opt: OptimizerState::new(kind),
        }
    }

    /// Apply `grads` and copy the updated values back into `net`.
    pub fn step<N: Network>(&mut self, net: &mut N, grads: &mut Grads) -> Result<()> {
        apply_update(&mut self.params, grads, &mut self.opt)?;
        net.load(&self.params)
    }
}

struct SharedInner {
    params: ParamSet,
    opt: OptimizerState,
    checksums: BTreeMap<String, u64>,
}

/// Parameters shared between workers: consistent snapshot reads, serialized
/// updates. In checked mode every snapshot re-verifies the per-tensor
/// checksums recorded by the last update.
pub struct SharedParams {
    inner: RwLock<SharedInner>,
    step_lock: Mutex<()>,
    checked: bool,
}

impl SharedParams {
    pub fn new(params: ParamSet, opt: OptimizerState, checked: bool) -> Self {
        let checksums = params.checksums();
        Self {
            inner: RwLock::new(SharedInner { params, opt, checksums }),
            step_lock: Mutex::new(()),
            checked,
        }
    }

    pub fn snapshot(&self) -> Result<ParamSet> {
        let inner = self.inner.read().expect("parameter lock poisoned");
        if self.checked {
            verify(&inner)?;
        }
        Ok(inner.params.clone())
    }

    /// Apply gradients computed on a possibly older snapshot. Returns the new version.
    pub fn apply(&self, grads: &mut Grads) -> Result<u64> {
        let mut inner = self.inner.write().expect("parameter lock poisoned");
        if self.checked {
            verify(&inner)?;
        }
        let SharedInner { params, opt, checksums } = &mut *inner;
        apply_update(params, grads, opt)?;
        if self.checked {
            for name in grads.keys() {
                checksums.insert(name.clone(), params.get(name).unwrap().checksum());
            }
        }
        Ok(params.version())
    }

    pub fn version(&self) -> u64 {
        self.inner.read().expect("parameter lock poisoned").params.version()
    }

    pub fn set_lr(&self, lr: f64) {
        self.inner.write().expect("parameter lock poisoned").opt.set_lr(lr);
    }

    pub fn verify(&self) -> Result<()> {
        verify(&self.inner.read().expect("parameter lock poisoned"))
    }

    /// Held across snapshot, gradient and apply in strict-lock mode.
    pub fn step_lock(&self) -> MutexGuard<'_, ()> {
        self.step_lock.lock().expect("step lock poisoned")
    }

    pub fn into_params(self) -> ParamSet {
        self.into_parts().0
    }

    pub fn into_parts(self) -> (ParamSet, OptimizerState) {
        let inner = self.inner.into_inner().expect("parameter lock poisoned");
        (inner.params, inner.opt)
    }
}

fn verify(inner: &SharedInner) -> Result<()> {
    for (name, t) in inner.params.iter() {
        if inner.checksums.get(name) != Some(&t.checksum()) {
            return Err(Error::TornWrite(name.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::vector(vec![v])).unwrap();
        p
    }

    #[test]
    fn zero_grads_leave_params_and_bump_version() {
        let mut p = scalar_set(1.5);
        let mut g = Grads::from([("w".to_string(), Tensor::vector(vec![0.0]))]);
        let mut opt = OptimizerState::new(OptimizerKind::default());
        apply_update(&mut p, &mut g, &mut opt).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
        assert_eq!(p.version(), 1);
    }

    #[test]
    fn rmsprop_single_scalar_step() {
        let mut p = scalar_set(1.0);
        let mut g = Grads::from([("w".to_string(), Tensor::vector(vec![2.0]))]);
        let mut opt = OptimizerState::new(OptimizerKind::RmsProp {
            lr: 0.1,
            decay: 0.0,
            eps: 1e-5,
        });
        apply_update(&mut p, &mut g, &mut opt).unwrap();
        // acc = g², step = lr·g/√(g²+ε) ≈ lr·sign(g)
        let expected = 1.0 - 0.1 * 2.0 / (4.0f64 + 1e-5).sqrt();
        assert_eq!(p.get("w").unwrap().data()[0], expected);
        assert!(p.get("w").unwrap().data()[0] < 1.0);
        assert_eq!(g["w"].data(), &[0.0]);
        assert_eq!(opt.accumulator("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = scalar_set(1.0);
        let mut g = Grads::from([("w".to_string(), Tensor::vector(vec![f64::NAN]))]);
        let mut opt = OptimizerState::new(OptimizerKind::default());
        assert!(matches!(apply_update(&mut p, &mut g, &mut opt), Err(Error::NonFinite(_))));
        assert_eq!(p.version(), 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn rmsprop_descends_a_quadratic_bowl() {
        let mut p = ParamSet::new();
        p.insert("x".into(), Tensor::vector(vec![3.0, -2.0, 0.5])).unwrap();
        let scales = [1.0, 4.0, 0.25];
        let loss = |p: &ParamSet| -> f64 {
            p.get("x").unwrap().data().iter().zip(scales).map(|(x, s)| s * x * x).sum()
        };
        let mut opt = OptimizerState::new(OptimizerKind::RmsProp {
            lr: 0.01,
            decay: 0.99,
            eps: 1e-5,
        });
        let mut prev = loss(&p);
        for _ in 0..100 {
            let x = p.get("x").unwrap().data().to_vec();
            let g: Vec<f64> = x.iter().zip(scales).map(|(x, s)| 2.0 * s * x).collect();
            let mut grads = Grads::from([("x".to_string(), Tensor::vector(g))]);
            apply_update(&mut p, &mut grads, &mut opt).unwrap();
            let l = loss(&p);
            assert!(l < prev, "loss went from {prev} to {l}");
            prev = l;
        }
        assert_eq!(p.version(), 100);
    }

    #[test]
    fn shared_params_checked_mode() {
        let shared = SharedParams::new(scalar_set(1.0), OptimizerState::new(OptimizerKind::Sgd { lr: 0.5 }), true);
        let mut g = Grads::from([("w".to_string(), Tensor::vector(vec![1.0]))]);
        assert_eq!(shared.apply(&mut g).unwrap(), 1);
        let snap = shared.snapshot().unwrap();
        assert_eq!(snap.get("w").unwrap().data(), &[0.5]);
        shared.verify().unwrap();
    }
}
