use crate::diffcore::param::{ParamId, ParamStore};
use crate::diffcore::real::{cst, Real};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and a learning rate per parameter.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    lr: Vec<f64>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    /// Builds optimizer state for every parameter of `store`, with learning
    /// rates chosen by `lr_for(id, name)`.
    pub fn new(store: &ParamStore<S>, mut lr_for: impl FnMut(ParamId, &str) -> f64) -> Result<Self> {
        let mut lr = Vec::with_capacity(store.len());
        for (id, node) in store.iter() {
            let rate = lr_for(id, node.name);
            check_lr(rate)?;
            lr.push(rate);
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            lr,
            m: store.iter().map(|(_, n)| Tensor::zeros(n.value.shape().to_vec())).collect(),
            v: store.iter().map(|(_, n)| Tensor::zeros(n.value.shape().to_vec())).collect(),
        })
    }

    pub fn with_uniform_lr(store: &ParamStore<S>, lr: f64) -> Result<Self> {
        Self::new(store, |_, _| lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self, id: ParamId) -> f64 {
        self.lr[id.0]
    }

    pub fn set_lr(&mut self, id: ParamId, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr[id.0] = lr;
        Ok(())
    }

    /// Multiplies every learning rate by `factor`.
    pub fn scale_lr(&mut self, factor: f64) -> Result<()> {
        for lr in &mut self.lr {
            check_lr(*lr * factor)?;
            *lr *= factor;
        }
        Ok(())
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<S> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<S> {
        &self.v[id.0]
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cst::<S>(self.beta1), cst::<S>(self.beta2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let eps = cst::<S>(self.eps);
        let trainable: Vec<bool> = store.ids().map(|id| store.is_trainable(id)).collect();
        let (values, grads) = store.values_and_grads_mut();
        for i in 0..values.len() {
            if !trainable[i] {
                continue;
            }
            let lr = cst::<S>(self.lr[i]);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (k, p) in values[i].data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// Restores step counter and moments saved by [`Adam::moments`].
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
        }
        for (new, old) in m.iter().chain(&v).zip(self.m.iter().chain(&self.v)) {
            if new.shape() != old.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam restore",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("learning rate must be positive, got {lr}")))
    }
}
