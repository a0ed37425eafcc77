use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::{Gradients, ParamStore, Scalar};

/// Applies one update to every parameter that has a gradient.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()>;
}

fn check_shapes<T: Scalar>(params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(TensorError::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// `p <- p - lr * g` for every parameter named in `grads`.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(TensorError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    check_shapes(params, grads)?;
    let lr = T::from_f64(lr);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(p, &g)| *p = *p - lr * g);
    }
    Ok(())
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        sgd_step(params, grads, self.lr)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for Adam {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        check_shapes(params, grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p = T::from_f64(p.as_f64() - upd);
            }
        }
        Ok(())
    }
}
