use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<R = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first: Vec<Vec<R>>,
    second: Vec<Vec<R>>,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::default(), learning_rate)
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_buffers(&mut self, store: &ParamStore<R>) {
        if self.first.len() == store.len() {
            return;
        }
        self.first = store
            .iter()
            .map(|(_, _, t)| vec![R::zero(); t.numel()])
            .collect();
        self.second = self.first.clone();
    }

    /// Applies one update from the gradients held in `store`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<()> {
        if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad.is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        self.ensure_buffers(store);
        let t = self.step_count + 1;
        let lr = self.learning_rate;
        for (i, (_, p)) in store.tensors_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let mu = R::of(momentum);
                    for ((w, &g), m) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *m = mu * *m + g;
                        *w -= R::of(lr) * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let (b1, b2) = (R::of(beta1), R::of(beta2));
                    let c1 = R::of(1.0 - beta1.powi(t as i32));
                    let c2 = R::of(1.0 - beta2.powi(t as i32));
                    let (lr, eps) = (R::of(lr), R::of(eps));
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = b1 * m[j] + (R::one() - b1) * g;
                        v[j] = b2 * v[j] + (R::one() - b2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        self.step_count = t;
        Ok(())
    }

    /// Moment buffers and step counter as named tensors for checkpointing.
    pub fn export(&self, store: &ParamStore<R>) -> Vec<(String, Tensor<R>)> {
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::scalar(R::of(self.step_count as f64)),
        )];
        if self.first.len() == store.len() {
            for (i, (_, name, t)) in store.iter().enumerate() {
                let shape = t.shape().to_vec();
                out.push((
                    format!("optim.m.{name}"),
                    Tensor::new(shape.clone(), self.first[i].clone()).expect("buffer shape"),
                ));
                out.push((
                    format!("optim.v.{name}"),
                    Tensor::new(shape, self.second[i].clone()).expect("buffer shape"),
                ));
            }
        }
        out
    }

    /// Restores state written by [`OptimizerState::export`].
    pub fn import(
        &mut self,
        store: &ParamStore<R>,
        lookup: impl Fn(&str) -> Option<Tensor<R>>,
    ) -> Result<()> {
        let step = lookup("optim.step")
            .ok_or_else(|| TensorError::Checkpoint("missing optim.step".into()))?
            .item()?;
        self.step_count = step.as_f64() as u64;
        if self.step_count == 0 {
            self.first.clear();
            self.second.clear();
            return Ok(());
        }
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            for (key, dst) in [("m", &mut first), ("v", &mut second)] {
                let buf = lookup(&format!("optim.{key}.{name}")).ok_or_else(|| {
                    TensorError::Checkpoint(format!("missing optim.{key}.{name}"))
                })?;
                if buf.shape() != t.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "optimizer import",
                        lhs: t.shape().to_vec(),
                        rhs: buf.shape().to_vec(),
                    });
                }
                dst.push(buf.into_data());
            }
        }
        self.first = first;
        self.second = second;
        Ok(())
    }
}
