//! Parameterized layers. Layers hold parameter ids only; the forward pass is
//! generic over the scalar type so the same wiring runs in f32 for training
//! and in f64 for finite-difference checks.

use pointfuse_tensor::{ParamId, ParamStore, Real, Tape, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert_linear_weight(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.insert_zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// A layer whose weights start at zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.insert_zeros(format!("{name}.w"), &[fan_in, fan_out])?;
        let b = if bias {
            Some(store.insert_zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn num_params(&self) -> usize {
        linear_params(self.fan_in, self.fan_out, self.b.is_some())
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    }
}

pub fn linear_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

/// Stack of linear layers with SiLU between them, and after the last one
/// when `act_last` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        act_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, act_last })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        mut x: Var,
    ) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i + 1 < n || self.act_last {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }
}

pub fn mlp_params(widths: &[usize]) -> usize {
    widths
        .windows(2)
        .map(|w| linear_params(w[0], w[1], true))
        .sum()
}

/// Gated context injection `P' = P ⊙ σ(W1·c + b1) + W2·c`, the gate and
/// shift shared by every row.
#[derive(Clone, Debug)]
pub struct ConcatSquash {
    pub gate: Linear,
    pub shift: Linear,
}

impl ConcatSquash {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        context: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), context, channels, true, rng)?,
            shift: Linear::new(
                store,
                &format!("{name}.shift"),
                context,
                channels,
                false,
                rng,
            )?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params() + self.shift.num_params()
    }

    /// `context` is a `1 × (3 + Z)` row.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        p: Var,
        context: Var,
    ) -> Result<Var> {
        let g = self.gate.forward(tape, store, context)?;
        let g = tape.sigmoid(g)?;
        let s = self.shift.forward(tape, store, context)?;
        let gated = tape.mul_row(p, g)?;
        Ok(tape.add_row(gated, s)?)
    }
}

pub fn concatsquash_params(context: usize, channels: usize) -> usize {
    linear_params(context, channels, true) + linear_params(context, channels, false)
}

/// Time embedding plus latent: `[t/T, sin(t/T), cos(t/T), z]`.
pub fn context_row<R: Real>(tape: &mut Tape<R>, t: usize, t_max: usize, z: Var) -> Result<Var> {
    let tn = t as f64 / t_max as f64;
    let emb =
        pointfuse_tensor::Tensor::new([1, 3], vec![R::of(tn), R::of(tn.sin()), R::of(tn.cos())])?;
    let emb = tape.constant(emb);
    let zw = tape.value(z).len();
    let z = tape.reshape(z, &[1, zw])?;
    Ok(tape.concat(&[emb, z])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pointfuse_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_concatsquash_halves_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cs = ConcatSquash::new(&mut store, "cs", 4, 2, &mut rng).unwrap();
        for (_, t) in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let c = tape.constant(Tensor::new([1, 4], vec![0.3, 0.1, 0.9, 2.0]).unwrap());
        let out = cs.forward(&mut tape, &store, p, c).unwrap();
        assert_eq!(tape.value(out), &[0.5, -1.0, 1.5, 2.0]);
        assert_eq!(cs.num_params(), concatsquash_params(4, 2));
    }

    #[test]
    fn saturated_gate_passes_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cs = ConcatSquash::new(&mut store, "cs", 3, 2, &mut rng).unwrap();
        store.get_mut(cs.gate.w).data_mut().fill(0.0);
        store.get_mut(cs.gate.b.unwrap()).data_mut().fill(60.0);
        store.get_mut(cs.shift.w).data_mut().fill(0.0);
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::new([1, 2], vec![1.5, -0.5]).unwrap());
        let c = tape.constant(Tensor::new([1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let out = cs.forward(&mut tape, &store, p, c).unwrap();
        assert_eq!(tape.value(out), &[1.5, -0.5]);
    }
}
