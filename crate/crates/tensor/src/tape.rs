//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its value and enough context to
//! run the vector-Jacobian product. `backward` walks the nodes in reverse,
//! hands back gradients for leaves and bound parameters, and clears the tape.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for [`Tape::custom`]: `(inputs, output, output_grad) -> input grads`.
pub type CustomBackward<R> = Box<dyn Fn(&[&[R]], &[R], &[R]) -> Vec<Vec<R>> + Send + Sync>;

enum Op<R: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, R),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    MaxAxis {
        x: Var,
        axis: usize,
        arg: Vec<u32>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<u32>,
    },
    ScatterAdd {
        x: Var,
        idx: Vec<u32>,
    },
    MixRows {
        x: Var,
        idx: Vec<u32>,
        w: Vec<R>,
        k: usize,
    },
    Reshape(Var),
    Patches3x3 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<R>,
    },
}

struct Node<R: Real> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads<R> {
    leaves: HashMap<Var, Vec<R>>,
    params: Vec<(ParamId, Vec<R>)>,
}

impl<R: Real> Grads<R> {
    /// Gradient of a leaf registered with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[R]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[(ParamId, Vec<R>)] {
        &self.params
    }

    /// Adds the parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<R>) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` factorization of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_index(op: &'static str, idx: &[u32], rows: usize) -> Result<()> {
    match idx.iter().find(|&&i| i as usize >= rows) {
        Some(bad) => Err(TensorError::invalid(
            op,
            format!("row index {bad} out of range for {rows} rows"),
        )),
        None => Ok(()),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            check_finite: true,
        }
    }

    /// A tape that records values only; parameters enter as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<R> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    pub fn scalar_value(&self, v: Var) -> Result<R> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(TensorError::invalid(
                "scalar_value",
                format!("shape {:?} is not a scalar", n.shape),
            ));
        }
        Ok(n.value[0])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<R>,
        op: Op<R>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls return the same node, so
    /// shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            &mut out,
            R::zero(),
        );
        let g = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::invalid(
                "transpose",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let g = self.needs(a);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), g)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.needs(a) || self.needs(b);
        self.push(op_name, self.shape(a).to_vec(), out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let g = self.needs(a);
        self.push(
            "add_scalar",
            self.shape(a).to_vec(),
            out,
            Op::AddScalar(a),
            g,
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: R) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let g = self.needs(a);
        self.push(
            "mul_scalar",
            self.shape(a).to_vec(),
            out,
            Op::MulScalar(a, c),
            g,
        )
    }

    fn row_op(&mut self, op_name: &'static str, a: Var, row: Var, mul: bool) -> Result<Var> {
        let w = self.shape(a).iter().skip(1).product::<usize>();
        if self.shape(a).is_empty() || self.value(row).len() != w {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(w.max(1))
            .flat_map(|xs| {
                xs.iter()
                    .zip(r)
                    .map(|(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let g = self.needs(a) || self.needs(row);
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        self.push(op_name, self.shape(a).to_vec(), out, op, g)
    }

    /// `a[i, ..] + row` for every leading index `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", a, row, false)
    }

    /// `a[i, ..] ⊙ row` for every leading index `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("mul_row", a, row, true)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = xs.iter().map(|&x| *self.shape(x).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let g = xs.iter().any(|&x| self.needs(x));
        self.push("concat", shape, out, Op::Concat(xs.to_vec()), g)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s
            .last()
            .ok_or_else(|| TensorError::invalid("slice_last", "scalar input"))?;
        if start > end || end > w {
            return Err(TensorError::invalid(
                "slice_last",
                format!("range {start}..{end} out of bounds for width {w}"),
            ));
        }
        let out = self
            .value(x)
            .chunks_exact(w.max(1))
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        let g = self.needs(x);
        self.push("slice_last", shape, out, Op::Slice { x, start, end }, g)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let v = self.value(x);
        let mut out = vec![R::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let m = (0..len).map(|l| v[at(l)]).fold(R::neg_infinity(), R::max);
                let mut s = R::zero();
                for l in 0..len {
                    let e = (v[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let g = self.needs(x);
        self.push(
            "softmax",
            self.shape(x).to_vec(),
            out,
            Op::Softmax { x, axis },
            g,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| R::one() / (R::one() + (-v).exp()))
            .collect();
        let g = self.needs(x);
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid(x), g)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        let g = self.needs(x);
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), g)
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        s
    }

    /// Maximum over `axis` (the axis is removed). Ties route the gradient
    /// to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        if len == 0 {
            return Err(TensorError::invalid("max_axis", "empty axis"));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            let mut best: Vec<R> = v[base..base + inner].to_vec();
            let mut best_l = vec![0u32; inner];
            for l in 1..len {
                let row = &v[base + l * inner..base + (l + 1) * inner];
                for i in 0..inner {
                    if row[i] > best[i] {
                        best[i] = row[i];
                        best_l[i] = l as u32;
                    }
                }
            }
            out.extend(best);
            arg.extend(best_l);
        }
        let shape = self.reduced_shape(x, axis);
        let g = self.needs(x);
        self.push("max_axis", shape, out, Op::MaxAxis { x, axis, arg }, g)
    }

    /// Mean over `axis` (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        if len == 0 {
            return Err(TensorError::invalid("mean_axis", "empty axis"));
        }
        let v = self.value(x);
        let scale = R::one() / R::of(len as f64);
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for i in 0..inner {
                    out[o * inner + i] += row[i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= scale);
        let shape = self.reduced_shape(x, axis);
        let g = self.needs(x);
        self.push("mean_axis", shape, out, Op::MeanAxis { x, axis }, g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let g = self.needs(x);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let s = self.value(x).iter().copied().sum::<R>() / R::of(n as f64);
        let g = self.needs(x);
        self.push("mean", Vec::new(), vec![s], Op::Mean(x), g)
    }

    /// Rows of `x` (leading axis) selected by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(TensorError::invalid("gather_rows", "scalar input"));
        }
        check_index("gather_rows", idx, s[0])?;
        let w: usize = s[1..].iter().product();
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&v[i as usize * w..(i as usize + 1) * w]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let g = self.needs(x);
        self.push(
            "gather_rows",
            shape,
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            g,
        )
    }

    /// `out[idx[i]] += x[i]` into `rows` zero rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[u32], rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        check_index("scatter_add_rows", idx, rows)?;
        let w: usize = s[1..].iter().product();
        let v = self.value(x);
        let mut out = vec![R::zero(); rows * w];
        for (r, &i) in idx.iter().enumerate() {
            let dst = &mut out[i as usize * w..(i as usize + 1) * w];
            dst.iter_mut()
                .zip(&v[r * w..(r + 1) * w])
                .for_each(|(d, &s)| *d += s);
        }
        let mut shape = s;
        shape[0] = rows;
        let g = self.needs(x);
        self.push(
            "scatter_add_rows",
            shape,
            out,
            Op::ScatterAdd {
                x,
                idx: idx.to_vec(),
            },
            g,
        )
    }

    /// Weighted row gather: `out[i] = Σ_j weights[i·k+j] · x[idx[i·k+j]]`.
    ///
    /// Weights are constants; this is the kernel behind inverse-distance
    /// interpolation and bilinear sampling.
    pub fn mix_rows(&mut self, x: Var, idx: &[u32], weights: &[R], k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || k == 0 || idx.len() != weights.len() || idx.len() % k != 0 {
            return Err(TensorError::invalid(
                "mix_rows",
                format!(
                    "{} indices / {} weights with k={k} on shape {s:?}",
                    idx.len(),
                    weights.len()
                ),
            ));
        }
        check_index("mix_rows", idx, s[0])?;
        let w: usize = s[1..].iter().product();
        let m = idx.len() / k;
        let v = self.value(x);
        let mut out = vec![R::zero(); m * w];
        for i in 0..m {
            let dst = &mut out[i * w..(i + 1) * w];
            for j in 0..k {
                let (src, wt) = (idx[i * k + j] as usize, weights[i * k + j]);
                if wt == R::zero() {
                    continue;
                }
                dst.iter_mut()
                    .zip(&v[src * w..(src + 1) * w])
                    .for_each(|(d, &s)| *d += wt * s);
            }
        }
        let mut shape = s;
        shape[0] = m;
        let g = self.needs(x);
        let op = Op::MixRows {
            x,
            idx: idx.to_vec(),
            w: weights.to_vec(),
            k,
        };
        self.push("mix_rows", shape, out, op, g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let g = self.needs(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), g)
    }

    /// 3×3 neighbourhoods of an `H×W×C` image with zero padding, laid out as
    /// `(H·W) × (9·C)` rows ordered `(dy, dx, c)`. A matmul with a
    /// `9C × C_out` weight completes a same-size convolution.
    pub fn patches3x3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::invalid(
                "patches3x3",
                format!("expected H×W×C, got {s:?}"),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let v = self.value(x);
        let mut out = vec![R::zero(); h * w * 9 * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut out[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
                for (slot, (dy, dx)) in NEIGHBOURS_3X3.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    row[slot * c..(slot + 1) * c].copy_from_slice(&v[src..src + c]);
                }
            }
        }
        let g = self.needs(x);
        self.push(
            "patches3x3",
            vec![h * w, 9 * c],
            out,
            Op::Patches3x3 { x, h, w, c },
            g,
        )
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<R>,
        backward: CustomBackward<R>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "custom",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        let g = inputs.iter().any(|&x| self.needs(x));
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push("custom", shape, value, op, g)
    }

    // Compositions of the primitives above.

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// `x ⊙ sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Runs the reverse sweep from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<R>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.params.clear();
        let mut grads: Vec<Option<Vec<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        let mut out = Grads::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            backprop(&nodes, node, &gy, &mut grads);
            match node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), gy);
                }
                Op::Param(id) => out.params.push((id, gy)),
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

const NEIGHBOURS_3X3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn acc<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], v: Var, f: impl FnOnce(&mut [R])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![R::zero(); nodes[v.0].value.len()]);
    f(g);
}

fn backprop<R: Real>(nodes: &[Node<R>], node: &Node<R>, gy: &[R], grads: &mut [Option<Vec<R>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shape = |v: Var| nodes[v.0].shape.as_slice();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
            acc(nodes, grads, a, |ga| {
                R::gemm(
                    m,
                    n,
                    k,
                    gy,
                    n as isize,
                    1,
                    val(b),
                    1,
                    n as isize,
                    ga,
                    R::one(),
                );
            });
            acc(nodes, grads, b, |gb| {
                R::gemm(
                    k,
                    m,
                    n,
                    val(a),
                    1,
                    k as isize,
                    gy,
                    n as isize,
                    1,
                    gb,
                    R::one(),
                );
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (shape(a)[0], shape(a)[1]);
            acc(nodes, grads, a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gy[j * r + i];
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
            acc(nodes, grads, b, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
            acc(nodes, grads, b, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d)
            });
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            acc(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * vb[i];
                }
            });
            acc(nodes, grads, b, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * va[i];
                }
            });
        }
        &Op::AddScalar(a) => {
            acc(nodes, grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
        }
        &Op::MulScalar(a, c) => {
            acc(nodes, grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += c * d)
            });
        }
        &Op::AddRow(a, row) => {
            let w = val(row).len();
            acc(nodes, grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
            acc(nodes, grads, row, |g| {
                for chunk in gy.chunks_exact(w.max(1)) {
                    g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                }
            });
        }
        &Op::MulRow(a, row) => {
            let (va, vr) = (val(a), val(row));
            let w = vr.len();
            acc(nodes, grads, a, |g| {
                for (i, g) in g.iter_mut().enumerate() {
                    *g += gy[i] * vr[i % w];
                }
            });
            acc(nodes, grads, row, |g| {
                for (i, &d) in gy.iter().enumerate() {
                    g[i % w] += d * va[i];
                }
            });
        }
        Op::Concat(xs) => {
            let widths: Vec<usize> = xs.iter().map(|&x| *shape(x).last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = gy.len() / total.max(1);
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                acc(nodes, grads, x, |g| {
                    for r in 0..rows {
                        let src = &gy[r * total + off..r * total + off + w];
                        g[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &d)| *g += d);
                    }
                });
                off += w;
            }
        }
        &Op::Slice { x, start, end } => {
            let w = *shape(x).last().unwrap();
            let sw = end - start;
            acc(nodes, grads, x, |g| {
                for (r, chunk) in gy.chunks_exact(sw.max(1)).enumerate() {
                    g[r * w + start..r * w + end]
                        .iter_mut()
                        .zip(chunk)
                        .for_each(|(g, &d)| *g += d);
                }
            });
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(shape(x), axis);
            let y = &node.value;
            acc(nodes, grads, x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: R = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            g[at(l)] += y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
            });
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            acc(nodes, grads, x, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (R::one() - y[i]);
                }
            });
        }
        &Op::Relu(x) => {
            let vx = val(x);
            acc(nodes, grads, x, |g| {
                for i in 0..g.len() {
                    if vx[i] > R::zero() {
                        g[i] += gy[i];
                    }
                }
            });
        }
        Op::MaxAxis { x, axis, arg } => {
            let (outer, len, inner) = axis_split(shape(*x), *axis);
            acc(nodes, grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let l = arg[o * inner + i] as usize;
                        g[o * len * inner + l * inner + i] += gy[o * inner + i];
                    }
                }
            });
        }
        &Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = axis_split(shape(x), axis);
            let scale = R::one() / R::of(len as f64);
            acc(nodes, grads, x, |g| {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            g[(o * len + l) * inner + i] += gy[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        &Op::Sum(x) => {
            acc(nodes, grads, x, |g| g.iter_mut().for_each(|g| *g += gy[0]));
        }
        &Op::Mean(x) => {
            let d = gy[0] / R::of(val(x).len() as f64);
            acc(nodes, grads, x, |g| g.iter_mut().for_each(|g| *g += d));
        }
        Op::Gather { x, idx } => {
            let w = node.value.len() / idx.len().max(1);
            acc(nodes, grads, *x, |g| {
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut g[i as usize * w..(i as usize + 1) * w];
                    dst.iter_mut()
                        .zip(&gy[r * w..(r + 1) * w])
                        .for_each(|(g, &d)| *g += d);
                }
            });
        }
        Op::ScatterAdd { x, idx } => {
            let w = val(*x).len() / idx.len().max(1);
            acc(nodes, grads, *x, |g| {
                for (r, &i) in idx.iter().enumerate() {
                    let src = &gy[i as usize * w..(i as usize + 1) * w];
                    g[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, &d)| *g += d);
                }
            });
        }
        Op::MixRows {
            x,
            idx,
            w: weights,
            k,
        } => {
            let m = idx.len() / k;
            let w = node.value.len() / m.max(1);
            acc(nodes, grads, *x, |g| {
                for i in 0..m {
                    let src = &gy[i * w..(i + 1) * w];
                    for j in 0..*k {
                        let (dst, wt) = (idx[i * k + j] as usize, weights[i * k + j]);
                        if wt == R::zero() {
                            continue;
                        }
                        g[dst * w..(dst + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &d)| *g += wt * d);
                    }
                }
            });
        }
        &Op::Reshape(x) => {
            acc(nodes, grads, x, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
        }
        &Op::Patches3x3 { x, h, w, c } => {
            acc(nodes, grads, x, |g| {
                for y in 0..h {
                    for xx in 0..w {
                        let row = &gy[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
                        for (slot, (dy, dx)) in NEIGHBOURS_3X3.iter().enumerate() {
                            let (sy, sx) = (y as isize + dy, xx as isize + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let dst = (sy as usize * w + sx as usize) * c;
                            g[dst..dst + c]
                                .iter_mut()
                                .zip(&row[slot * c..(slot + 1) * c])
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                }
            });
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&[R]> = inputs.iter().map(|&v| val(v)).collect();
            let gs = backward(&ins, &node.value, gy);
            for (&v, gi) in inputs.iter().zip(gs) {
                acc(nodes, grads, v, |g| {
                    g.iter_mut().zip(&gi).for_each(|(g, &d)| *g += d)
                });
            }
        }
    }
}
