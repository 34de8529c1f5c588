//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Forward calls evaluate eagerly and append one node per primitive op.
//! [`GradTape::backward`] replays the tape in exact reverse order and
//! accumulates adjoints for every node, including leaves.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x·W + b for vector or matrix `x`.
    Affine { x: ValueId, w: ValueId, b: ValueId },
    Relu { x: ValueId },
    L2Normalize { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, factor: f64 },
    AddConst { x: ValueId },
    Dot { a: ValueId, b: ValueId },
    Exp { x: ValueId },
    Ln { x: ValueId },
    Sqrt { x: ValueId },
    Recip { x: ValueId },
    Sum { x: ValueId },
    Neg { x: ValueId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Threshold below which l2 normalization is treated as degenerate.
pub const NORM_EPSILON: f64 = 1e-12;

/// Record of one forward pass. Never shared between passes.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given node.
    pub fn wrt(&self, id: ValueId) -> &Tensor {
        &self.adjoints[id.0]
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at a node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Register an input value. Leaves of the graph; gradients accumulate
    /// here whether or not the caller reads them.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push_unchecked(Op::Leaf, value)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { op: op_name },
            other => other,
        })?;
        Ok(self.push_unchecked(op, value))
    }

    /// x·W + b. `x` is `[k]` or `[n, k]`, `w` is `[k, m]`, `b` is `[m]`.
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "affine weight",
                expected: vec![2],
                found: wv.shape().to_vec(),
            });
        }
        let (k, m) = (wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [m] {
            return Err(Error::ShapeMismatch {
                context: "affine bias",
                expected: vec![m],
                found: bv.shape().to_vec(),
            });
        }
        let (rows, is_vector) = match xv.shape() {
            [kk] if *kk == k => (1, true),
            [n, kk] if *kk == k => (*n, false),
            other => {
                return Err(Error::ShapeMismatch {
                    context: "affine input",
                    expected: vec![k],
                    found: other.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let row = &xv.data()[r * k..(r + 1) * k];
            let dst = &mut out[r * m..(r + 1) * m];
            dst.copy_from_slice(bv.data());
            for (i, &xi) in row.iter().enumerate() {
                let wrow = &wv.data()[i * m..(i + 1) * m];
                for (d, &wij) in dst.iter_mut().zip(wrow) {
                    *d += xi * wij;
                }
            }
        }
        let shape = if is_vector { vec![m] } else { vec![rows, m] };
        self.push("affine", Op::Affine { x, w, b }, shape, out)
    }

    /// Elementwise max(0, x). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        self.push("relu", Op::Relu { x }, shape, data)
    }

    /// Scale to unit l2 norm. Errors when the input norm is below
    /// [`NORM_EPSILON`].
    pub fn l2_normalize(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let norm = xv.l2_norm();
        if norm <= NORM_EPSILON {
            return Err(Error::DegenerateVector { norm });
        }
        let data = xv.data().iter().map(|&v| v / norm).collect();
        let shape = xv.shape().to_vec();
        self.push("l2_normalize", Op::L2Normalize { x }, shape, data)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let data = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        self.push("add", Op::Add { a, b }, shape, data)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let data = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        self.push("sub", Op::Sub { a, b }, shape, data)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let data = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        self.push("mul", Op::Mul { a, b }, shape, data)
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        self.push("scale", Op::Scale { x, factor }, shape, data)
    }

    pub fn add_const(&mut self, x: ValueId, offset: f64) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + offset).collect();
        let shape = xv.shape().to_vec();
        self.push("add_const", Op::AddConst { x }, shape, data)
    }

    /// Inner product of two equal-length vectors; yields a scalar node.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rank() != 1 {
            return Err(Error::ShapeMismatch {
                context: "dot",
                expected: av.shape().to_vec(),
                found: bv.shape().to_vec(),
            });
        }
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Op::Dot { a, b }, Vec::new(), vec![v])
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.exp()).collect();
        let shape = xv.shape().to_vec();
        self.push("exp", Op::Exp { x }, shape, data)
    }

    pub fn ln(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.ln()).collect();
        let shape = xv.shape().to_vec();
        self.push("ln", Op::Ln { x }, shape, data)
    }

    pub fn sqrt(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.sqrt()).collect();
        let shape = xv.shape().to_vec();
        self.push("sqrt", Op::Sqrt { x }, shape, data)
    }

    pub fn recip(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| 1.0 / v).collect();
        let shape = xv.shape().to_vec();
        self.push("recip", Op::Recip { x }, shape, data)
    }

    /// Sum of all elements; yields a scalar node.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum { x }, Vec::new(), vec![v])
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| -v).collect();
        let shape = xv.shape().to_vec();
        self.push("neg", Op::Neg { x }, shape, data)
    }

    fn zip_same_shape(
        &self,
        context: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                context,
                expected: av.shape().to_vec(),
                found: bv.shape().to_vec(),
            });
        }
        Ok(av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    /// Accumulate adjoints of every node with respect to a scalar root.
    pub fn backward(&self, root: ValueId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::ShapeMismatch {
                context: "backward root",
                expected: Vec::new(),
                found: self.value(root).shape().to_vec(),
            });
        }
        let mut adj: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        add_into(&mut adj[root.0], &[1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let g = adj[idx].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match self.nodes[idx].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (k, m) = {
                        let ws = self.value(w).shape();
                        (ws[0], ws[1])
                    };
                    let rows = g.len() / m;
                    let xv = self.value(x).data().to_vec();
                    let wv = self.value(w).data().to_vec();
                    // dx_ri = sum_j g_rj * w_ij ; dw_ij = sum_r x_ri * g_rj ; db_j = sum_r g_rj
                    let mut dx = vec![0.0; rows * k];
                    let mut dw = vec![0.0; k * m];
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        let xrow = &xv[r * k..(r + 1) * k];
                        for i in 0..k {
                            let wrow = &wv[i * m..(i + 1) * m];
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += grow[j] * wrow[j];
                                dw[i * m + j] += xrow[i] * grow[j];
                            }
                            dx[r * k + i] += acc;
                        }
                        for j in 0..m {
                            db[j] += grow[j];
                        }
                    }
                    add_into(&mut adj[x.0], &dx);
                    add_into(&mut adj[w.0], &dw);
                    add_into(&mut adj[b.0], &db);
                }
                Op::Relu { x } => {
                    let mask: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect();
                    add_into(&mut adj[x.0], &mask);
                }
                Op::L2Normalize { x } => {
                    // d/dx (x/|x|) applied to g: (g - (g·y) y) / |x| with y the output.
                    let norm = self.value(x).l2_norm();
                    let y = self.nodes[idx].value.data();
                    let gy: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| (gi - gy * yi) / norm)
                        .collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Add { a, b } => {
                    add_into(&mut adj[a.0], g.data());
                    add_into(&mut adj[b.0], g.data());
                }
                Op::Sub { a, b } => {
                    add_into(&mut adj[a.0], g.data());
                    let neg: Vec<f64> = g.data().iter().map(|&v| -v).collect();
                    add_into(&mut adj[b.0], &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g.data().iter().zip(self.value(b).data()).map(|(&gi, &bi)| gi * bi).collect();
                    let db: Vec<f64> = g.data().iter().zip(self.value(a).data()).map(|(&gi, &ai)| gi * ai).collect();
                    add_into(&mut adj[a.0], &da);
                    add_into(&mut adj[b.0], &db);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = g.data().iter().map(|&v| v * factor).collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::AddConst { x } => {
                    add_into(&mut adj[x.0], g.data());
                }
                Op::Dot { a, b } => {
                    let gs = g.scalar_value();
                    let da: Vec<f64> = self.value(b).data().iter().map(|&v| gs * v).collect();
                    let db: Vec<f64> = self.value(a).data().iter().map(|&v| gs * v).collect();
                    add_into(&mut adj[a.0], &da);
                    add_into(&mut adj[b.0], &db);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> = g.data().iter().zip(self.nodes[idx].value.data()).map(|(&gi, &yi)| gi * yi).collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Ln { x } => {
                    let dx: Vec<f64> = g.data().iter().zip(self.value(x).data()).map(|(&gi, &xi)| gi / xi).collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Sqrt { x } => {
                    let dx: Vec<f64> = g.data().iter().zip(self.nodes[idx].value.data()).map(|(&gi, &yi)| gi / (2.0 * yi)).collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Recip { x } => {
                    let dx: Vec<f64> = g.data().iter().zip(self.value(x).data()).map(|(&gi, &xi)| -gi / (xi * xi)).collect();
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Sum { x } => {
                    let gs = g.scalar_value();
                    let dx = vec![gs; self.value(x).len()];
                    add_into(&mut adj[x.0], &dx);
                }
                Op::Neg { x } => {
                    let dx: Vec<f64> = g.data().iter().map(|&v| -v).collect();
                    add_into(&mut adj[x.0], &dx);
                }
            }
        }
        for (i, t) in adj.iter().enumerate() {
            if !t.data().iter().all(|v| v.is_finite()) {
                let _ = i;
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: Vec<f64>) -> Tensor {
        Tensor::from_vec(data).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![1.0, 0.0]));
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(vec1(vec![0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn affine_scalar_case() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![2.0]));
        let w = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let b = tape.leaf(vec1(vec![1.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![1.0, 2.0, 3.0]));
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let b = tape.leaf(vec1(vec![0.0, 0.0]));
        let err = tape.affine(x, w, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_is_all_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![-3.0, -0.5, -1e-9]));
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_is_identity() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![0.0, 1.0, 0.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![0.0, 1e-13]));
        let err = tape.l2_normalize(x).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![1.5, -2.0, 0.25]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x);
        assert_eq!(g.data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn exp_ln_chain_overflows_to_error_not_nan() {
        let mut tape = GradTape::new();
        let x = tape.leaf(vec1(vec![1000.0]));
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp" }));
    }
}
