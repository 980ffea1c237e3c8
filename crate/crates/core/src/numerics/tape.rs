//! Reverse-mode autodiff on a dynamic tape.
//!
//! Each forward op appends a node holding its inputs and computed value;
//! `backward` walks the tape in reverse and accumulates adjoints. Tapes are
//! rebuilt per example, which handles variable-length sequence unrolling
//! without any graph surgery.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    Embed { table: NodeId, row: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node of the tape that produced them, aligned by id.
/// Nodes the root does not depend on carry zero gradients.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &[f64] {
        &self.adj[id.0]
    }

    pub fn wrt_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shapes[id.0].clone(), self.adj[id.0].clone())
            .expect("gradient shape mirrors node value shape")
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// (m,k)·(k,n) → (m,n), or (m,k)·(k,) → (m,).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        };
        if av.shape().len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (n, vector_rhs) = match bv.shape() {
            [_] => (1, true),
            [_, cols] => (*cols, false),
            _ => return Err(mismatch()),
        };
        let b_rows = bv.shape()[0];
        if b_rows != k {
            return Err(mismatch());
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..k {
                let aij = ad[i * k + j];
                if aij == 0.0 {
                    continue;
                }
                for c in 0..n {
                    out[i * n + c] += aij * bd[j * n + c];
                }
            }
        }
        let shape = if vector_rhs { vec![m] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn elementwise_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Concatenation of vectors, in argument order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_vector() {
                return Err(Error::Usage(format!(
                    "concat requires vectors, got shape {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::vector(data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Contiguous sub-vector [start, start+len) of a vector.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(src);
        if !v.is_vector() {
            return Err(Error::Usage(format!(
                "slice requires a vector, got shape {:?}",
                v.shape()
            )));
        }
        if len == 0 || start + len > v.numel() {
            return Err(Error::Usage(format!(
                "slice [{start}, {}) out of bounds for length {}",
                start + len,
                v.numel()
            )));
        }
        let value = Tensor::vector(v.data()[start..start + len].to_vec())?;
        Ok(self.push(Op::Slice { src, start }, value))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)
            .expect("shape preserved by elementwise op");
        self.push(Op::Tanh(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)
            .expect("shape preserved by elementwise op");
        self.push(Op::Sigmoid(x), value)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("output overflowed to {bad}"),
            });
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Exp(x), value))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not positive"),
            });
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Log(x), value))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if !v.is_vector() {
            return Err(Error::Usage(format!(
                "softmax requires a vector, got shape {:?}",
                v.shape()
            )));
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("non-finite logit {max}"),
            });
        }
        let exps: Vec<f64> = v.data().iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let value = Tensor::vector(data)?;
        Ok(self.push(Op::Softmax(x), value))
    }

    /// Row lookup into a (rows, cols) table; gradient scatters into that row.
    pub fn embed(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Usage(format!(
                "embed requires a matrix table, got shape {:?}",
                t.shape()
            )));
        }
        if row >= t.shape()[0] {
            return Err(Error::Usage(format!(
                "embed row {row} out of bounds for table {:?}",
                t.shape()
            )));
        }
        let value = Tensor::vector(t.row(row)?.to_vec())?;
        Ok(self.push(Op::Embed { table, row }, value))
    }

    /// Adjoints of every node with respect to the scalar at `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        adj[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let d = std::mem::take(&mut adj[i]);
            let y = self.nodes[i].value.data();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = if bv.is_vector() { 1 } else { bv.shape()[1] };
                    let (ad, bd) = (av.data(), bv.data());
                    // dA += dY·Bᵀ, dB += Aᵀ·dY
                    for r in 0..m {
                        for c in 0..n {
                            let dyc = d[r * n + c];
                            if dyc == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                adj[a.0][r * k + j] += dyc * bd[j * n + c];
                                adj[b.0][j * n + c] += ad[r * k + j] * dyc;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, dv) in adj[a.0].iter_mut().zip(&d) {
                        *g += dv;
                    }
                    for (g, dv) in adj[b.0].iter_mut().zip(&d) {
                        *g += dv;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    for j in 0..d.len() {
                        adj[a.0][j] += d[j] * bv[j];
                        adj[b.0][j] += d[j] * av[j];
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        for j in 0..len {
                            adj[p.0][j] += d[offset + j];
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, start } => {
                    for (j, dv) in d.iter().enumerate() {
                        adj[src.0][start + j] += dv;
                    }
                }
                Op::Tanh(x) => {
                    for j in 0..d.len() {
                        adj[x.0][j] += d[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Sigmoid(x) => {
                    for j in 0..d.len() {
                        adj[x.0][j] += d[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Exp(x) => {
                    for j in 0..d.len() {
                        adj[x.0][j] += d[j] * y[j];
                    }
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    for j in 0..d.len() {
                        adj[x.0][j] += d[j] / xv[j];
                    }
                }
                Op::Sum(x) => {
                    for g in adj[x.0].iter_mut() {
                        *g += d[0];
                    }
                }
                Op::Softmax(x) => {
                    // dx = y ⊙ (dy − ⟨dy, y⟩)
                    let dot: f64 = d.iter().zip(y).map(|(dv, yv)| dv * yv).sum();
                    for j in 0..d.len() {
                        adj[x.0][j] += y[j] * (d[j] - dot);
                    }
                }
                Op::Embed { table, row } => {
                    let cols = d.len();
                    for (j, dv) in d.iter().enumerate() {
                        adj[table.0][row * cols + j] += dv;
                    }
                }
            }
            adj[i] = d;
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            adj,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_leaf(tape: &mut Tape, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::vector(data).unwrap())
    }

    #[test]
    fn tanh_and_sigmoid_at_origin() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![0.0, 0.0]);
        let y = t.tanh(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);

        let z = vec_leaf(&mut t, vec![0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);
    }

    #[test]
    fn matmul_identity_preserves_matrix() {
        let mut t = Tape::new();
        let eye = t.leaf(
            Tensor::new(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
        );
        let a_data = vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 7.0, 1.5];
        let a = t.leaf(Tensor::new(vec![3, 3], a_data.clone()).unwrap());
        let prod = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(prod).data(), &a_data[..]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = vec_leaf(&mut t, vec![0.0, 0.0]);
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { op: "matmul", .. }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_gradient_at_origin_is_one() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![0.0]);
        let y = t.tanh(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![1.0, 2.0]);
        match t.backward(x) {
            Err(Error::NonScalarRoot { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected non-scalar root error, got {other:?}"),
        }
    }

    #[test]
    fn log_rejects_non_positive_and_exp_rejects_overflow() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![1.0, 0.0]);
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
        let big = vec_leaf(&mut t, vec![1000.0]);
        assert!(matches!(t.exp(big), Err(Error::Domain { op: "exp", .. })));
    }

    #[test]
    fn unreachable_nodes_get_zero_gradients() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, vec![3.0]);
        let orphan = vec_leaf(&mut t, vec![5.0, 6.0]);
        let root = t.sum(x);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(orphan), &[0.0, 0.0]);
        assert_eq!(g.wrt_tensor(orphan).shape(), &[2]);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-12.0f64..12.0, 2..12)) {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(logits).unwrap());
            let p = t.softmax(x).unwrap();
            let data = t.value(p).data();
            let total: f64 = data.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(data.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn concat_then_slice_is_identity(
            a in prop::collection::vec(-5.0f64..5.0, 1..6),
            b in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let mut t = Tape::new();
            let (na, nb) = (a.len(), b.len());
            let xa = t.leaf(Tensor::vector(a.clone()).unwrap());
            let xb = t.leaf(Tensor::vector(b.clone()).unwrap());
            let cat = t.concat(&[xa, xb]).unwrap();
            let sa = t.slice(cat, 0, na).unwrap();
            let sb = t.slice(cat, na, nb).unwrap();
            prop_assert_eq!(t.value(sa).data(), &a[..]);
            prop_assert_eq!(t.value(sb).data(), &b[..]);
        }
    }
}
