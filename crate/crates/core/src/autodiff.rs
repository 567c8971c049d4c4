//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and its parents. [`Tape::backward`] walks the nodes once, in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.
//!
//! Long-lived parameters are stored as [`Tensor`]s. Each training step binds
//! them onto a fresh tape with [`Tape::leaf`], runs the forward pass, calls
//! [`Tape::backward`] and folds the tape gradients back into the tensors with
//! [`Tensor::accumulate_grad`].
//!
//! Broadcasting is limited to two cases: a `1×1` operand against any shape in
//! the binary element-wise ops, and a `1×c` row added to every row of an
//! `r×c` matrix via [`Tape::add_row`].

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// A dense 2-D array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Array2<f64>,
    requires_grad: bool,
    grad: Option<Array2<f64>>,
}

impl Tensor {
    pub fn new(data: Array2<f64>, requires_grad: bool) -> Self {
        Self {
            data,
            requires_grad,
            grad: None,
        }
    }

    pub fn param(data: Array2<f64>) -> Self {
        Self::new(data, true)
    }

    pub fn constant(data: Array2<f64>) -> Self {
        Self::new(data, false)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Mutable view of the values. The shape cannot change through a view.
    pub fn data_mut(&mut self) -> ndarray::ArrayViewMut2<'_, f64> {
        self.data.view_mut()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient (creating it on first use).
    pub fn accumulate_grad(&mut self, g: &Array2<f64>) -> Result<()> {
        if g.dim() != self.data.dim() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.data.dim(),
                rhs: g.dim(),
            });
        }
        match &mut self.grad {
            Some(acc) => *acc += g,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for [`Tape::reduce_sum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Sum over rows: `r×c -> 1×c`.
    Rows,
    /// Sum over columns: `r×c -> r×1`.
    Cols,
    /// Sum everything: `r×c -> 1×1`.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Neg => "neg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Unary(Unary, Var),
    Sum(Var, Reduce),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Unary(_, a)
            | Op::Sum(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn is_scalar(a: &Array2<f64>) -> bool {
    a.dim() == (1, 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .flatten()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ncols() != bv.nrows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dim() != bv.dim() && !is_scalar(av) && !is_scalar(bv) {
            return Err(Error::Dimension {
                op: kind.name(),
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        if kind == Binary::Div {
            if let Some(((row, col), &value)) = bv.indexed_iter().find(|(_, &x)| x == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    row,
                    col,
                    value,
                });
            }
        }
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if is_scalar(bv) && !is_scalar(av) {
            let y = bv[[0, 0]];
            av.mapv(|x| f(x, y))
        } else if is_scalar(av) && !is_scalar(bv) {
            let x = av[[0, 0]];
            bv.mapv(|y| f(x, y))
        } else {
            Zip::from(av).and(bv).map_collect(|&x, &y| f(x, y))
        };
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    /// Adds the `1×c` row `bias` to every row of the `r×c` matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.dim(),
                rhs: bv.dim(),
            });
        }
        let out = xv + bv;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.nodes[a.0].value * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = &self.nodes[a.0].value + c;
        self.push(out, Op::Shift(a, c))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if matches!(kind, Unary::Log | Unary::Sqrt) {
            if let Some(((row, col), &value)) = av.indexed_iter().find(|(_, &x)| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: kind.name(),
                    row,
                    col,
                    value,
                });
            }
        }
        let out = match kind {
            Unary::Tanh => av.mapv(f64::tanh),
            Unary::Exp => av.mapv(f64::exp),
            Unary::Log => av.mapv(f64::ln),
            Unary::Square => av.mapv(|x| x * x),
            Unary::Sqrt => av.mapv(f64::sqrt),
            Unary::Neg => av.mapv(|x| -x),
        };
        Ok(self.push(out, Op::Unary(kind, a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh has no domain restriction")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp has no domain restriction")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square has no domain restriction")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg has no domain restriction")
    }

    pub fn reduce_sum(&mut self, a: Var, axis: Reduce) -> Var {
        let av = &self.nodes[a.0].value;
        let out = match axis {
            Reduce::Rows => av.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Reduce::Cols => av.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Reduce::All => Array2::from_elem((1, 1), av.sum()),
        };
        self.push(out, Op::Sum(a, axis))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce_sum(a, Reduce::All)
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient and
    /// adds the result into the node's stored gradient. Nodes that require a
    /// gradient but are unreachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            for (parent, pg) in self.local_adjoints(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Keep the node's own adjoint for accumulation below.
            adj[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = adj
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Array2::zeros(node.value.dim()));
            match &mut node.grad {
                Some(acc) => *acc += &g,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, g: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![(a, g.dot(&val(b).t())), (b, val(a).t().dot(g))],
            Op::Transpose(a) => vec![(a, g.t().to_owned())],
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(a), val(b));
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), -g),
                    Binary::Mul => (g * &broadcast(bv, g), g * &broadcast(av, g)),
                    Binary::Div => {
                        let bb = broadcast(bv, g);
                        let ab = broadcast(av, g);
                        let ga = g / &bb;
                        let gb = Zip::from(g)
                            .and(&ab)
                            .and(&bb)
                            .map_collect(|&g, &x, &y| -g * x / (y * y));
                        (ga, gb)
                    }
                };
                vec![(a, unbroadcast(ga, av)), (b, unbroadcast(gb, bv))]
            }
            Op::AddRow(x, bias) => vec![
                (x, g.clone()),
                (bias, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            ],
            Op::Scale(a, c) => vec![(a, g * c)],
            Op::Shift(a, _) => vec![(a, g.clone())],
            Op::Unary(kind, a) => {
                let x = val(a);
                let y = &node.value;
                let ga = match kind {
                    Unary::Tanh => Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y)),
                    Unary::Exp => g * y,
                    Unary::Log => g / x,
                    Unary::Square => Zip::from(g).and(x).map_collect(|&g, &x| 2.0 * x * g),
                    Unary::Sqrt => Zip::from(g).and(y).map_collect(|&g, &y| g / (2.0 * y)),
                    Unary::Neg => -g,
                };
                vec![(a, ga)]
            }
            Op::Sum(a, axis) => {
                let shape = val(a).dim();
                let ga = match axis {
                    Reduce::All => Array2::from_elem(shape, g[[0, 0]]),
                    Reduce::Rows | Reduce::Cols => g
                        .broadcast(shape)
                        .expect("reduced axis broadcasts back")
                        .to_owned(),
                };
                vec![(a, ga)]
            }
        }
    }
}

/// Expands a `1×1` operand to the shape of `like`; other shapes pass through.
fn broadcast(x: &Array2<f64>, like: &Array2<f64>) -> Array2<f64> {
    if is_scalar(x) && !is_scalar(like) {
        Array2::from_elem(like.dim(), x[[0, 0]])
    } else {
        x.clone()
    }
}

/// Sums a full-shape adjoint down to a `1×1` operand when it was broadcast.
fn unbroadcast(g: Array2<f64>, operand: &Array2<f64>) -> Array2<f64> {
    if is_scalar(operand) && !is_scalar(&g) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite difference of a scalar function of one matrix.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[r, c]] += h;
            xm[[r, c]] -= h;
            out[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        Zip::from(a)
            .and(b)
            .fold(0.0f64, |m, &x, &y| m.max((x - y).abs() / x.abs().max(y.abs()).max(1e-8)))
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut t = Tape::new();
        let i = t.constant(Array2::eye(2));
        let x = t.constant(array![[1.5, -2.0], [0.25, 3.0]]);
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.constant(array![[3.0], [4.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &array![[11.0]]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        match t.matmul(a, b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 3));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let b0 = array![[1.1, -0.5], [0.2, 0.9], [-1.3, 0.6]];
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::param(a0.clone()));
        let b = t.constant(b0.clone());
        let p = t.matmul(a, b).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let num = numeric_grad(&a0, |x| x.dot(&b0).sum());
        assert!(max_rel_err(t.grad(a).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn elementwise_forward_values() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let th = t.tanh(z);
        assert_eq!(t.item(th), 0.0);
        let x = t.scalar(1.5);
        let e = t.exp(x);
        let l = t.log(e).unwrap();
        assert!((t.item(l) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tanh_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::param(array![[0.3]]));
        let y = t.tanh(x);
        t.backward(y).unwrap();
        let analytic = 1.0 - 0.3f64.tanh().powi(2);
        let numeric = ((0.3f64 + 1e-5).tanh() - (0.3f64 - 1e-5).tanh()) / 2e-5;
        let g = t.grad(x).unwrap()[[0, 0]];
        assert!((g - analytic).abs() < 1e-12);
        assert!((g - numeric).abs() < 1e-8);
    }

    #[test]
    fn domain_errors_name_op_and_index() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [-0.5, 3.0]]);
        match t.log(x) {
            Err(Error::Domain { op, row, col, .. }) => assert_eq!((op, row, col), ("log", 1, 0)),
            other => panic!("{other:?}"),
        }
        let z = t.constant(array![[0.0, 1.0]]);
        assert!(matches!(t.sqrt(z), Err(Error::Domain { op: "sqrt", row: 0, col: 0, .. })));
        let n = t.constant(array![[1.0, 1.0]]);
        assert!(matches!(t.div(n, z), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 2)));
        let b = t.constant(Array2::zeros((2, 3)));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { op: "add", .. })));
    }

    #[test]
    fn reduce_sum_values_and_square_gradient() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = t.sum(x);
        assert_eq!(t.item(s), 10.0);
        let r = t.reduce_sum(x, Reduce::Rows);
        assert_eq!(t.value(r), &array![[4.0, 6.0]]);
        let c = t.reduce_sum(x, Reduce::Cols);
        assert_eq!(t.value(c), &array![[3.0], [7.0]]);
        let zeros = t.constant(Array2::zeros((3, 2)));
        for axis in [Reduce::Rows, Reduce::Cols, Reduce::All] {
            let z = t.reduce_sum(zeros, axis);
            assert!(t.value(z).iter().all(|&v| v == 0.0));
        }

        let x0 = array![[0.1, -0.7, 2.0]];
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::param(x0.clone()));
        let sq = t.square(x);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        let num = numeric_grad(&x0, |v| v.mapv(|e| e * e).sum());
        assert!(max_rel_err(t.grad(x).unwrap(), &(&x0 * 2.0)) < 1e-15);
        assert!(max_rel_err(t.grad(x).unwrap(), &num) < 1e-8);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::param(Array2::ones((2, 2))));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_on_constant_gives_zero_grads() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::param(Array2::ones((2, 3))));
        let c = t.scalar(4.0);
        t.backward(c).unwrap();
        // `c` does not depend on `w`: the parameter still gets a (zero) gradient.
        assert_eq!(t.grad(w).unwrap(), &Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn backward_sum_linear_layer_and_accumulation() {
        let x0 = array![[0.5], [-1.5], [2.0]];
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::param(Array2::from_elem((2, 3), 0.1)));
        let x = t.constant(x0.clone());
        let y = t.matmul(w, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        let expected = x0.t().broadcast((2, 3)).unwrap().to_owned();
        assert_eq!(t.grad(w).unwrap(), &expected);

        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &(&expected * 2.0));

        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn scalar_broadcast_and_row_bias_gradients() {
        let x0 = array![[0.2, -0.3], [1.1, 0.4], [-0.8, 0.9]];
        let b0 = array![[0.5, -0.25]];
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::param(x0.clone()));
        let b = t.leaf(&Tensor::param(b0.clone()));
        let c = t.leaf(&Tensor::param(array![[1.7]]));
        let xb = t.add_row(x, b).unwrap();
        let scaled = t.mul(xb, c).unwrap();
        let l = t.sum(scaled);
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap(), &array![[3.0 * 1.7, 3.0 * 1.7]]);
        let total = (&x0 + &b0).sum();
        assert!((t.grad(c).unwrap()[[0, 0]] - total).abs() < 1e-12);
        assert!(t.grad(x).unwrap().iter().all(|&g| (g - 1.7).abs() < 1e-15));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::param(array![[2.0]]));
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn tensor_accumulate_grad_checks_shape() {
        let mut p = Tensor::param(Array2::zeros((2, 2)));
        p.accumulate_grad(&Array2::ones((2, 2))).unwrap();
        p.accumulate_grad(&Array2::ones((2, 2))).unwrap();
        assert_eq!(p.grad().unwrap(), &Array2::from_elem((2, 2), 2.0));
        assert!(p.accumulate_grad(&Array2::ones((1, 2))).is_err());
        p.zero_grad();
        assert!(p.grad().is_none());
    }
}
