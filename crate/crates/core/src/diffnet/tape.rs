//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::gradient`] on a scalar output sweeps the record backwards once.
//! Binary element-wise ops broadcast over singleton dimensions (`n×m` with `1×m`,
//! `n×1` or `1×1`), and the backward pass sums the gradient back to the operand
//! shape.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Slice { src: usize, offset: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that gradients do not flow into.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A `1×n` differentiable row built from a slice.
    pub fn row_var(&self, values: &[f64]) -> Var<'_> {
        self.var(row(values))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op, self.needs(a))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            assert!(
                broadcastable(va.dim(), vb.dim()),
                "incompatible shapes {:?} and {:?}",
                va.dim(),
                vb.dim()
            );
            f(va, vb)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    ///
    /// Panics if `output` is not `1×1` or belongs to another tape.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, output.tape), "variable from another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "gradient needs a scalar output");

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], g.dot(&val(b).t()));
                    }
                    if nodes[b].needs_grad {
                        accumulate(&mut grads[b], val(a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], reduce_to(&g, val(a).dim()));
                    }
                    if nodes[b].needs_grad {
                        accumulate(&mut grads[b], reduce_to(&g, val(b).dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], reduce_to(&g, val(a).dim()));
                    }
                    if nodes[b].needs_grad {
                        accumulate(&mut grads[b], -reduce_to(&g, val(b).dim()));
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], reduce_to(&(&g * val(b)), val(a).dim()));
                    }
                    if nodes[b].needs_grad {
                        accumulate(&mut grads[b], reduce_to(&(&g * val(a)), val(b).dim()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], reduce_to(&(&g / vb), va.dim()));
                    }
                    if nodes[b].needs_grad {
                        let gb = -(&g * &node.value) / vb;
                        accumulate(&mut grads[b], reduce_to(&gb, vb.dim()));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[a], -g),
                Op::Scale(a, c) => accumulate(&mut grads[a], g * c),
                Op::Offset(a) => accumulate(&mut grads[a], g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads[a], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    accumulate(&mut grads[a], ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(a))
                        .for_each(|gi, &x| *gi *= sigmoid(x));
                    accumulate(&mut grads[a], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a], g * &node.value),
                Op::Ln(a) => accumulate(&mut grads[a], g / val(a)),
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= 0.5 / y);
                    accumulate(&mut grads[a], ga);
                }
                Op::Square(a) => accumulate(&mut grads[a], g * val(a) * 2.0),
                Op::ClampMin(a, floor) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|gi, &x| {
                        if x <= floor {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads[a], ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(val(a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[a], ga);
                }
                Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    let ga = Array2::from_elem(val(a).dim(), g[[0, 0]] / n);
                    accumulate(&mut grads[a], ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(val(a).dim()).expect("column broadcast").to_owned();
                    accumulate(&mut grads[a], ga);
                }
                Op::Slice { src, offset } => {
                    let len = g.len();
                    let dst = grads[src].get_or_insert_with(|| Array2::zeros(val(src).dim()));
                    let mut window = dst.slice_mut(s![0, offset..offset + len]);
                    for (d, &x) in window.iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Array2<f64> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a `1×1` variable.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.dim(), (1, 1), "not a scalar");
        v[[0, 0]]
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let tape = self.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert_eq!(a.ncols(), b.nrows(), "matmul of {:?} by {:?}", a.dim(), b.dim());
            a.dot(b)
        };
        let needs = tape.needs(self.id) || tape.needs(rhs.id);
        tape.push(value, Op::MatMul(self.id, rhs.id), needs)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.mapv(|x| x.max(0.0)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |a| a.mapv(sigmoid))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Softplus(self.id), |a| a.mapv(softplus))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Ln(self.id), |a| a.mapv(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| a.mapv(f64::sqrt))
    }

    pub fn square(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Square(self.id), |a| a.mapv(|x| x * x))
    }

    /// `max(x, floor)` with zero gradient where the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::ClampMin(self.id, floor), |a| {
            a.mapv(|x| x.max(floor))
        })
    }

    /// Sum of all entries, as a `1×1` value.
    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| {
            Array2::from_elem((1, 1), a.sum())
        })
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Mean(self.id), |a| {
            Array2::from_elem((1, 1), a.sum() / a.len() as f64)
        })
    }

    /// Per-row sums, `n×m -> n×1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            a.sum_axis(Axis(1)).insert_axis(Axis(1))
        })
    }

    /// Contiguous window of a `1×n` row, reshaped row-major to `rows×cols`.
    pub fn slice(self, offset: usize, rows: usize, cols: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            assert_eq!(src.nrows(), 1, "slice source must be a row");
            assert!(offset + rows * cols <= src.ncols(), "slice out of range");
            src.slice(s![0, offset..offset + rows * cols])
                .to_owned()
                .into_shape_with_order((rows, cols))
                .expect("contiguous reshape")
        };
        let needs = self.tape.needs(self.id);
        self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                offset,
            },
            needs,
        )
    }

    fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |a| a + c)
    }

    fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a * c)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| -a)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.offset(c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.offset(-c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v.scale(self)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.scale(1.0 / c)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Shorthand for a `1×n` array.
pub fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    let dim_ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    dim_ok(a.0, b.0) && dim_ok(a.1, b.1)
}

fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn matmul_bias_chain_matches_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.2, 0.5, -0.4]];
        let w = array![[0.5, -1.0], [0.25, 0.75], [-0.6, 0.1]];
        let b = array![[0.1, -0.2]];
        let f = |x: &Array2<f64>| {
            let t = Tape::new();
            let xv = t.var(x.clone());
            let y = (xv.matmul(t.constant(w.clone())) + t.constant(b.clone())).sigmoid();
            (y.square() * 3.0 + y.softplus()).sum().scalar()
        };
        let t = Tape::new();
        let xv = t.var(x0.clone());
        let y = (xv.matmul(t.constant(w.clone())) + t.constant(b.clone())).sigmoid();
        let out = (y.square() * 3.0 + y.softplus()).sum();
        let g = t.gradient(out).wrt(xv);
        let ng = numeric_grad(&x0, f);
        for (a, b) in g.iter().zip(ng.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn broadcast_gradients_reduce_to_operand_shape() {
        let t = Tape::new();
        let m = t.var(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let r = t.var(array![[0.5, -1.0]]);
        let c = t.var(array![[2.0], [1.0], [0.0]]);
        let out = ((m * r) / (c + 1.0)).sum();
        let grads = t.gradient(out);
        assert_eq!(grads.wrt(r).dim(), (1, 2));
        assert_eq!(grads.wrt(c).dim(), (3, 1));
        // d/dr_j sum_i m_ij / (c_i + 1)
        let gr = grads.wrt(r);
        assert!((gr[[0, 0]] - (1.0 / 3.0 + 3.0 / 2.0 + 5.0)).abs() < 1e-12);
        assert!((gr[[0, 1]] - (2.0 / 3.0 + 4.0 / 2.0 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn slice_scatters_back_into_the_row() {
        let t = Tape::new();
        let p = t.row_var(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let w = p.slice(1, 2, 2);
        let b = p.slice(5, 1, 2);
        assert_eq!(w.value(), array![[2.0, 3.0], [4.0, 5.0]]);
        let out = (w.sum() * 2.0 + b.square().sum()).sum();
        let g = t.gradient(out).wrt(p);
        assert_eq!(g, array![[0.0, 2.0, 2.0, 2.0, 2.0, 12.0, 14.0]]);
    }

    #[test]
    fn clamp_floor_blocks_gradient() {
        let t = Tape::new();
        let x = t.var(array![[0.5, 2.0]]);
        let out = x.clamp_min(1.0).sqrt().sum();
        let g = t.gradient(out).wrt(x);
        assert_eq!(g[[0, 0]], 0.0);
        assert!((g[[0, 1]] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let x = t.var(array![[3.0, 4.0]]);
        let out = (c * x).exp().ln().sum();
        let grads = t.gradient(out);
        assert_eq!(grads.wrt(c), Array2::zeros((1, 2)));
        assert_eq!(grads.wrt(x), array![[1.0, 2.0]]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
