//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its output value and the indices of its inputs, so node
//! order is always a valid topological order. [`Tape::backward`] walks the
//! nodes once in reverse and accumulates gradients for every
//! [`Parameter`] that was bound with [`Tape::param`].
//!
//! Numerically delicate primitives use overflow-safe identities:
//!
//! * `softplus(a) = max(a, 0) + ln(1 + e^{-|a|})`
//! * `sigmoid(a) = 1 / (1 + e^{-a})` for `a >= 0`, `e^{a} / (1 + e^{a})` otherwise

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Variance floor added inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistics at each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Infer,
}

/// Exponential moving averages of per-feature mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    BatchNorm {
        input: Var,
        shift: Var,
        scale: Var,
        mode: BatchNormMode,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that receives no parameter gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records the current value of `p`; its gradient is collected by `backward`.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.value.clone(), Op::Param(p.id()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `[m,n] · [n] -> [m]`
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.shape().len() != 2 || vv.shape() != [av.cols()] {
            return Err(shape_err("matvec", av, vv));
        }
        let out: Vec<f64> = (0..av.rows())
            .map(|i| av.row(i).iter().zip(vv.data()).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![av.rows()], out)?;
        Ok(self.push(out, Op::MatVec(a, v)))
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.shape() != [av.cols()] {
            return Err(shape_err("add_row", av, bv));
        }
        let n = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let out = av.zip_map(bv, f);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Row sums of a `[m,n]` matrix, giving `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let out = Tensor::new(vec![av.rows()], out).expect("row count is positive");
        self.push(out, Op::SumRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Per-feature batch normalization of a `[batch,d]` input followed by
    /// `scale * x̂ + shift`. Train mode also folds the batch statistics into
    /// `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        shift: Var,
        scale: Var,
        mode: BatchNormMode,
        running: &mut RunningStats,
    ) -> Result<Var> {
        let x = self.value(input);
        let (m, d) = (x.rows(), x.cols());
        let (sh, sc) = (self.value(shift), self.value(scale));
        if x.shape().len() != 2 || sh.shape() != [d] || sc.shape() != [d] {
            return Err(shape_err("batch_norm", x, sc));
        }
        if running.mean.len() != d || running.var.len() != d {
            return Err(Error::Dimension {
                op: "batch_norm running stats",
                lhs: vec![d],
                rhs: vec![running.mean.len()],
            });
        }
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                if m < 2 {
                    return Err(Error::Config(format!(
                        "batch norm in train mode needs batch >= 2, got {m}"
                    )));
                }
                let mut mean = vec![0.0; d];
                for i in 0..m {
                    for (mu, v) in mean.iter_mut().zip(x.row(i)) {
                        *mu += v;
                    }
                }
                mean.iter_mut().for_each(|mu| *mu /= m as f64);
                let mut var = vec![0.0; d];
                for i in 0..m {
                    for ((s, v), mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|s| *s /= m as f64);
                (mean, var)
            }
            BatchNormMode::Infer => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut out = x.clone();
        for i in 0..m {
            for j in 0..d {
                let h = (x.get(i, j) - mean[j]) * inv_std[j];
                xhat.data_mut()[i * d + j] = h;
                out.data_mut()[i * d + j] = sc.data()[j] * h + sh.data()[j];
            }
        }
        if mode == BatchNormMode::Train {
            for j in 0..d {
                running.mean[j] = BN_MOMENTUM * running.mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                running.var[j] = BN_MOMENTUM * running.var[j] + (1.0 - BN_MOMENTUM) * var[j];
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                shift,
                scale,
                mode,
                xhat,
                inv_std,
            },
        ))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        let mut params: HashMap<ParamId, Tensor> = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut HashMap<ParamId, Tensor>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(existing) => existing.add_assign(g),
                None => {
                    params.insert(*id, g.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(av.shape());
                gemm_nt(g.data(), bv.data(), ga.data_mut(), m, k, n);
                let mut gb = Tensor::zeros(bv.shape());
                gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MatVec(a, v) => {
                let (av, vv) = (val(*a), val(*v));
                let (m, n) = (av.rows(), av.cols());
                let mut ga = Tensor::zeros(av.shape());
                gemm_nn(g.data(), vv.data(), ga.data_mut(), m, 1, n);
                let mut gv = Tensor::zeros(vv.shape());
                gemm_tn(av.data(), g.data(), gv.data_mut(), m, n, 1);
                acc(*a, ga);
                acc(*v, gv);
            }
            Op::AddRow(a, bias) => {
                let n = val(*bias).numel();
                let mut gb = vec![0.0; n];
                for (i, gv) in g.data().iter().enumerate() {
                    gb[i % n] += gv;
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::new(vec![n], gb).expect("bias width"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let c = av.cols();
                let data = (0..av.numel()).map(|i| g.data()[i / c]).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), data).expect("same shape"));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::BatchNorm {
                input,
                shift,
                scale,
                mode,
                xhat,
                inv_std,
            } => {
                let sc = val(*scale);
                let (m, d) = (xhat.rows(), xhat.cols());
                let mut gshift = vec![0.0; d];
                let mut gscale = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        let gv = g.get(i, j);
                        gshift[j] += gv;
                        gscale[j] += gv * xhat.get(i, j);
                    }
                }
                let mut gx = Tensor::zeros(xhat.shape());
                match mode {
                    BatchNormMode::Train => {
                        // dx = inv_std/m * (m*dx̂ - Σdx̂ - x̂ Σ(dx̂ x̂)), with dx̂ = g*scale
                        let mf = m as f64;
                        for j in 0..d {
                            let s = sc.data()[j];
                            let sum_dh = gshift[j] * s;
                            let sum_dh_h = gscale[j] * s;
                            for i in 0..m {
                                let dh = g.get(i, j) * s;
                                gx.data_mut()[i * d + j] = inv_std[j] / mf
                                    * (mf * dh - sum_dh - xhat.get(i, j) * sum_dh_h);
                            }
                        }
                    }
                    BatchNormMode::Infer => {
                        for i in 0..m {
                            for j in 0..d {
                                gx.data_mut()[i * d + j] =
                                    g.get(i, j) * sc.data()[j] * inv_std[j];
                            }
                        }
                    }
                }
                acc(*input, gx);
                acc(*shift, Tensor::new(vec![d], gshift).expect("width"));
                acc(*scale, Tensor::new(vec![d], gscale).expect("width"));
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the root with respect to `p`, or `None` if unreachable.
    pub fn param(&self, p: &Parameter) -> Option<&Tensor> {
        self.params.get(&p.id())
    }

    /// Gradient of the root with respect to an intermediate node.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Stores each parameter's gradient in `p.grad`; unreachable parameters get zeros.
    pub fn write_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            match self.params.get(&p.id()) {
                Some(g) => p.grad.clone_from(g),
                None => p.zero_grad(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, shape: &[usize], data: &[f64]) -> Parameter {
        Parameter::new(name, Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut p = param("p", &[2, 2], &[0.3, -1.0, 2.0, 5.0]);
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let root = tape.sum(v);
        tape.backward(root).unwrap().write_into([&mut p]);
        assert_eq!(p.grad.data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let mut p = param("p", &[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let vv = tape.mul(v, v).unwrap();
        let root = tape.sum(vv);
        tape.backward(root).unwrap().write_into([&mut p]);
        assert_eq!(p.grad.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let p = param("p", &[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&p);
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut used = param("used", &[2], &[1.0, 1.0]);
        let mut unused = param("unused", &[2], &[3.0, 3.0]);
        unused.grad = Tensor::full(&[2], 7.0);
        let mut tape = Tape::new();
        let v = tape.param(&used);
        let root = tape.sum(v);
        tape.backward(root)
            .unwrap()
            .write_into([&mut used, &mut unused]);
        assert_eq!(unused.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut p = param("p", &[2], &[1.0, -2.0]);
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let s = tape.scale(b, 3.0);
        let t = tape.add(a, s).unwrap();
        let root = tape.sum(t);
        tape.backward(root).unwrap().write_into([&mut p]);
        assert_eq!(p.grad.data(), &[4.0, 4.0]);
    }

    #[test]
    fn batch_norm_identity_parameters() {
        // zero mean, unit (biased) variance columns
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let sh = tape.constant(Tensor::zeros(&[2]));
        let sc = tape.constant(Tensor::ones(&[2]));
        let mut rs = RunningStats::new(2);
        let y = tape
            .batch_norm(xv, sh, sc, BatchNormMode::Train, &mut rs)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_zero_scale_outputs_shift() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 5.0, -2.0, 3.0, 7.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let sh = tape.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let sc = tape.constant(Tensor::zeros(&[2]));
        let mut rs = RunningStats::new(2);
        let y = tape
            .batch_norm(xv, sh, sc, BatchNormMode::Train, &mut rs)
            .unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).row(i), &[0.25, -4.0]);
        }
    }

    #[test]
    fn batch_norm_needs_two_rows_in_train_mode() {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 2]));
        let sh = tape.constant(Tensor::zeros(&[2]));
        let sc = tape.constant(Tensor::ones(&[2]));
        let mut rs = RunningStats::new(2);
        let err = tape.batch_norm(xv, sh, sc, BatchNormMode::Train, &mut rs);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(tape
            .batch_norm(xv, sh, sc, BatchNormMode::Infer, &mut rs)
            .is_ok());
    }

    #[test]
    fn batch_norm_running_stats_follow_momentum() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let sh = tape.constant(Tensor::zeros(&[1]));
        let sc = tape.constant(Tensor::ones(&[1]));
        let mut rs = RunningStats::new(1);
        tape.batch_norm(xv, sh, sc, BatchNormMode::Train, &mut rs)
            .unwrap();
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        assert!((rs.var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.add_row(a, c).is_err());
        assert!(tape.matvec(a, c).is_err());
        assert!(tape.add_row(a, b).is_ok());
    }
}
