//! Closed-form expert energies and their product-of-experts sum.
//!
//! Each function returns a `[batch]` vector of per-row energies on the tape,
//! so gradients with respect to the bank parameters come from the tape.
//!
//! The Student-t bank uses `Σ α_i log(1 + (W_iᵀx)²)`. Its density form is
//! usually written with `½(W_iᵀx)²` inside the log; the two differ, and the
//! energy form is what is implemented here.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{bind, uniform_tensor, Binding};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    /// Product of Student-t.
    Pot,
    Logistic,
    /// Free energy of an RBM with Gaussian visibles and binary hiddens.
    RbmFreeEnergy,
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub kind: ExpertKind,
    /// `[d_in, n_experts]`; column `i` is `W_i`.
    pub weight: Parameter,
    pub bias: Parameter,
    /// Present for [`ExpertKind::Pot`] only.
    pub alpha: Option<Parameter>,
}

impl ExpertBank {
    pub fn new(kind: ExpertKind, weight: Tensor, bias: Tensor, alpha: Option<Tensor>) -> Result<Self> {
        let n = match weight.shape() {
            [_, n] => *n,
            s => {
                return Err(Error::Dimension {
                    op: "expert bank weight",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if bias.shape() != [n] {
            return Err(Error::Dimension {
                op: "expert bank bias",
                lhs: bias.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let alpha = match (kind, alpha) {
            (ExpertKind::Pot, Some(a)) => {
                if a.shape() != [n] {
                    return Err(Error::Dimension {
                        op: "expert bank alpha",
                        lhs: a.shape().to_vec(),
                        rhs: vec![n],
                    });
                }
                check_alpha(&a)?;
                Some(Parameter::new("experts.alpha", a))
            }
            (ExpertKind::Pot, None) => {
                return Err(Error::Invariant("Student-t experts need alpha".into()))
            }
            (_, _) => None,
        };
        Ok(Self {
            kind,
            weight: Parameter::new("experts.weight", weight),
            bias: Parameter::new("experts.bias", bias),
            alpha,
        })
    }

    /// Random bank with weights uniform in `±scale`; Student-t alphas start at 1.
    pub fn random(kind: ExpertKind, d_in: usize, n: usize, scale: f64, rng: &mut Rng) -> Self {
        let alpha = (kind == ExpertKind::Pot).then(|| Tensor::ones(&[n]));
        Self::new(
            kind,
            uniform_tensor(&[d_in, n], scale, rng),
            uniform_tensor(&[n], scale, rng),
            alpha,
        )
        .expect("shapes are consistent by construction")
    }

    pub fn n_experts(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        if let Some(a) = self.alpha.as_mut() {
            out.push(a);
        }
        out
    }

    fn expect_kind(&self, kind: ExpertKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Usage(format!(
                "expert bank is {:?}, expected {:?}",
                self.kind, kind
            )));
        }
        Ok(())
    }

    /// `x · W + b`, the per-expert pre-activations.
    fn responses(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let w = bind(tape, &self.weight, binding);
        let b = bind(tape, &self.bias, binding);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

fn check_alpha(alpha: &Tensor) -> Result<()> {
    if let Some(bad) = alpha.data().iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::Invariant(format!(
            "Student-t alpha must be positive, found {bad}"
        )));
    }
    Ok(())
}

/// Sum of per-expert energies.
pub fn poe_energy(tape: &mut Tape, experts: &[Var]) -> Result<Var> {
    let (first, rest) = experts
        .split_first()
        .ok_or_else(|| Error::Usage("product of experts needs at least one expert".into()))?;
    rest.iter().try_fold(*first, |acc, &e| tape.add(acc, e))
}

/// `Σ_i α_i log(1 + (W_iᵀx)²)` per row. The bank bias is not used.
pub fn pot_energy(tape: &mut Tape, x: Var, bank: &ExpertBank, binding: Binding) -> Result<Var> {
    bank.expect_kind(ExpertKind::Pot)?;
    let alpha = bank.alpha.as_ref().expect("Student-t bank carries alpha");
    check_alpha(&alpha.value)?;
    let w = bind(tape, &bank.weight, binding);
    let proj = tape.matmul(x, w)?;
    let sq = tape.square(proj);
    let shifted = tape.add_scalar(sq, 1.0);
    let logs = tape.log(shifted);
    let a = bind(tape, alpha, binding);
    tape.matvec(logs, a)
}

/// `Σ_i softplus(-(W_iᵀx + b_i))` per row, i.e. `-Σ_i log σ(W_iᵀx + b_i)`.
pub fn logistic_energy(
    tape: &mut Tape,
    x: Var,
    bank: &ExpertBank,
    binding: Binding,
) -> Result<Var> {
    bank.expect_kind(ExpertKind::Logistic)?;
    let r = bank.responses(tape, x, binding)?;
    let neg = tape.neg(r);
    let sp = tape.softplus(neg);
    Ok(tape.sum_rows(sp))
}

/// `(1/σ²)xᵀx - b_visᵀx - Σ_i log(1 + e^{W_iᵀx + b_i})` per row.
pub fn rbm_free_energy(
    tape: &mut Tape,
    x: Var,
    bank: &ExpertBank,
    sigma: f64,
    b_vis: &Parameter,
    binding: Binding,
) -> Result<Var> {
    bank.expect_kind(ExpertKind::RbmFreeEnergy)?;
    gaussian_visible_free_energy(tape, x, x, bank, sigma, b_vis, binding)
}

/// Free energy with the quadratic and linear terms on `visible` and the
/// softplus experts on `expert_input`. With `expert_input == visible` this is
/// the Gaussian-RBM free energy; with learned features it is the deep energy.
pub(crate) fn gaussian_visible_free_energy(
    tape: &mut Tape,
    visible: Var,
    expert_input: Var,
    bank: &ExpertBank,
    sigma: f64,
    b_vis: &Parameter,
    binding: Binding,
) -> Result<Var> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Invariant(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let sq = tape.square(visible);
    let xx = tape.sum_rows(sq);
    let quad = tape.scale(xx, 1.0 / (sigma * sigma));
    let b = bind(tape, b_vis, binding);
    let lin = tape.matvec(visible, b)?;
    let r = bank.responses(tape, expert_input, binding)?;
    let sp = tape.softplus(r);
    let experts = tape.sum_rows(sp);
    let e = tape.sub(quad, lin)?;
    tape.sub(e, experts)
}
