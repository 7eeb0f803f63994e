//! Exact population loss of two-layer teacher-student networks.
//!
//! Inputs are i.i.d. standard normal, so every second moment of the hidden
//! activations is a closed-form Gaussian kernel of the two weight rows:
//!
//! - ReLU (arc-cosine kernel of degree one):
//!   `k(w,v) = ‖w‖‖v‖ (sin θ + (π − θ) cos θ) / 2π`
//! - `σ(u) = erf(u/√2)`:
//!   `k(w,v) = (2/π) asin( w·v / √((1+‖w‖²)(1+‖v‖²)) )`
//!
//! The loss is `½ E[(f_s(x) − f_t(x))²]` with `f(x) = Σ_i u_i σ(w_i·x)`, which
//! expands into three kernel Gram sums.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equiv::EquivariantBasis;
use crate::error::{Error, Result};
use crate::linalg::{self, SymSpectrum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Erf,
}

impl Activation {
    /// Pointwise nonlinearity, used for direct network evaluation.
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Erf => libm::erf(z / std::f64::consts::SQRT_2),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "erf" => Ok(Activation::Erf),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E_x[σ(w·x) σ(v·x)]` for `x ~ N(0, I)`.
pub fn kernel(act: Activation, w: &[f64], v: &[f64]) -> Result<f64> {
    if w.len() != v.len() {
        return Err(Error::config("kernel arguments differ in length"));
    }
    if w.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite kernel argument"));
    }
    Ok(kernel_raw(act, dot(w, w), dot(v, v), dot(w, v)))
}

/// Kernel from the Gram entries `‖w‖²`, `‖v‖²`, `w·v`.
#[inline]
pub fn kernel_raw(act: Activation, ww: f64, vv: f64, wv: f64) -> f64 {
    match act {
        Activation::Relu => {
            let nn = (ww * vv).sqrt();
            if nn == 0.0 {
                return 0.0;
            }
            let c = (wv / nn).clamp(-1.0, 1.0);
            let theta = c.acos();
            let s = (1.0 - c * c).max(0.0).sqrt();
            nn * (s + (PI - theta) * c) / (2.0 * PI)
        }
        Activation::Erf => {
            let r = wv / ((1.0 + ww) * (1.0 + vv)).sqrt();
            2.0 / PI * r.clamp(-1.0, 1.0).asin()
        }
    }
}

/// Monte-Carlo estimate of a kernel value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Estimates `E[σ(w·x) σ(v·x)]` for every pair from one shared stream of
/// `n` seeded Gaussian samples.
pub fn kernel_monte_carlo(act: Activation, pairs: &[(Vec<f64>, Vec<f64>)], n: usize, seed: u64) -> Result<Vec<McEstimate>> {
    let Some(d) = pairs.first().map(|p| p.0.len()) else {
        return Ok(Vec::new());
    };
    if pairs.iter().any(|(w, v)| w.len() != d || v.len() != d) {
        return Err(Error::config("kernel pairs differ in dimension"));
    }
    if n < 2 {
        return Err(Error::config("Monte-Carlo needs at least 2 samples"));
    }
    let mut rng = crate::rng::PortableRng::new(seed);
    let mut sum = vec![0.0; pairs.len()];
    let mut sum_sq = vec![0.0; pairs.len()];
    let mut x = vec![0.0; d];
    for _ in 0..n {
        for xi in x.iter_mut() {
            *xi = rng.normal();
        }
        for (k, (w, v)) in pairs.iter().enumerate() {
            let y = act.apply(dot(w, &x)) * act.apply(dot(v, &x));
            sum[k] += y;
            sum_sq[k] += y * y;
        }
    }
    let nf = n as f64;
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| {
            let mean = s / nf;
            let var = ((q / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
            McEstimate {
                mean,
                std_err: (var / nf).sqrt(),
            }
        })
        .collect())
}

/// Gradient of the kernel with respect to its first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrad {
    pub grad: Vec<f64>,
    /// Set where the kernel is not differentiable (ReLU at `w = 0`); the
    /// gradient is then reported as zero.
    pub degenerate: bool,
}

pub fn kernel_grad(act: Activation, w: &[f64], v: &[f64]) -> KernelGrad {
    let mut grad = vec![0.0; w.len()];
    let degenerate = !kernel_grad_into(act, w, v, dot(w, w), dot(v, v), dot(w, v), 1.0, &mut grad);
    if degenerate {
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    KernelGrad { grad, degenerate }
}

/// Adds `scale · ∂k(w,v)/∂w` into `out`. Returns false (adding nothing) at a
/// degenerate point.
#[inline]
#[allow(clippy::too_many_arguments)]
fn kernel_grad_into(
    act: Activation,
    w: &[f64],
    v: &[f64],
    ww: f64,
    vv: f64,
    wv: f64,
    scale: f64,
    out: &mut [f64],
) -> bool {
    match act {
        Activation::Relu => {
            let (nw, nv) = (ww.sqrt(), vv.sqrt());
            if nw == 0.0 {
                return false;
            }
            if nv == 0.0 {
                return true;
            }
            let c = (wv / (nw * nv)).clamp(-1.0, 1.0);
            let theta = c.acos();
            let s = (1.0 - c * c).max(0.0).sqrt();
            let a = scale * nv * s / nw / (2.0 * PI);
            let b = scale * (PI - theta) / (2.0 * PI);
            for ((o, wi), vi) in out.iter_mut().zip(w).zip(v) {
                *o += a * wi + b * vi;
            }
            true
        }
        Activation::Erf => {
            let (a, b) = (1.0 + ww, 1.0 + vv);
            let det = a * b - wv * wv;
            if det <= 0.0 {
                return false;
            }
            let f = scale * 2.0 / PI / det.sqrt();
            let ratio = wv / a;
            for ((o, wi), vi) in out.iter_mut().zip(w).zip(v) {
                *o += f * (vi - ratio * wi);
            }
            true
        }
    }
}

/// Two-layer network `f(x) = Σ_i u_i σ(w_i · x)` with fixed output weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub weights: DMatrix<f64>,
    pub out_weights: Vec<f64>,
    pub activation: Activation,
}

impl Network {
    /// Network with all output weights equal to one.
    pub fn new(weights: DMatrix<f64>, activation: Activation) -> Self {
        let h = weights.nrows();
        Self {
            weights,
            out_weights: vec![1.0; h],
            activation,
        }
    }

    pub fn hidden(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Direct evaluation at one input.
    pub fn eval(&self, x: &[f64]) -> f64 {
        (0..self.hidden())
            .map(|i| {
                let z: f64 = (0..self.input_dim()).map(|j| self.weights[(i, j)] * x[j]).sum();
                self.out_weights[i] * self.activation.apply(z)
            })
            .sum()
    }
}

/// Row-major copy of a weight matrix, the layout the kernel loops want.
#[derive(Clone, Debug)]
pub(crate) struct Rows {
    pub h: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub sq: Vec<f64>,
}

impl Rows {
    pub fn from_matrix(w: &DMatrix<f64>) -> Self {
        let (h, d) = w.shape();
        let mut data = Vec::with_capacity(h * d);
        for i in 0..h {
            for j in 0..d {
                data.push(w[(i, j)]);
            }
        }
        Self::from_row_major(h, d, data)
    }

    pub fn from_row_major(h: usize, d: usize, data: Vec<f64>) -> Self {
        let sq = (0..h).map(|i| dot(&data[i * d..(i + 1) * d], &data[i * d..(i + 1) * d])).collect();
        Self { h, d, data, sq }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// `Σ_ij a_i b_j k(A_i, B_j)`
pub(crate) fn gram_sum(act: Activation, a: &Rows, ua: &[f64], b: &Rows, ub: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.h {
        let ai = a.row(i);
        let mut acc = 0.0;
        for j in 0..b.h {
            acc += ub[j] * kernel_raw(act, a.sq[i], b.sq[j], dot(ai, b.row(j)));
        }
        s += ua[i] * acc;
    }
    s
}

/// Teacher, input model and student output weights for exact-loss evaluation.
#[derive(Clone, Debug)]
pub struct LossContext {
    teacher: Network,
    teacher_rows: Rows,
    teacher_gram: f64,
    student_out: Vec<f64>,
}

/// Loss value with its gradient in row-major weight layout.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of kernel pairs at which the gradient was degenerate.
    pub degenerate: usize,
}

impl LossContext {
    /// Student output weights default to all ones, one per teacher neuron.
    pub fn new(teacher: Network) -> Result<Self> {
        let h = teacher.hidden();
        Self::with_student_out(teacher, vec![1.0; h])
    }

    pub fn with_student_out(teacher: Network, student_out: Vec<f64>) -> Result<Self> {
        if teacher.weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite teacher weights"));
        }
        if teacher.out_weights.len() != teacher.hidden() {
            return Err(Error::config("teacher output weights do not match hidden width"));
        }
        let teacher_rows = Rows::from_matrix(&teacher.weights);
        let teacher_gram = gram_sum(
            teacher.activation,
            &teacher_rows,
            &teacher.out_weights,
            &teacher_rows,
            &teacher.out_weights,
        );
        Ok(Self {
            teacher,
            teacher_rows,
            teacher_gram,
            student_out,
        })
    }

    pub fn teacher(&self) -> &Network {
        &self.teacher
    }

    pub fn activation(&self) -> Activation {
        self.teacher.activation
    }

    pub fn input_dim(&self) -> usize {
        self.teacher.input_dim()
    }

    pub fn student_hidden(&self) -> usize {
        self.student_out.len()
    }

    pub fn student_out(&self) -> &[f64] {
        &self.student_out
    }

    /// Wraps a weight matrix as a student network of this context.
    pub fn student(&self, weights: DMatrix<f64>) -> Network {
        Network {
            weights,
            out_weights: self.student_out.clone(),
            activation: self.activation(),
        }
    }

    fn check_student(&self, student: &Network) -> Result<()> {
        if student.input_dim() != self.input_dim() {
            return Err(Error::config(format!(
                "student input dim {} != teacher input dim {}",
                student.input_dim(),
                self.input_dim()
            )));
        }
        if student.activation != self.activation() {
            return Err(Error::config("student and teacher activations differ"));
        }
        if student.out_weights.len() != student.hidden() {
            return Err(Error::config("student output weights do not match hidden width"));
        }
        Ok(())
    }

    pub fn population_loss(&self, student: &Network) -> Result<f64> {
        self.check_student(student)?;
        let rows = Rows::from_matrix(&student.weights);
        let l = self.loss_rows(&rows, &student.out_weights);
        if !l.is_finite() {
            return Err(Error::numeric("non-finite loss"));
        }
        Ok(l)
    }

    pub(crate) fn loss_rows(&self, rows: &Rows, us: &[f64]) -> f64 {
        let act = self.activation();
        let ss = gram_sum(act, rows, us, rows, us);
        let st = gram_sum(act, rows, us, &self.teacher_rows, &self.teacher.out_weights);
        0.5 * (ss - 2.0 * st + self.teacher_gram)
    }

    /// Loss and its gradient for a row-major weight vector with the context's
    /// student output weights.
    pub(crate) fn loss_grad_rows(&self, rows: &Rows) -> LossGrad {
        let act = self.activation();
        let us = &self.student_out;
        let ut = &self.teacher.out_weights;
        let t = &self.teacher_rows;
        let (h, d) = (rows.h, rows.d);
        let mut grad = vec![0.0; h * d];
        let mut ss = 0.0;
        let mut st = 0.0;
        let mut degenerate = 0;
        for i in 0..h {
            let wi = rows.row(i);
            let gi = &mut grad[i * d..(i + 1) * d];
            for j in 0..h {
                let wj = rows.row(j);
                let wv = dot(wi, wj);
                ss += us[i] * us[j] * kernel_raw(act, rows.sq[i], rows.sq[j], wv);
                if !kernel_grad_into(act, wi, wj, rows.sq[i], rows.sq[j], wv, us[i] * us[j], gi) {
                    degenerate += 1;
                }
            }
            for k in 0..t.h {
                let tk = t.row(k);
                let wv = dot(wi, tk);
                st += us[i] * ut[k] * kernel_raw(act, rows.sq[i], t.sq[k], wv);
                if !kernel_grad_into(act, wi, tk, rows.sq[i], t.sq[k], wv, -us[i] * ut[k], gi) {
                    degenerate += 1;
                }
            }
        }
        LossGrad {
            loss: 0.5 * (ss - 2.0 * st + self.teacher_gram),
            grad,
            degenerate,
        }
    }

    /// `∇_W L` as an `h × d_in` matrix.
    pub fn loss_grad(&self, student: &Network) -> Result<DMatrix<f64>> {
        self.check_student(student)?;
        if student.out_weights != self.student_out {
            return Err(Error::config("student output weights differ from the context's"));
        }
        let lg = self.loss_grad_rows(&Rows::from_matrix(&student.weights));
        if !lg.loss.is_finite() {
            return Err(Error::numeric("non-finite loss"));
        }
        let (h, d) = student.weights.shape();
        Ok(DMatrix::from_row_slice(h, d, &lg.grad))
    }

    /// Coefficient-space gradient: Frobenius products of `∇_W L` with the basis.
    pub fn loss_grad_coeffs(&self, basis: &EquivariantBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
        let w = basis.coeffs_to_weights(coeffs)?;
        let g = self.loss_grad(&self.student(w))?;
        Ok(basis.project_gradient(&g))
    }

    /// `Σ_ij u_i u_j k(a_i, b_j)` with the student output weights on both sides.
    pub fn student_gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        gram_sum(
            self.activation(),
            &Rows::from_matrix(a),
            &self.student_out,
            &Rows::from_matrix(b),
            &self.student_out,
        )
    }
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn value(&self, x: &[f64]) -> f64 {
        self.value_grad(x).0
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.value_grad(x).1
    }
}

/// Loss over unconstrained weights, parameters in row-major order.
pub struct FullObjective<'a> {
    pub ctx: &'a LossContext,
}

impl Objective for FullObjective<'_> {
    fn dim(&self) -> usize {
        self.ctx.student_hidden() * self.ctx.input_dim()
    }

    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let rows = Rows::from_row_major(self.ctx.student_hidden(), self.ctx.input_dim(), x.to_vec());
        let lg = self.ctx.loss_grad_rows(&rows);
        (lg.loss, lg.grad)
    }

    fn value(&self, x: &[f64]) -> f64 {
        let rows = Rows::from_row_major(self.ctx.student_hidden(), self.ctx.input_dim(), x.to_vec());
        self.ctx.loss_rows(&rows, self.ctx.student_out())
    }
}

/// Loss restricted to the span of an equivariant basis, parameters are coefficients.
pub struct CoeffObjective<'a> {
    pub ctx: &'a LossContext,
    pub basis: &'a EquivariantBasis,
}

impl Objective for CoeffObjective<'_> {
    fn dim(&self) -> usize {
        self.basis.len()
    }

    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let rows = Rows::from_row_major(
            self.basis.rows(),
            self.basis.cols(),
            self.basis.coeffs_to_row_major(x),
        );
        let lg = self.ctx.loss_grad_rows(&rows);
        (lg.loss, self.basis.project_row_major(&lg.grad))
    }

    fn value(&self, x: &[f64]) -> f64 {
        let rows = Rows::from_row_major(
            self.basis.rows(),
            self.basis.cols(),
            self.basis.coeffs_to_row_major(x),
        );
        self.ctx.loss_rows(&rows, self.ctx.student_out())
    }
}

/// Per-coordinate Hessian step `1e-5 · (1 + |x_i|)`.
pub fn default_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Symmetrized central-difference Hessian of the analytic gradient.
pub fn hessian_fd(obj: &dyn Objective, point: &[f64], step: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let h = hessian_fd_raw(obj, point, step)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// Central differences of the gradient, column `i` from offsets along
/// coordinate `i`; not symmetrized.
pub fn hessian_fd_raw(obj: &dyn Objective, point: &[f64], step: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let n = obj.dim();
    if point.len() != n {
        return Err(Error::config(format!("point has {} entries, objective expects {n}", point.len())));
    }
    let mut h = DMatrix::zeros(n, n);
    let mut x = point.to_vec();
    for i in 0..n {
        let s = step(point[i]);
        x[i] = point[i] + s;
        let gp = obj.grad(&x);
        x[i] = point[i] - s;
        let gm = obj.grad(&x);
        x[i] = point[i];
        for r in 0..n {
            let v = (gp[r] - gm[r]) / (2.0 * s);
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient at offset ±{s:e} along coordinate {i}"
                )));
            }
            h[(r, i)] = v;
        }
    }
    Ok(h)
}

/// Hessian with the default step, followed by its spectrum.
pub fn hessian_spectrum(obj: &dyn Objective, point: &[f64]) -> Result<SymSpectrum> {
    linalg::spectrum(&hessian_fd(obj, point, default_step)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    #[test]
    fn closed_form_points() {
        let e = [1.0, 0.0, 0.0];
        let f = [0.0, 1.0, 0.0];
        let m = [-1.0, 0.0, 0.0];
        assert!((kernel(Activation::Relu, &e, &e).unwrap() - 0.5).abs() < 1e-12);
        assert!(kernel(Activation::Relu, &e, &m).unwrap().abs() < 1e-12);
        assert!((kernel(Activation::Relu, &e, &f).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((kernel(Activation::Erf, &e, &e).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(kernel(Activation::Relu, &[0.0; 3], &e).unwrap(), 0.0);
    }

    #[test]
    fn kernel_rejects_non_finite() {
        assert!(matches!(
            kernel(Activation::Relu, &[f64::NAN], &[1.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relu_grad_degenerate_at_zero() {
        let g = kernel_grad(Activation::Relu, &[0.0, 0.0], &[1.0, 0.0]);
        assert!(g.degenerate);
        assert_eq!(g.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn relu_self_grad_homogeneity() {
        // d/dc k(cw, cw)|_{c=1} = 2 k(w,w) = 1 for unit w, split evenly between arguments
        let w = [0.6, 0.8];
        let g = kernel_grad(Activation::Relu, &w, &w);
        let along: f64 = g.grad.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((2.0 * along - 1.0).abs() < 1e-12);
    }

    #[test]
    fn erf_orthogonal_grad_is_parallel_to_v() {
        let g = kernel_grad(Activation::Erf, &[1.0, 0.0], &[0.0, 2.0]);
        assert!(g.grad[0].abs() < 1e-15);
        assert!(g.grad[1] > 0.0);
    }

    #[test]
    fn student_equals_teacher() {
        let mut rng = PortableRng::new(3);
        let w = DMatrix::from_fn(4, 5, |_, _| rng.normal());
        for act in [Activation::Relu, Activation::Erf] {
            let t = Network::new(w.clone(), act);
            let ctx = LossContext::new(t.clone()).unwrap();
            assert!(ctx.population_loss(&t).unwrap().abs() < 1e-12);
            assert!(ctx.loss_grad(&t).unwrap().abs().max() < 1e-10);
        }
    }

    #[test]
    fn single_neuron_zero_teacher() {
        let teacher = Network::new(DMatrix::zeros(1, 2), Activation::Relu);
        let ctx = LossContext::new(teacher).unwrap();
        let s = ctx.student(DMatrix::from_row_slice(1, 2, &[0.6, 0.8]));
        assert!((ctx.population_loss(&s).unwrap() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let ctx = LossContext::new(Network::new(DMatrix::zeros(2, 3), Activation::Relu)).unwrap();
        let s = ctx.student(DMatrix::zeros(2, 4));
        assert!(ctx.population_loss(&s).unwrap_err().is_config());
    }

    #[test]
    fn quadratic_hessian() {
        struct Quad;
        impl Objective for Quad {
            fn dim(&self) -> usize {
                1
            }
            fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
                (x[0] * x[0], vec![2.0 * x[0]])
            }
        }
        let h = hessian_fd(&Quad, &[0.3], default_step).unwrap();
        assert!((h[(0, 0)] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn hessian_reports_non_finite() {
        struct Blow;
        impl Objective for Blow {
            fn dim(&self) -> usize {
                1
            }
            fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
                (0.0, vec![if x[0] > 0.0 { f64::INFINITY } else { 0.0 }])
            }
        }
        let err = hessian_fd(&Blow, &[0.0], default_step).unwrap_err();
        assert!(err.to_string().contains("coordinate 0"));
    }
}
