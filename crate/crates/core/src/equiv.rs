//! Equivariant linear maps between layouts, hidden fixed-point subspaces, and
//! the numerical checks of the hidden-symmetry conditions.
//!
//! A weight matrix `W` (`dim_out × dim_in`) is equivariant when
//! `P_out(g) W = W P_in(g)` for every group element. For permutation
//! representations the solution space is spanned by indicator matrices of the
//! orbits of `G` on index pairs `(i, j)`; they are obtained here as the image
//! of the group-averaging projector `M ↦ (1/|G|) Σ_g P_out(g)⁻¹ M P_in(g)`
//! applied to the elementary matrices, scanned in row-major order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, frobenius, SymSpectrum, RANK_TOL};
use crate::loss::{hessian_spectrum, CoeffObjective, LossContext, Objective};
use crate::prep::{RepKind, RepLayout};
use crate::rng::low_discrepancy_directions;

/// Coordinate convention for an equivariant basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// Orbit indicator matrices; `{I, 𝟙𝟙ᵀ − I}` for natural → natural.
    #[default]
    Raw,
    /// Raw, except that the identity of a natural → natural block is scaled by
    /// `√(n − 1)`, giving it the same Frobenius norm as `𝟙𝟙ᵀ − I`.
    Normalized,
    /// Frobenius-orthonormal.
    Orthonormal,
}

impl std::str::FromStr for BasisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(BasisMode::Raw),
            "normalized" => Ok(BasisMode::Normalized),
            "orthonormal" => Ok(BasisMode::Orthonormal),
            other => Err(Error::config(format!("unknown basis mode '{other}'"))),
        }
    }
}

/// Where a basis matrix lives inside the layer.
#[derive(Clone, Debug, Serialize)]
pub struct BasisSlot {
    pub out_block: usize,
    pub in_block: usize,
    /// Position within the block pair's own basis.
    pub local: usize,
}

#[derive(Clone, Debug)]
pub struct EquivariantBasis {
    layout_in: RepLayout,
    layout_out: RepLayout,
    mode: BasisMode,
    mats: Vec<DMatrix<f64>>,
    slots: Vec<BasisSlot>,
    /// Non-zero entries of each matrix as (row-major index, value).
    entries: Vec<Vec<(usize, f64)>>,
    gram_inv: DMatrix<f64>,
}

/// `(1/|G|) Σ_g fix_in(g) · fix_out(g)`, the dimension of the space of
/// equivariant maps, in exact integer arithmetic.
pub fn hom_dimension(layout_in: &RepLayout, layout_out: &RepLayout) -> Result<usize> {
    let g = layout_in.group();
    if **g != **layout_out.group() {
        return Err(Error::config("layouts over different groups"));
    }
    let total: usize = (0..g.order())
        .map(|a| layout_in.fix_count(a) * layout_out.fix_count(a))
        .sum();
    if total % g.order() != 0 {
        return Err(Error::invariant(format!(
            "Burnside sum {total} not divisible by |G| = {}",
            g.order()
        )));
    }
    Ok(total / g.order())
}

/// Spanning set of one (out-block, in-block) pair: Reynolds images of the
/// elementary matrices, kept greedily when linearly independent and scaled to
/// unit max-entry.
fn block_pair_basis(layout_out: &RepLayout, a: usize, layout_in: &RepLayout, b: usize) -> Vec<DMatrix<f64>> {
    let g = layout_in.group();
    let (ra, rb) = (&layout_out.blocks()[a], &layout_in.blocks()[b]);
    let (da, db) = (ra.dim(), rb.dim());
    let order = g.order() as f64;

    let mut kept: Vec<DMatrix<f64>> = Vec::new();
    let mut ortho: Vec<DMatrix<f64>> = Vec::new();
    for i in 0..da {
        for j in 0..db {
            // P_out(g)^{-1} E_ij P_in(g) = E_{π_out(g⁻¹)(i), π_in(g⁻¹)(j)}
            let mut r = DMatrix::zeros(da, db);
            for x in 0..g.order() {
                let xi = g.inv(x);
                r[(ra.apply(xi, i), rb.apply(xi, j))] += 1.0 / order;
            }
            let norm = r.norm();
            let mut resid = r.clone();
            for q in &ortho {
                resid -= q * frobenius(q, &r);
            }
            let rn = resid.norm();
            if rn > RANK_TOL * norm {
                ortho.push(resid / rn);
                let max = r.amax();
                kept.push(r / max);
            }
        }
    }
    kept
}

impl EquivariantBasis {
    pub fn new(layout_in: &RepLayout, layout_out: &RepLayout, mode: BasisMode) -> Result<Self> {
        if **layout_in.group() != **layout_out.group() {
            return Err(Error::config("layouts over different groups"));
        }
        let (rows, cols) = (layout_out.total_dim(), layout_in.total_dim());
        let mut mats = Vec::new();
        let mut slots = Vec::new();
        for a in 0..layout_out.blocks().len() {
            for b in 0..layout_in.blocks().len() {
                let pair = block_pair_basis(layout_out, a, layout_in, b);
                let single_in = RepLayout::new(vec![layout_in.blocks()[b].clone()])?;
                let single_out = RepLayout::new(vec![layout_out.blocks()[a].clone()])?;
                let expected = hom_dimension(&single_in, &single_out)?;
                if pair.len() != expected {
                    return Err(Error::invariant(format!(
                        "block pair ({a},{b}): basis rank {} != Burnside count {expected}",
                        pair.len()
                    )));
                }
                let natural_pair = matches!(layout_out.blocks()[a].kind(), RepKind::Natural)
                    && matches!(layout_in.blocks()[b].kind(), RepKind::Natural);
                for (local, m) in pair.into_iter().enumerate() {
                    let mut m = m;
                    if mode == BasisMode::Normalized && natural_pair && is_identity(&m) {
                        m *= ((m.nrows() as f64) - 1.0).sqrt();
                    }
                    let mut full = DMatrix::zeros(rows, cols);
                    full.view_mut((layout_out.offsets()[a], layout_in.offsets()[b]), m.shape())
                        .copy_from(&m);
                    mats.push(full);
                    slots.push(BasisSlot {
                        out_block: a,
                        in_block: b,
                        local,
                    });
                }
            }
        }
        if mode == BasisMode::Orthonormal {
            let mut ortho: Vec<DMatrix<f64>> = Vec::with_capacity(mats.len());
            for m in &mats {
                let mut r = m.clone();
                for q in &ortho {
                    r -= q * frobenius(q, m);
                }
                let n = r.norm();
                ortho.push(r / n);
            }
            mats = ortho;
        }
        Self::from_parts(layout_in.clone(), layout_out.clone(), mode, mats, slots)
    }

    fn from_parts(
        layout_in: RepLayout,
        layout_out: RepLayout,
        mode: BasisMode,
        mats: Vec<DMatrix<f64>>,
        slots: Vec<BasisSlot>,
    ) -> Result<Self> {
        let n = mats.len();
        let entries = mats
            .iter()
            .map(|m| {
                let mut e = Vec::new();
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        if m[(r, c)] != 0.0 {
                            e.push((r * m.ncols() + c, m[(r, c)]));
                        }
                    }
                }
                e
            })
            .collect();
        let gram = DMatrix::from_fn(n, n, |i, j| frobenius(&mats[i], &mats[j]));
        let gram_inv = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            gram.clone()
                .cholesky()
                .ok_or_else(|| Error::invariant("basis matrices are linearly dependent"))?
                .inverse()
        };
        let basis = Self {
            layout_in,
            layout_out,
            mode,
            mats,
            slots,
            entries,
            gram_inv,
        };
        let resid = basis.max_intertwiner_residual();
        if resid >= 1e-10 {
            return Err(Error::invariant(format!("intertwiner residual {resid:e}")));
        }
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    pub fn mats(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn slots(&self) -> &[BasisSlot] {
        &self.slots
    }

    pub fn layout_in(&self) -> &RepLayout {
        &self.layout_in
    }

    pub fn layout_out(&self) -> &RepLayout {
        &self.layout_out
    }

    /// Rows of the weight matrix (output layout dimension).
    pub fn rows(&self) -> usize {
        self.layout_out.total_dim()
    }

    pub fn cols(&self) -> usize {
        self.layout_in.total_dim()
    }

    /// Index of the first basis matrix of a block pair.
    pub fn slot_index(&self, out_block: usize, in_block: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| s.out_block == out_block && s.in_block == in_block)
    }

    /// `max_g max |P_out(g) M − M P_in(g)|` over all basis matrices.
    pub fn max_intertwiner_residual(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| intertwiner_residual(&self.layout_in, &self.layout_out, m))
            .fold(0.0, f64::max)
    }

    pub fn coeffs_to_weights(&self, coeffs: &[f64]) -> Result<DMatrix<f64>> {
        if coeffs.len() != self.len() {
            return Err(Error::config(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.len()
            )));
        }
        Ok(DMatrix::from_row_slice(
            self.rows(),
            self.cols(),
            &self.coeffs_to_row_major(coeffs),
        ))
    }

    pub(crate) fn coeffs_to_row_major(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * self.cols()];
        for (c, e) in coeffs.iter().zip(&self.entries) {
            for &(idx, v) in e {
                out[idx] += c * v;
            }
        }
        out
    }

    /// Least-squares coefficients of `w` and the Frobenius norm of the residual.
    pub fn weights_to_coeffs(&self, w: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
        if w.shape() != (self.rows(), self.cols()) {
            return Err(Error::config(format!(
                "weight matrix {:?} does not match basis shape ({}, {})",
                w.shape(),
                self.rows(),
                self.cols()
            )));
        }
        let b = DVector::from_iterator(self.len(), self.mats.iter().map(|m| frobenius(m, w)));
        let c: Vec<f64> = (&self.gram_inv * b).iter().copied().collect();
        let resid = (w - self.coeffs_to_weights(&c)?).norm();
        Ok((c, resid))
    }

    /// Chain rule: `∂L/∂c_i = ⟨∇_W L, M_i⟩_F`.
    pub fn project_gradient(&self, g: &DMatrix<f64>) -> Vec<f64> {
        self.mats.iter().map(|m| frobenius(m, g)).collect()
    }

    pub(crate) fn project_row_major(&self, g: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.iter().map(|&(idx, v)| v * g[idx]).sum())
            .collect()
    }

    /// Coefficients of the same weights in another basis over the same layouts.
    pub fn convert_coeffs(&self, coeffs: &[f64], target: &EquivariantBasis) -> Result<Vec<f64>> {
        let (c, resid) = target.weights_to_coeffs(&self.coeffs_to_weights(coeffs)?)?;
        if resid > 1e-9 {
            return Err(Error::config("target basis does not span the same space"));
        }
        Ok(c)
    }

    /// Human-readable block table.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "input  {}\noutput {}\nbasis dimension {} ({:?} mode)\n",
            self.layout_in.describe(),
            self.layout_out.describe(),
            self.len(),
            self.mode
        );
        for (i, slot) in self.slots.iter().enumerate() {
            s.push_str(&format!(
                "  [{i:>2}] out block {} <- in block {} (#{})\n",
                slot.out_block, slot.in_block, slot.local
            ));
        }
        s
    }
}

fn is_identity(m: &DMatrix<f64>) -> bool {
    m.is_square() && (0..m.nrows()).all(|r| (0..m.ncols()).all(|c| m[(r, c)] == if r == c { 1.0 } else { 0.0 }))
}

/// `max_g max |P_out(g) W − W P_in(g)|` using index actions only.
pub fn intertwiner_residual(layout_in: &RepLayout, layout_out: &RepLayout, w: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for g in 0..layout_in.group().order() {
        let (ai, ao) = (layout_in.action(g), layout_out.action(g));
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                worst = worst.max((w[(ao[r], ai[c])] - w[(r, c)]).abs());
            }
        }
    }
    worst
}

pub fn equivariant_basis(layout_in: &RepLayout, layout_out: &RepLayout, mode: BasisMode) -> Result<EquivariantBasis> {
    EquivariantBasis::new(layout_in, layout_out, mode)
}

/// The fixed-point subspace of a group of hidden-neuron permutations,
/// intersected with the equivariant span.
#[derive(Clone, Debug)]
pub struct FixedPointData {
    /// Generators of the hidden symmetry group, as permutations of hidden rows.
    pub hidden_generators: Vec<Vec<usize>>,
    /// Orbits of the hidden rows under that group.
    pub row_orbits: Vec<Vec<usize>>,
    /// Orthonormal coefficient-space basis of `Θ̃_H` (columns).
    pub basis_fixed: DMatrix<f64>,
    pub dim_fixed: usize,
    /// Total coefficient count.
    pub dim_total: usize,
    /// `(Θ_H^⊥ ∩ Θ̃) + (Θ_H ∩ Θ̃) = Θ̃`
    pub c1_holds: bool,
    /// `dim Θ̃_H = dim Θ̃ − 1`
    pub c2_holds: bool,
}

impl FixedPointData {
    /// Averaging operator of the hidden group: each row becomes the mean of its orbit.
    pub fn project(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = w.clone();
        for orbit in &self.row_orbits {
            let mut mean = w.row(orbit[0]).clone_owned();
            for &r in &orbit[1..] {
                mean += w.row(r);
            }
            mean /= orbit.len() as f64;
            for &r in orbit {
                out.set_row(r, &mean);
            }
        }
        out
    }

    /// Component of a coefficient vector orthogonal to `Θ̃_H`.
    pub fn normal_component(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        let b = &self.basis_fixed;
        let tangent = b * (b.transpose() * &v);
        (v - tangent).iter().copied().collect()
    }

    pub fn normal_norm(&self, v: &[f64]) -> f64 {
        self.normal_component(v).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Orthogonal projection of a coefficient vector onto `Θ̃_H`.
    pub fn project_coeffs(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        let b = &self.basis_fixed;
        (b * (b.transpose() * v)).iter().copied().collect()
    }
}

/// Row orbits of the group generated by `generators` (connected components).
fn orbits_of(n: usize, generators: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..n).collect();
    fn find(label: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while label[r] != r {
            r = label[r];
        }
        label[i] = r;
        r
    }
    for g in generators {
        for (i, &j) in g.iter().enumerate() {
            let (a, b) = (find(&mut label, i), find(&mut label, j));
            if a != b {
                label[a.max(b)] = a.min(b);
            }
        }
    }
    let mut orbits: Vec<Vec<usize>> = Vec::new();
    let mut index = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut label, i);
        if index[r] == usize::MAX {
            index[r] = orbits.len();
            orbits.push(Vec::new());
        }
        orbits[index[r]].push(i);
    }
    orbits
}

/// Hidden fixed-point data for an explicit group of hidden-row permutations
/// given by generators.
pub fn fixed_subspace_for(basis: &EquivariantBasis, generators: Vec<Vec<usize>>) -> Result<FixedPointData> {
    let h = basis.rows();
    for g in &generators {
        crate::group::Perm::new(g.clone())?;
        if g.len() != h {
            return Err(Error::config(format!(
                "hidden permutation of length {} for {h} hidden rows",
                g.len()
            )));
        }
    }
    let row_orbits = orbits_of(h, &generators);
    let mut data = FixedPointData {
        hidden_generators: generators,
        row_orbits,
        basis_fixed: DMatrix::zeros(basis.len(), 0),
        dim_fixed: 0,
        dim_total: basis.len(),
        c1_holds: false,
        c2_holds: false,
    };
    let n = basis.len();
    let len = basis.rows() * basis.cols();
    let mut fixed_part = DMatrix::zeros(len, n);
    let mut moving_part = DMatrix::zeros(len, n);
    for (i, m) in basis.mats().iter().enumerate() {
        let p = data.project(m);
        let q = m - &p;
        fixed_part.column_mut(i).copy_from_slice(p.as_slice());
        moving_part.column_mut(i).copy_from_slice(q.as_slice());
    }
    let basis_fixed = linalg::null_space(&moving_part);
    data.dim_fixed = basis_fixed.ncols();
    data.basis_fixed = basis_fixed;
    data.c1_holds = linalg::rank(&fixed_part) + linalg::rank(&moving_part) == n;
    data.c2_holds = data.dim_fixed + 1 == n;
    Ok(data)
}

/// Hidden symmetry = full symmetric group on the rows of one output block.
pub fn hidden_fixed_subspace(basis: &EquivariantBasis, hidden_block: usize) -> Result<FixedPointData> {
    let layout = basis.layout_out();
    if hidden_block >= layout.blocks().len() {
        return Err(Error::config(format!("hidden block {hidden_block} out of range")));
    }
    let range = layout.range(hidden_block);
    if range.len() < 2 {
        return Err(Error::config(format!(
            "hidden block {hidden_block} has dimension {}; no neuron permutation exists",
            range.len()
        )));
    }
    let h = basis.rows();
    let ident: Vec<usize> = (0..h).collect();
    // a transposition and a full cycle generate the symmetric group on the block
    let mut swap = ident.clone();
    swap.swap(range.start, range.start + 1);
    let mut cycle = ident;
    for (k, r) in range.clone().enumerate() {
        cycle[r] = range.start + (k + 1) % range.len();
    }
    fixed_subspace_for(basis, vec![swap, cycle])
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionReport {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
    /// `min_r r̂·∇L(C r̂)` over the sampled directions.
    pub c3_min_radial_derivative: f64,
    pub c3_radius: f64,
    pub c3_directions: usize,
    pub c4: bool,
    pub c4_min_abs_eigenvalue: f64,
    pub c4_spectrum: Vec<f64>,
    pub grad_norm: f64,
    pub loss: f64,
    pub dim_total: usize,
    pub dim_fixed: usize,
}

/// Degeneracy cutoff for C4.
pub const C4_TOL: f64 = 1e-8;

pub fn check_conditions(
    ctx: &LossContext,
    basis: &EquivariantBasis,
    fixed: &FixedPointData,
    point: &[f64],
    radius: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<ConditionReport> {
    if point.len() != basis.len() {
        return Err(Error::config("point length does not match the basis"));
    }
    let obj = CoeffObjective { ctx, basis };
    let (loss, grad) = obj.value_grad(point);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss at the candidate point"));
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut c3_min = f64::INFINITY;
    for dir in low_discrepancy_directions(basis.len(), n_dirs, seed) {
        let x: Vec<f64> = dir.iter().map(|d| radius * d).collect();
        let (l, g) = obj.value_grad(&x);
        if !l.is_finite() {
            return Err(Error::numeric("non-finite loss on the C3 sphere"));
        }
        let radial: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        c3_min = c3_min.min(radial);
    }

    let spectrum: SymSpectrum = hessian_spectrum(&obj, point)?;
    let min_abs = spectrum.min_abs();
    Ok(ConditionReport {
        c1: fixed.c1_holds,
        c2: fixed.c2_holds,
        c3: c3_min > 0.0,
        c3_min_radial_derivative: c3_min,
        c3_radius: radius,
        c3_directions: n_dirs,
        c4: min_abs > C4_TOL,
        c4_min_abs_eigenvalue: min_abs,
        c4_spectrum: spectrum.eigenvalues,
        grad_norm,
        loss,
        dim_total: fixed.dim_total,
        dim_fixed: fixed.dim_fixed,
    })
}

/// Exact `(1/|G|) Σ_g E_x[(f_W(ρ_in(g)x) − f_W(x))²]` for a scalar-output
/// network whose output sums all hidden units.
///
/// Uses `E[f(ρx)²] = E[f(x)²]` (rotation invariance of the Gaussian) to write
/// each term as `2[S(W,W) − S(W P_in(g), W)]` with `S` the kernel Gram sum.
pub fn equivariance_error(ctx: &LossContext, layout_in: &RepLayout, w: &DMatrix<f64>) -> Result<f64> {
    if w.ncols() != layout_in.total_dim() {
        return Err(Error::config("weight columns do not match the input layout"));
    }
    let g = layout_in.group();
    let base = ctx.student_gram(w, w);
    let mut total = 0.0;
    for a in 0..g.order() {
        if a == g.identity() {
            continue;
        }
        let act = layout_in.action(a);
        // (W P(g))_{r,c} = W_{r, π(g)(c)}
        let wp = DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| w[(r, act[c])]);
        total += 2.0 * (base - ctx.student_gram(&wp, w));
    }
    Ok(total / g.order() as f64)
}
