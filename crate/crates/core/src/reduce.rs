//! Constructive neuron reductions for equivariant two-layer networks.
//!
//! A hidden block of a transitive permutation representation is reducible
//! when one of its neurons has zero outgoing weights (then all of them do and
//! the block can be dropped) or when two of its neurons share ingoing weights
//! (then the block collapses onto a coset representation of a larger
//! stabilizer). Two transitive blocks sharing an ingoing weight row carry the
//! same representation and can be merged into one.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::equiv::intertwiner_residual;
use crate::error::{Error, Result};
use crate::group::{generated_subgroup, left_cosets, FiniteGroup, GroupSpec, Subgroup};
use crate::loss::Activation;
use crate::prep::{PermRep, PrepSpec, RepLayout};
use crate::rng::PortableRng;

/// Default absolute tolerance for row equality and zero columns.
pub const ROW_TOL: f64 = 1e-8;
/// Equivariance residual a net must meet before it is reduced.
pub const CONSTRAINT_TOL: f64 = 1e-10;

/// `f(x) = U σ(W x)` with layouts on all three layers.
#[derive(Clone, Debug)]
pub struct GeneralNet {
    pub layout_in: RepLayout,
    pub layout_hidden: RepLayout,
    pub layout_out: RepLayout,
    /// `hidden × d_in`
    pub w: DMatrix<f64>,
    /// `d_out × hidden`
    pub u: DMatrix<f64>,
    pub activation: Activation,
}

/// JSON form of a [`GeneralNet`]; matrices are lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub group: GroupSpec,
    pub input: Vec<PrepSpec>,
    pub hidden: Vec<PrepSpec>,
    pub output: Vec<PrepSpec>,
    #[serde(default)]
    pub activation: Activation,
    pub w: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::config(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

impl NetSpec {
    pub fn build(&self) -> Result<GeneralNet> {
        let g = Arc::new(self.group.build()?);
        GeneralNet::new(
            RepLayout::from_specs(&g, &self.input)?,
            RepLayout::from_specs(&g, &self.hidden)?,
            RepLayout::from_specs(&g, &self.output)?,
            matrix_from_rows(&self.w, "w")?,
            matrix_from_rows(&self.u, "u")?,
            self.activation,
        )
    }
}

impl GeneralNet {
    pub fn new(
        layout_in: RepLayout,
        layout_hidden: RepLayout,
        layout_out: RepLayout,
        w: DMatrix<f64>,
        u: DMatrix<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let g = layout_in.group();
        if **g != **layout_hidden.group() || **g != **layout_out.group() {
            return Err(Error::config("layouts over different groups"));
        }
        if w.shape() != (layout_hidden.total_dim(), layout_in.total_dim()) {
            return Err(Error::config(format!(
                "W is {:?}, layouts need ({}, {})",
                w.shape(),
                layout_hidden.total_dim(),
                layout_in.total_dim()
            )));
        }
        if u.shape() != (layout_out.total_dim(), layout_hidden.total_dim()) {
            return Err(Error::config(format!(
                "U is {:?}, layouts need ({}, {})",
                u.shape(),
                layout_out.total_dim(),
                layout_hidden.total_dim()
            )));
        }
        if w.iter().chain(u.iter()).any(|x| !x.is_finite()) {
            return Err(Error::config("non-finite weights"));
        }
        Ok(Self {
            layout_in,
            layout_hidden,
            layout_out,
            w,
            u,
            activation,
        })
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        self.layout_in.group()
    }

    pub fn to_spec(&self, group: GroupSpec) -> Result<NetSpec> {
        Ok(NetSpec {
            group,
            input: self.layout_in.to_specs()?,
            hidden: self.layout_hidden.to_specs()?,
            output: self.layout_out.to_specs()?,
            activation: self.activation,
            w: matrix_rows(&self.w),
            u: matrix_rows(&self.u),
        })
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.w.nrows())
            .map(|i| {
                let z: f64 = self.w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                self.activation.apply(z)
            })
            .collect();
        (0..self.u.nrows())
            .map(|o| self.u.row(o).iter().zip(&hidden).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest violation of `P_h W = W P_in` and `P_out U = U P_h`.
    pub fn constraint_residual(&self) -> f64 {
        intertwiner_residual(&self.layout_in, &self.layout_hidden, &self.w).max(intertwiner_residual(
            &self.layout_hidden,
            &self.layout_out,
            &self.u,
        ))
    }

    fn rows_close(&self, a: usize, b: usize, tol: f64) -> bool {
        (0..self.w.ncols()).all(|c| (self.w[(a, c)] - self.w[(b, c)]).abs() <= tol)
    }

    fn column_zero(&self, j: usize, tol: f64) -> bool {
        (0..self.u.nrows()).all(|o| self.u[(o, j)].abs() <= tol)
    }

    /// Copy of the net with hidden blocks replaced; `rows[b]` and `cols[b]`
    /// give the new W rows and U columns of block `b`.
    fn rebuild(&self, blocks: Vec<PermRep>, rows: Vec<Vec<Vec<f64>>>, cols: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let layout_hidden = RepLayout::new(blocks)?;
        let h = layout_hidden.total_dim();
        let mut w = DMatrix::zeros(h, self.w.ncols());
        let mut u = DMatrix::zeros(self.u.nrows(), h);
        let mut i = 0;
        for (r, c) in rows.iter().zip(&cols) {
            for (row, col) in r.iter().zip(c) {
                for (j, v) in row.iter().enumerate() {
                    w[(i, j)] = *v;
                }
                for (o, v) in col.iter().enumerate() {
                    u[(o, i)] = *v;
                }
                i += 1;
            }
        }
        Self::new(
            self.layout_in.clone(),
            layout_hidden,
            self.layout_out.clone(),
            w,
            u,
            self.activation,
        )
    }

    fn block_rows(&self, b: usize) -> Vec<Vec<f64>> {
        self.layout_hidden
            .range(b)
            .map(|i| self.w.row(i).iter().copied().collect())
            .collect()
    }

    fn block_cols(&self, b: usize) -> Vec<Vec<f64>> {
        self.layout_hidden
            .range(b)
            .map(|i| self.u.column(i).iter().copied().collect())
            .collect()
    }
}

/// Evidence that a net is reducible. Indices are local to their block.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    ZeroOutgoing { block: usize, k: usize },
    ZeroIngoing { block: usize, k: usize },
    DuplicateRows { block: usize, k: usize, k2: usize },
    SharedAcrossBlocks { block1: usize, k: usize, block2: usize, k2: usize },
}

pub fn find_reducible(net: &GeneralNet, tol: f64) -> Vec<Witness> {
    let layout = &net.layout_hidden;
    let mut out = Vec::new();
    for b in 0..layout.blocks().len() {
        let r = layout.range(b);
        for (k, i) in r.clone().enumerate() {
            if net.column_zero(i, tol) {
                out.push(Witness::ZeroOutgoing { block: b, k });
            }
            if net.w.row(i).iter().all(|x| x.abs() <= tol) {
                out.push(Witness::ZeroIngoing { block: b, k });
            }
        }
        for (k, i) in r.clone().enumerate() {
            for (k2, j) in r.clone().enumerate().skip(k + 1) {
                if net.rows_close(i, j, tol) {
                    out.push(Witness::DuplicateRows { block: b, k, k2 });
                }
            }
        }
    }
    for b1 in 0..layout.blocks().len() {
        for b2 in b1 + 1..layout.blocks().len() {
            for (k, i) in layout.range(b1).enumerate() {
                for (k2, j) in layout.range(b2).enumerate() {
                    if net.rows_close(i, j, tol) {
                        out.push(Witness::SharedAcrossBlocks {
                            block1: b1,
                            k,
                            block2: b2,
                            k2,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReductionKind {
    EliminateBlock {
        block: usize,
    },
    ShrinkBlock {
        block: usize,
        old_dim: usize,
        new_dim: usize,
        new_rep: String,
        /// Members of the subgroup `A` as group element indices.
        subgroup: Vec<usize>,
    },
    MergeBlocks {
        kept: usize,
        removed: usize,
        /// `alignment[j]` = row of the kept block matched with row `j` of the removed one.
        alignment: Vec<usize>,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    pub kind: ReductionKind,
    pub witness: Vec<usize>,
    /// Max output deviation between the input and reduced nets over seeded inputs.
    pub equivalence_residual: f64,
    pub constraint_residual: f64,
}

/// Number of seeded inputs used for the residual in reports.
pub const REPORT_SAMPLES: usize = 1000;

fn check_block(net: &GeneralNet, block: usize) -> Result<()> {
    if block >= net.layout_hidden.blocks().len() {
        return Err(Error::config(format!("hidden block {block} out of range")));
    }
    if !net.layout_hidden.blocks()[block].is_transitive().0 {
        return Err(Error::precondition(format!("hidden block {block} is not transitive")));
    }
    Ok(())
}

fn check_constraints(net: &GeneralNet) -> Result<()> {
    let r = net.constraint_residual();
    if r > CONSTRAINT_TOL {
        return Err(Error::precondition(format!(
            "net violates its equivariance constraints by {r:e}"
        )));
    }
    Ok(())
}

fn finish(original: &GeneralNet, reduced: GeneralNet, kind: ReductionKind, witness: Vec<usize>) -> Result<(GeneralNet, ReductionReport)> {
    let constraint_residual = reduced.constraint_residual();
    if constraint_residual > CONSTRAINT_TOL {
        return Err(Error::invariant(format!(
            "reduced net violates equivariance by {constraint_residual:e}"
        )));
    }
    let equivalence_residual = verify_equivalence(original, &reduced, REPORT_SAMPLES, 0)?;
    Ok((
        reduced,
        ReductionReport {
            kind,
            witness,
            equivalence_residual,
            constraint_residual,
        },
    ))
}

/// Drops a block whose outgoing weights vanish.
pub fn eliminate_block(net: &GeneralNet, block: usize, tol: f64) -> Result<(GeneralNet, ReductionReport)> {
    check_block(net, block)?;
    check_constraints(net)?;
    if net.layout_hidden.blocks().len() == 1 {
        return Err(Error::precondition("cannot remove the only hidden block"));
    }
    if !net.layout_hidden.range(block).all(|j| net.column_zero(j, tol)) {
        return Err(Error::precondition(format!("block {block} has non-zero outgoing weights")));
    }
    let keep: Vec<usize> = (0..net.layout_hidden.blocks().len()).filter(|&b| b != block).collect();
    let reduced = net.rebuild(
        keep.iter().map(|&b| net.layout_hidden.blocks()[b].clone()).collect(),
        keep.iter().map(|&b| net.block_rows(b)).collect(),
        keep.iter().map(|&b| net.block_cols(b)).collect(),
    )?;
    finish(net, reduced, ReductionKind::EliminateBlock { block }, vec![block])
}

/// Collapses a transitive block with two equal ingoing rows `k`, `k2` onto
/// the coset representation of the row-value stabilizer.
pub fn reduce_transitive_block(
    net: &GeneralNet,
    block: usize,
    witness: (usize, usize),
    tol: f64,
) -> Result<(GeneralNet, ReductionReport)> {
    check_block(net, block)?;
    check_constraints(net)?;
    let (k, k2) = witness;
    let rep = &net.layout_hidden.blocks()[block];
    let m = rep.dim();
    if k >= m || k2 >= m || k == k2 {
        return Err(Error::config("witness must be two distinct rows of the block"));
    }
    let off = net.layout_hidden.offsets()[block];
    if !net.rows_close(off + k, off + k2, tol) {
        return Err(Error::precondition(format!("rows {k} and {k2} of block {block} differ")));
    }
    let g = rep.group().clone();
    let h = (0..g.order())
        .find(|&x| rep.apply(x, k2) == k)
        .expect("transitive block");
    // row-value stabilizer of k
    let s_k: Vec<usize> = (0..g.order())
        .filter(|&s| net.rows_close(off + rep.apply(s, k), off + k, tol))
        .collect();
    let mut gens = s_k.clone();
    gens.push(h);
    let a = generated_subgroup(&g, &gens);
    let cosets = left_cosets(&g, &a)?;
    let n = cosets.representatives.len();

    // neuron classes: distinct images of k under each coset
    let classes: Vec<Vec<usize>> = cosets
        .cosets
        .iter()
        .map(|coset| {
            let mut v: Vec<usize> = coset.iter().map(|&x| rep.apply(x, k)).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    // snap each class to its row average
    let d = net.w.ncols();
    let new_rows: Vec<Vec<f64>> = classes
        .iter()
        .map(|cls| {
            (0..d)
                .map(|c| cls.iter().map(|&i| net.w[(off + i, c)]).sum::<f64>() / cls.len() as f64)
                .collect()
        })
        .collect();
    for (cls, row) in classes.iter().zip(&new_rows) {
        for &i in cls {
            if (0..d).any(|c| (net.w[(off + i, c)] - row[c]).abs() > tol) {
                return Err(Error::precondition(format!(
                    "rows of block {block} are not constant on the classes of the reduction"
                )));
            }
        }
    }
    let new_cols: Vec<Vec<f64>> = classes
        .iter()
        .map(|cls| {
            (0..net.u.nrows())
                .map(|o| cls.iter().map(|&i| net.u[(o, off + i)]).sum())
                .collect()
        })
        .collect();

    let new_rep = PermRep::coset(g.clone(), &a)?;
    let mut blocks = net.layout_hidden.blocks().to_vec();
    let mut rows: Vec<Vec<Vec<f64>>> = (0..blocks.len()).map(|b| net.block_rows(b)).collect();
    let mut cols: Vec<Vec<Vec<f64>>> = (0..blocks.len()).map(|b| net.block_cols(b)).collect();
    blocks[block] = new_rep.clone();
    rows[block] = new_rows;
    cols[block] = new_cols;
    let reduced = net.rebuild(blocks, rows, cols)?;
    if m % n != 0 || !new_rep.is_transitive().0 {
        return Err(Error::invariant("reduced block is not a transitive divisor"));
    }
    finish(
        net,
        reduced,
        ReductionKind::ShrinkBlock {
            block,
            old_dim: m,
            new_dim: n,
            new_rep: new_rep.label(),
            subgroup: a.members().to_vec(),
        },
        vec![k, k2, h],
    )
}

fn block_reducible(net: &GeneralNet, block: usize, tol: f64) -> bool {
    let r = net.layout_hidden.range(block);
    r.clone().any(|i| net.column_zero(i, tol))
        || r.clone()
            .any(|i| r.clone().any(|j| i < j && net.rows_close(i, j, tol)))
}

/// Merges `block2` into `block1` when row `k` of the first equals row `k2` of
/// the second.
pub fn merge_blocks(
    net: &GeneralNet,
    block1: usize,
    block2: usize,
    witness: (usize, usize),
    tol: f64,
) -> Result<(GeneralNet, ReductionReport)> {
    check_block(net, block1)?;
    check_block(net, block2)?;
    if block1 == block2 {
        return Err(Error::config("merge needs two different blocks"));
    }
    check_constraints(net)?;
    let (k, k2) = witness;
    let (r1, r2) = (&net.layout_hidden.blocks()[block1], &net.layout_hidden.blocks()[block2]);
    if k >= r1.dim() || k2 >= r2.dim() {
        return Err(Error::config("witness rows out of range"));
    }
    let (o1, o2) = (net.layout_hidden.offsets()[block1], net.layout_hidden.offsets()[block2]);
    if !net.rows_close(o1 + k, o2 + k2, tol) {
        return Err(Error::precondition("witness rows differ"));
    }
    let (s1, s2): (Subgroup, Subgroup) = (r1.stabilizer(k), r2.stabilizer(k2));
    if s1 != s2 {
        return Err(Error::NotReducible(format!(
            "stabilizers differ (orders {} and {}); the blocks carry different representations",
            s1.order(),
            s2.order()
        )));
    }
    for b in [block1, block2] {
        if block_reducible(net, b, tol) {
            return Err(Error::precondition(format!("block {b} is itself reducible; reduce it first")));
        }
    }
    // π2_g(k2) ↔ π1_g(k)
    let g = r1.group();
    let mut alignment = vec![usize::MAX; r2.dim()];
    for x in 0..g.order() {
        alignment[r2.apply(x, k2)] = r1.apply(x, k);
    }
    for (j, &i) in alignment.iter().enumerate() {
        if !net.rows_close(o1 + i, o2 + j, tol) {
            return Err(Error::precondition("aligned rows differ; constraints inconsistent"));
        }
    }
    let nb = net.layout_hidden.blocks().len();
    let keep: Vec<usize> = (0..nb).filter(|&b| b != block2).collect();
    let mut cols: Vec<Vec<Vec<f64>>> = (0..nb).map(|b| net.block_cols(b)).collect();
    for (j, &i) in alignment.iter().enumerate() {
        for o in 0..net.u.nrows() {
            cols[block1][i][o] += net.u[(o, o2 + j)];
        }
    }
    let reduced = net.rebuild(
        keep.iter().map(|&b| net.layout_hidden.blocks()[b].clone()).collect(),
        keep.iter().map(|&b| net.block_rows(b)).collect(),
        keep.iter().map(|&b| cols[b].clone()).collect(),
    )?;
    finish(
        net,
        reduced,
        ReductionKind::MergeBlocks {
            kept: block1,
            removed: block2,
            alignment,
        },
        vec![k, k2],
    )
}

/// Applies the first applicable reduction for a witness.
pub fn apply_witness(net: &GeneralNet, witness: &Witness, tol: f64) -> Result<(GeneralNet, ReductionReport)> {
    match *witness {
        Witness::ZeroOutgoing { block, .. } => eliminate_block(net, block, tol),
        Witness::ZeroIngoing { block, k } => Err(Error::NotReducible(format!(
            "row {k} of block {block} is zero; no construction removes a zero ingoing row"
        ))),
        Witness::DuplicateRows { block, k, k2 } => reduce_transitive_block(net, block, (k, k2), tol),
        Witness::SharedAcrossBlocks { block1, k, block2, k2 } => merge_blocks(net, block1, block2, (k, k2), tol),
    }
}

/// Ingoing rows of a transitive block generated from the row of neuron `k`.
///
/// `seed` is first averaged over the subgroup generated by `Stab(k)` and
/// `symmetry` acting on the input, then spread with
/// `W[π_g(k)][π_in(g)(c)] = seed[c]`. The result satisfies the block's
/// equivariance constraint exactly, and rows `π_s(k)` coincide for `s` in `symmetry`.
pub fn block_rows_from_seed(
    layout_in: &RepLayout,
    rep: &PermRep,
    k: usize,
    seed: &[f64],
    symmetry: &Subgroup,
) -> Result<DMatrix<f64>> {
    let g = rep.group();
    let d = layout_in.total_dim();
    if seed.len() != d || k >= rep.dim() {
        return Err(Error::config("seed row or neuron index does not fit the layouts"));
    }
    if !rep.is_transitive().0 {
        return Err(Error::precondition("block is not transitive"));
    }
    let mut gens = rep.stabilizer(k).members().to_vec();
    gens.extend_from_slice(symmetry.members());
    let h = generated_subgroup(g, &gens);
    let actions: Vec<Vec<usize>> = (0..g.order()).map(|x| layout_in.action(x)).collect();
    let row: Vec<f64> = (0..d)
        .map(|c| h.members().iter().map(|&x| seed[actions[x][c]]).sum::<f64>() / h.order() as f64)
        .collect();
    let mut w = DMatrix::zeros(rep.dim(), d);
    for x in 0..g.order() {
        let r = rep.apply(x, k);
        for c in 0..d {
            w[(r, actions[x][c])] = row[c];
        }
    }
    Ok(w)
}

/// Max over seeded standard-normal inputs of `max_o |f₁(x)_o − f₂(x)_o|`.
pub fn verify_equivalence(a: &GeneralNet, b: &GeneralNet, n_samples: usize, seed: u64) -> Result<f64> {
    let d = a.w.ncols();
    if d != b.w.ncols() || a.u.nrows() != b.u.nrows() {
        return Err(Error::config("nets differ in input or output dimension"));
    }
    let mut rng = PortableRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = rng.normal_vec(d);
        for (p, q) in a.eval(&x).iter().zip(b.eval(&x)) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}
