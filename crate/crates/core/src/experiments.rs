//! Reproducible experiment pipelines: loss landscape over two coefficients,
//! fixed-length training phase diagrams, multistart minimum counting, the
//! constrain-then-relax escape, and seed sweeps.
//!
//! Grid axes are always raw basis coefficients. When training in another
//! parameterization, each grid node is converted to that parameterization
//! before gradient descent and converted back for reporting.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equiv::{
    check_conditions, equivariance_error, equivariant_basis, hidden_fixed_subspace, BasisMode, ConditionReport, EquivariantBasis,
};
use crate::error::{Error, Result};
pub use crate::group::GroupSpec;
use crate::group::FiniteGroup;
use crate::linalg::frobenius;
use crate::loss::{hessian_spectrum, Activation, CoeffObjective, FullObjective, LossContext, Network, Objective};
use crate::optim::{
    gd, gd_observed, match_permutation, multistart_minima, saddle_kick, GDConfig, KickKind, Phase, PinnedObjective, TrackerRow,
    Trajectory,
};
use crate::prep::{PrepSpec, RepKind, RepLayout};
use crate::rng::PortableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TeacherSpec {
    /// Raw coefficients drawn i.i.d. standard normal from the run seed.
    #[default]
    Random,
    /// Raw coefficients given explicitly.
    Explicit { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Raw coefficient indices of the two axes; defaults to the (diagonal,
    /// off-diagonal) pair of the hidden block's map from the first natural
    /// input block.
    pub axes: Option<[usize; 2]>,
    pub range: [[f64; 2]; 2],
    pub resolution: [usize; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            axes: None,
            range: [[-3.0, 3.0], [-3.0, 3.0]],
            resolution: [101, 101],
        }
    }
}

impl GridSpec {
    pub fn with_resolution(&self, r: usize) -> Self {
        Self {
            resolution: [r, r],
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        for a in 0..2 {
            let [lo, hi] = self.range[a];
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!("grid range {a} must be finite with lo < hi")));
            }
            if self.resolution[a] < 2 {
                return Err(Error::config("grid resolution must be at least 2"));
            }
        }
        Ok(())
    }

    pub fn value(&self, axis: usize, i: usize) -> f64 {
        let [lo, hi] = self.range[axis];
        lo + (hi - lo) * i as f64 / (self.resolution[axis] - 1) as f64
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let [lo, hi] = self.range[axis];
        (hi - lo) / (self.resolution[axis] - 1) as f64
    }

    /// Nodes in row-major order: `theta1` outer, `theta2` inner.
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.resolution[0] * self.resolution[1]);
        for i in 0..self.resolution[0] {
            for j in 0..self.resolution[1] {
                out.push([self.value(0, i), self.value(1, j)]);
            }
        }
        out
    }
}

/// Which coefficients gradient descent may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainScope {
    /// Only the two grid-axis coefficients; the rest stay at teacher values.
    #[default]
    Axes,
    /// Every coefficient of the equivariant layer.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistartSpec {
    pub resolution: usize,
    pub cluster_tol: f64,
    pub mode: BasisMode,
    pub scope: TrainScope,
}

impl Default for MultistartSpec {
    fn default() -> Self {
        Self {
            resolution: 21,
            cluster_tol: 1e-3,
            mode: BasisMode::Raw,
            scope: TrainScope::Axes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxSpec {
    /// Kick magnitude at the handoff.
    pub kick: f64,
    /// Compute equivariance error, Hessian eigenvalue and projection on recorded rows.
    pub trackers: bool,
    /// Raw `(theta1, theta2)` of the bad init; picked by a pilot run when absent.
    pub init: Option<[f64; 2]>,
    pub pilot_resolution: usize,
    /// Three row-major weight-space directions for the 3-D projection.
    pub directions: Option<Vec<Vec<f64>>>,
    /// Tolerance of the final permutation match.
    pub match_tol: f64,
    /// Coefficients trained in the constrained stage and in the pilot.
    pub scope: TrainScope,
}

impl Default for RelaxSpec {
    fn default() -> Self {
        Self {
            kick: 1e-3,
            trackers: true,
            init: None,
            pilot_resolution: 11,
            directions: None,
            match_tol: 1e-5,
            scope: TrainScope::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub phase_resolution: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            phase_resolution: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub group: GroupSpec,
    pub input: Vec<PrepSpec>,
    pub hidden: Vec<PrepSpec>,
    pub activation: Activation,
    pub seed: u64,
    pub teacher: TeacherSpec,
    /// Hidden block carrying the hidden symmetry.
    pub hidden_block: usize,
    pub grid: GridSpec,
    pub gd: GDConfig,
    /// Parameterization used for training in phase and relax runs.
    pub mode: BasisMode,
    /// Coefficients trained in phase runs.
    pub phase_scope: TrainScope,
    pub multistart: MultistartSpec,
    pub relax: RelaxSpec,
    pub sweep: SweepSpec,
}

/// Seed of the shipped reference instance.
pub const DEFAULT_SEED: u64 = 1;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            group: GroupSpec::Symmetric { n: 3 },
            input: vec![PrepSpec::Natural, PrepSpec::Trivial, PrepSpec::Trivial],
            hidden: vec![PrepSpec::Natural, PrepSpec::Trivial, PrepSpec::Trivial, PrepSpec::Trivial],
            activation: Activation::Relu,
            seed: DEFAULT_SEED,
            teacher: TeacherSpec::Random,
            hidden_block: 0,
            grid: GridSpec::default(),
            gd: GDConfig::default(),
            mode: BasisMode::Normalized,
            phase_scope: TrainScope::Axes,
            multistart: MultistartSpec::default(),
            relax: RelaxSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Everything derived from a config: layouts, bases, teacher and loss context.
#[derive(Clone, Debug)]
pub struct Instance {
    pub config: ExperimentConfig,
    pub group: Arc<FiniteGroup>,
    pub layout_in: RepLayout,
    pub layout_hidden: RepLayout,
    pub raw: EquivariantBasis,
    pub teacher: Network,
    pub teacher_coeffs: Vec<f64>,
    pub ctx: LossContext,
    pub axes: [usize; 2],
}

fn default_axes(raw: &EquivariantBasis, hidden_block: usize) -> Result<[usize; 2]> {
    let in_block = raw
        .layout_in()
        .blocks()
        .iter()
        .position(|b| matches!(b.kind(), RepKind::Natural))
        .ok_or_else(|| Error::config("no natural input block; set grid.axes explicitly"))?;
    if !matches!(raw.layout_out().blocks()[hidden_block].kind(), RepKind::Natural) {
        return Err(Error::config("hidden block is not natural; set grid.axes explicitly"));
    }
    let first = raw
        .slot_index(hidden_block, in_block)
        .ok_or_else(|| Error::config("no basis matrices for the axis block pair"))?;
    Ok([first, first + 1])
}

impl Instance {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.grid.validate()?;
        config.gd.validate()?;
        let group = Arc::new(config.group.build()?);
        let layout_in = RepLayout::from_specs(&group, &config.input)?;
        let layout_hidden = RepLayout::from_specs(&group, &config.hidden)?;
        if config.hidden_block >= layout_hidden.blocks().len() {
            return Err(Error::config("hidden_block out of range"));
        }
        let raw = equivariant_basis(&layout_in, &layout_hidden, BasisMode::Raw)?;
        let (teacher, teacher_coeffs) = make_teacher_in(config, &raw)?;
        let ctx = LossContext::new(teacher.clone())?;
        let axes = match config.grid.axes {
            Some(a) => a,
            None => default_axes(&raw, config.hidden_block)?,
        };
        if axes[0] >= raw.len() || axes[1] >= raw.len() || axes[0] == axes[1] {
            return Err(Error::config("grid axes must be two distinct coefficient indices"));
        }
        Ok(Self {
            config: config.clone(),
            group,
            layout_in,
            layout_hidden,
            raw,
            teacher,
            teacher_coeffs,
            ctx,
            axes,
        })
    }

    pub fn basis(&self, mode: BasisMode) -> Result<EquivariantBasis> {
        equivariant_basis(&self.layout_in, &self.layout_hidden, mode)
    }

    /// Teacher raw coefficients with the two axis coefficients replaced.
    pub fn raw_point(&self, node: [f64; 2]) -> Vec<f64> {
        let mut c = self.teacher_coeffs.clone();
        c[self.axes[0]] = node[0];
        c[self.axes[1]] = node[1];
        c
    }

    /// Signed distance of a raw coefficient point from the line `theta1 = theta2`.
    pub fn side(&self, raw: &[f64]) -> f64 {
        (raw[self.axes[0]] - raw[self.axes[1]]) / std::f64::consts::SQRT_2
    }
}

/// Gradient-descent coordinates for one parameterization and training scope,
/// with conversions from and to raw coefficient points.
pub struct Trainer<'a> {
    inst: &'a Instance,
    basis: &'a EquivariantBasis,
    coeff: CoeffObjective<'a>,
    /// Teacher in the trainer's basis; pinned coordinates stay here.
    base: Vec<f64>,
    free: Option<Vec<usize>>,
}

impl<'a> Trainer<'a> {
    pub fn new(inst: &'a Instance, basis: &'a EquivariantBasis, scope: TrainScope) -> Result<Self> {
        let base = inst.raw.convert_coeffs(&inst.teacher_coeffs, basis)?;
        let free = match scope {
            TrainScope::All => None,
            TrainScope::Axes => {
                // each axis must stay a single coordinate in the target basis
                for &a in &inst.axes {
                    let mut e = vec![0.0; inst.raw.len()];
                    e[a] = 1.0;
                    let c = inst.raw.convert_coeffs(&e, basis)?;
                    if c.iter().enumerate().any(|(i, v)| i != a && v.abs() > 1e-12) {
                        return Err(Error::config(format!(
                            "axis {a} mixes with other coefficients in {:?} mode; use scope \"all\"",
                            basis.mode()
                        )));
                    }
                }
                Some(inst.axes.to_vec())
            }
        };
        Ok(Self {
            inst,
            basis,
            coeff: CoeffObjective { ctx: &inst.ctx, basis },
            base,
            free,
        })
    }

    pub fn objective(&self) -> Box<dyn Objective + '_> {
        match &self.free {
            None => Box::new(CoeffObjective {
                ctx: self.coeff.ctx,
                basis: self.coeff.basis,
            }),
            Some(free) => Box::new(PinnedObjective {
                inner: &self.coeff,
                base: self.base.clone(),
                free: free.clone(),
            }),
        }
    }

    /// Trainer coordinates of a raw coefficient point.
    pub fn start(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let c = self.inst.raw.convert_coeffs(raw, self.basis)?;
        Ok(match &self.free {
            None => c,
            Some(free) => free.iter().map(|&i| c[i]).collect(),
        })
    }

    /// Full coefficient vector in the trainer's basis.
    pub fn full(&self, x: &[f64]) -> Vec<f64> {
        match &self.free {
            None => x.to_vec(),
            Some(free) => {
                let mut p = self.base.clone();
                for (&i, &v) in free.iter().zip(x) {
                    p[i] = v;
                }
                p
            }
        }
    }

    pub fn to_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.basis.convert_coeffs(&self.full(x), &self.inst.raw)
    }
}

fn make_teacher_in(cfg: &ExperimentConfig, raw: &EquivariantBasis) -> Result<(Network, Vec<f64>)> {
    let coeffs = match &cfg.teacher {
        TeacherSpec::Random => PortableRng::new(cfg.seed).normal_vec(raw.len()),
        TeacherSpec::Explicit { coeffs } => {
            if coeffs.len() != raw.len() {
                return Err(Error::config(format!(
                    "explicit teacher has {} coefficients, basis has {}",
                    coeffs.len(),
                    raw.len()
                )));
            }
            coeffs.clone()
        }
    };
    let w = raw.coeffs_to_weights(&coeffs)?;
    Ok((Network::new(w, cfg.activation), coeffs))
}

/// Teacher network and its raw coefficients.
pub fn make_teacher(cfg: &ExperimentConfig) -> Result<(Network, Vec<f64>)> {
    let inst = Instance::build(cfg)?;
    Ok((inst.teacher, inst.teacher_coeffs))
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Clone, Debug, Serialize)]
pub struct LandscapeRow {
    pub theta1: f64,
    pub theta2: f64,
    pub loss: f64,
}

pub const LANDSCAPE_HEADER: &str = "theta1,theta2,loss";
pub const PHASE_HEADER: &str = "theta1,theta2,final_loss,steps,converged";
pub const RELAX_HEADER: &str = "step,phase,loss,grad_norm,equiv_error,min_hess_eig,proj_x,proj_y,proj_z";

/// Exact loss at every grid node, all non-axis coefficients at teacher values.
pub fn run_landscape(inst: &Instance) -> Result<Vec<LandscapeRow>> {
    let obj = CoeffObjective {
        ctx: &inst.ctx,
        basis: &inst.raw,
    };
    inst.config
        .grid
        .nodes()
        .par_iter()
        .map(|&node| {
            let loss = obj.value(&inst.raw_point(node));
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at theta1={}, theta2={}",
                    node[0], node[1]
                )));
            }
            Ok(LandscapeRow {
                theta1: node[0],
                theta2: node[1],
                loss,
            })
        })
        .collect()
}

pub fn write_landscape_csv(rows: &[LandscapeRow], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{LANDSCAPE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{}", fmt_f64(r.theta1), fmt_f64(r.theta2), fmt_f64(r.loss))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseRow {
    pub theta1: f64,
    pub theta2: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub converged: bool,
    pub diverged: bool,
    /// Signed distance of the endpoint from `theta1 = theta2` (raw coordinates).
    pub final_side: f64,
}

/// Trains from every grid node for a fixed number of steps in `mode`.
pub fn run_phase_with(
    inst: &Instance,
    grid: &GridSpec,
    mode: BasisMode,
    scope: TrainScope,
    cfg: &GDConfig,
) -> Result<Vec<PhaseRow>> {
    grid.validate()?;
    let basis = inst.basis(mode)?;
    let trainer = Trainer::new(inst, &basis, scope)?;
    let obj = trainer.objective();
    grid.nodes()
        .par_iter()
        .map(|&node| {
            let init = trainer.start(&inst.raw_point(node))?;
            let row = match gd(&*obj, &init, cfg) {
                Ok(t) => PhaseRow {
                    theta1: node[0],
                    theta2: node[1],
                    final_loss: t.final_loss,
                    steps: t.steps,
                    converged: t.converged || t.final_grad_norm < inst.config.gd.grad_tol,
                    diverged: false,
                    final_side: inst.side(&trainer.to_raw(&t.final_point)?),
                },
                Err(Error::Diverged { step, .. }) => PhaseRow {
                    theta1: node[0],
                    theta2: node[1],
                    final_loss: f64::NAN,
                    steps: step,
                    converged: false,
                    diverged: true,
                    final_side: f64::NAN,
                },
                Err(e) => return Err(e),
            };
            Ok(row)
        })
        .collect()
}

/// Phase diagram at the fixed-length schedule: the config's learning rate
/// for exactly `GDConfig::phase().max_steps` steps from every node.
pub fn run_phase(inst: &Instance, mode: BasisMode) -> Result<Vec<PhaseRow>> {
    let cfg = GDConfig {
        learning_rate: inst.config.gd.learning_rate,
        grad_tol: 0.0,
        ..GDConfig::phase()
    };
    run_phase_with(inst, &inst.config.grid, mode, inst.config.phase_scope, &cfg)
}

pub fn write_phase_csv(rows: &[PhaseRow], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{PHASE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(r.theta1),
            fmt_f64(r.theta2),
            fmt_f64(r.final_loss),
            r.steps,
            r.converged
        )?;
    }
    Ok(())
}

/// Final-loss cutoff separating "reached the global minimum" from "did not".
pub const SUCCESS_LOSS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryStats {
    /// Nodes farther than one grid cell from `theta1 = theta2`.
    pub far_nodes: usize,
    /// Far nodes whose class differs from the majority class of their side.
    pub misclassified: usize,
    pub side_constant_fraction: f64,
}

/// Measures how well the line `theta1 = theta2` separates successful from
/// failed runs.
pub fn boundary_statistic(rows: &[PhaseRow], grid: &GridSpec) -> BoundaryStats {
    let cell = grid.spacing(0).max(grid.spacing(1));
    // [side][class] counts; class 1 = success
    let mut counts = [[0usize; 2]; 2];
    for r in rows {
        let dist = (r.theta1 - r.theta2) / std::f64::consts::SQRT_2;
        if dist.abs() <= cell {
            continue;
        }
        let side = usize::from(dist > 0.0);
        let class = usize::from(r.final_loss < SUCCESS_LOSS);
        counts[side][class] += 1;
    }
    let far_nodes: usize = counts.iter().flatten().sum();
    let misclassified: usize = counts.iter().map(|c| c[0].min(c[1])).sum();
    BoundaryStats {
        far_nodes,
        misclassified,
        side_constant_fraction: if far_nodes == 0 {
            1.0
        } else {
            1.0 - misclassified as f64 / far_nodes as f64
        },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MinimumSummary {
    /// Raw coefficients of the cluster center.
    pub raw_point: Vec<f64>,
    pub theta1: f64,
    pub theta2: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub count: usize,
    /// Signed distance from `theta1 = theta2`.
    pub side: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MultistartReport {
    pub minima: Vec<MinimumSummary>,
    pub n_starts: usize,
    pub n_converged: usize,
    pub n_diverged: usize,
    pub cluster_tol: f64,
    pub mode: BasisMode,
}

/// Multistart gd from a square grid of axis values (full convergence runs);
/// minima are sorted by loss.
pub fn run_multistart(inst: &Instance) -> Result<MultistartReport> {
    let spec = &inst.config.multistart;
    let grid = inst.config.grid.with_resolution(spec.resolution);
    grid.validate()?;
    let basis = inst.basis(spec.mode)?;
    let trainer = Trainer::new(inst, &basis, spec.scope)?;
    let obj = trainer.objective();
    let starts = grid
        .nodes()
        .iter()
        .map(|&n| trainer.start(&inst.raw_point(n)))
        .collect::<Result<Vec<_>>>()?;
    let set = multistart_minima(&*obj, &starts, &inst.config.gd, spec.cluster_tol)?;
    let mut minima = set
        .minima
        .iter()
        .map(|m| {
            let raw_point = trainer.to_raw(&m.point)?;
            Ok(MinimumSummary {
                theta1: raw_point[inst.axes[0]],
                theta2: raw_point[inst.axes[1]],
                side: inst.side(&raw_point),
                raw_point,
                loss: m.loss,
                grad_norm: m.grad_norm,
                count: m.count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    minima.sort_by(|a, b| a.loss.total_cmp(&b.loss));
    Ok(MultistartReport {
        minima,
        n_starts: set.n_starts,
        n_converged: set.n_converged,
        n_diverged: set.n_diverged,
        cluster_tol: set.cluster_tol,
        mode: spec.mode,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub first_step: usize,
    pub last_step: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub equiv_error: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RelaxEvents {
    pub seed: u64,
    pub init_theta: [f64; 2],
    pub init_source: String,
    pub mode: BasisMode,
    pub stage1: StageSummary,
    /// Full weight-space Hessian spectrum at the stage-1 endpoint.
    pub handoff_spectrum: Vec<f64>,
    pub handoff_min_eig: f64,
    /// Coefficient-space Hessian spectrum at the stage-1 endpoint.
    pub handoff_coeff_spectrum: Vec<f64>,
    pub kick_kind: KickKind,
    pub kick_magnitude: f64,
    pub stage2: StageSummary,
    /// Step and value of the largest tracked equivariance error.
    pub equiv_error_peak: Option<(usize, f64)>,
    /// Row permutation `π` of the hidden block with `W_final[π(i)] ≈ W_teacher[i]`.
    pub permutation: Option<Vec<usize>>,
    pub permutation_is_identity: Option<bool>,
    pub final_weights: Vec<Vec<f64>>,
    pub teacher_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RelaxOutput {
    pub rows: Vec<TrackerRow>,
    pub events: RelaxEvents,
}

fn matrix_rows(w: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..w.nrows()).map(|r| w.row(r).iter().copied().collect()).collect()
}

/// Orthonormal projection directions: the two axis basis matrices and the
/// first elementary matrix with a component outside their span.
pub fn default_directions(inst: &Instance) -> Vec<DMatrix<f64>> {
    let mut dirs: Vec<DMatrix<f64>> = Vec::new();
    let push = |dirs: &mut Vec<DMatrix<f64>>, m: &DMatrix<f64>| {
        let mut r = m.clone();
        for d in dirs.iter() {
            r -= d * frobenius(d, m);
        }
        let n = r.norm();
        if n > 1e-9 * m.norm().max(1e-300) {
            dirs.push(r / n);
        }
    };
    push(&mut dirs, &inst.raw.mats()[inst.axes[0]]);
    push(&mut dirs, &inst.raw.mats()[inst.axes[1]]);
    let (h, d) = (inst.raw.rows(), inst.raw.cols());
    for k in 0..h * d {
        if dirs.len() == 3 {
            break;
        }
        let mut e = DMatrix::zeros(h, d);
        e[(k / d, k % d)] = 1.0;
        push(&mut dirs, &e);
    }
    dirs
}

fn relax_directions(inst: &Instance) -> Result<Vec<DMatrix<f64>>> {
    match &inst.config.relax.directions {
        None => Ok(default_directions(inst)),
        Some(dirs) => {
            let (h, d) = (inst.raw.rows(), inst.raw.cols());
            if dirs.len() != 3 || dirs.iter().any(|v| v.len() != h * d) {
                return Err(Error::config(format!(
                    "relax.directions needs three row-major vectors of length {}",
                    h * d
                )));
            }
            let mats: Vec<DMatrix<f64>> = dirs.iter().map(|v| DMatrix::from_row_slice(h, d, v)).collect();
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    if (frobenius(&mats[i], &mats[j]) - want).abs() > 1e-9 {
                        return Err(Error::config("relax.directions must be orthonormal"));
                    }
                }
            }
            Ok(mats)
        }
    }
}

/// Picks the grid node whose fully converged run on the two-coefficient
/// landscape ends at the largest loss. Nodes within one grid cell of
/// `theta1 = theta2` are skipped: runs started on that line stay on it.
pub fn pilot_bad_init(inst: &Instance) -> Result<[f64; 2]> {
    let grid = inst.config.grid.with_resolution(inst.config.relax.pilot_resolution);
    let cell = grid.spacing(0).max(grid.spacing(1));
    let rows = run_phase_with(inst, &grid, inst.config.mode, TrainScope::Axes, &inst.config.gd)?;
    rows.iter()
        .filter(|r| r.converged && ((r.theta1 - r.theta2) / std::f64::consts::SQRT_2).abs() > cell)
        .max_by(|a, b| a.final_loss.total_cmp(&b.final_loss))
        .map(|r| [r.theta1, r.theta2])
        .ok_or_else(|| Error::NonConvergence {
            reason: "no pilot run converged".into(),
            trajectory: None,
        })
}

/// Constrained training to a critical point, then unconstrained training from
/// a kicked copy of it.
pub fn run_relax(inst: &Instance) -> Result<RelaxOutput> {
    let spec = &inst.config.relax;
    let cfg = &inst.config.gd;
    let (init_theta, init_source) = match spec.init {
        Some(t) => (t, "config"),
        None => (pilot_bad_init(inst)?, "pilot"),
    };
    let basis = inst.basis(inst.config.mode)?;
    let dirs = relax_directions(inst)?;
    let ctx = &inst.ctx;
    let (h, d) = (basis.rows(), basis.cols());
    let full = FullObjective { ctx };
    let trackers = spec.trackers;

    let track = |row: &mut TrackerRow, w: &DMatrix<f64>| -> Result<()> {
        if !trackers {
            return Ok(());
        }
        row.equiv_error = Some(equivariance_error(ctx, &inst.layout_in, w)?);
        row.min_hess_eig = Some(hessian_spectrum(&full, &row_major(w))?.min_eig);
        row.proj = Some([frobenius(w, &dirs[0]), frobenius(w, &dirs[1]), frobenius(w, &dirs[2])]);
        Ok(())
    };

    // stage 1: constrained
    let trainer = Trainer::new(inst, &basis, spec.scope)?;
    let stage_obj = trainer.objective();
    let init = trainer.start(&inst.raw_point(init_theta))?;
    let stage1 = gd_observed(&*stage_obj, &init, cfg, Phase::Constrained, 0, &mut |row| {
        let w = basis.coeffs_to_weights(&trainer.full(&row.params))?;
        track(row, &w)
    })?;
    if !stage1.converged {
        return Err(Error::NonConvergence {
            reason: format!("constrained stage did not reach grad_tol in {} steps", cfg.max_steps),
            trajectory: Some(Box::new(stage1)),
        });
    }
    let c1 = trainer.full(&stage1.final_point);
    let w1 = basis.coeffs_to_weights(&c1)?;
    let x1 = row_major(&w1);
    let stage1_summary = StageSummary {
        first_step: 0,
        last_step: stage1.steps,
        final_loss: stage1.final_loss,
        final_grad_norm: stage1.final_grad_norm,
        equiv_error: equivariance_error(ctx, &inst.layout_in, &w1)?,
        converged: stage1.converged,
    };

    // handoff
    let coeff_spectrum = hessian_spectrum(&CoeffObjective { ctx, basis: &basis }, &c1)?;
    let kick = saddle_kick(&full, &x1, spec.kick, inst.config.seed)?;

    // stage 2: relaxed
    let offset = stage1.steps + 1;
    let stage2 = gd_observed(&full, &kick.point, cfg, Phase::Relaxed, offset, &mut |row| {
        let w = DMatrix::from_row_slice(h, d, &row.params);
        track(row, &w)
    })?;
    let mut rows = stage1.rows;
    rows.extend(stage2.rows.iter().cloned());
    if !stage2.converged {
        let trajectory = Trajectory {
            rows,
            final_point: stage2.final_point,
            final_loss: stage2.final_loss,
            final_grad_norm: stage2.final_grad_norm,
            steps: offset + stage2.steps,
            converged: false,
        };
        return Err(Error::NonConvergence {
            reason: format!("relaxed stage did not reach grad_tol in {} steps", cfg.max_steps),
            trajectory: Some(Box::new(trajectory)),
        });
    }
    let w2 = DMatrix::from_row_slice(h, d, &stage2.final_point);
    let stage2_summary = StageSummary {
        first_step: offset,
        last_step: offset + stage2.steps,
        final_loss: stage2.final_loss,
        final_grad_norm: stage2.final_grad_norm,
        equiv_error: equivariance_error(ctx, &inst.layout_in, &w2)?,
        converged: true,
    };
    let block = inst.layout_hidden.range(inst.config.hidden_block);
    let permutation = match_permutation(&w2, &inst.teacher.weights, block, spec.match_tol)?;
    let equiv_error_peak = rows
        .iter()
        .filter_map(|r| r.equiv_error.map(|e| (r.step, e)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let events = RelaxEvents {
        seed: inst.config.seed,
        init_theta,
        init_source: init_source.into(),
        mode: inst.config.mode,
        stage1: stage1_summary,
        handoff_min_eig: kick.spectrum.min_eig,
        handoff_spectrum: kick.spectrum.eigenvalues.clone(),
        handoff_coeff_spectrum: coeff_spectrum.eigenvalues,
        kick_kind: kick.kind,
        kick_magnitude: kick.magnitude,
        stage2: stage2_summary,
        equiv_error_peak,
        permutation_is_identity: permutation
            .as_ref()
            .map(|p| p.iter().enumerate().all(|(i, &j)| i == j)),
        permutation,
        final_weights: matrix_rows(&w2),
        teacher_weights: matrix_rows(&inst.teacher.weights),
    };
    Ok(RelaxOutput { rows, events })
}

fn row_major(w: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(w.len());
    for r in 0..w.nrows() {
        v.extend(w.row(r).iter());
    }
    v
}

pub fn write_relax_csv(rows: &[TrackerRow], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{RELAX_HEADER}")?;
    for r in rows {
        let [px, py, pz] = match r.proj {
            Some(p) => p.map(|x| fmt_f64(x)),
            None => Default::default(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{px},{py},{pz}",
            r.step,
            r.phase.as_str(),
            fmt_f64(r.loss),
            fmt_f64(r.grad_norm),
            fmt_opt(r.equiv_error),
            fmt_opt(r.min_hess_eig),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub n_minima: Option<usize>,
    pub losses: Vec<f64>,
    pub sides: Vec<f64>,
    pub boundary: Option<BoundaryStats>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub activation: Activation,
    pub seeds: Vec<SeedSummary>,
    pub two_minima_seeds: usize,
}

fn seed_summary(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSummary> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let inst = Instance::build(&cfg)?;
    let ms = run_multistart(&inst)?;
    let grid = cfg.grid.with_resolution(cfg.sweep.phase_resolution);
    let phase_cfg = GDConfig {
        learning_rate: cfg.gd.learning_rate,
        grad_tol: 0.0,
        ..GDConfig::phase()
    };
    let phase = run_phase_with(&inst, &grid, BasisMode::Normalized, cfg.phase_scope, &phase_cfg)?;
    Ok(SeedSummary {
        seed,
        n_minima: Some(ms.minima.len()),
        losses: ms.minima.iter().map(|m| m.loss).collect(),
        sides: ms.minima.iter().map(|m| m.side).collect(),
        boundary: Some(boundary_statistic(&phase, &grid)),
        error: None,
    })
}

/// Per-seed minimum counts and boundary statistics; failures are recorded
/// per seed.
pub fn run_seed_sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> SweepReport {
    let summaries: Vec<SeedSummary> = seeds
        .iter()
        .map(|&seed| {
            seed_summary(cfg, seed).unwrap_or_else(|e| SeedSummary {
                seed,
                n_minima: None,
                losses: Vec::new(),
                sides: Vec::new(),
                boundary: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    SweepReport {
        activation: cfg.activation,
        two_minima_seeds: summaries.iter().filter(|s| s.n_minima == Some(2)).count(),
        seeds: summaries,
    }
}

/// Hidden fixed-point data of an instance's raw basis.
pub fn instance_fixed_subspace(inst: &Instance) -> Result<crate::equiv::FixedPointData> {
    hidden_fixed_subspace(&inst.raw, inst.config.hidden_block)
}

/// Loss restricted to the column span of `basis` (orthonormal columns).
struct SubspaceObjective<'a> {
    inner: &'a dyn Objective,
    basis: &'a DMatrix<f64>,
}

impl Objective for SubspaceObjective<'_> {
    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn value_grad(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let x = self.basis * nalgebra::DVector::from_column_slice(y);
        let (l, g) = self.inner.value_grad(x.as_slice());
        let gy = self.basis.transpose() * nalgebra::DVector::from_vec(g);
        (l, gy.iter().copied().collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub mode: BasisMode,
    pub hidden_block: usize,
    pub row_orbits: Vec<Vec<usize>>,
    /// Critical point of the loss restricted to the fixed subspace, raw coefficients.
    pub fixed_point_raw: Vec<f64>,
    pub restricted_steps: usize,
    pub restricted_converged: bool,
    /// Norm of the component of the full coefficient gradient normal to the fixed subspace.
    pub normal_gradient_norm: f64,
    pub conditions: ConditionReport,
}

/// Finds a critical point of the loss on the hidden fixed subspace (starting
/// from the teacher's projection) and evaluates the four conditions there.
pub fn run_check(inst: &Instance) -> Result<CheckReport> {
    let basis = inst.basis(inst.config.mode)?;
    let fixed = hidden_fixed_subspace(&basis, inst.config.hidden_block)?;
    let coeff = CoeffObjective { ctx: &inst.ctx, basis: &basis };
    let sub = SubspaceObjective {
        inner: &coeff,
        basis: &fixed.basis_fixed,
    };
    let teacher = inst.raw.convert_coeffs(&inst.teacher_coeffs, &basis)?;
    let y0: Vec<f64> = (fixed.basis_fixed.transpose() * nalgebra::DVector::from_vec(teacher.clone()))
        .iter()
        .copied()
        .collect();
    let traj = gd(&sub, &y0, &inst.config.gd)?;
    let point: Vec<f64> = (&fixed.basis_fixed * nalgebra::DVector::from_vec(traj.final_point.clone()))
        .iter()
        .copied()
        .collect();
    let normal_gradient_norm = fixed.normal_norm(&coeff.grad(&point));
    let norm = teacher.iter().map(|x| x * x).sum::<f64>().sqrt();
    let conditions = check_conditions(&inst.ctx, &basis, &fixed, &point, 10.0 * (norm + 1.0), 256, inst.config.seed)?;
    Ok(CheckReport {
        mode: inst.config.mode,
        hidden_block: inst.config.hidden_block,
        row_orbits: fixed.row_orbits.clone(),
        fixed_point_raw: basis.convert_coeffs(&point, &inst.raw)?,
        restricted_steps: traj.steps,
        restricted_converged: traj.converged,
        normal_gradient_norm,
        conditions,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub init_theta: [f64; 2],
    pub mode: BasisMode,
    pub scope: TrainScope,
    pub steps: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_raw: Vec<f64>,
    pub final_side: f64,
}

/// One gd run in coefficient space from a grid node, with the config's
/// parameterization.
pub fn run_train(inst: &Instance, init: [f64; 2], scope: TrainScope) -> Result<(Trajectory, TrainSummary)> {
    let basis = inst.basis(inst.config.mode)?;
    let trainer = Trainer::new(inst, &basis, scope)?;
    let obj = trainer.objective();
    let traj = gd(&*obj, &trainer.start(&inst.raw_point(init))?, &inst.config.gd)?;
    let final_raw = trainer.to_raw(&traj.final_point)?;
    let summary = TrainSummary {
        init_theta: init,
        mode: inst.config.mode,
        scope,
        steps: traj.steps,
        converged: traj.converged,
        final_loss: traj.final_loss,
        final_grad_norm: traj.final_grad_norm,
        final_side: inst.side(&final_raw),
        final_raw,
    };
    Ok((traj, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 5, "activation": "erf"}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.activation, Activation::Erf);
        assert_eq!(cfg.grid.resolution, [101, 101]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(ExperimentConfig::from_json(r#"{"sed": 5}"#).unwrap_err().is_config());
    }

    #[test]
    fn teacher_is_deterministic_and_equivariant() {
        let cfg = ExperimentConfig::default();
        let (t1, c1) = make_teacher(&cfg).unwrap();
        let (t2, c2) = make_teacher(&cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(t1.weights, t2.weights);
        let inst = Instance::build(&cfg).unwrap();
        assert!(crate::equiv::intertwiner_residual(&inst.layout_in, &inst.layout_hidden, &t1.weights) < 1e-12);
    }

    #[test]
    fn explicit_teacher_round_trips() {
        let coeffs: Vec<f64> = (0..13).map(|i| 0.1 * i as f64 - 0.5).collect();
        let cfg = ExperimentConfig {
            teacher: TeacherSpec::Explicit { coeffs: coeffs.clone() },
            ..ExperimentConfig::default()
        };
        let inst = Instance::build(&cfg).unwrap();
        assert_eq!(inst.teacher_coeffs, coeffs);
        let (back, resid) = inst.raw.weights_to_coeffs(&inst.teacher.weights).unwrap();
        assert!(resid < 1e-12);
        assert!(back.iter().zip(&coeffs).all(|(a, b)| (a - b).abs() < 1e-12));
        let bad = ExperimentConfig {
            teacher: TeacherSpec::Explicit { coeffs: vec![1.0] },
            ..ExperimentConfig::default()
        };
        assert!(Instance::build(&bad).unwrap_err().is_config());
    }

    #[test]
    fn default_axes_are_diag_and_offdiag() {
        let inst = Instance::build(&ExperimentConfig::default()).unwrap();
        assert_eq!(inst.axes, [0, 1]);
    }

    #[test]
    fn landscape_vanishes_at_teacher_node() {
        let mut cfg = ExperimentConfig::default();
        let inst = Instance::build(&cfg).unwrap();
        let t = [inst.teacher_coeffs[0], inst.teacher_coeffs[1]];
        cfg.grid.range = [[t[0] - 1.0, t[0] + 1.0], [t[1] - 1.0, t[1] + 1.0]];
        cfg.grid.resolution = [3, 3];
        let inst = Instance::build(&cfg).unwrap();
        let rows = run_landscape(&inst).unwrap();
        assert_eq!(rows.len(), 9);
        assert!(rows[4].loss < 1e-12);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss >= -1e-12));
        let mut buf = Vec::new();
        write_landscape_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta1,theta2,loss\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn boundary_statistic_counts_minority() {
        let grid = GridSpec {
            resolution: [3, 3],
            range: [[-1.0, 1.0], [-1.0, 1.0]],
            axes: None,
        };
        let row = |t1: f64, t2: f64, l: f64| PhaseRow {
            theta1: t1,
            theta2: t2,
            final_loss: l,
            steps: 100,
            converged: false,
            diverged: false,
            final_side: 0.0,
        };
        // far nodes (|t1-t2|/√2 > 1): (1,-1) and (-1,1)
        let rows = vec![row(1.0, -1.0, 0.0), row(-1.0, 1.0, 1.0), row(0.0, 0.0, 1.0)];
        let s = boundary_statistic(&rows, &grid);
        assert_eq!(s.far_nodes, 2);
        assert_eq!(s.misclassified, 0);
    }

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }
}
