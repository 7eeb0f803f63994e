//! Plain gradient descent, multistart minimum discovery, saddle kicks, and
//! row-permutation matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymSpectrum;
use crate::loss::{hessian_spectrum, Objective};
use crate::rng::PortableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GDConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub record_every: usize,
}

impl Default for GDConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_steps: 100_000,
            grad_tol: 1e-8,
            record_every: 100,
        }
    }
}

impl GDConfig {
    /// Fixed-length run used for phase diagrams.
    pub fn phase() -> Self {
        Self {
            max_steps: 100,
            record_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be positive"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::config("grad_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Constrained,
    Relaxed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Constrained => "constrained",
            Phase::Relaxed => "relaxed",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackerRow {
    pub step: usize,
    pub phase: Phase,
    #[serde(skip)]
    pub params: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub equiv_error: Option<f64>,
    pub min_hess_eig: Option<f64>,
    pub proj: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub rows: Vec<TrackerRow>,
    #[serde(skip)]
    pub final_point: Vec<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// Number of parameter updates performed.
    pub steps: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// An objective restricted to a subset of its coordinates; the others stay
/// at `base`.
pub struct PinnedObjective<'a> {
    pub inner: &'a dyn Objective,
    pub base: Vec<f64>,
    pub free: Vec<usize>,
}

impl PinnedObjective<'_> {
    /// Full point with the free coordinates replaced by `x`.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut p = self.base.clone();
        for (&i, &v) in self.free.iter().zip(x) {
            p[i] = v;
        }
        p
    }

    /// Free coordinates of a full point.
    pub fn restrict(&self, p: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| p[i]).collect()
    }
}

impl Objective for PinnedObjective<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (v, g) = self.inner.value_grad(&self.embed(x));
        (v, self.restrict(&g))
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(&self.embed(x))
    }
}

/// Callback run on every recorded row; may fill the optional tracker fields.
pub type Observer<'a> = dyn FnMut(&mut TrackerRow) -> Result<()> + 'a;

pub fn gd(obj: &dyn Objective, init: &[f64], cfg: &GDConfig) -> Result<Trajectory> {
    gd_observed(obj, init, cfg, Phase::Constrained, 0, &mut |_| Ok(()))
}

/// Gradient descent with a per-record observer. Steps are numbered from
/// `step_offset` so that consecutive stages share one step axis.
pub fn gd_observed(
    obj: &dyn Objective,
    init: &[f64],
    cfg: &GDConfig,
    phase: Phase,
    step_offset: usize,
    observer: &mut Observer<'_>,
) -> Result<Trajectory> {
    cfg.validate()?;
    if init.len() != obj.dim() {
        return Err(Error::config(format!(
            "initial point has {} entries, expected {}",
            init.len(),
            obj.dim()
        )));
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(Error::config("initial point is not finite"));
    }
    let mut x = init.to_vec();
    let mut rows: Vec<TrackerRow> = Vec::new();
    let mut last_good: Option<TrackerRow> = None;
    let mut step = 0;
    loop {
        let (loss, grad) = obj.value_grad(&x);
        let grad_norm = norm(&grad);
        let row = TrackerRow {
            step: step_offset + step,
            phase,
            params: x.clone(),
            loss,
            grad_norm,
            equiv_error: None,
            min_hess_eig: None,
            proj: None,
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            let last = last_good.unwrap_or(row);
            return Err(Error::Diverged {
                step: step_offset + step,
                last: Box::new(last),
            });
        }
        let converged = grad_norm < cfg.grad_tol;
        let done = converged || step == cfg.max_steps;
        if step % cfg.record_every == 0 || done {
            let mut row = row.clone();
            observer(&mut row)?;
            rows.push(row);
        }
        if done {
            return Ok(Trajectory {
                rows,
                final_point: x,
                final_loss: loss,
                final_grad_norm: grad_norm,
                steps: step,
                converged,
            });
        }
        last_good = Some(row);
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi -= cfg.learning_rate * gi;
        }
        step += 1;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    /// Number of starts that converged into this cluster.
    pub count: usize,
    /// Index of the first start that reached it.
    pub first_start: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MinimaSet {
    pub minima: Vec<Minimum>,
    pub cluster_tol: f64,
    pub n_starts: usize,
    pub n_converged: usize,
    pub n_diverged: usize,
}

impl MinimaSet {
    /// Minima sorted by loss, lowest first.
    pub fn by_loss(&self) -> Vec<&Minimum> {
        let mut v: Vec<&Minimum> = self.minima.iter().collect();
        v.sort_by(|a, b| a.loss.total_cmp(&b.loss));
        v
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs gd from every start in parallel and clusters the converged endpoints
/// (in start order) by Euclidean parameter distance.
pub fn multistart_minima(
    obj: &dyn Objective,
    starts: &[Vec<f64>],
    cfg: &GDConfig,
    cluster_tol: f64,
) -> Result<MinimaSet> {
    if starts.is_empty() {
        return Err(Error::config("multistart needs at least one start"));
    }
    cfg.validate()?;
    let runs: Vec<Result<Trajectory>> = starts.par_iter().map(|s| gd(obj, s, cfg)).collect();
    let mut minima: Vec<Minimum> = Vec::new();
    let (mut n_converged, mut n_diverged) = (0, 0);
    for (i, run) in runs.into_iter().enumerate() {
        let t = match run {
            Ok(t) => t,
            Err(Error::Diverged { .. }) => {
                n_diverged += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !t.converged {
            continue;
        }
        n_converged += 1;
        match minima
            .iter_mut()
            .find(|m| distance(&m.point, &t.final_point) <= cluster_tol)
        {
            Some(m) => m.count += 1,
            None => minima.push(Minimum {
                point: t.final_point,
                loss: t.final_loss,
                grad_norm: t.final_grad_norm,
                count: 1,
                first_start: i,
            }),
        }
    }
    if minima.is_empty() {
        return Err(Error::NonConvergence {
            reason: format!("none of {} starts converged", starts.len()),
            trajectory: None,
        });
    }
    Ok(MinimaSet {
        minima,
        cluster_tol,
        n_starts: starts.len(),
        n_converged,
        n_diverged,
    })
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KickKind {
    NegativeCurvature,
    Isotropic,
}

#[derive(Clone, Debug, Serialize)]
pub struct Kick {
    #[serde(skip)]
    pub point: Vec<f64>,
    pub kind: KickKind,
    pub magnitude: f64,
    pub spectrum: SymSpectrum,
}

/// Curvature threshold below which a point counts as a saddle.
pub const SADDLE_EIG_TOL: f64 = 1e-8;

/// Moves `delta` along the most negative Hessian eigenvector (sign picked by
/// comparing the two trial losses), or by seeded isotropic noise of norm
/// `delta` when the Hessian has no negative direction.
pub fn saddle_kick(obj: &dyn Objective, point: &[f64], delta: f64, seed: u64) -> Result<Kick> {
    let spectrum = hessian_spectrum(obj, point)?;
    let n = point.len();
    if spectrum.min_eig < -SADDLE_EIG_TOL {
        let v: Vec<f64> = spectrum.eigenvectors.column(0).iter().copied().collect();
        let plus: Vec<f64> = point.iter().zip(&v).map(|(x, d)| x + delta * d).collect();
        let minus: Vec<f64> = point.iter().zip(&v).map(|(x, d)| x - delta * d).collect();
        let point = if obj.value(&minus) < obj.value(&plus) { minus } else { plus };
        return Ok(Kick {
            point,
            kind: KickKind::NegativeCurvature,
            magnitude: delta,
            spectrum,
        });
    }
    let mut rng = PortableRng::new(seed);
    let mut dir = rng.normal_vec(n);
    let len = norm(&dir);
    dir.iter_mut().for_each(|d| *d *= delta / len);
    Ok(Kick {
        point: point.iter().zip(&dir).map(|(x, d)| x + d).collect(),
        kind: KickKind::Isotropic,
        magnitude: delta,
        spectrum,
    })
}

/// Largest block accepted by [`match_permutation`].
pub const MAX_MATCH_BLOCK: usize = 8;

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Finds `π` on the rows `block` with `W_final[π(i)] ≈ W_teacher[i]` for every
/// row `i` of the block. Returned as local indices; a non-identity match is
/// preferred when several exist.
pub fn match_permutation(
    w_final: &nalgebra::DMatrix<f64>,
    w_teacher: &nalgebra::DMatrix<f64>,
    block: std::ops::Range<usize>,
    tol: f64,
) -> Result<Option<Vec<usize>>> {
    if w_final.shape() != w_teacher.shape() {
        return Err(Error::config("weight matrices differ in shape"));
    }
    if block.end > w_final.nrows() || block.is_empty() {
        return Err(Error::config("block rows out of range"));
    }
    let m = block.len();
    if m > MAX_MATCH_BLOCK {
        return Err(Error::Resource {
            what: format!("exhaustive permutation search over {m} rows"),
            cap: MAX_MATCH_BLOCK,
        });
    }
    let close = |a: usize, b: usize| {
        (0..w_final.ncols()).all(|c| (w_final[(block.start + a, c)] - w_teacher[(block.start + b, c)]).abs() < tol)
    };
    let mut p: Vec<usize> = (0..m).collect();
    let mut identity_matches = false;
    loop {
        if (0..m).all(|i| close(p[i], i)) {
            if p.iter().enumerate().any(|(i, &j)| i != j) {
                return Ok(Some(p));
            }
            identity_matches = true;
        }
        if !next_permutation(&mut p) {
            break;
        }
    }
    Ok(identity_matches.then(|| (0..m).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    struct Quadratic(Vec<f64>);
    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let v = x.iter().zip(&self.0).map(|(x, a)| a * x * x).sum();
            (v, x.iter().zip(&self.0).map(|(x, a)| 2.0 * a * x).collect())
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let q = Quadratic(vec![1.0, 0.5]);
        let t = gd(&q, &[1.0, -2.0], &GDConfig::default()).unwrap();
        assert!(t.converged);
        assert!(t.final_grad_norm < 1e-8);
        assert!(t.rows.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn stops_at_start_when_already_critical() {
        let q = Quadratic(vec![1.0]);
        let t = gd(&q, &[0.0], &GDConfig::default()).unwrap();
        assert_eq!(t.steps, 0);
        assert!(t.converged);
    }

    #[test]
    fn phase_run_has_fixed_length() {
        let q = Quadratic(vec![0.01]);
        let t = gd(&q, &[1.0], &GDConfig::phase()).unwrap();
        assert_eq!(t.steps, 100);
        assert!(!t.converged);
    }

    #[test]
    fn divergence_reports_last_row() {
        let q = Quadratic(vec![100.0]);
        let cfg = GDConfig {
            max_steps: 100_000,
            ..GDConfig::default()
        };
        match gd(&q, &[1.0], &cfg) {
            Err(Error::Diverged { step, last }) => {
                assert!(step > 0);
                assert!(last.loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_config_rejected() {
        let q = Quadratic(vec![1.0]);
        let cfg = GDConfig {
            learning_rate: -1.0,
            ..GDConfig::default()
        };
        assert!(gd(&q, &[1.0], &cfg).unwrap_err().is_config());
    }

    #[test]
    fn quadratic_has_one_cluster() {
        let q = Quadratic(vec![1.0]);
        let starts: Vec<Vec<f64>> = (0..11).map(|i| vec![-3.0 + 0.6 * i as f64]).collect();
        let m = multistart_minima(&q, &starts, &GDConfig::default(), 1e-3).unwrap();
        assert_eq!(m.minima.len(), 1);
        assert_eq!(m.minima[0].count, 11);
    }

    struct Saddle;
    impl Objective for Saddle {
        fn dim(&self) -> usize {
            2
        }
        fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
            (x[0] * x[0] - x[1] * x[1], vec![2.0 * x[0], -2.0 * x[1]])
        }
    }

    #[test]
    fn kick_follows_negative_curvature() {
        let k = saddle_kick(&Saddle, &[0.0, 0.0], 0.1, 1).unwrap();
        assert_eq!(k.kind, KickKind::NegativeCurvature);
        assert!(k.point[0].abs() < 1e-12);
        assert!((k.point[1].abs() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kick_is_isotropic_at_minimum() {
        let q = Quadratic(vec![1.0, 2.0, 3.0]);
        let k = saddle_kick(&q, &[0.0; 3], 1e-3, 9).unwrap();
        assert_eq!(k.kind, KickKind::Isotropic);
        assert!((norm(&k.point) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn permutation_matching() {
        let t = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(match_permutation(&t, &t, 0..3, 1e-9).unwrap(), Some(vec![0, 1, 2]));
        // rows 0..3 shifted cyclically: final row 1 holds teacher row 0, ...
        let mut f = t.clone();
        f.set_row(1, &t.row(0));
        f.set_row(2, &t.row(1));
        f.set_row(0, &t.row(2));
        assert_eq!(match_permutation(&f, &t, 0..3, 1e-9).unwrap(), Some(vec![1, 2, 0]));
        f[(0, 0)] += 1.0;
        assert_eq!(match_permutation(&f, &t, 0..3, 1e-9).unwrap(), None);
    }

    #[test]
    fn duplicate_rows_prefer_non_identity() {
        let t = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(match_permutation(&t, &t, 0..2, 1e-9).unwrap(), Some(vec![1, 0]));
    }
}
