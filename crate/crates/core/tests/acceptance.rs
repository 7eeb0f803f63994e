//! End-to-end acceptance checks. Runs without the libtest harness so that
//! each check prints exactly one PASS or FAIL line; exits non-zero if any
//! check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use equiscope::equiv::{equivariant_basis, hidden_fixed_subspace, hom_dimension, BasisMode};
use equiscope::experiments::{
    boundary_statistic, run_multistart, run_phase, run_relax, ExperimentConfig, Instance,
};
use equiscope::group::{subgroup_classes, symmetric_group, FiniteGroup, Subgroup};
use equiscope::linalg::{jacobi_eigen, rank};
use equiscope::loss::{
    default_step, hessian_fd, hessian_fd_raw, kernel, kernel_monte_carlo, Activation, CoeffObjective, FullObjective,
    Objective,
};
use equiscope::optim::{gd_observed, GDConfig, Phase};
use equiscope::prep::{transitive_preps, PermRep, PrepSpec, RepLayout};
use equiscope::reduce::{
    block_rows_from_seed, find_reducible, merge_blocks, reduce_transitive_block, verify_equivalence, GeneralNet,
    Witness, ROW_TOL,
};
use equiscope::rng::PortableRng;
use equiscope::Error;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn reference() -> Instance {
    Instance::build(&ExperimentConfig::default()).expect("reference instance")
}

fn within(start: Instant, limit: Duration) -> Check {
    let t = start.elapsed();
    ensure!(t < limit, "took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs());
    Ok(format!("{:.1}s", t.as_secs_f64()))
}

fn kernel_oracle() -> Check {
    let start = Instant::now();
    let mut rng = PortableRng::new(2024);
    let dim = 4;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..50).map(|_| (rng.normal_vec(dim), rng.normal_vec(dim))).collect();
    let mut worst_z = 0.0f64;
    for act in [Activation::Relu, Activation::Erf] {
        let mc = kernel_monte_carlo(act, &pairs, 10_000_000, 7).map_err(|e| e.to_string())?;
        for ((w, v), est) in pairs.iter().zip(&mc) {
            let exact = kernel(act, w, v).map_err(|e| e.to_string())?;
            let z = ((est.mean - exact) / est.std_err).abs();
            worst_z = worst_z.max(z);
            ensure!(z <= 3.0, "{act:?}: analytic {exact} vs MC {} ± {}", est.mean, est.std_err);
        }
    }
    let e = [1.0, 0.0, 0.0, 0.0];
    let relu = kernel(Activation::Relu, &e, &e).unwrap();
    let erf = kernel(Activation::Erf, &e, &e).unwrap();
    ensure!((relu - 0.5).abs() <= 1e-12, "relu unit value {relu}");
    ensure!((erf - 1.0 / 3.0).abs() <= 1e-12, "erf unit value {erf}");
    let t = within(start, Duration::from_secs(120))?;
    Ok(format!("100 pairs within 3 SE (worst {worst_z:.2}), closed forms exact; {t}"))
}

fn central_gradient(obj: &dyn Objective, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * (1.0 + x[i].abs());
            y[i] = x[i] + h;
            let p = obj.value(&y);
            y[i] = x[i] - h;
            let m = obj.value(&y);
            y[i] = x[i];
            (p - m) / (2.0 * h)
        })
        .collect()
}

/// Largest-magnitude eigenvalue by power iteration.
fn power_iteration(a: &DMatrix<f64>, shift: f64) -> f64 {
    let n = a.nrows();
    let m = a - DMatrix::identity(n, n) * shift;
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..200_000 {
        let w = &m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return shift;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda + shift
}

fn gradient_hessian() -> Check {
    let inst = reference();
    let basis = inst.basis(BasisMode::Raw).unwrap();
    let coeff = CoeffObjective { ctx: &inst.ctx, basis: &basis };
    let full = FullObjective { ctx: &inst.ctx };
    let objs: [(&str, &dyn Objective); 2] = [("coefficients", &coeff), ("weights", &full)];
    let mut rng = PortableRng::new(99);
    let mut worst_grad = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_eig = 0.0f64;
    for (name, obj) in objs {
        for p in 0..100 {
            let x = rng.normal_vec(obj.dim());
            let g = obj.grad(&x);
            let fd = central_gradient(obj, &x);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_grad = worst_grad.max(err);
            ensure!(err < 1e-6, "{name} point {p}: gradient error {err:e}");
            if p % 10 == 0 {
                let raw = hessian_fd_raw(obj, &x, default_step).map_err(|e| e.to_string())?;
                let asym = (&raw - raw.transpose()).abs().max();
                worst_sym = worst_sym.max(asym);
                ensure!(asym < 1e-8, "{name} point {p}: Hessian asymmetry {asym:e}");
                let h = hessian_fd(obj, &x, default_step).map_err(|e| e.to_string())?;
                let ours = jacobi_eigen(&h).map_err(|e| e.to_string())?.eigenvalues;
                let mut oracle: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
                oracle.sort_by(f64::total_cmp);
                let diff = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                // extremes again by power iteration on a shifted matrix
                let shift = ours.last().unwrap() + 1.0;
                let low = power_iteration(&h, shift);
                let diff = diff.max((low - ours[0]).abs());
                worst_eig = worst_eig.max(diff);
                ensure!(diff < 1e-8, "{name} point {p}: spectrum mismatch {diff:e}");
            }
        }
    }
    Ok(format!(
        "gradient err {worst_grad:.1e}, Hessian asymmetry {worst_sym:.1e}, spectrum err {worst_eig:.1e}"
    ))
}

fn group_oracles() -> Check {
    let start = Instant::now();
    let s3 = Arc::new(symmetric_group(3).unwrap());
    let s4 = Arc::new(symmetric_group(4).unwrap());
    let c3 = subgroup_classes(&s3).map_err(|e| e.to_string())?.len();
    let c4 = subgroup_classes(&s4).map_err(|e| e.to_string())?.len();
    ensure!(c3 == 4, "S3 has {c3} subgroup classes");
    ensure!(c4 == 11, "S4 has {c4} subgroup classes");
    let mut dims: Vec<usize> = transitive_preps(&s3).unwrap().iter().map(|r| r.dim()).collect();
    dims.sort_unstable();
    ensure!(dims == vec![1, 2, 3, 6], "S3 transitive dims {dims:?}");

    let mut pairs = 0;
    for g in [&s3, &s4] {
        let reps = transitive_preps(g).unwrap();
        for a in &reps {
            for b in &reps {
                let lin = RepLayout::new(vec![a.clone()]).unwrap();
                let lout = RepLayout::new(vec![b.clone()]).unwrap();
                let basis = equivariant_basis(&lin, &lout, BasisMode::Raw).map_err(|e| e.to_string())?;
                let burnside = hom_dimension(&lin, &lout).unwrap();
                let flat = DMatrix::from_fn(basis.len(), basis.rows() * basis.cols(), |k, i| {
                    basis.mats()[k][(i / basis.cols(), i % basis.cols())]
                });
                let r = if basis.is_empty() { 0 } else { rank(&flat) };
                ensure!(
                    basis.len() == burnside && r == burnside,
                    "{} -> {}: {} matrices, rank {r}, Burnside {burnside}",
                    a.label(),
                    b.label(),
                    basis.len()
                );
                pairs += 1;
            }
        }
    }
    let inst = reference();
    ensure!(inst.raw.len() == 13, "reference layer has {} coefficients", inst.raw.len());
    ensure!(
        hom_dimension(&inst.layout_in, &inst.layout_hidden).unwrap() == 13,
        "reference Burnside count differs"
    );
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("classes 4/11, {pairs} layout pairs at Burnside rank, reference dim 13; {t}"))
}

fn fixed_point_structure() -> Check {
    let inst = reference();
    let basis = inst.basis(BasisMode::Normalized).unwrap();
    let fixed = hidden_fixed_subspace(&basis, 0).map_err(|e| e.to_string())?;
    ensure!(fixed.dim_fixed + 1 == fixed.dim_total, "fixed dim {} of {}", fixed.dim_fixed, fixed.dim_total);
    ensure!(fixed.c1_holds && fixed.c2_holds, "C1 {} C2 {}", fixed.c1_holds, fixed.c2_holds);
    let obj = CoeffObjective { ctx: &inst.ctx, basis: &basis };
    let mut rng = PortableRng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let y = DVector::from_vec(rng.normal_vec(fixed.dim_fixed));
        let x: Vec<f64> = (&fixed.basis_fixed * y).iter().copied().collect();
        let n = fixed.normal_norm(&obj.grad(&x));
        worst = worst.max(n);
    }
    ensure!(worst < 1e-10, "normal gradient component {worst:e}");

    let teacher = inst.raw.convert_coeffs(&inst.teacher_coeffs, &basis).unwrap();
    let start = fixed.project_coeffs(&teacher);
    let cfg = GDConfig {
        learning_rate: 0.1,
        max_steps: 1000,
        grad_tol: 0.0,
        record_every: 1,
    };
    let mut drift = 0.0f64;
    let mut left_at = None;
    let traj = gd_observed(&obj, &start, &cfg, Phase::Constrained, 0, &mut |row| {
        let n = fixed.normal_norm(&row.params);
        if n >= 1e-10 && left_at.is_none() {
            left_at = Some(row.step);
        }
        drift = drift.max(n);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure!(traj.steps == 1000, "run stopped after {} steps", traj.steps);
    // one-step departure along a copy of the run that is projected back after every step
    let mut x = start.clone();
    let mut defect = 0.0f64;
    for _ in 0..1000 {
        let g = obj.grad(&x);
        let next: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - cfg.learning_rate * b).collect();
        defect = defect.max(fixed.normal_norm(&next));
        x = fixed.project_coeffs(&next);
    }
    ensure!(
        drift < 1e-10,
        "tangency {worst:.1e} holds, but the run leaves the fixed subspace at step {} and drifts to {drift:.2e}; \
         the one-step departure stays at {defect:.1e}, so rounding noise is amplified along a repelling normal direction",
        left_at.unwrap_or(0)
    );
    Ok(format!(
        "dim {} = {} - 1, C1 holds, tangency {worst:.1e}, drift over 1000 steps {drift:.1e}",
        fixed.dim_fixed, fixed.dim_total
    ))
}

fn two_minima() -> Check {
    let start = Instant::now();
    let inst = reference();
    let ms = run_multistart(&inst).map_err(|e| e.to_string())?;
    ensure!(ms.minima.len() == 2, "{} clusters", ms.minima.len());
    let (good, bad) = (&ms.minima[0], &ms.minima[1]);
    ensure!(good.loss < 1e-10, "global cluster loss {:e}", good.loss);
    ensure!(bad.loss >= 1e-4 && bad.grad_norm < 1e-8, "spurious cluster loss {:e} grad {:e}", bad.loss, bad.grad_norm);
    ensure!(good.side * bad.side < 0.0, "clusters on the same side ({}, {})", good.side, bad.side);
    let mut two = 0;
    let mut counts = Vec::new();
    for seed in 0..10 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let inst = Instance::build(&cfg).map_err(|e| e.to_string())?;
        let n = run_multistart(&inst).map(|m| m.minima.len()).unwrap_or(0);
        counts.push(n);
        two += usize::from(n == 2);
    }
    ensure!(two >= 7, "only {two} of 10 seeds show two clusters: {counts:?}");
    let t = within(start, Duration::from_secs(600))?;
    Ok(format!(
        "losses {:.1e} / {:.3e}, opposite sides; {two}/10 seeds with two clusters; {t}",
        good.loss, bad.loss
    ))
}

fn phase_boundary() -> Check {
    let start = Instant::now();
    let inst = reference();
    let grid = &inst.config.grid;
    ensure!(grid.resolution == [101, 101], "grid {:?}", grid.resolution);
    let norm = run_phase(&inst, BasisMode::Normalized).map_err(|e| e.to_string())?;
    let raw = run_phase(&inst, BasisMode::Raw).map_err(|e| e.to_string())?;
    ensure!(norm.iter().all(|r| r.steps == 100), "normalized runs not all 100 steps");
    let bn = boundary_statistic(&norm, grid);
    let br = boundary_statistic(&raw, grid);
    ensure!(bn.side_constant_fraction >= 0.95, "normalized side-constant {:.4}", bn.side_constant_fraction);
    ensure!(
        br.misclassified > bn.misclassified,
        "raw misclassifies {} vs normalized {}",
        br.misclassified,
        bn.misclassified
    );
    let t = within(start, Duration::from_secs(900))?;
    Ok(format!(
        "normalized {:.2}% side-constant ({} misclassified), raw {} misclassified; {t}",
        100.0 * bn.side_constant_fraction,
        bn.misclassified,
        br.misclassified
    ))
}

fn relax_escape() -> Check {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.gd.max_steps = 1_000_000;
    let inst = Instance::build(&cfg).map_err(|e| e.to_string())?;
    let out = run_relax(&inst).map_err(|e| e.to_string())?;
    let ev = &out.events;
    let s1 = &ev.stage1;
    ensure!(s1.final_grad_norm < 1e-8, "stage 1 grad {:e}", s1.final_grad_norm);
    ensure!(s1.final_loss >= 1e-4, "stage 1 loss {:e}", s1.final_loss);
    ensure!(s1.equiv_error < 1e-12, "stage 1 equivariance error {:e}", s1.equiv_error);
    ensure!(ev.handoff_min_eig < -1e-6, "handoff min eigenvalue {:e}", ev.handoff_min_eig);
    let s2 = &ev.stage2;
    ensure!(s2.final_loss < 1e-10, "stage 2 loss {:e}", s2.final_loss);
    ensure!(s2.equiv_error < 1e-10, "stage 2 equivariance error {:e}", s2.equiv_error);
    ensure!(ev.permutation_is_identity == Some(false), "permutation match {:?}", ev.permutation);
    let constrained_max = out
        .rows
        .iter()
        .filter(|r| r.phase == Phase::Constrained)
        .filter_map(|r| r.equiv_error)
        .fold(0.0, f64::max);
    ensure!(constrained_max < 1e-10, "constrained rows reach equivariance error {constrained_max:e}");
    let (peak_step, peak) = ev.equiv_error_peak.ok_or("no equivariance trace")?;
    ensure!(
        peak_step > s2.first_step && peak_step < s2.last_step,
        "peak at step {peak_step}, stage 2 spans {}..{}",
        s2.first_step,
        s2.last_step
    );
    let t = within(start, Duration::from_secs(300))?;
    Ok(format!(
        "bad minimum {:.3e}, handoff eig {:.2e}, final {:.1e}, permutation {:?}, bump {peak:.2e} at step {peak_step}; {t}",
        s1.final_loss,
        ev.handoff_min_eig,
        s2.final_loss,
        ev.permutation.as_deref().unwrap_or(&[])
    ))
}

fn reduction_net(g: &Arc<FiniteGroup>, blocks: Vec<PermRep>, seeds: &[(usize, Vec<f64>, Subgroup)], useed: u64) -> GeneralNet {
    let lin = RepLayout::from_specs(g, &[PrepSpec::Natural, PrepSpec::Coset { class: 2 }, PrepSpec::Trivial]).unwrap();
    let lout = RepLayout::from_specs(g, &[PrepSpec::Trivial, PrepSpec::Natural]).unwrap();
    let hidden = RepLayout::new(blocks.clone()).unwrap();
    let mut w = DMatrix::zeros(hidden.total_dim(), lin.total_dim());
    for (b, rep) in blocks.iter().enumerate() {
        let (k, row, sym) = &seeds[b];
        let rows = block_rows_from_seed(&lin, rep, *k, row, sym).unwrap();
        w.rows_mut(hidden.offsets()[b], rep.dim()).copy_from(&rows);
    }
    let bu = equivariant_basis(&hidden, &lout, BasisMode::Raw).unwrap();
    let u = bu.coeffs_to_weights(&PortableRng::new(useed).normal_vec(bu.len())).unwrap();
    GeneralNet::new(lin, hidden, lout, w, u, Activation::Relu).unwrap()
}

fn structural_reductions() -> Check {
    let g = Arc::new(symmetric_group(3).unwrap());
    let classes = subgroup_classes(&g).unwrap();
    let a3 = classes.iter().find(|c| c.representative.order() == 3).unwrap().representative.clone();
    let trivial = g.trivial_subgroup();

    let net = reduction_net(
        &g,
        vec![PermRep::regular(g.clone())],
        &[(0, PortableRng::new(1).normal_vec(6), a3.clone())],
        2,
    );
    let (k, k2) = find_reducible(&net, ROW_TOL)
        .into_iter()
        .find_map(|w| match w {
            Witness::DuplicateRows { block: 0, k, k2 } => Some((k, k2)),
            _ => None,
        })
        .ok_or("no duplicate rows found in the coset-constant block")?;
    let (red, _) = reduce_transitive_block(&net, 0, (k, k2), ROW_TOL).map_err(|e| e.to_string())?;
    let block = &red.layout_hidden.blocks()[0];
    ensure!(block.dim() == 2 && block.is_transitive().0, "reduced block dim {}", block.dim());
    ensure!(6 % block.dim() == 0, "new dim does not divide 6");
    let r1 = verify_equivalence(&net, &red, 1000, 3).unwrap();
    ensure!(r1 < 1e-10, "shrink residual {r1:e}");

    let row = PortableRng::new(8).normal_vec(6);
    let dup = reduction_net(
        &g,
        vec![PermRep::natural(g.clone()), PermRep::natural(g.clone())],
        &[(0, row.clone(), trivial.clone()), (0, row, trivial.clone())],
        11,
    );
    let (merged, _) = merge_blocks(&dup, 0, 1, (0, 0), ROW_TOL).map_err(|e| e.to_string())?;
    ensure!(merged.layout_hidden.total_dim() == 3, "merged hidden dim {}", merged.layout_hidden.total_dim());
    let r2 = verify_equivalence(&dup, &merged, 1000, 4).unwrap();
    ensure!(r2 < 1e-10, "merge residual {r2:e}");

    let shared = PortableRng::new(14).normal_vec(6);
    let mixed = reduction_net(
        &g,
        vec![PermRep::natural(g.clone()), PermRep::coset(g.clone(), &a3).unwrap()],
        &[(0, shared.clone(), g.whole()), (0, shared, g.whole())],
        15,
    );
    match merge_blocks(&mixed, 0, 1, (0, 0), ROW_TOL) {
        Err(Error::NotReducible(_)) => {}
        other => return Err(format!("non-isomorphic merge not rejected: {:?}", other.map(|(_, r)| r.kind))),
    }
    Ok(format!("6 -> 2 neurons (residual {r1:.1e}), merge residual {r2:.1e}, mismatched merge rejected"))
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("kernel oracle", kernel_oracle),
        ("gradient and Hessian checks", gradient_hessian),
        ("group and representation oracles", group_oracles),
        ("hidden fixed-point structure", fixed_point_structure),
        ("two minima", two_minima),
        ("phase-diagram boundary", phase_boundary),
        ("relaxation escape", relax_escape),
        ("structural reductions", structural_reductions),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
