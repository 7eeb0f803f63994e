use std::io::Write;
use std::sync::Arc;

use equiscope::equiv::BasisMode;
use equiscope::experiments::{
    boundary_statistic, fmt_f64, run_check, run_landscape, run_multistart, run_phase, run_relax, run_seed_sweep,
    run_train, write_landscape_csv, write_phase_csv, write_relax_csv, ExperimentConfig, GroupSpec, Instance, TrainScope,
};
use equiscope::group::subgroup_classes;
use equiscope::loss::{kernel, kernel_monte_carlo, Activation};
use equiscope::prep::transitive_preps;
use equiscope::reduce::{apply_witness, find_reducible, verify_equivalence, NetSpec, ReductionReport, Witness};
use equiscope::rng::PortableRng;
use equiscope::Error;
use serde::Serialize;
use serde_json::Value;

use crate::args::{Command, RunOpts};
use crate::output::OutDir;
use crate::CliError;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Basis { run } => basis(&run),
        Command::Preps { group, out, force } => preps(&group, out.as_deref(), force),
        Command::Landscape { run, no_multistart } => landscape(&run, !no_multistart),
        Command::Phase { run } => phase(&run),
        Command::Relax { run } => relax(&run),
        Command::Sweep { run, seeds } => sweep(&run, seeds),
        Command::Reduce {
            net,
            out,
            force,
            seed,
            tol,
            samples,
        } => reduce(&net, &out, force, seed, tol, samples),
        Command::Check { run } => check(&run),
        Command::KernelCheck {
            samples,
            pairs,
            dim,
            seed,
            sigmas,
            out,
            force,
        } => kernel_check(samples, pairs, dim, seed, sigmas, out.as_deref(), force),
        Command::Train { run, init, all } => train(&run, init, all),
    }
}

fn parse_group(s: &str) -> Result<GroupSpec, CliError> {
    let digits = s.trim().trim_start_matches(['s', 'S']);
    digits
        .parse::<usize>()
        .map(|n| GroupSpec::Symmetric { n })
        .map_err(|_| CliError::Usage(format!("unknown group '{s}'; expected s<n>, e.g. s3")))
}

/// Sets `a.b.c` inside a JSON object, creating intermediate objects.
fn set_path(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: '{part}' is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

/// Config file, then `--set` overrides, then the typed flags.
pub fn effective_config(run: &RunOpts) -> Result<ExperimentConfig, CliError> {
    let mut value: Value = match &run.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid config: {e}")))?
        }
        None => serde_json::to_value(ExperimentConfig::default()).map_err(Error::from)?,
    };
    for s in &run.set {
        set_path(&mut value, s)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(r) = run.grid {
        cfg.grid.resolution = [r, r];
    }
    if let Some(lr) = run.lr {
        cfg.gd.learning_rate = lr;
    }
    if let Some(steps) = run.steps {
        cfg.gd.max_steps = steps;
    }
    if let Some(a) = &run.activation {
        cfg.activation = a.parse::<Activation>()?;
    }
    if let Some(m) = &run.mode {
        cfg.mode = m.parse::<BasisMode>()?;
    }
    Ok(cfg)
}

/// Loads the config, claims the output files and echoes the config.
fn setup(run: &RunOpts, files: &[&str]) -> Result<(Instance, OutDir), CliError> {
    let cfg = effective_config(run)?;
    let mut all = files.to_vec();
    all.push("config.json");
    let out = OutDir::prepare(&run.out, &all, run.force)?;
    let inst = Instance::build(&cfg)?;
    out.json("config.json", &cfg)?;
    Ok((inst, out))
}

fn basis(run: &RunOpts) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct BasisDump {
        mode: BasisMode,
        len: usize,
        axes: [usize; 2],
        slots: Vec<equiscope::equiv::BasisSlot>,
        mats: Vec<Vec<Vec<f64>>>,
        teacher_coeffs: Vec<f64>,
    }
    let (inst, out) = setup(run, &["basis.json"])?;
    let b = inst.basis(inst.config.mode)?;
    print!("{}", b.describe());
    println!("grid axes: coefficients {} and {}", inst.axes[0], inst.axes[1]);
    let dump = BasisDump {
        mode: b.mode(),
        len: b.len(),
        axes: inst.axes,
        slots: b.slots().to_vec(),
        mats: b
            .mats()
            .iter()
            .map(|m| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect())
            .collect(),
        teacher_coeffs: inst.teacher_coeffs.clone(),
    };
    out.json("basis.json", &dump)
}

fn preps(group: &str, out: Option<&std::path::Path>, force: bool) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct PrepRow {
        class: usize,
        dim: usize,
        stabilizer_order: usize,
        label: String,
    }
    let spec = parse_group(group)?;
    let out = out.map(|o| OutDir::prepare(o, &["preps.json"], force)).transpose()?;
    let g = Arc::new(spec.build()?);
    let classes = subgroup_classes(&g)?;
    let reps = transitive_preps(&g)?;
    println!("group S{} (order {}): {} transitive permutation representations", g.degree(), g.order(), reps.len());
    println!("{:>5}  {:>4}  {:>9}  label", "class", "dim", "|stab|");
    let rows: Vec<PrepRow> = reps
        .iter()
        .zip(&classes)
        .enumerate()
        .map(|(i, (r, c))| PrepRow {
            class: i,
            dim: r.dim(),
            stabilizer_order: c.representative.order(),
            label: r.label(),
        })
        .collect();
    for r in &rows {
        println!("{:>5}  {:>4}  {:>9}  {}", r.class, r.dim, r.stabilizer_order, r.label);
    }
    if let Some(out) = out {
        out.json("preps.json", &rows)?;
    }
    Ok(())
}

fn landscape(run: &RunOpts, multistart: bool) -> Result<(), CliError> {
    let files: &[&str] = if multistart {
        &["landscape.csv", "multistart.json"]
    } else {
        &["landscape.csv"]
    };
    let (inst, out) = setup(run, files)?;
    let rows = run_landscape(&inst)?;
    let mut w = out.writer("landscape.csv")?;
    write_landscape_csv(&rows, &mut w)?;
    w.flush()?;
    let min = rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    println!(
        "landscape: {} nodes, axes ({}, {}), min loss {:.3e}",
        rows.len(),
        inst.axes[0],
        inst.axes[1],
        min
    );
    if multistart {
        let report = run_multistart(&inst)?;
        println!(
            "multistart: {} starts, {} converged, {} minima",
            report.n_starts,
            report.n_converged,
            report.minima.len()
        );
        for m in &report.minima {
            println!(
                "  theta=({:+.4}, {:+.4}) loss {:.3e} grad {:.1e} count {} side {:+.3}",
                m.theta1, m.theta2, m.loss, m.grad_norm, m.count, m.side
            );
        }
        out.json("multistart.json", &report)?;
    }
    Ok(())
}

fn phase(run: &RunOpts) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct PhaseSummary {
        mode: BasisMode,
        scope: TrainScope,
        nodes: usize,
        diverged: usize,
        boundary: equiscope::experiments::BoundaryStats,
    }
    let (inst, out) = setup(run, &["phase.csv", "phase_summary.json"])?;
    let rows = run_phase(&inst, inst.config.mode)?;
    let mut w = out.writer("phase.csv")?;
    write_phase_csv(&rows, &mut w)?;
    w.flush()?;
    let boundary = boundary_statistic(&rows, &inst.config.grid);
    let summary = PhaseSummary {
        mode: inst.config.mode,
        scope: inst.config.phase_scope,
        nodes: rows.len(),
        diverged: rows.iter().filter(|r| r.diverged).count(),
        boundary,
    };
    println!(
        "phase ({:?}): {} nodes, {} diverged, {} of {} far nodes misclassified against theta1=theta2 ({:.2}% side-constant)",
        summary.mode,
        summary.nodes,
        summary.diverged,
        summary.boundary.misclassified,
        summary.boundary.far_nodes,
        100.0 * summary.boundary.side_constant_fraction
    );
    out.json("phase_summary.json", &summary)
}

fn relax(run: &RunOpts) -> Result<(), CliError> {
    let (inst, out) = setup(run, &["relax.csv", "events.json"])?;
    let result = match run_relax(&inst) {
        Ok(r) => r,
        Err(Error::NonConvergence {
            reason,
            trajectory: Some(traj),
        }) => {
            let mut w = out.writer("relax.csv")?;
            write_relax_csv(&traj.rows, &mut w)?;
            w.flush()?;
            return Err(Error::NonConvergence {
                reason: format!("{reason}; partial trajectory in relax.csv"),
                trajectory: Some(traj),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut w = out.writer("relax.csv")?;
    write_relax_csv(&result.rows, &mut w)?;
    w.flush()?;
    out.json("events.json", &result.events)?;
    let ev = &result.events;
    println!(
        "init ({:+.4}, {:+.4}) from {}",
        ev.init_theta[0], ev.init_theta[1], ev.init_source
    );
    println!(
        "stage 1: steps {}..{}, loss {:.3e}, grad {:.1e}, equivariance error {:.1e}",
        ev.stage1.first_step, ev.stage1.last_step, ev.stage1.final_loss, ev.stage1.final_grad_norm, ev.stage1.equiv_error
    );
    println!(
        "handoff: min Hessian eigenvalue {:.3e}, kick {:?} of size {:.1e}",
        ev.handoff_min_eig, ev.kick_kind, ev.kick_magnitude
    );
    println!(
        "stage 2: steps {}..{}, loss {:.3e}, grad {:.1e}, equivariance error {:.1e}",
        ev.stage2.first_step, ev.stage2.last_step, ev.stage2.final_loss, ev.stage2.final_grad_norm, ev.stage2.equiv_error
    );
    match (&ev.permutation, ev.permutation_is_identity) {
        (Some(p), Some(id)) => println!("teacher match: permutation {p:?}{}", if id { " (identity)" } else { "" }),
        _ => println!("teacher match: none"),
    }
    Ok(())
}

fn sweep(run: &RunOpts, seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    let (inst, out) = setup(run, &["sweep.json"])?;
    let seeds = seeds.unwrap_or_else(|| inst.config.sweep.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Usage("empty seed list".into()));
    }
    let report = run_seed_sweep(&inst.config, &seeds);
    for s in &report.seeds {
        match (&s.error, s.n_minima) {
            (Some(e), _) => println!("seed {:>3}: error: {e}", s.seed),
            (None, Some(n)) => println!(
                "seed {:>3}: {n} minima, losses [{}], side-constant {:.2}%",
                s.seed,
                s.losses.iter().map(|l| format!("{l:.2e}")).collect::<Vec<_>>().join(", "),
                100.0 * s.boundary.as_ref().map_or(f64::NAN, |b| b.side_constant_fraction)
            ),
            (None, None) => {}
        }
    }
    println!(
        "{} of {} seeds ({:?}) show exactly two minima",
        report.two_minima_seeds,
        report.seeds.len(),
        report.activation
    );
    out.json("sweep.json", &report)
}

fn reduce(
    path: &std::path::Path,
    out_dir: &std::path::Path,
    force: bool,
    seed: u64,
    tol: f64,
    samples: usize,
) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct ReduceOutput {
        steps: Vec<ReductionReport>,
        remaining_witnesses: Vec<Witness>,
        hidden_dim_before: usize,
        hidden_dim_after: usize,
        equivalence_residual: f64,
        samples: usize,
        seed: u64,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read net {}: {e}", path.display())))?;
    let spec: NetSpec = serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid net: {e}")))?;
    let out = OutDir::prepare(out_dir, &["reduced_net.json", "reduction_report.json"], force)?;
    let original = spec.build()?;
    let mut net = original.clone();
    let mut steps = Vec::new();
    // each reduction removes at least one neuron, so this terminates
    'outer: loop {
        let witnesses = find_reducible(&net, tol);
        for w in &witnesses {
            match apply_witness(&net, w, tol) {
                Ok((next, report)) => {
                    println!("applied {:?}: hidden {} -> {}", report.kind, net.layout_hidden.total_dim(), next.layout_hidden.total_dim());
                    net = next;
                    steps.push(report);
                    continue 'outer;
                }
                Err(Error::NotReducible(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        break;
    }
    let residual = verify_equivalence(&original, &net, samples, seed)?;
    let report = ReduceOutput {
        remaining_witnesses: find_reducible(&net, tol),
        hidden_dim_before: original.layout_hidden.total_dim(),
        hidden_dim_after: net.layout_hidden.total_dim(),
        equivalence_residual: residual,
        steps,
        samples,
        seed,
    };
    out.json("reduced_net.json", &net.to_spec(spec.group.clone())?)?;
    out.json("reduction_report.json", &report)?;
    println!(
        "{} reduction(s); hidden {} -> {}; max output deviation {:.2e} over {} inputs",
        report.steps.len(),
        report.hidden_dim_before,
        report.hidden_dim_after,
        residual,
        samples
    );
    if report.steps.is_empty() {
        println!("network is irreducible at tolerance {tol:e}");
    }
    Ok(())
}

fn check(run: &RunOpts) -> Result<(), CliError> {
    let (inst, out) = setup(run, &["check.json"])?;
    let r = run_check(&inst)?;
    let c = &r.conditions;
    println!(
        "fixed subspace: dim {} of {} (hidden block {}, row orbits {:?})",
        c.dim_fixed, c.dim_total, r.hidden_block, r.row_orbits
    );
    println!(
        "restricted critical point: loss {:.3e}, grad {:.1e} after {} steps",
        c.loss, c.grad_norm, r.restricted_steps
    );
    println!("normal gradient component {:.2e}", r.normal_gradient_norm);
    println!("C1 {}  C2 {}", c.c1, c.c2);
    println!(
        "C3 {} (min radial derivative {:.3e} at radius {:.1})",
        c.c3, c.c3_min_radial_derivative, c.c3_radius
    );
    println!("C4 {} (min |eigenvalue| {:.3e})", c.c4, c.c4_min_abs_eigenvalue);
    out.json("check.json", &r)
}

fn kernel_check(
    samples: usize,
    pairs: usize,
    dim: usize,
    seed: u64,
    sigmas: f64,
    out: Option<&std::path::Path>,
    force: bool,
) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct KernelRow {
        activation: Activation,
        pair: usize,
        analytic: f64,
        monte_carlo: f64,
        std_err: f64,
        z: f64,
    }
    if pairs == 0 || dim == 0 {
        return Err(CliError::Usage("--pairs and --dim must be positive".into()));
    }
    let out = out.map(|o| OutDir::prepare(o, &["kernel_check.json"], force)).transpose()?;
    let mut rng = PortableRng::new(seed);
    let list: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs).map(|_| (rng.normal_vec(dim), rng.normal_vec(dim))).collect();
    let mut rows = Vec::new();
    let mut failures = 0;
    for act in [Activation::Relu, Activation::Erf] {
        let mc = kernel_monte_carlo(act, &list, samples, seed.wrapping_add(1))?;
        for (i, ((w, v), est)) in list.iter().zip(&mc).enumerate() {
            let analytic = kernel(act, w, v)?;
            let z = (est.mean - analytic) / est.std_err;
            if z.abs() > sigmas {
                failures += 1;
            }
            rows.push(KernelRow {
                activation: act,
                pair: i,
                analytic,
                monte_carlo: est.mean,
                std_err: est.std_err,
                z,
            });
        }
        let worst = rows
            .iter()
            .filter(|r| r.activation == act)
            .map(|r| r.z.abs())
            .fold(0.0, f64::max);
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        println!(
            "{act:?}: {pairs} pairs, {samples} samples, worst |z| {worst:.2}; unit diagonal value {}",
            fmt_f64(kernel(act, &e, &e)?)
        );
    }
    if let Some(out) = out {
        out.json("kernel_check.json", &rows)?;
    }
    if failures > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failures} kernel values outside {sigmas} standard errors"
        )));
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<[f64; 2], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--init expects two numbers 'a,b', got '{s}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a = parts[0].parse::<f64>().map_err(|_| bad())?;
    let b = parts[1].parse::<f64>().map_err(|_| bad())?;
    if !(a.is_finite() && b.is_finite()) {
        return Err(bad());
    }
    Ok([a, b])
}

fn train(run: &RunOpts, init: Option<String>, all: bool) -> Result<(), CliError> {
    let init = init.as_deref().map(parse_pair).transpose()?;
    let (inst, out) = setup(run, &["train.csv", "train.json"])?;
    let init = match init {
        Some(v) => v,
        None => inst
            .config
            .relax
            .init
            .ok_or_else(|| CliError::Usage("no --init given and relax.init not set".into()))?,
    };
    let scope = if all { TrainScope::All } else { TrainScope::Axes };
    let (traj, summary) = run_train(&inst, init, scope)?;
    let mut w = out.writer("train.csv")?;
    write_relax_csv(&traj.rows, &mut w)?;
    w.flush()?;
    out.json("train.json", &summary)?;
    println!(
        "train from ({:+.4}, {:+.4}): {} steps, loss {:.3e}, grad {:.1e}, converged {}",
        init[0], init[1], summary.steps, summary.final_loss, summary.final_grad_norm, summary.converged
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_path_creates_nested_keys() {
        let mut v = serde_json::json!({"gd": {"learning_rate": 0.1}});
        set_path(&mut v, "gd.max_steps=5").unwrap();
        set_path(&mut v, "relax.init=[1.0,-2.0]").unwrap();
        set_path(&mut v, "activation=erf").unwrap();
        assert_eq!(v["gd"]["max_steps"], 5);
        assert_eq!(v["relax"]["init"][1], -2.0);
        assert_eq!(v["activation"], "erf");
        assert!(set_path(&mut v, "novalue").is_err());
    }

    #[test]
    fn group_names() {
        assert_eq!(parse_group("s4").unwrap(), GroupSpec::Symmetric { n: 4 });
        assert_eq!(parse_group("S3").unwrap(), GroupSpec::Symmetric { n: 3 });
        assert!(parse_group("dihedral").is_err());
    }

    #[test]
    fn init_pairs() {
        assert_eq!(parse_pair("0,-2.4").unwrap(), [0.0, -2.4]);
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("1,x").is_err());
        assert!(parse_pair("1,inf").is_err());
    }

    #[test]
    fn flags_override_config() {
        let run = RunOpts {
            seed: Some(7),
            grid: Some(5),
            lr: Some(0.05),
            mode: Some("raw".into()),
            activation: Some("erf".into()),
            set: vec!["relax.kick=0.01".into()],
            ..Default::default()
        };
        let cfg = effective_config(&run).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.resolution, [5, 5]);
        assert_eq!(cfg.gd.learning_rate, 0.05);
        assert_eq!(cfg.mode, BasisMode::Raw);
        assert_eq!(cfg.activation, Activation::Erf);
        assert_eq!(cfg.relax.kick, 0.01);
    }
}
