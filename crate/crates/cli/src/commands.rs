use std::f64::consts::PI;

use serde::Serialize;
use serde_json::json;

use vacfill_core::certificate::{certify, Calibration, Constants};
use vacfill_core::characteristics::{classify_boundary, phase_class, rebound_sequence, DEFAULT_MAX_REBOUNDS};
use vacfill_core::collision_oracle::{
    fit_grazing_constants, fit_loss_constant, probe_nodes, spreading_constant, GridFunction, McConfig,
    SpreadingOptions, VelocityGrid,
};
use vacfill_core::grazing::{grazing_constants, grazing_trials, GrazingOptions, TrialConfig};
use vacfill_core::kernel::Kernel;
use vacfill_core::kinetic_sim::{
    homogeneous_solve, inhomogeneous_solve, maxwellian, LowerBound, SimConfig, Trajectory,
};
use vacfill_core::transport::{l2_report, InitialData, PhaseFunction, QuadratureSpec};
use vacfill_core::vector::{dot, ZERO};
use vacfill_core::Domain;

use crate::config::{require, vec3, Lemma, RunConfig, SimMode};
use crate::output::{num, Outputs, Provenance};
use crate::{compute, CliError, Command};

const DEFAULT_SEED: u64 = 0x5eed;

pub fn dispatch(cmd: Command, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    match cmd {
        Command::Trace => trace(cfg, out),
        Command::Classify => classify(cfg, out),
        Command::Transport => transport(cfg, out),
        Command::LemmaCheck => lemma_check(cfg, out),
        Command::Certificate => certificate(cfg, out),
        Command::Grazing => grazing(cfg, out),
        Command::Simulate => simulate(cfg, out),
    }
}

fn domain(cfg: &RunConfig) -> Result<Domain, CliError> {
    require(&cfg.domain, "domain")?.build()
}

fn kernel(cfg: &RunConfig, default_dim: usize) -> Result<Kernel, CliError> {
    require(&cfg.kernel, "kernel")?.build(default_dim)
}

/// `[calibration]` entries take precedence over the calibration file.
fn calibration(cfg: &RunConfig) -> Result<Calibration, CliError> {
    let mut cal = match &cfg.calibration_file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("calibration_file {p}: {e}")))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("calibration_file {p}: {e}")))?;
            // a lemma-check artifact carries its calibration in a sub-object
            let inner = v.get("calibration").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::Config(format!("calibration_file {p}: {e}")))?
        }
        None => Calibration::default(),
    };
    if let Some(c) = &cfg.calibration {
        macro_rules! merge {
            ($($f:ident),*) => { $( if c.$f.is_some() { cal.$f = c.$f; } )* };
        }
        merge!(cst_q, cst_l, cst_s, cst_q1, c_e, c_tilde_f, cst_log);
    }
    Ok(cal)
}

fn provenance(cal: &Calibration) -> Result<Provenance, CliError> {
    let c = Constants::from_calibration(cal).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Provenance { calibrated: c.calibrated, defaulted: c.defaulted })
}

fn coords(v: &[f64; 3], d: usize) -> Vec<String> {
    v[..d].iter().map(|x| num(*x)).collect()
}

fn trace(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dom = domain(cfg)?;
    let t = require(&cfg.trace, "trace")?;
    let d = dom.dim();
    let (x, v) = (vec3(&t.x, d, "trace.x")?, vec3(&t.v, d, "trace.v")?);
    if !dom.in_closure(&x) {
        return Err(CliError::Config("`trace.x` lies outside the domain".into()));
    }
    if !(t.horizon >= 0.0 && t.horizon.is_finite()) {
        return Err(CliError::Config(format!("`trace.horizon` must be finite and nonnegative, got {}", t.horizon)));
    }
    let seq =
        rebound_sequence(&dom, &x, &v, t.horizon, t.max_rebounds.unwrap_or(DEFAULT_MAX_REBOUNDS)).map_err(compute)?;
    let mut header = vec!["k".to_string(), "t_k".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("v{i}")));
    header.push("class".into());
    let mut rows = Vec::new();
    for k in 0..=seq.events.len() {
        let (tk, xk, vk) = seq.state(k);
        let class = phase_class(&dom, &xk, &vk).map_err(compute)?.map_or("interior", |c| c.as_str());
        let mut row = vec![k.to_string(), num(tk)];
        row.extend(coords(&xk, d));
        row.extend(coords(&vk, d));
        row.push(class.into());
        rows.push(row);
    }
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let p = out.csv("trace.csv", &h, &rows)?;
    println!("{} rebounds up to t = {} ({:?}); wrote {}", seq.events.len(), t.horizon, seq.termination, p.display());
    Ok(())
}

fn classify(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dom = domain(cfg)?;
    let c = cfg.classify.clone().unwrap_or_default();
    let d = dom.dim();
    let mut pairs = Vec::new();
    for (i, p) in c.pairs.iter().enumerate() {
        pairs.push((
            vec3(&p.x, d, &format!("classify.pairs[{i}].x"))?,
            vec3(&p.v, d, &format!("classify.pairs[{i}].v"))?,
        ));
    }
    if c.boundary_samples > 0 {
        if d != 2 || dom.is_torus() {
            return Err(CliError::Config("`classify.boundary_samples` needs a planar bounded domain".into()));
        }
        let dirs = c.directions.max(1);
        for i in 0..c.boundary_samples {
            let (x, _) = dom.boundary_point(2.0 * PI * i as f64 / c.boundary_samples as f64);
            for j in 0..dirs {
                let a = 2.0 * PI * j as f64 / dirs as f64;
                pairs.push((x, [a.cos(), a.sin(), 0.0]));
            }
        }
    }
    if pairs.is_empty() {
        return Err(CliError::Config("`classify` needs `pairs` or `boundary_samples`".into()));
    }
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..d).map(|i| format!("v{i}")));
    header.push("class".into());
    let mut rows = Vec::new();
    let mut counts = std::collections::BTreeMap::new();
    for (x, v) in &pairs {
        let class = classify_boundary(&dom, x, v).map_err(compute)?.as_str();
        *counts.entry(class).or_insert(0usize) += 1;
        let mut row = coords(x, d);
        row.extend(coords(v, d));
        row.push(class.into());
        rows.push(row);
    }
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let p = out.csv("classify.csv", &h, &rows)?;
    println!("{counts:?}; wrote {}", p.display());
    Ok(())
}

fn transport(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dom = domain(cfg)?;
    let t = require(&cfg.transport, "transport")?;
    let u0 = t.u0.build(dom.dim())?;
    if t.times.is_empty() || t.times.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(CliError::Config("`transport.times` needs finite nonnegative entries".into()));
    }
    let spec = QuadratureSpec { nx: t.nx, nv: t.nv, v_radius: t.v_radius, tolerance: t.tolerance };
    let rep = l2_report(&dom, &u0, &t.times, &spec).map_err(compute)?;
    let n0 = rep.rows[0].1;
    let rows: Vec<Vec<String>> =
        rep.rows.iter().map(|(s, n)| vec![num(*s), num(n.sqrt()), num(((n - n0) / n0).abs())]).collect();
    let p = out.csv("transport.csv", &["t", "l2", "relative_drift_sq"], &rows)?;
    println!("max relative drift of ||u||^2: {:e}; wrote {}", rep.max_relative_drift(), p.display());
    Ok(())
}

#[derive(Serialize)]
struct LemmaResult {
    lemma: String,
    params: serde_json::Value,
    estimate: f64,
    stderr: f64,
    pass: bool,
    details: serde_json::Value,
    calibration: Calibration,
}

fn lemma_check(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let l = require(&cfg.lemma_check, "lemma_check")?;
    let dim = cfg.domain.as_ref().map(|d| d.build().map(|d| d.dim())).transpose()?.unwrap_or(3);
    let k = kernel(cfg, dim)?;
    let d = k.dim();
    let grid = VelocityGrid::new(d, l.grid.extent, l.grid.n)
        .map_err(|e| CliError::Config(format!("lemma_check.grid: {e}")))?;
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    let params = serde_json::to_value(l).map_err(compute)?;
    let samples = l.samples.unwrap_or(100_000);
    let theta = l.theta.unwrap_or(1.0);
    let probes = || probe_nodes(&grid, l.stride.unwrap_or(2), l.probe_radius.unwrap_or(0.5 * l.grid.extent));
    let mut cal = Calibration::default();
    let res = match l.lemma {
        Lemma::Spreading => {
            let vbar = match &l.vbar {
                Some(v) => vec3(v, d, "lemma_check.vbar")?,
                None => ZERO,
            };
            let (r, big_r, xi) = (l.r.unwrap_or(1.0), l.big_r.unwrap_or(1.0), l.xi.unwrap_or(0.25));
            let mut opts = SpreadingOptions::default();
            opts.mc = McConfig { samples: l.samples.unwrap_or(opts.mc.samples), seed };
            if let Some(t) = l.target_relative_stderr {
                opts.target_relative_stderr = t;
            }
            let rep = spreading_constant(&k, &vbar, r, big_r, xi, &grid, opts).map_err(compute)?;
            cal.cst_q = (rep.constant > 0.0).then_some(rep.constant);
            LemmaResult {
                lemma: "spreading".into(),
                params,
                estimate: rep.constant,
                stderr: rep.stderr,
                pass: rep.constant > 0.0,
                details: serde_json::to_value(&rep).map_err(compute)?,
                calibration: cal,
            }
        }
        Lemma::Loss => {
            let g = GridFunction::from_fn(grid, |v| maxwellian(1.0, theta, d, v));
            let fit = fit_loss_constant(&k, &g, &probes()).map_err(compute)?;
            let ok = fit.constant > 0.0 && fit.constant.is_finite();
            cal.cst_l = ok.then_some(fit.constant);
            LemmaResult {
                lemma: "loss".into(),
                params,
                estimate: fit.constant,
                stderr: fit.stderr,
                pass: ok,
                details: serde_json::to_value(&fit).map_err(compute)?,
                calibration: cal,
            }
        }
        Lemma::GrazingOperators => {
            let eps = l.eps.unwrap_or(0.1);
            let g = GridFunction::from_fn(grid, |v| maxwellian(1.0, theta, d, v));
            let h = GridFunction::from_fn(grid, |v| (-dot(v, v)).exp());
            let (s, q) =
                fit_grazing_constants(&k, eps, &g, &h, &probes(), McConfig { samples, seed }).map_err(compute)?;
            let ok = [s.constant, q.constant].iter().all(|c| *c > 0.0 && c.is_finite());
            if ok {
                cal.cst_s = Some(s.constant);
                cal.cst_q1 = Some(q.constant);
            }
            LemmaResult {
                lemma: "grazing_operators".into(),
                params,
                estimate: s.constant.max(q.constant),
                stderr: s.stderr.max(q.stderr),
                pass: ok,
                details: json!({ "s": s, "q1": q }),
                calibration: cal,
            }
        }
    };
    let prov = provenance(&calibration(cfg)?)?;
    let p = out.json("lemma_check.json", &prov, &res)?;
    println!(
        "{}: estimate {:e} (se {:e}), pass = {}; wrote {}",
        res.lemma,
        res.estimate,
        res.stderr,
        res.pass,
        p.display()
    );
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn certificate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dom = domain(cfg)?;
    let k = kernel(cfg, dom.dim())?;
    if k.dim() != dom.dim() {
        return Err(CliError::Config(format!("kernel dimension {} differs from the domain's {}", k.dim(), dom.dim())));
    }
    let bounds = require(&cfg.bounds, "bounds")?;
    let cal = calibration(cfg)?;
    let prov = provenance(&cal)?;
    let ccfg = cfg.certificate.clone().unwrap_or_default();
    let cert = certify(&dom, &k, bounds, &cal, &ccfg).map_err(|e| match e {
        vacfill_core::certificate::CertificateError::MissingBound(_) => CliError::Config(e.to_string()),
        other => compute(other),
    })?;
    for w in &cert.warnings {
        eprintln!("warning: {w}");
    }
    let rows: Vec<Vec<String>> = cert
        .audit
        .iter()
        .map(|r| {
            vec![
                r.stage.clone(),
                r.n.to_string(),
                num(r.r),
                num(r.log_a.exp()),
                num(r.log_a),
                opt(r.log_eps.map(f64::exp)),
                opt(r.log_eps),
                opt(r.log_step),
            ]
        })
        .collect();
    out.csv(
        "certificate_audit.csv",
        &["stage", "n", "r_n", "a_n", "log_a_n", "eps_n", "log_eps_n", "log_step"],
        &rows,
    )?;
    let p = out.json("certificate.json", &prov, &cert)?;
    match (cert.theta, cert.c2) {
        (Some(theta), _) => println!(
            "Maxwellian bound: ln rho = {:e}, theta = {:e}; wrote {}",
            cert.log_rho.unwrap_or(f64::NAN),
            theta,
            p.display()
        ),
        (None, Some(c2)) => println!(
            "exponential bound: ln C1 = {:e}, C2 = {:e}, K = {}; wrote {}",
            cert.log_c1.unwrap_or(f64::NAN),
            c2,
            cert.k,
            p.display()
        ),
        _ => println!("wrote {}", p.display()),
    }
    Ok(())
}

fn grazing(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dom = domain(cfg)?;
    if dom.is_torus() {
        return Err(CliError::Config("`grazing` needs a bounded domain".into()));
    }
    let g = require(&cfg.grazing, "grazing")?;
    if g.eps.is_empty() {
        return Err(CliError::Config("`grazing.eps` is empty".into()));
    }
    let mut opts = GrazingOptions::for_dim(dom.dim());
    if let Some(n) = g.boundary_samples {
        opts.boundary_samples = n;
    }
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (i, &eps) in g.eps.iter().enumerate() {
        let c =
            grazing_constants(&dom, eps, g.v_min, g.v_max, g.tau2.unwrap_or(f64::INFINITY), &opts).map_err(compute)?;
        for r in &c.table {
            rows.push(vec![num(eps), r.p.to_string(), num(r.sup_h)]);
        }
        let trials = if g.trials > 0 {
            let tc = TrialConfig {
                trials: g.trials,
                seed: vacfill_core::collision_oracle::derive_seed(seed, i as u64),
                ..Default::default()
            };
            Some(grazing_trials(&dom, &c, &tc).map_err(compute)?)
        } else {
            None
        };
        if let Some(t) = &trials {
            println!(
                "eps = {eps}: p = {}, l = {:e}, {} of {} trials met the hypothesis, {} counterexamples",
                c.p_eps, c.l_eps, t.hypothesis_held, t.trials, t.counterexamples
            );
        } else {
            println!("eps = {eps}: p = {}, alpha_X = {:e}, t = {:e}, l = {:e}", c.p_eps, c.alpha_x, c.t_eps, c.l_eps);
        }
        runs.push(json!({ "constants": c, "trials": trials }));
    }
    out.csv("grazing_table.csv", &["eps", "p", "sup_h"], &rows)?;
    let prov = provenance(&calibration(cfg)?)?;
    out.json("grazing.json", &prov, &json!({ "runs": runs }))?;
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = require(&cfg.simulate, "simulate")?;
    let k = kernel(cfg, 2)?;
    let grid = VelocityGrid::new(2, s.velocity.extent, s.velocity.n)
        .map_err(|e| CliError::Config(format!("simulate.velocity: {e}")))?;
    let u0 = s.f0.build(2)?;
    let sim = SimConfig {
        t_end: s.t_end,
        dt: s.dt,
        n_sigma: s.n_sigma.unwrap_or(16),
        collisions: true,
        conservative: s.conservative,
        snapshot_every: s.snapshot_every,
        bound: s.bound.map(|b| LowerBound { log_rho: b.log_rho, theta: b.theta }),
        watch: match &s.vacuum {
            Some(b) => Some((vec3(&b.center, 2, "simulate.vacuum.center")?, b.radius)),
            None => None,
        },
    };
    let run: Trajectory = match s.mode {
        SimMode::Homogeneous => {
            let x0 = match &u0 {
                InitialData::Gaussian { x0, .. }
                | InitialData::Indicator { x0, .. }
                | InitialData::Polynomial { x0, .. } => *x0,
            };
            let f0 = GridFunction::from_fn(grid, |v| u0.eval(&x0, v));
            homogeneous_solve(&k, &f0, &sim).map_err(compute)?
        }
        SimMode::Inhomogeneous => {
            let dom = domain(cfg)?;
            inhomogeneous_solve(&dom, &k, &u0, s.space_n.unwrap_or(16), grid, &sim).map_err(compute)?
        }
    };
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let rows: Vec<Vec<String>> = run
        .steps
        .iter()
        .map(|d| {
            vec![
                num(d.t),
                num(d.mass),
                num(d.energy),
                num(d.min_f),
                opt(d.log_lb_ratio.map(f64::exp)),
                opt(d.log_lb_ratio),
                opt(d.min_watch),
                d.clipped.to_string(),
            ]
        })
        .collect();
    out.csv(
        "simulate.csv",
        &["t", "mass", "energy", "min_f", "lb_ratio", "log_lb_ratio", "min_vacuum", "clipped"],
        &rows,
    )?;
    for (i, snap) in run.snapshots.iter().enumerate() {
        let mut buf = Vec::new();
        snap.write_snapshot(&mut buf).map_err(compute)?;
        out.bytes("snapshots", &format!("step_{:05}.bin", (i + 1) * s.snapshot_every), &buf)?;
    }
    let summary = json!({
        "mode": s.mode,
        "steps": run.steps.len() - 1,
        "t": run.state.t,
        "mass_drift": run.mass_drift(),
        "energy_drift": run.energy_drift(),
        "clip_events": run.clip_events(),
        "min_f": run.state.min_value(),
        "min_vacuum": run.steps.last().and_then(|d| d.min_watch),
        "log_lb_ratio": run.steps.last().and_then(|d| d.log_lb_ratio),
        "snapshots": run.snapshots.len(),
        "warnings": run.warnings,
    });
    let prov = provenance(&calibration(cfg)?)?;
    let p = out.json("simulate.json", &prov, &summary)?;
    println!(
        "t = {}: mass drift {:e}, min f {:e}; wrote {}",
        run.state.t,
        run.mass_drift(),
        run.state.min_value(),
        p.display()
    );
    Ok(())
}
