//! `converge`, `variance` and `pde` experiments.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde_json::{json, Map, Value};
use weakboost::cir::CirScheme;
use weakboost::engine::{regress_slope, Estimate, Row, Welford};
use weakboost::grids::*;
use weakboost::heston::{HestonScheme, LogHestonState};
use weakboost::hybrid::hybrid_put;
use weakboost::multifactor::{MfParams, MfScheme, MfState};
use weakboost::reference::*;

use crate::config::{ExperimentConfig, Model, Payoff};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<u64>,
    pub epsilon: Option<f64>,
    pub out: PathBuf,
    /// Fill the `wallclock_s` CSV column. Off by default so reruns give identical bytes.
    pub timings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Samples(u64),
    HalfWidth(f64),
}

pub fn resolve_budget(cfg: &ExperimentConfig, ov: &Overrides) -> anyhow::Result<Budget> {
    let pick = |samples: Option<u64>, eps: Option<f64>| match (samples, eps) {
        (Some(_), Some(_)) => Err(anyhow::anyhow!("give either samples or epsilon, not both")),
        (Some(m), None) => Ok(Some(Budget::Samples(m))),
        (None, Some(e)) => Ok(Some(Budget::HalfWidth(e))),
        (None, None) => Ok(None),
    };
    if let Some(e) = ov.epsilon {
        if e <= 0.0 || !e.is_finite() {
            bail!("--epsilon must be positive");
        }
    }
    if ov.samples == Some(0) {
        bail!("--samples must be >= 1");
    }
    match pick(ov.samples, ov.epsilon)? {
        Some(b) => Ok(b),
        None => pick(cfg.samples, cfg.epsilon)?.context("no sample budget: set samples or epsilon"),
    }
}

/// Result of one command, also written as `<experiment>_summary.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub json: Value,
    pub files: Vec<PathBuf>,
}

const PILOT: u64 = 20_000;

fn samples_for(budget: Budget, pilot: impl FnOnce(u64) -> weakboost::Result<Estimate>) -> anyhow::Result<u64> {
    Ok(match budget {
        Budget::Samples(m) => m,
        Budget::HalfWidth(e) => {
            let p = pilot(PILOT)?;
            ((p.variance * (1.96 / e).powi(2)).ceil() as u64).max(2)
        }
    })
}

fn write_rows(path: &Path, rows: &[Row], timings: bool) -> anyhow::Result<()> {
    let rows: Vec<Row> = rows.iter().map(|r| Row { wallclock_s: if timings { r.wallclock_s } else { 0.0 }, ..*r }).collect();
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    weakboost::engine::write_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn finish(cfg: &ExperimentConfig, ov: &Overrides, command: &str, mut json: Value, mut files: Vec<PathBuf>) -> anyhow::Result<Summary> {
    json["experiment"] = json!(cfg.experiment);
    json["command"] = json!(command);
    let path = ov.out.join(format!("{}_summary.json", cfg.experiment));
    std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    files.push(path);
    Ok(Summary { json, files })
}

fn converge_with<S, P>(
    cfg: &ExperimentConfig,
    ov: &Overrides,
    budget: Budget,
    scheme: &S,
    payoff: &P,
    reference: Option<f64>,
) -> anyhow::Result<Summary>
where
    S: GridScheme<f64>,
    P: Fn(&S::State) -> f64 + Sync,
{
    if reference.is_none() && !cfg.self_difference {
        bail!("no reference value for this payoff; set self_difference = true");
    }
    if cfg.levels.iter().any(|&l| l > 1) && !scheme.supports_refinement() {
        bail!("scheme cannot be coupled across refined grids");
    }
    if cfg.n.is_empty() {
        bail!("converge needs a non-empty n list");
    }
    let seed = ov.seed.unwrap_or(cfg.seed);
    let t = cfg.maturity;
    let coupling = cfg.coupling.coupling();
    let o2 = Order2Config { coupling, layout: cfg.layout.layout(), ..Order2Config::default() };
    let (mut values, mut slopes, mut runtimes) = (Map::new(), Map::new(), Map::new());
    let mut files = Vec::new();
    for &level in &cfg.levels {
        let key = format!("nu{level}");
        let (mut rows, mut errs, mut points) = (Vec::new(), Vec::new(), Vec::new());
        for &n in &cfg.n {
            let start = Instant::now();
            let est = if cfg.self_difference {
                let m = samples_for(budget, |m| estimator_self_difference(scheme, payoff, t, n, level, m, coupling, seed ^ 1))?;
                estimator_self_difference(scheme, payoff, t, n, level, m.max(2), coupling, seed)?
            } else {
                match (level, budget) {
                    (2, Budget::HalfWidth(e)) if n > 1 => estimator_order2_target(scheme, payoff, t, n, e, &o2, seed)?.estimate,
                    (2, _) => {
                        let m = samples_for(budget, |m| estimator_order1(scheme, payoff, t, n, m, seed ^ 1))?;
                        estimator_order2(scheme, payoff, t, n, m, &o2, seed)?.estimate
                    }
                    (3, _) => {
                        let m = samples_for(budget, |m| estimator_order3(scheme, payoff, t, n, m, coupling, seed ^ 1))?;
                        estimator_order3(scheme, payoff, t, n, m.max(2), coupling, seed)?
                    }
                    _ => {
                        let m = samples_for(budget, |m| estimator_order1(scheme, payoff, t, n, m, seed ^ 1))?;
                        estimator_order1(scheme, payoff, t, n, m, seed)?
                    }
                }
            };
            let secs = start.elapsed().as_secs_f64();
            let err = match reference {
                Some(r) if !cfg.self_difference => est.value - r,
                _ => est.value,
            };
            println!(
                "nu={level} n={n}: {} {:.8} +- {:.2e} ({} samples, {secs:.1} s)",
                if cfg.self_difference { "P(2n)-P(n)" } else { "error" },
                err,
                est.half_width,
                est.n_samples
            );
            rows.push(Row { n, estimate: est, wallclock_s: secs });
            errs.push((n, err.abs()));
            points.push(json!({
                "n": n, "estimate": est.value, "half_width": est.half_width,
                "samples": est.n_samples, "error": err,
            }));
        }
        let slope = if errs.len() >= 2 {
            match regress_slope(&errs) {
                Ok(fit) => {
                    println!("nu={level}: slope {:.3} ({} points dropped)", fit.slope, fit.dropped);
                    json!(fit.slope)
                }
                Err(e) => {
                    println!("nu={level}: no slope ({e})");
                    Value::Null
                }
            }
        } else {
            Value::Null
        };
        let path = ov.out.join(format!("{}_nu{level}.csv", cfg.experiment));
        write_rows(&path, &rows, ov.timings)?;
        files.push(path);
        values.insert(key.clone(), Value::Array(points));
        slopes.insert(key.clone(), slope);
        runtimes.insert(key, json!(rows.iter().map(|r| r.wallclock_s).collect::<Vec<_>>()));
    }
    let json = json!({
        "reference": reference,
        "self_difference": cfg.self_difference,
        "values": values,
        "slopes": slopes,
        "runtimes": runtimes,
    });
    finish(cfg, ov, "converge", json, files)
}

pub const VARIANCE_HEADER: &str = "n,coupling,variance,variance_half_width,mean,samples,wallclock_s";

fn variance_with<S, P>(cfg: &ExperimentConfig, ov: &Overrides, budget: Budget, scheme: &S, payoff: &P) -> anyhow::Result<Summary>
where
    S: GridScheme<f64>,
    P: Fn(&S::State) -> f64 + Sync,
{
    let Budget::Samples(total) = budget else { bail!("variance needs a sample count, not epsilon") };
    if !scheme.supports_refinement() {
        bail!("scheme cannot be coupled across refined grids");
    }
    if cfg.n.is_empty() {
        bail!("variance needs a non-empty n list");
    }
    let batches = cfg.batches.max(2);
    if total < 2 * batches {
        bail!("need at least {} samples for {batches} batches", 2 * batches);
    }
    let seed = ov.seed.unwrap_or(cfg.seed);
    let path = ov.out.join(format!("{}_variance.csv", cfg.experiment));
    let mut csv = String::from(VARIANCE_HEADER);
    csv.push('\n');
    let (mut values, mut runtimes) = (Map::new(), Map::new());
    for c in cfg.couplings() {
        let (mut points, mut times) = (Vec::new(), Vec::new());
        for &n in &cfg.n {
            let start = Instant::now();
            let mut pooled = Welford::default();
            let mut spread = Welford::default();
            for b in 0..batches {
                let w = correction_variance(scheme, payoff, cfg.maturity, n, total / batches, c.coupling(), seed.wrapping_add(b))?;
                spread.push(w.variance());
                pooled = pooled.merge(w);
            }
            let hw = 1.96 * (spread.variance() / batches as f64).sqrt();
            let secs = start.elapsed().as_secs_f64();
            println!("{} n={n}: V = {:.6e} +- {hw:.2e}", c.label(), pooled.variance());
            csv.push_str(&format!(
                "{n},{},{:.12e},{:.12e},{:.12e},{},{:.6}\n",
                c.label(),
                pooled.variance(),
                hw,
                pooled.mean,
                pooled.n,
                if ov.timings { secs } else { 0.0 }
            ));
            points.push(json!({"n": n, "variance": pooled.variance(), "half_width": hw, "mean": pooled.mean, "samples": pooled.n}));
            times.push(secs);
        }
        values.insert(c.label().into(), Value::Array(points));
        runtimes.insert(c.label().into(), json!(times));
    }
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    let json = json!({"values": values, "slopes": {}, "runtimes": runtimes});
    finish(cfg, ov, "variance", json, vec![path])
}

/// Builds the scheme and payoff named by the config and hands them to `$body`.
macro_rules! with_model {
    ($cfg:expr, |$scheme:ident, $payoff:ident, $reference:ident| $body:expr) => {{
        let cfg: &ExperimentConfig = $cfg;
        let t = cfg.maturity;
        match (cfg.model, cfg.payoff) {
            (Model::Cir, Payoff::Laplace { lambda }) => {
                let p = cfg.cir_params()?;
                let $scheme = CirScheme::new(p, cfg.cir_kind()?)?;
                let $payoff = move |x: &f64| (-lambda * x).exp();
                let $reference = Some(cir_laplace(lambda, t, p.x0, &p));
                $body
            }
            (Model::Heston, Payoff::Put { strike }) => {
                let p = cfg.heston_params()?;
                let $scheme = HestonScheme::new(p, cfg.heston_kind()?, false)?;
                let disc = (-p.r * t).exp();
                let $payoff = move |s: &LogHestonState<f64>| disc * payoff_put(s.x, strike);
                let $reference = Some(heston_put_fourier(&p, &PutSpec::new(strike, t)?)?);
                $body
            }
            (Model::Heston, Payoff::AsianPut { strike }) => {
                let p = cfg.heston_params()?;
                let $scheme = HestonScheme::new(p, cfg.heston_kind()?, true)?;
                let disc = (-p.r * t).exp();
                let $payoff = move |s: &LogHestonState<f64>| disc * payoff_asian_put(s.i, t, strike);
                let $reference: Option<f64> = None;
                $body
            }
            (Model::Multifactor, Payoff::Put { strike }) => {
                let p = cfg.heston_params()?;
                let nodes = cfg.kernel_nodes()?;
                let $scheme = MfScheme::new(MfParams::new(p, nodes.clone())?)?;
                let disc = (-p.r * t).exp();
                let $payoff = move |s: &MfState<f64>| disc * payoff_put(s.x, strike);
                let $reference = Some(multifactor_put_fourier(&p, &nodes, &PutSpec::new(strike, t)?, 2000)?);
                $body
            }
            (m, p) => bail!("payoff {p:?} is not available for model {m:?}"),
        }
    }};
}

fn prepare(cfg: &ExperimentConfig, ov: &Overrides) -> anyhow::Result<Budget> {
    cfg.validate()?;
    let budget = resolve_budget(cfg, ov)?;
    std::fs::create_dir_all(&ov.out).with_context(|| format!("creating {}", ov.out.display()))?;
    Ok(budget)
}

pub fn cmd_converge(cfg: &ExperimentConfig, ov: &Overrides) -> anyhow::Result<Summary> {
    let budget = prepare(cfg, ov)?;
    with_model!(cfg, |scheme, payoff, reference| converge_with(cfg, ov, budget, &scheme, &payoff, reference))
}

pub fn cmd_variance(cfg: &ExperimentConfig, ov: &Overrides) -> anyhow::Result<Summary> {
    let budget = prepare(cfg, ov)?;
    with_model!(cfg, |scheme, payoff, _reference| variance_with(cfg, ov, budget, &scheme, &payoff))
}

pub fn cmd_pde(cfg: &ExperimentConfig, ov: &Overrides) -> anyhow::Result<Summary> {
    cfg.validate()?;
    let (Model::Heston, Payoff::Put { strike }) = (cfg.model, cfg.payoff) else {
        bail!("pde prices European puts in the heston model");
    };
    let Some(pde) = cfg.pde else { bail!("pde needs a [pde] section") };
    let p = cfg.heston_params()?;
    std::fs::create_dir_all(&ov.out).with_context(|| format!("creating {}", ov.out.display()))?;
    let start = Instant::now();
    let price = hybrid_put(&p, strike, cfg.maturity, pde.steps, pde.dx, pde.width_sd)?;
    let secs = start.elapsed().as_secs_f64();
    let fourier = heston_put_fourier(&p, &PutSpec::new(strike, cfg.maturity)?)?;
    let rel = (price.price - fourier) / fourier;
    println!("hybrid {:.8}, Fourier {fourier:.8}, relative error {:+.3e} ({secs:.2} s)", price.price, rel);
    let path = ov.out.join(format!("{}_pde.csv", cfg.experiment));
    let mut csv = String::from("x,price\n");
    for (x, v) in price.grid.points().iter().zip(&price.surface) {
        csv.push_str(&format!("{x:.12e},{v:.12e}\n"));
    }
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    let json = json!({
        "values": {"price": price.price, "fourier": fourier, "relative_error": rel, "steps": pde.steps, "dx": pde.dx},
        "slopes": {},
        "runtimes": {"pde": secs},
    });
    finish(cfg, ov, "pde", json, vec![path])
}

