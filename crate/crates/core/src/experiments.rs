//! Monte Carlo strong-error estimation on coupled paths, log-log order
//! fitting, and moment sweeps.
//!
//! Every sample index owns its Brownian stream, so per-sample work is a pure
//! function of the index. Results are gathered into index-ordered storage
//! (or fixed-size chunks of consecutive indices) and reduced in index order,
//! which makes every report bitwise independent of the worker count.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{sample_path, BrownianPath, PathGrid};
use crate::model::SdeSystem;
use crate::scheme::{integrate, Scheme, Stepper};
use crate::truncation::{AdmissiblePolicy, TruncationContext};
use crate::{Error, Result};

/// 97.5% standard normal quantile.
const Z_975: f64 = 1.959_963_984_540_054;

/// Samples per reduction chunk in the moment sweeps.
const CHUNK: usize = 64;

/// Runs `f` on a pool with `workers` threads (0: rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::usage(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// What the coarse solutions are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Truncated Milstein at the reference step.
    TruncatedMilstein,
    /// The model's closed-form solution at `B(T)` of the shared path.
    Exact,
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub system: SdeSystem,
    pub schemes: Vec<Scheme>,
    pub policy: AdmissiblePolicy,
    pub t_end: f64,
    /// Reference step is `2^-reference_exponent`.
    pub reference_exponent: u32,
    pub coarse_exponents: Vec<u32>,
    pub samples: usize,
    pub seed: u64,
    /// Error is `(E|x(T) - Y_N|^q)^{1/q}`; 1 gives the L1 error.
    pub error_power: f64,
    pub reference: Reference,
    /// `(p, q)` for the rate-condition guard on power-family policies.
    pub rate_condition: Option<(f64, f64)>,
}

impl ExperimentSpec {
    /// Defaults: L1 error, truncated Milstein reference, no rate-condition pair.
    pub fn new(
        system: SdeSystem,
        schemes: Vec<Scheme>,
        policy: AdmissiblePolicy,
        t_end: f64,
        reference_exponent: u32,
        coarse_exponents: Vec<u32>,
        samples: usize,
        seed: u64,
    ) -> Self {
        ExperimentSpec {
            system,
            schemes,
            policy,
            t_end,
            reference_exponent,
            coarse_exponents,
            samples,
            seed,
            error_power: 1.0,
            reference: Reference::TruncatedMilstein,
            rate_condition: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::usage("at least two samples are required"));
        }
        if self.schemes.is_empty() || self.coarse_exponents.is_empty() {
            return Err(Error::usage("need at least one scheme and one coarse step"));
        }
        if let Some(k) = self.coarse_exponents.iter().find(|&&k| k > self.reference_exponent) {
            return Err(Error::usage(format!(
                "coarse exponent {k} is finer than the reference exponent {}",
                self.reference_exponent
            )));
        }
        let mut seen = self.coarse_exponents.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.coarse_exponents.len() {
            return Err(Error::usage("coarse exponents must be distinct"));
        }
        if !(self.error_power >= 1.0) {
            return Err(Error::usage("error power must be at least 1"));
        }
        if self.reference == Reference::Exact && !self.system.has_exact_solution() {
            return Err(Error::usage(format!(
                "model '{}' has no closed-form solution",
                self.system.label()
            )));
        }
        PathGrid::dyadic(self.t_end, self.reference_exponent)?;
        for &k in &self.coarse_exponents {
            let g = PathGrid::dyadic(self.t_end, k)?;
            if g.step() > self.policy.delta_star() {
                return Err(Error::usage(format!(
                    "step 2^-{k} exceeds delta* = {}",
                    self.policy.delta_star()
                )));
            }
        }
        Ok(())
    }

    /// Checks the rate condition for power-family policies; returns warnings.
    pub fn rate_condition_warnings(&self) -> Result<Vec<String>> {
        let Some(family) = self.policy.family() else {
            return Ok(vec!["policy is not a power family; rate condition not checked".into()]);
        };
        match self.rate_condition {
            None => Ok(vec![format!(
                "no (p, q) given for the rate condition; at p = 1 it needs q >= {:.3}",
                family.min_q(1.0)
            )]),
            Some((p, q)) if family.rate_condition_holds(p, q) => Ok(Vec::new()),
            Some((p, q)) => Err(Error::usage(format!(
                "rate condition (2ap/(q-p) + 1) eps >= ap/(q-p) fails for p = {p}, q = {q}; need q >= {:.3}",
                family.min_q(p)
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% normal half-width on the slope.
    pub half_width: f64,
    pub points: usize,
}

/// Least squares of `log2(error)` on `log2(delta)`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 3 {
        return Err(Error::usage(format!("order fit needs at least 3 points, got {}", points.len())));
    }
    if let Some(&(d, e)) = points.iter().find(|&&(d, e)| !(d > 0.0 && e > 0.0)) {
        return Err(Error::usage(format!("order fit needs positive values, got ({d}, {e})")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("order fit needs distinct step sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let resid_se = (ssr / (n - 2.0)).sqrt();
    Ok(OrderFit {
        slope,
        intercept,
        half_width: Z_975 * resid_se / sxx.sqrt(),
        points: points.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelError {
    pub scheme: Scheme,
    pub exponent: u32,
    pub delta: f64,
    pub error: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Samples dropped because the coarse solution (or its error) was not finite.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeFit {
    pub scheme: Scheme,
    /// `None` when fewer than three positive errors are available.
    pub fit: Option<OrderFit>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub model: String,
    pub reference: Reference,
    pub reference_exponent: u32,
    pub error_power: f64,
    pub samples: usize,
    pub seed: u64,
    pub levels: Vec<LevelError>,
    pub fits: Vec<SchemeFit>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    pub fn fit_for(&self, scheme: Scheme) -> Option<&SchemeFit> {
        self.fits.iter().find(|f| f.scheme == scheme)
    }

    pub fn levels_for(&self, scheme: Scheme) -> impl Iterator<Item = &LevelError> {
        self.levels.iter().filter(move |l| l.scheme == scheme)
    }

    /// `scheme,delta,error,stderr,samples,excluded`
    pub fn write_errors_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "scheme,delta,error,stderr,samples,excluded")?;
        for l in &self.levels {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                l.scheme, l.delta, l.error, l.stderr, l.samples, l.excluded
            )?;
        }
        Ok(())
    }

    /// `scheme,slope,intercept,ci_half_width,points,degenerate`
    pub fn write_slopes_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "scheme,slope,intercept,ci_half_width,points,degenerate")?;
        for f in &self.fits {
            match f.fit {
                Some(fit) => writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    f.scheme, fit.slope, fit.intercept, fit.half_width, fit.points, f.degenerate
                )?,
                None => writeln!(w, "{},,,,0,{}", f.scheme, f.degenerate)?,
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for f in &self.fits {
            let _ = match f.fit {
                Some(fit) => writeln!(
                    s,
                    "{}: slope {:.4} +/- {:.4} over {} steps",
                    f.scheme, fit.slope, fit.half_width, fit.points
                ),
                None => writeln!(s, "{}: no slope (degenerate)", f.scheme),
            };
        }
        s
    }
}

/// Per-sample outcome: `|x_ref(T) - Y_N|^q` per (scheme, level), `None` on blow-up.
type SampleErrors = Vec<Option<f64>>;

fn contexts(policy: &AdmissiblePolicy, grids: &[PathGrid]) -> Result<Vec<TruncationContext>> {
    grids.iter().map(|g| TruncationContext::new(policy, g.step())).collect()
}

fn terminal(
    system: &SdeSystem,
    scheme: Scheme,
    path: &BrownianPath,
    ctx: &TruncationContext,
    out: &mut [f64],
) -> Result<bool> {
    let ctx = scheme.is_truncated().then_some(ctx);
    let last = path.grid().steps();
    let blow = integrate(system, scheme, path, ctx, |k, y| {
        if k == last {
            out.copy_from_slice(y);
        }
    })?;
    Ok(blow.is_none())
}

fn error_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc: f64, (x, y)| acc.hypot(x - y))
}

/// Strong error of each scheme at each coarse step against the reference,
/// all solutions on one Brownian path per sample.
pub fn strong_error(spec: &ExperimentSpec, workers: usize) -> Result<ConvergenceReport> {
    spec.validate()?;
    let warnings = spec.rate_condition_warnings()?;
    let system = &spec.system;
    let d = system.state_dim();
    let m = system.noise_dim();
    let ref_grid = PathGrid::dyadic(spec.t_end, spec.reference_exponent)?;
    let ref_ctx = TruncationContext::new(&spec.policy, ref_grid.step())?;

    // finest first, so each level is one more chain of halvings
    let mut order: Vec<usize> = (0..spec.coarse_exponents.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(spec.coarse_exponents[i]));
    let grids: Vec<PathGrid> = spec
        .coarse_exponents
        .iter()
        .map(|&k| PathGrid::dyadic(spec.t_end, k))
        .collect::<Result<_>>()?;
    let ctxs = contexts(&spec.policy, &grids)?;
    let n_schemes = spec.schemes.len();
    let q = spec.error_power;

    let per_sample = |i: usize| -> Result<SampleErrors> {
        let path = sample_path(ref_grid, m, spec.seed, i as u64)?;
        let mut reference = vec![0.0; d];
        match spec.reference {
            Reference::Exact => {
                system.exact_into(spec.t_end, &path.terminal_value(), &mut reference);
            }
            Reference::TruncatedMilstein => {
                let last = ref_grid.steps();
                let blow = integrate(system, Scheme::TruncatedMilstein, &path, Some(&ref_ctx), |k, y| {
                    if k == last {
                        reference.copy_from_slice(y);
                    }
                })?;
                if let Some(step) = blow {
                    return Err(Error::ReferenceBlowUp {
                        sample: i as u64,
                        step,
                    });
                }
            }
        }
        let mut out = vec![None; n_schemes * grids.len()];
        let mut y = vec![0.0; d];
        let mut current = path;
        for &li in &order {
            let factor = current.grid().steps() / grids[li].steps();
            current = current.coarsen(factor)?;
            for (si, &scheme) in spec.schemes.iter().enumerate() {
                if terminal(system, scheme, &current, &ctxs[li], &mut y)? {
                    // a finite state can still overflow the error power
                    let e = error_distance(&reference, &y).powf(q);
                    out[si * grids.len() + li] = e.is_finite().then_some(e);
                }
            }
        }
        Ok(out)
    };

    let results: Vec<SampleErrors> =
        with_workers(workers, || (0..spec.samples).into_par_iter().map(per_sample).collect::<Result<_>>())??;

    let mut levels = Vec::with_capacity(n_schemes * grids.len());
    let mut fits = Vec::with_capacity(n_schemes);
    for (si, &scheme) in spec.schemes.iter().enumerate() {
        let mut points = Vec::new();
        let mut degenerate = false;
        for (li, grid) in grids.iter().enumerate() {
            let col = si * grids.len() + li;
            let (mut n, mut sum, mut sumsq) = (0usize, 0.0, 0.0);
            for r in &results {
                if let Some(v) = r[col] {
                    n += 1;
                    sum += v;
                    sumsq += v * v;
                }
            }
            let excluded = spec.samples - n;
            let (error, stderr) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = sum / n as f64;
                let var = if n > 1 {
                    ((sumsq - sum * mean) / (n as f64 - 1.0)).max(0.0)
                } else {
                    0.0
                };
                let se_mean = (var / n as f64).sqrt();
                let err = mean.powf(1.0 / q);
                // delta method for the q-th root
                let se = if q == 1.0 {
                    se_mean
                } else if mean > 0.0 {
                    se_mean * err / (q * mean)
                } else {
                    0.0
                };
                (err, se)
            };
            if error > 0.0 {
                points.push((grid.step(), error));
            } else {
                degenerate = true;
            }
            levels.push(LevelError {
                scheme,
                exponent: spec.coarse_exponents[li],
                delta: grid.step(),
                error,
                stderr,
                samples: n,
                excluded,
            });
        }
        let fit = if degenerate || points.len() < 3 {
            None
        } else {
            Some(fit_order(&points)?)
        };
        fits.push(SchemeFit {
            scheme,
            degenerate: degenerate || fit.is_none(),
            fit,
        });
    }

    Ok(ConvergenceReport {
        model: system.label().to_string(),
        reference: spec.reference,
        reference_exponent: spec.reference_exponent,
        error_power: q,
        samples: spec.samples,
        seed: spec.seed,
        levels,
        fits,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub exponent: u32,
    pub delta: f64,
    pub p: f64,
    /// `max_k` of the sample mean of `|Y_k|^{2p}`.
    pub sup_moment: f64,
    pub sup_time: f64,
    pub terminal_moment: f64,
    pub terminal_stderr: f64,
    pub samples: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    pub scheme: Scheme,
    pub rows: Vec<MomentRow>,
    /// Per `p`: least-squares slope of `sup_moment` against `log2(delta)`.
    /// Negative values mean the moments grow as the step shrinks.
    pub trends: Vec<(f64, f64)>,
}

impl MomentTable {
    pub fn max_sup_moment(&self) -> f64 {
        self.rows.iter().map(|r| r.sup_moment).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `scheme,delta,p,sup_moment,sup_time,terminal_moment,terminal_stderr,samples,excluded`
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "scheme,delta,p,sup_moment,sup_time,terminal_moment,terminal_stderr,samples,excluded"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                self.scheme,
                r.delta,
                r.p,
                r.sup_moment,
                r.sup_time,
                r.terminal_moment,
                r.terminal_stderr,
                r.samples,
                r.excluded
            )?;
        }
        Ok(())
    }

    /// `scheme,p,trend_slope`
    pub fn write_trend_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "scheme,p,trend_slope")?;
        for (p, s) in &self.trends {
            writeln!(w, "{},{},{}", self.scheme, p, s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MomentSweep {
    pub system: SdeSystem,
    pub scheme: Scheme,
    pub policy: AdmissiblePolicy,
    pub t_end: f64,
    pub p_list: Vec<f64>,
    pub exponents: Vec<u32>,
    pub samples: usize,
    pub seed: u64,
}

/// Per-chunk sums of `|Y_k|^{2p}` (and of squares at `T`), per level and `p`.
struct MomentChunk {
    /// `sums[level][pi][k]`
    sums: Vec<Vec<Vec<f64>>>,
    term_sq: Vec<Vec<f64>>,
    included: Vec<usize>,
}

/// Empirical `sup_t E|Y(t)|^{2p}` for each step and `p`. Levels share one
/// path per sample (coarsened from the finest level).
pub fn moment_sweep(sweep: &MomentSweep, workers: usize) -> Result<MomentTable> {
    if sweep.samples < 100 {
        return Err(Error::usage("moment sweep needs at least 100 samples"));
    }
    if sweep.exponents.is_empty() || sweep.p_list.is_empty() {
        return Err(Error::usage("moment sweep needs at least one step and one p"));
    }
    if sweep.p_list.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::usage("moment orders must be positive"));
    }
    let system = &sweep.system;
    let m = system.noise_dim();
    let grids: Vec<PathGrid> = sweep
        .exponents
        .iter()
        .map(|&k| PathGrid::dyadic(sweep.t_end, k))
        .collect::<Result<_>>()?;
    for g in &grids {
        if g.step() > sweep.policy.delta_star() {
            return Err(Error::usage(format!("step {} exceeds delta*", g.step())));
        }
    }
    let ctxs = contexts(&sweep.policy, &grids)?;
    let finest = *sweep.exponents.iter().max().unwrap();
    let fine_grid = PathGrid::dyadic(sweep.t_end, finest)?;
    let mut order: Vec<usize> = (0..grids.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sweep.exponents[i]));
    let np = sweep.p_list.len();

    let chunk = |c: usize| -> Result<MomentChunk> {
        let mut acc = MomentChunk {
            sums: grids.iter().map(|g| vec![vec![0.0; g.steps() + 1]; np]).collect(),
            term_sq: vec![vec![0.0; np]; grids.len()],
            included: vec![0; grids.len()],
        };
        let mut scratch: Vec<Vec<f64>> = vec![Vec::new(); np];
        for i in (c * CHUNK)..((c + 1) * CHUNK).min(sweep.samples) {
            let mut path = sample_path(fine_grid, m, sweep.seed, i as u64)?;
            for &li in &order {
                path = path.coarsen(path.grid().steps() / grids[li].steps())?;
                let ctx = sweep.scheme.is_truncated().then_some(&ctxs[li]);
                for s in scratch.iter_mut() {
                    s.clear();
                }
                let blow = integrate(system, sweep.scheme, &path, ctx, |_, y| {
                    let r2 = y.iter().map(|v| v * v).sum::<f64>();
                    for (pi, &p) in sweep.p_list.iter().enumerate() {
                        scratch[pi].push(r2.powf(p));
                    }
                })?;
                if blow.is_some() {
                    continue;
                }
                acc.included[li] += 1;
                for pi in 0..np {
                    for (a, v) in acc.sums[li][pi].iter_mut().zip(&scratch[pi]) {
                        *a += v;
                    }
                    let last = *scratch[pi].last().unwrap();
                    acc.term_sq[li][pi] += last * last;
                }
            }
        }
        Ok(acc)
    };

    let n_chunks = sweep.samples.div_ceil(CHUNK);
    let chunks: Vec<MomentChunk> =
        with_workers(workers, || (0..n_chunks).into_par_iter().map(chunk).collect::<Result<_>>())??;

    let mut rows = Vec::new();
    for (li, grid) in grids.iter().enumerate() {
        let n: usize = chunks.iter().map(|c| c.included[li]).sum();
        for (pi, &p) in sweep.p_list.iter().enumerate() {
            let mut sums = vec![0.0; grid.steps() + 1];
            let mut sq = 0.0;
            for c in &chunks {
                for (a, v) in sums.iter_mut().zip(&c.sums[li][pi]) {
                    *a += v;
                }
                sq += c.term_sq[li][pi];
            }
            let nf = n as f64;
            let (mut best, mut best_k) = (f64::NEG_INFINITY, 0);
            for (k, s) in sums.iter().enumerate() {
                if s / nf > best {
                    best = s / nf;
                    best_k = k;
                }
            }
            let term = sums[grid.steps()] / nf;
            let var = if n > 1 { ((sq - nf * term * term) / (nf - 1.0)).max(0.0) } else { 0.0 };
            rows.push(MomentRow {
                exponent: sweep.exponents[li],
                delta: grid.step(),
                p,
                sup_moment: if n == 0 { f64::NAN } else { best },
                sup_time: grid.time(best_k),
                terminal_moment: term,
                terminal_stderr: (var / nf).sqrt(),
                samples: n,
                excluded: sweep.samples - n,
            });
        }
    }

    let trends = sweep
        .p_list
        .iter()
        .map(|&p| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.p == p)
                .map(|r| (r.delta.log2(), r.sup_moment))
                .collect();
            (p, linear_slope(&pts))
        })
        .collect();

    Ok(MomentTable {
        scheme: sweep.scheme,
        rows,
        trends,
    })
}

fn linear_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosenessRow {
    pub exponent: u32,
    pub delta: f64,
    /// Mean over samples and steps of `|Y(t_k + delta/2) - Y_k|^2`.
    pub mean_sq: f64,
    pub stderr: f64,
}

/// Mid-step distance between the continuous truncated Milstein interpolant
/// and the frozen iterate. Each level uses a path at half its step; the
/// iterates run on the pairwise-coarsened path and the first half-increment
/// of each pair drives the interpolant.
pub fn midstep_closeness(
    system: &SdeSystem,
    policy: &AdmissiblePolicy,
    t_end: f64,
    exponents: &[u32],
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<ClosenessRow>> {
    if samples < 2 || exponents.is_empty() {
        return Err(Error::usage("closeness needs at least two samples and one step"));
    }
    let d = system.state_dim();
    let m = system.noise_dim();
    let mut rows = Vec::with_capacity(exponents.len());
    for &k in exponents {
        let half_grid = PathGrid::dyadic(t_end, k + 1)?;
        let grid = PathGrid::dyadic(t_end, k)?;
        let ctx = TruncationContext::new(policy, grid.step())?;
        let per_sample = |i: usize| -> Result<f64> {
            let half = sample_path(half_grid, m, seed, i as u64)?;
            let full = half.coarsen(2)?;
            let mut stepper = Stepper::new(system, Scheme::TruncatedMilstein, Some(&ctx))?;
            let mut y = system.initial_state().to_vec();
            let mut mid = vec![0.0; d];
            let mut next = vec![0.0; d];
            let mut acc = 0.0;
            for step in 0..grid.steps() {
                stepper.advance(&y, half.increment(2 * step), 0.5 * grid.step(), &mut mid);
                acc += error_distance(&mid, &y).powi(2);
                stepper.advance(&y, full.increment(step), grid.step(), &mut next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericDomain {
                        what: format!("truncated Milstein iterate (sample {i}, step {})", step + 1),
                        coord: next.iter().position(|v| !v.is_finite()).unwrap(),
                    });
                }
                std::mem::swap(&mut y, &mut next);
            }
            Ok(acc / grid.steps() as f64)
        };
        let vals: Vec<f64> =
            with_workers(workers, || (0..samples).into_par_iter().map(per_sample).collect::<Result<_>>())??;
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(ClosenessRow {
            exponent: k,
            delta: grid.step(),
            mean_sq: mean,
            stderr: (var / n).sqrt(),
        });
    }
    Ok(rows)
}
