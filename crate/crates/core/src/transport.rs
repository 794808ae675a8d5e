//! Transport studies: conductivity scaling with length, Green-Kubo
//! integrals, linear response and the entropy-production rate function.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    default_dt, simulate_replica, InitialCondition, IntegratorSpec, Simulation, SimulationConfig,
    SimulationOutput,
};
use crate::error::{Error, Result};
use crate::harmonic_exact;
use crate::lattice::{remove_total_momentum, sample_gibbs, EndCondition, Lattice, LatticeSpec};
use crate::observables::{
    block_stats, jackknife, plane_fluxes_into, BlockStats, ObservableSeries, DEFAULT_BLOCKS,
};
use crate::pool::parallel_map;
use crate::rng::stream_rng;
use crate::thermostats::{Reservoir, ReservoirSpec};

/// Runs whose planes disagree by more than this many standard errors are
/// treated as non-stationary.
pub const PLANE_DISAGREEMENT_LIMIT: f64 = 5.0;

fn default_replicas() -> usize {
    1
}

fn default_blocks() -> usize {
    DEFAULT_BLOCKS
}

/// Finite-size conductivity `(flux / A) L / (T_L - T_R)`.
pub fn finite_size_kappa(flux: f64, lattice: &LatticeSpec, delta_t: f64) -> f64 {
    flux / lattice.cross_section() as f64 * lattice.length() as f64 / delta_t
}

fn with_length(spec: &LatticeSpec, length: usize) -> LatticeSpec {
    let mut s = spec.clone();
    s.sides[0] = length;
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    /// Template lattice; the length `sides[0]` is replaced per scan point.
    pub lattice: LatticeSpec,
    pub reservoir: ReservoirSpec,
    /// Step counts for the smallest length.
    pub integrator: IntegratorSpec,
    pub lengths: Vec<usize>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Use the exact harmonic solution instead of simulation.
    #[serde(default)]
    pub oracle: bool,
    /// Steps and burn-in grow as `(L / L_min)^exponent`.
    #[serde(default)]
    pub step_scaling_exponent: f64,
    /// Leave the smallest length out of the exponent fit.
    #[serde(default)]
    pub exclude_smallest: bool,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 3 {
            return Err(Error::invalid("study.lengths", "need at least 3 lengths"));
        }
        if self.lengths.iter().any(|&l| l < 2) {
            return Err(Error::invalid(
                "study.lengths",
                "lengths must be at least 2",
            ));
        }
        let (tl, tr) = self
            .reservoir
            .temperatures()
            .ok_or_else(|| Error::invalid("reservoir", "a scan needs two reservoirs"))?;
        let delta = tl - tr;
        let mean = 0.5 * (tl + tr);
        if delta == 0.0 {
            return Err(Error::invalid("reservoir", "T_L and T_R must differ"));
        }
        if delta.abs() / mean > 0.5 {
            return Err(Error::invalid(
                "reservoir",
                format!("dT/T = {} exceeds 0.5", delta.abs() / mean),
            ));
        }
        if self.replicas == 0 {
            return Err(Error::invalid("study.replicas", "must be at least 1"));
        }
        Ok(())
    }

    fn integrator_for(&self, length: usize) -> IntegratorSpec {
        let l_min = *self.lengths.iter().min().unwrap_or(&length) as f64;
        let f = (length as f64 / l_min).powf(self.step_scaling_exponent);
        let mut integ = self.integrator.clone();
        let stride = integ.stride;
        let scale = |n: u64| ((n as f64 * f).round() as u64).div_ceil(stride) * stride;
        integ.steps = scale(integ.steps);
        integ.burn_in = scale(integ.burn_in);
        integ
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaFlux {
    pub replica: u64,
    pub flux: f64,
    pub stderr: f64,
    pub plane_disagreement: f64,
    pub correlated: bool,
    /// Kinetic temperature of each layer.
    pub temperature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub length: usize,
    pub kappa: f64,
    pub stderr: f64,
    pub flux: f64,
    pub flux_stderr: f64,
    /// Layer temperatures averaged over kept replicas.
    pub temperature: Vec<f64>,
    /// Kept replicas.
    pub runs: Vec<ReplicaFlux>,
    pub excluded_runs: Vec<ReplicaFlux>,
    pub failures: Vec<String>,
    /// Row not used in the exponent fit.
    pub excluded: bool,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub alpha: f64,
    pub stderr: f64,
    /// Approximate 95% interval `alpha +- 2 stderr`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub lengths: Vec<usize>,
    /// `jackknife` over replicas, `propagated` from per-length errors, or `exact`.
    pub method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub rows: Vec<ScanRow>,
    pub fit: Option<ExponentFit>,
    pub mode: String,
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Run the NESS simulations (or the oracle) for every length and fit
/// `log kappa_L` against `log L`.
pub fn conductivity_scan(spec: &ScanSpec, jobs: usize) -> Result<ScanResult> {
    spec.validate()?;
    let (tl, tr) = spec.reservoir.temperatures().expect("validated");
    let delta = tl - tr;
    if spec.oracle {
        let mut rows = Vec::new();
        for &l in &spec.lengths {
            let lat = with_length(&spec.lattice, l);
            let obs = harmonic_exact::oracle(&lat, &spec.reservoir)?;
            rows.push(ScanRow {
                length: l,
                kappa: finite_size_kappa(obs.mean_flux, &lat, delta),
                stderr: 0.0,
                flux: obs.mean_flux,
                flux_stderr: 0.0,
                temperature: obs.temperature.clone(),
                runs: Vec::new(),
                excluded_runs: Vec::new(),
                failures: Vec::new(),
                excluded: false,
                flags: Vec::new(),
            });
        }
        if spec.exclude_smallest {
            mark_smallest(&mut rows);
        }
        let used: Vec<&ScanRow> = rows.iter().filter(|r| !r.excluded).collect();
        let x: Vec<f64> = used.iter().map(|r| (r.length as f64).ln()).collect();
        let y: Vec<f64> = used.iter().map(|r| r.kappa.ln()).collect();
        let (alpha, _) = linear_fit(&x, &y);
        let fit = ExponentFit {
            alpha,
            stderr: 0.0,
            ci_low: alpha,
            ci_high: alpha,
            lengths: used.iter().map(|r| r.length).collect(),
            method: "exact".into(),
        };
        return Ok(ScanResult {
            rows,
            fit: Some(fit),
            mode: "oracle".into(),
        });
    }

    let tasks = scan_tasks(spec);
    let outputs = parallel_map(&tasks, jobs, |_, &(l, r)| scan_replica(spec, l, r));
    let results: Vec<_> = tasks
        .into_iter()
        .zip(outputs)
        .map(|(t, o)| (t, o.map_err(|e| e.to_string())))
        .collect();
    Ok(assemble_scan(spec, &results))
}

/// `(length, replica)` pairs of a simulated scan.
pub fn scan_tasks(spec: &ScanSpec) -> Vec<(usize, u64)> {
    spec.lengths
        .iter()
        .flat_map(|&l| (0..spec.replicas as u64).map(move |r| (l, r)))
        .collect()
}

/// One NESS run of a scan.
pub fn scan_replica(spec: &ScanSpec, length: usize, replica: u64) -> Result<ReplicaFlux> {
    let config = SimulationConfig {
        lattice: with_length(&spec.lattice, length),
        reservoir: spec.reservoir.clone(),
        integrator: spec.integrator_for(length),
        initial: spec.initial.clone(),
        blocks: spec.blocks,
    };
    simulate_replica(&config, replica).map(|o| replica_flux(replica, &o))
}

/// Build the scan table and exponent fit from per-run results.
pub fn assemble_scan(
    spec: &ScanSpec,
    results: &[((usize, u64), std::result::Result<ReplicaFlux, String>)],
) -> ScanResult {
    let (tl, tr) = spec.reservoir.temperatures().unwrap_or((1.0, 0.0));
    let delta = tl - tr;
    let mut rows = Vec::new();
    // per-length, per-replica kappa for the jackknife (None when excluded)
    let mut kappa_by_replica: Vec<Vec<Option<f64>>> = Vec::new();
    for &l in &spec.lengths {
        let lat = with_length(&spec.lattice, l);
        let mut runs = Vec::new();
        let mut excluded_runs = Vec::new();
        let mut failures = Vec::new();
        let mut per_rep = vec![None; spec.replicas];
        for ((tl_, r), out) in results {
            if *tl_ != l {
                continue;
            }
            match out {
                Ok(rf) => {
                    if rf.plane_disagreement > PLANE_DISAGREEMENT_LIMIT {
                        excluded_runs.push(rf.clone());
                    } else {
                        per_rep[*r as usize] = Some(finite_size_kappa(rf.flux, &lat, delta));
                        runs.push(rf.clone());
                    }
                }
                Err(e) => failures.push(format!("replica {r}: {e}")),
            }
        }
        let mut flags = Vec::new();
        if !excluded_runs.is_empty() {
            flags.push(format!(
                "{} run(s) excluded: plane fluxes disagree beyond {PLANE_DISAGREEMENT_LIMIT} stderr",
                excluded_runs.len()
            ));
        }
        if !failures.is_empty() {
            flags.push(format!("{} run(s) failed", failures.len()));
        }
        if runs.iter().any(|r| r.correlated) {
            flags.push("block averages still correlated".into());
        }
        let k = runs.len() as f64;
        let (flux, flux_stderr) = if runs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                runs.iter().map(|r| r.flux).sum::<f64>() / k,
                runs.iter().map(|r| r.stderr.powi(2)).sum::<f64>().sqrt() / k,
            )
        };
        let temperature = (0..l)
            .map(|i| runs.iter().map(|r| r.temperature[i]).sum::<f64>() / k)
            .collect();
        rows.push(ScanRow {
            length: l,
            kappa: finite_size_kappa(flux, &lat, delta),
            stderr: finite_size_kappa(flux_stderr, &lat, delta).abs(),
            flux,
            flux_stderr,
            temperature,
            excluded: runs.is_empty(),
            runs,
            excluded_runs,
            failures,
            flags,
        });
        kappa_by_replica.push(per_rep);
    }
    if spec.exclude_smallest {
        mark_smallest(&mut rows);
    }
    let fit = fit_exponent(&rows, &kappa_by_replica, spec.replicas);
    ScanResult {
        rows,
        fit,
        mode: "simulation".into(),
    }
}

fn mark_smallest(rows: &mut [ScanRow]) {
    if let Some(row) = rows.iter_mut().min_by_key(|r| r.length) {
        row.excluded = true;
        row.flags
            .push("smallest length left out of the fit (finite-size)".into());
    }
}

fn replica_flux(replica: u64, out: &SimulationOutput) -> ReplicaFlux {
    ReplicaFlux {
        replica,
        flux: out.flux.mean(),
        stderr: out.flux.stderr(),
        plane_disagreement: out.plane_disagreement(),
        correlated: out.flux.stats.correlated,
        temperature: out.temperature.mean.clone(),
    }
}

fn fit_exponent(
    rows: &[ScanRow],
    kappa_by_replica: &[Vec<Option<f64>>],
    replicas: usize,
) -> Option<ExponentFit> {
    let used: Vec<usize> = (0..rows.len())
        .filter(|&i| !rows[i].excluded && rows[i].kappa > 0.0)
        .collect();
    if used.len() < 3 {
        return None;
    }
    let x: Vec<f64> = used.iter().map(|&i| (rows[i].length as f64).ln()).collect();
    let alpha_from = |skip: Option<usize>| -> f64 {
        let y: Vec<f64> = used
            .iter()
            .map(|&i| {
                let ks: Vec<f64> = kappa_by_replica[i]
                    .iter()
                    .enumerate()
                    .filter(|(r, _)| Some(*r) != skip)
                    .filter_map(|(_, k)| *k)
                    .collect();
                (ks.iter().sum::<f64>() / ks.len() as f64).ln()
            })
            .collect();
        linear_fit(&x, &y).0
    };
    let all_complete = used
        .iter()
        .all(|&i| kappa_by_replica[i].iter().all(Option::is_some));
    let (alpha, stderr, method) = if replicas >= 2 && all_complete {
        let (a, se) = jackknife(replicas, alpha_from);
        (a, se, "jackknife")
    } else {
        let y: Vec<f64> = used.iter().map(|&i| rows[i].kappa.ln()).collect();
        let (a, _) = linear_fit(&x, &y);
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let var: f64 = used
            .iter()
            .zip(&x)
            .map(|(&i, xi)| ((xi - mx) / sxx).powi(2) * (rows[i].stderr / rows[i].kappa).powi(2))
            .sum();
        (a, var.sqrt(), "propagated")
    };
    Some(ExponentFit {
        alpha,
        stderr,
        ci_low: alpha - 2.0 * stderr,
        ci_high: alpha + 2.0 * stderr,
        lengths: used.iter().map(|&i| rows[i].length).collect(),
        method: method.into(),
    })
}

fn default_plateau_tolerance() -> f64 {
    0.1
}

fn default_stride() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GkSpec {
    pub lattice: LatticeSpec,
    /// `none` for the isolated dynamics; equal-temperature reservoirs give
    /// the linear-response integral instead.
    #[serde(default = "no_reservoir")]
    pub reservoir: ReservoirSpec,
    pub temperature: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Integration steps between flux samples.
    #[serde(default = "default_stride")]
    pub sample_stride: u64,
    /// Upper limit of the time integral.
    pub t_max: f64,
    /// Recorded trajectory length per replica.
    pub trajectory_time: f64,
    /// Evolution discarded before recording.
    #[serde(default)]
    pub equilibration_time: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Subtract the sample mean of the flux (truncated correlations).
    #[serde(default)]
    pub truncated: bool,
    /// Largest relative change of the integral over `[t_max/2, t_max]`
    /// accepted as a plateau.
    #[serde(default = "default_plateau_tolerance")]
    pub plateau_tolerance: f64,
}

fn no_reservoir() -> ReservoirSpec {
    ReservoirSpec::None
}

impl GkSpec {
    pub fn validate(&self) -> Result<()> {
        let periodic = self.lattice.ends == EndCondition::Periodic;
        let pinned = self.lattice.onsite.is_some();
        if !periodic && !pinned && matches!(self.reservoir, ReservoirSpec::None) {
            return Err(Error::invalid(
                "lattice",
                "Green-Kubo needs a periodic or pinned lattice",
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("study.temperature", "must be positive"));
        }
        if !(self.t_max >= 0.0) {
            return Err(Error::invalid("study.t_max", "must be non-negative"));
        }
        if !(self.trajectory_time > 2.0 * self.t_max && self.trajectory_time > 0.0) {
            return Err(Error::invalid(
                "study.trajectory_time",
                "must exceed twice t_max",
            ));
        }
        if self.sample_stride == 0 || self.replicas == 0 {
            return Err(Error::invalid(
                "study",
                "sample_stride and replicas must be positive",
            ));
        }
        if let Some((tl, tr)) = self.reservoir.temperatures() {
            if tl != tr || tl != self.temperature {
                return Err(Error::invalid(
                    "reservoir",
                    "reservoirs must sit at the study temperature",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub detected: bool,
    /// Mean of the running integral over `[t_max/2, t_max]`.
    pub value: f64,
    /// `|I(t_max) - I(t_max/2)| / |I(t_max)|`.
    pub relative_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GkResult {
    /// `(L / (A T^2)) int_0^t_max <J(0) J(t)> dt` with `J` the plane-averaged flux.
    pub kappa: f64,
    /// Jackknife error over replicas (NaN for one replica).
    pub kappa_stderr: f64,
    pub t_max: f64,
    pub prefactor: f64,
    /// `(t, <J(0) J(t)>)`.
    pub correlation: Vec<(f64, f64)>,
    /// `(t, prefactor * int_0^t)`.
    pub integral: Vec<(f64, f64)>,
    pub plateau: Plateau,
    /// Variance of `J` from block statistics of `J^2`, with its error.
    pub flux_variance: f64,
    pub flux_variance_stderr: f64,
    pub replicas: usize,
}

/// Autocorrelation `sum_i x_i x_{i+k} / (n - k)` for `k <= max_lag` via FFT.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let max_lag = max_lag.min(n.saturating_sub(1));
    let m = (n + max_lag + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    fwd.process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    (0..=max_lag)
        .map(|k| buf[k].re / m as f64 / (n - k) as f64)
        .collect()
}

fn gk_trajectory(spec: &GkSpec, replica: u64) -> Result<Vec<f64>> {
    let lattice = Lattice::new(spec.lattice.clone())?;
    let reservoir = Reservoir::new(spec.reservoir.clone(), &lattice)?;
    let dt = spec.dt.unwrap_or_else(|| default_dt(&lattice));
    let mut rng = stream_rng(spec.seed, replica);
    let mut state = sample_gibbs(&lattice, spec.temperature, &mut rng)?;
    if lattice.is_translation_invariant() {
        // the total-momentum part of the flux does not decay
        remove_total_momentum(&lattice, &mut state.p);
    }
    let transport = reservoir.transport_planes(&lattice);
    let mut sim = Simulation::new(lattice.clone(), reservoir, dt, state, rng, spec.seed)?;
    let equil = (spec.equilibration_time / dt).round() as u64;
    sim.run(equil)?;
    let tau = spec.sample_stride as f64 * dt;
    let samples = (spec.trajectory_time / tau).round() as usize;
    let mut buf = vec![0.0; lattice.plane_count()];
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        sim.run(spec.sample_stride)?;
        let s = sim.state();
        plane_fluxes_into(&lattice, &s.q, &s.p, &mut buf);
        out.push(buf[transport.clone()].iter().sum::<f64>() / transport.len() as f64);
    }
    Ok(out)
}

/// Flux autocorrelation and variance estimate of one replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GkReplica {
    pub correlation: Vec<f64>,
    /// Block mean and error of `J^2`.
    pub variance: BlockStats,
}

fn gk_lags(spec: &GkSpec) -> Result<(f64, usize)> {
    let lattice = Lattice::new(spec.lattice.clone())?;
    let dt = spec.dt.unwrap_or_else(|| default_dt(&lattice));
    let tau = spec.sample_stride as f64 * dt;
    Ok((tau, (spec.t_max / tau).round() as usize))
}

pub fn gk_replica(spec: &GkSpec, replica: u64) -> Result<GkReplica> {
    let (_, max_lag) = gk_lags(spec)?;
    let mut x = gk_trajectory(spec, replica)?;
    if spec.truncated {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= mean);
    }
    let squares: Vec<f64> = x.iter().map(|v| v * v).collect();
    let blocks = DEFAULT_BLOCKS.min(squares.len() / 2).max(4);
    Ok(GkReplica {
        correlation: autocorrelation(&x, max_lag),
        variance: block_stats(&squares, blocks)?,
    })
}

/// Green-Kubo integral of the plane-averaged flux autocorrelation.
pub fn green_kubo(spec: &GkSpec, jobs: usize) -> Result<GkResult> {
    spec.validate()?;
    let replicas: Vec<u64> = (0..spec.replicas as u64).collect();
    let parts = parallel_map(&replicas, jobs, |_, &r| gk_replica(spec, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    assemble_gk(spec, &parts)
}

/// Average replica correlations and integrate.
pub fn assemble_gk(spec: &GkSpec, parts: &[GkReplica]) -> Result<GkResult> {
    if parts.is_empty() {
        return Err(Error::invalid("study.replicas", "no completed replica"));
    }
    let lattice = Lattice::new(spec.lattice.clone())?;
    let (tau, max_lag) = gk_lags(spec)?;
    let reservoir = Reservoir::new(spec.reservoir.clone(), &lattice)?;
    let planes = reservoir.transport_planes(&lattice).len() as f64;
    let prefactor = planes / (lattice.cross_section() as f64 * spec.temperature.powi(2));
    let integral_of = |c: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for k in 1..c.len() {
            acc += 0.5 * tau * (c[k - 1] + c[k]);
            out.push(prefactor * acc);
        }
        out
    };
    let average = |skip: Option<usize>| -> Vec<f64> {
        let used: Vec<&GkReplica> = parts
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, c)| c)
            .collect();
        (0..=max_lag)
            .map(|k| used.iter().map(|c| c.correlation[k]).sum::<f64>() / used.len() as f64)
            .collect()
    };
    let c = average(None);
    let integral = integral_of(&c);
    let (kappa, kappa_stderr) = if parts.len() > 1 {
        jackknife(parts.len(), |skip| {
            *integral_of(&average(skip)).last().unwrap_or(&0.0)
        })
    } else {
        (*integral.last().unwrap_or(&0.0), f64::NAN)
    };
    let half = max_lag / 2;
    let i_end = *integral.last().unwrap_or(&0.0);
    let i_half = integral[half];
    let relative_change = if i_end != 0.0 {
        (i_end - i_half).abs() / i_end.abs()
    } else {
        f64::INFINITY
    };
    let window = &integral[half..];
    let plateau = Plateau {
        detected: max_lag > 0 && i_end > 0.0 && relative_change < spec.plateau_tolerance,
        value: window.iter().sum::<f64>() / window.len() as f64,
        relative_change,
    };
    let k = parts.len() as f64;
    Ok(GkResult {
        kappa,
        kappa_stderr,
        t_max: max_lag as f64 * tau,
        prefactor,
        correlation: c
            .iter()
            .enumerate()
            .map(|(k, v)| (k as f64 * tau, *v))
            .collect(),
        integral: integral
            .iter()
            .enumerate()
            .map(|(k, v)| (k as f64 * tau, *v))
            .collect(),
        plateau,
        flux_variance: parts.iter().map(|p| p.variance.mean).sum::<f64>() / k,
        flux_variance_stderr: parts
            .iter()
            .map(|p| p.variance.stderr.powi(2))
            .sum::<f64>()
            .sqrt()
            / k,
        replicas: parts.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearResponseSpec {
    pub lattice: LatticeSpec,
    /// Reservoir family; its temperatures are replaced per point.
    pub reservoir: ReservoirSpec,
    pub temperature: f64,
    /// `T_L - T_R` values; `T_L = T + dT/2`, `T_R = T - dT/2`.
    pub delta_ts: Vec<f64>,
    pub integrator: IntegratorSpec,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub initial: InitialCondition,
    /// Equal-temperature correlation run with the reservoirs attached.
    pub gk_t_max: f64,
    pub gk_trajectory_time: f64,
    #[serde(default = "default_stride")]
    pub gk_sample_stride: u64,
    #[serde(default = "default_replicas")]
    pub gk_replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponsePoint {
    pub delta_t: f64,
    pub flux: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearResponseResult {
    pub points: Vec<ResponsePoint>,
    /// Weighted least-squares slope of flux against `dT` through the origin.
    pub slope: f64,
    pub slope_stderr: f64,
    /// A quadratic term was significant; the largest `|dT|` was dropped.
    pub nonlinear: bool,
    pub dropped: Vec<f64>,
    /// `(1/T^2) int_0^t_max <J S_t J> dt` at equal reservoir temperatures.
    pub correlation_slope: f64,
    pub correlation_slope_stderr: f64,
    /// Exact slope for harmonic lattices with Langevin or extended reservoirs.
    pub oracle_slope: Option<f64>,
    /// Largest `|flux(dT) + flux(-dT)|` in combined standard errors over
    /// mirrored pairs present in the list.
    pub odd_symmetry_deviation: Option<f64>,
}

fn weighted_fit(points: &[ResponsePoint], quadratic: bool) -> (Vec<f64>, Vec<f64>) {
    // normal equations for y = a x (+ b x^2), weights 1/se^2
    let dim = if quadratic { 2 } else { 1 };
    let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut v = nalgebra::DVector::<f64>::zeros(dim);
    for p in points {
        let w = 1.0 / p.stderr.powi(2).max(1e-300);
        let basis = [p.delta_t, p.delta_t * p.delta_t];
        for i in 0..dim {
            v[i] += w * basis[i] * p.flux;
            for j in 0..dim {
                m[(i, j)] += w * basis[i] * basis[j];
            }
        }
    }
    match m.clone().try_inverse() {
        Some(inv) => {
            let coef = &inv * v;
            let se = (0..dim).map(|i| inv[(i, i)].sqrt()).collect();
            (coef.iter().copied().collect(), se)
        }
        None => (vec![f64::NAN; dim], vec![f64::NAN; dim]),
    }
}

/// Compare the measured flux-versus-`dT` slope with the equilibrium
/// correlation integral of the flux.
pub fn linear_response_check(
    spec: &LinearResponseSpec,
    jobs: usize,
) -> Result<LinearResponseResult> {
    if spec.reservoir.temperatures().is_none() {
        return Err(Error::invalid("reservoir", "needs two reservoirs"));
    }
    let mags: Vec<f64> = spec
        .delta_ts
        .iter()
        .map(|d| d.abs())
        .filter(|&d| d > 0.0)
        .collect();
    let (lo, hi) = mags
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
    if mags.is_empty() || hi < 4.0 * lo {
        return Err(Error::invalid(
            "study.delta_ts",
            "must span at least a factor 4",
        ));
    }
    let t = spec.temperature;
    let tasks: Vec<(f64, u64)> = spec
        .delta_ts
        .iter()
        .flat_map(|&d| (0..spec.replicas as u64).map(move |r| (d, r)))
        .collect();
    let outs = parallel_map(&tasks, jobs, |_, &(d, r)| {
        let config = SimulationConfig {
            lattice: spec.lattice.clone(),
            reservoir: spec.reservoir.with_temperatures(t + 0.5 * d, t - 0.5 * d),
            integrator: spec.integrator.clone(),
            initial: spec.initial.clone(),
            blocks: DEFAULT_BLOCKS,
        };
        simulate_replica(&config, r).map(|o| (o.flux.mean(), o.flux.stderr()))
    });
    let mut points = Vec::new();
    for &d in &spec.delta_ts {
        let mut vals = Vec::new();
        for ((dd, _), o) in tasks.iter().zip(&outs) {
            if *dd == d {
                vals.push(
                    o.as_ref()
                        .map_err(|e| Error::invalid("simulation", e.to_string()))?,
                );
            }
        }
        let k = vals.len() as f64;
        points.push(ResponsePoint {
            delta_t: d,
            flux: vals.iter().map(|v| v.0).sum::<f64>() / k,
            stderr: vals.iter().map(|v| v.1 * v.1).sum::<f64>().sqrt() / k,
        });
    }

    let mut used = points.clone();
    let mut dropped = Vec::new();
    let mut nonlinear = false;
    if used.len() >= 3 {
        let (c, se) = weighted_fit(&used, true);
        if c[1].abs() > 2.0 * se[1] {
            nonlinear = true;
            let largest = used.iter().map(|p| p.delta_t.abs()).fold(0.0, f64::max);
            used.retain(|p| p.delta_t.abs() < largest);
            dropped.push(largest);
        }
    }
    let (c, se) = weighted_fit(&used, false);

    let odd_symmetry_deviation = points
        .iter()
        .filter(|p| p.delta_t > 0.0)
        .filter_map(|p| {
            points
                .iter()
                .find(|q| q.delta_t == -p.delta_t)
                .map(|q| (p.flux + q.flux).abs() / (p.stderr.powi(2) + q.stderr.powi(2)).sqrt())
        })
        .reduce(f64::max);

    let gk = green_kubo(
        &GkSpec {
            lattice: spec.lattice.clone(),
            reservoir: spec.reservoir.with_temperatures(t, t),
            temperature: t,
            dt: spec.integrator.dt,
            sample_stride: spec.gk_sample_stride,
            t_max: spec.gk_t_max,
            trajectory_time: spec.gk_trajectory_time,
            equilibration_time: spec.integrator.burn_in as f64 * spec.integrator.dt.unwrap_or(0.0),
            replicas: spec.gk_replicas,
            seed: spec.integrator.seed.wrapping_add(1),
            truncated: false,
            plateau_tolerance: default_plateau_tolerance(),
        },
        jobs,
    )?;
    // kappa = (L / (A T^2)) int  =>  (1/T^2) int = kappa A / L
    let to_slope = 1.0 / gk.prefactor / t.powi(2);
    let oracle_slope = {
        let d = 1e-3 * t;
        let a = harmonic_exact::oracle(
            &spec.lattice,
            &spec.reservoir.with_temperatures(t + 0.5 * d, t - 0.5 * d),
        );
        a.ok().map(|o| o.mean_flux / d)
    };
    Ok(LinearResponseResult {
        points,
        slope: c[0],
        slope_stderr: se[0],
        nonlinear,
        dropped,
        correlation_slope: gk.kappa * to_slope,
        correlation_slope_stderr: gk.kappa_stderr * to_slope,
        oracle_slope,
        odd_symmetry_deviation,
    })
}

fn default_min_count() -> u64 {
    100
}

fn default_bins() -> usize {
    41
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdfSpec {
    pub simulation: SimulationConfig,
    /// Samples of the entropy series per segment; the segment time is
    /// `segment_samples * stride * dt`.
    pub segment_samples: usize,
    /// Odd number of equal-width bins centred on 0.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Half-width of the grid; defaults to the largest observed `|p|`.
    #[serde(default)]
    pub p_max: Option<f64>,
    /// Histogram `sigma_t / mu(sigma)` instead of `sigma_t`.
    #[serde(default)]
    pub normalized: bool,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub observable: LdfObservable,
}

/// Which entropy-production variable is averaged over a segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdfObservable {
    /// `Phi_L / T_L + Phi_R / T_R`.
    #[default]
    Reservoir,
    /// `(Phi_R - Phi_L)/2 (1/T_R - 1/T_L)`: same mean, but the change of the
    /// system energy over the segment cancels, which removes the
    /// `O(1/t)` boundary term from the segment average.
    Symmetrized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdfRow {
    pub p: f64,
    pub count: u64,
    pub density: f64,
    /// `-(1/t) log density`; absent for empty bins.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddRow {
    pub p: f64,
    /// `e(p) - e(-p)`.
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdfResult {
    pub segment_time: f64,
    pub segments: usize,
    pub mu_sigma: f64,
    pub mu_sigma_stderr: f64,
    pub mean_segment_sigma: f64,
    /// `1` or `mu(sigma)` in normalized mode.
    pub normalization: f64,
    pub bin_width: f64,
    pub table: Vec<LdfRow>,
    pub odd: Vec<OddRow>,
    /// Weighted slope of `e(p) - e(-p)` against `p` through the origin.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub histogram_integral: f64,
    pub note: Option<String>,
}

/// Histogram segment averages of the entropy production and fit the odd
/// part of the rate function.
pub fn entropy_ldf(spec: &LdfSpec, jobs: usize) -> Result<LdfResult> {
    if spec.bins.is_multiple_of(2) || spec.bins < 3 {
        return Err(Error::invalid("study.bins", "must be odd and at least 3"));
    }
    if spec.segment_samples == 0 {
        return Err(Error::invalid("study.segment_samples", "must be positive"));
    }
    if spec.simulation.reservoir.temperatures().is_none() {
        return Err(Error::invalid("reservoir", "needs two reservoirs"));
    }
    if spec.segment_samples > spec.simulation.integrator.samples() {
        return Err(Error::invalid(
            "study.segment_samples",
            "longer than the recorded series",
        ));
    }
    let reps: Vec<u64> = (0..spec.replicas.max(1) as u64).collect();
    let outs = parallel_map(&reps, jobs, |_, &r| ldf_segments(spec, r));
    let mut sigma_t = Vec::new();
    let mut mus = Vec::new();
    let mut segment_time = 0.0;
    for o in outs {
        let o = o?;
        segment_time = o.segment_time;
        mus.push((o.mu_sigma, o.mu_sigma_stderr));
        sigma_t.extend(o.segments);
    }
    ldf_from_segments(spec, segment_time, &sigma_t, &mus)
}

/// Segment averages of one replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdfSegments {
    pub segment_time: f64,
    pub mu_sigma: f64,
    pub mu_sigma_stderr: f64,
    pub segments: Vec<f64>,
}

pub fn ldf_segments(spec: &LdfSpec, replica: u64) -> Result<LdfSegments> {
    let o = simulate_replica(&spec.simulation, replica)?;
    let series = match spec.observable {
        LdfObservable::Reservoir => o.entropy,
        LdfObservable::Symmetrized => {
            let (tl, tr) = spec.simulation.reservoir.temperatures().expect("checked");
            let c = 0.5 * (1.0 / tr - 1.0 / tl);
            let values = o
                .heat_right
                .values
                .iter()
                .zip(&o.heat_left.values)
                .map(|(r, l)| c * (r - l))
                .collect();
            ObservableSeries::new(
                "entropy_symmetrized",
                o.entropy.start_time,
                o.entropy.interval,
                values,
                spec.simulation.blocks,
            )?
        }
    };
    Ok(LdfSegments {
        segment_time: spec.segment_samples as f64 * series.interval,
        mu_sigma: series.mean(),
        mu_sigma_stderr: series.stderr(),
        segments: series
            .values
            .chunks_exact(spec.segment_samples)
            .map(|seg| seg.iter().sum::<f64>() / seg.len() as f64)
            .collect(),
    })
}

/// Histogram and odd-part fit from pooled segment averages; `mus` holds
/// each replica's `(mu(sigma), stderr)`.
pub fn ldf_from_segments(
    spec: &LdfSpec,
    segment_time: f64,
    sigma_t: &[f64],
    mus: &[(f64, f64)],
) -> Result<LdfResult> {
    let k = mus.len() as f64;
    let mu_sigma = mus.iter().map(|m| m.0).sum::<f64>() / k;
    let mu_sigma_stderr = mus.iter().map(|m| m.1 * m.1).sum::<f64>().sqrt() / k;
    let segments = sigma_t.len();
    if segments == 0 {
        return Err(Error::SeriesTooShort {
            len: 0,
            blocks: spec.segment_samples,
        });
    }
    let mean_segment_sigma = sigma_t.iter().sum::<f64>() / segments as f64;
    let normalization = if spec.normalized { mu_sigma } else { 1.0 };
    let ps: Vec<f64> = sigma_t.iter().map(|s| s / normalization).collect();
    let p_max = spec
        .p_max
        .unwrap_or_else(|| ps.iter().map(|p| p.abs()).fold(0.0, f64::max) * 1.0001);
    let half = (spec.bins / 2) as f64;
    let width = 2.0 * p_max / spec.bins as f64;
    let mut counts = vec![0u64; spec.bins];
    for p in &ps {
        let k = (p / width + half + 0.5).floor();
        if k >= 0.0 && (k as usize) < spec.bins {
            counts[k as usize] += 1;
        }
    }
    let total = segments as f64;
    let table: Vec<LdfRow> = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let density = c as f64 / (total * width);
            LdfRow {
                p: (k as f64 - half) * width,
                count: c,
                density,
                rate: (c > 0).then(|| -density.ln() / segment_time),
            }
        })
        .collect();
    let histogram_integral = table.iter().map(|r| r.density * width).sum();
    let mut odd = Vec::new();
    let c = spec.bins / 2;
    for j in 1..=c {
        let (pos, neg) = (&table[c + j], &table[c - j]);
        if pos.count >= spec.min_count && neg.count >= spec.min_count {
            odd.push(OddRow {
                p: pos.p,
                value: pos.rate.unwrap() - neg.rate.unwrap(),
                stderr: (1.0 / pos.count as f64 + 1.0 / neg.count as f64).sqrt() / segment_time,
            });
        }
    }
    let (slope, slope_stderr, note) = if odd.is_empty() {
        (
            None,
            None,
            Some("no bin pair at +-p with enough counts; slope not estimable".to_string()),
        )
    } else {
        let sw: f64 = odd.iter().map(|r| r.p * r.p / r.stderr.powi(2)).sum();
        let swy: f64 = odd.iter().map(|r| r.p * r.value / r.stderr.powi(2)).sum();
        (Some(swy / sw), Some(1.0 / sw.sqrt()), None)
    };
    Ok(LdfResult {
        segment_time,
        segments,
        mu_sigma,
        mu_sigma_stderr,
        mean_segment_sigma,
        normalization,
        bin_width: width,
        table,
        odd,
        slope,
        slope_stderr,
        histogram_integral,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonic_exact::harmonic_chain;
    use crate::lattice::PotentialSpec;

    #[test]
    fn fft_autocorrelation_matches_direct_sum() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let c = autocorrelation(&x, 20);
        for (k, ck) in c.iter().enumerate() {
            let direct: f64 =
                x.iter().zip(&x[k..]).map(|(a, b)| a * b).sum::<f64>() / (200 - k) as f64;
            assert!((ck - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let x: Vec<f64> = [8.0f64, 16.0, 32.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [8.0f64, 16.0, 32.0]
            .iter()
            .map(|v| (3.0 * v.powf(0.4)).ln())
            .collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 0.4).abs() < 1e-12);
        assert!((b - 3.0f64.ln()).abs() < 1e-12);
    }

    fn oracle_scan() -> ScanSpec {
        ScanSpec {
            lattice: harmonic_chain(8, 1.0),
            reservoir: ReservoirSpec::langevin(1.2, 0.8, 1.0),
            integrator: IntegratorSpec::new(0.05, 1000, 100, 1, 0),
            lengths: vec![8, 16, 32, 64],
            replicas: 1,
            oracle: true,
            step_scaling_exponent: 0.0,
            exclude_smallest: false,
            initial: InitialCondition::Zero,
            blocks: 32,
        }
    }

    #[test]
    fn harmonic_oracle_scan_has_unit_exponent() {
        let r = conductivity_scan(&oracle_scan(), 1).unwrap();
        let fit = r.fit.unwrap();
        assert!((fit.alpha - 1.0).abs() < 0.02, "{}", fit.alpha);
        assert_eq!(r.rows.len(), 4);
    }

    #[test]
    fn scan_validation() {
        let mut s = oracle_scan();
        s.lengths = vec![8, 16];
        assert!(conductivity_scan(&s, 1).is_err());
        let mut s = oracle_scan();
        s.reservoir = ReservoirSpec::langevin(2.0, 0.5, 1.0);
        assert!(conductivity_scan(&s, 1).is_err());
    }

    #[test]
    fn step_scaling_rounds_to_stride() {
        let mut s = oracle_scan();
        s.step_scaling_exponent = 1.0;
        s.integrator.stride = 7;
        let i = s.integrator_for(32);
        assert_eq!(i.steps % 7, 0);
        assert!(i.steps >= 4000);
    }

    fn gk_spec(t_max: f64) -> GkSpec {
        GkSpec {
            lattice: harmonic_chain(16, 1.0).with_ends(EndCondition::Periodic),
            reservoir: ReservoirSpec::None,
            temperature: 1.0,
            dt: Some(0.05),
            sample_stride: 4,
            t_max,
            trajectory_time: 2000.0,
            equilibration_time: 0.0,
            replicas: 2,
            seed: 1,
            truncated: false,
            plateau_tolerance: 0.1,
        }
    }

    #[test]
    fn zero_t_max_gives_zero_kappa() {
        let r = green_kubo(&gk_spec(0.0), 1).unwrap();
        assert_eq!(r.kappa, 0.0);
        assert!(!r.plateau.detected);
    }

    #[test]
    fn harmonic_periodic_chain_has_no_plateau() {
        let r = green_kubo(&gk_spec(100.0), 2).unwrap();
        assert!(!r.plateau.detected, "{:?}", r.plateau);
        let c0 = r.correlation[0].1;
        assert!((c0 - r.flux_variance).abs() < 2.0 * r.flux_variance_stderr + 1e-12);
    }

    #[test]
    fn gk_requires_periodic_or_pinned() {
        let mut s = gk_spec(10.0);
        s.lattice = harmonic_chain(16, 1.0);
        assert!(green_kubo(&s, 1).is_err());
        s.lattice = s
            .lattice
            .with_onsite(PotentialSpec::PinnedQuadratic { omega2: 1.0 });
        assert!(s.validate().is_ok());
    }

    #[test]
    fn ldf_histogram_normalizes() {
        let spec = LdfSpec {
            simulation: SimulationConfig {
                lattice: LatticeSpec::chain(4, PotentialSpec::FpuBeta { k2: 0.5, k4: 1.0 }),
                reservoir: ReservoirSpec::langevin(1.2, 0.8, 1.0),
                integrator: IntegratorSpec::new(0.02, 200_000, 10_000, 5, 2),
                initial: InitialCondition::Gibbs { temperature: None },
                blocks: 32,
            },
            segment_samples: 20,
            bins: 21,
            p_max: None,
            normalized: false,
            min_count: 100,
            replicas: 1,
            observable: LdfObservable::Reservoir,
        };
        let r = entropy_ldf(&spec, 1).unwrap();
        assert!((r.histogram_integral - 1.0).abs() < 1e-12);
        assert!((r.mean_segment_sigma - r.mu_sigma).abs() < 2.0 * r.mu_sigma_stderr + 1e-12);
        assert!(r
            .table
            .iter()
            .all(|row| (row.count > 0) == row.rate.is_some()));
    }
}
