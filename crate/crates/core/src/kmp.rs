//! Kipnis-Marchioro-Presutti stochastic energy-exchange chain.
//!
//! Each nearest-neighbour pair carries a Poisson clock of rate `gamma_ex`;
//! when it rings the pair energy is split uniformly at random. The two end
//! sites are resampled from the exponential law of mean `T_alpha` at rate
//! `gamma_b`. Simulated event by event (Gillespie), so there is no time-step
//! bias.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::{block_stats, jackknife, BlockStats, ProfileStats, MIN_BLOCKS};
use crate::rng::{exponential, stream_rng, unit, SimRng};

fn one() -> f64 {
    1.0
}

fn default_blocks() -> usize {
    crate::observables::DEFAULT_BLOCKS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmpSpec {
    pub sites: usize,
    pub t_left: f64,
    pub t_right: f64,
    #[serde(default = "one")]
    pub gamma_ex: f64,
    #[serde(default = "one")]
    pub gamma_b: f64,
    pub burn_in_time: f64,
    pub run_time: f64,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub seed: u64,
}

impl KmpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sites < 2 {
            return Err(Error::invalid("kmp.sites", "need at least 2 sites"));
        }
        for (field, v) in [
            ("kmp.t_left", self.t_left),
            ("kmp.t_right", self.t_right),
            ("kmp.gamma_ex", self.gamma_ex),
            ("kmp.gamma_b", self.gamma_b),
            ("kmp.run_time", self.run_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.burn_in_time >= 0.0) {
            return Err(Error::invalid("kmp.burn_in_time", "must be non-negative"));
        }
        if self.blocks < MIN_BLOCKS {
            return Err(Error::invalid(
                "kmp.blocks",
                format!("need at least {MIN_BLOCKS} blocks"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmpState {
    pub energies: Vec<f64>,
    pub time: f64,
    pub t_left: f64,
    pub t_right: f64,
    pub gamma_ex: f64,
    pub gamma_b: f64,
}

impl KmpState {
    /// Linear initial profile between the reservoir temperatures.
    pub fn new(spec: &KmpSpec) -> Self {
        let n = spec.sites;
        let energies = (0..n)
            .map(|i| spec.t_left + (spec.t_right - spec.t_left) * i as f64 / (n - 1) as f64)
            .collect();
        Self {
            energies,
            time: 0.0,
            t_left: spec.t_left,
            t_right: spec.t_right,
            gamma_ex: spec.gamma_ex,
            gamma_b: spec.gamma_b,
        }
    }

    pub fn total_rate(&self) -> f64 {
        (self.energies.len() - 1) as f64 * self.gamma_ex + 2.0 * self.gamma_b
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KmpEvent {
    /// Pair `(bond, bond + 1)` exchanged; `transferred` moved left to right.
    Pair { bond: usize, transferred: f64 },
    /// End site resampled; `gained` is the energy taken from the reservoir.
    Boundary { site: usize, gained: f64 },
}

/// Redistribute the pair `(i, i + 1)` with split fraction `u`; returns the
/// energy moved from `i` to `i + 1`.
pub fn pair_exchange(energies: &mut [f64], i: usize, u: f64) -> f64 {
    let s = energies[i] + energies[i + 1];
    let left = u * s;
    let moved = energies[i] - left;
    energies[i] = left;
    energies[i + 1] = s - left;
    moved
}

/// Advance to the next event.
pub fn kmp_step<R: RngCore + ?Sized>(state: &mut KmpState, rng: &mut R) -> KmpEvent {
    kmp_step_until(state, rng, f64::INFINITY).expect("unbounded horizon")
}

/// Advance to the next event if it occurs before `horizon`; otherwise move
/// the clock to `horizon` and return `None`. Discarding the overshooting
/// waiting time is exact because the clocks are memoryless.
pub fn kmp_step_until<R: RngCore + ?Sized>(
    state: &mut KmpState,
    rng: &mut R,
    horizon: f64,
) -> Option<KmpEvent> {
    let rate = state.total_rate();
    let t = state.time + exponential(rng, 1.0 / rate);
    if t >= horizon {
        state.time = horizon;
        return None;
    }
    state.time = t;
    let pick = unit(rng) * rate;
    let n = state.energies.len();
    let pair_rate = (n - 1) as f64 * state.gamma_ex;
    if pick < pair_rate {
        let bond = ((pick / state.gamma_ex) as usize).min(n - 2);
        let transferred = pair_exchange(&mut state.energies, bond, unit(rng));
        Some(KmpEvent::Pair { bond, transferred })
    } else {
        let (site, t) = if pick - pair_rate < state.gamma_b {
            (0, state.t_left)
        } else {
            (n - 1, state.t_right)
        };
        let new = exponential(rng, t);
        let gained = new - state.energies[site];
        state.energies[site] = new;
        Some(KmpEvent::Boundary { site, gained })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmpResult {
    /// Time-averaged site energies.
    pub profile: ProfileStats,
    /// Energy per unit time crossing a bond left to right, averaged over bonds.
    pub flux: BlockStats,
    /// `flux (N - 1) / (<e_1> - <e_N>)`, with jackknife error over blocks.
    pub kappa: f64,
    pub kappa_stderr: f64,
    /// `flux (N - 1) / (T_L - T_R)`; includes the two boundary resistances.
    pub kappa_nominal: Option<f64>,
    /// Largest `|<e_i> - line| / stderr_i` over sites, line through the end values.
    pub max_linear_deviation: f64,
    pub events: u64,
    pub seed: u64,
    pub stream: u64,
}

/// Run the chain and collect time-averaged profile and bond flux in blocks.
pub fn kmp_profile_and_flux(spec: &KmpSpec, replica: u64) -> Result<KmpResult> {
    spec.validate()?;
    let mut rng: SimRng = stream_rng(spec.seed, replica);
    let mut state = KmpState::new(spec);
    let n = spec.sites;
    while state.time < spec.burn_in_time {
        kmp_step(&mut state, &mut rng);
    }
    // windows of half a block, so the doubled-block check has data
    let blocks = spec.blocks;
    let windows = 2 * blocks;
    let block_time = spec.run_time / windows as f64;
    let mut window_profiles: Vec<Vec<f64>> = Vec::with_capacity(windows);
    let mut window_flux = Vec::with_capacity(windows);
    let mut events = 0u64;
    let mut t0 = state.time;
    for _ in 0..windows {
        let end = t0 + block_time;
        let mut integral = vec![0.0; n];
        let mut last = vec![t0; n];
        let mut moved = 0.0;
        while let Some(event) = kmp_step_until(&mut state, &mut rng, end) {
            events += 1;
            let t = state.time;
            let e = &state.energies;
            // energies before the event held since `last`
            match event {
                KmpEvent::Pair { bond, transferred } => {
                    moved += transferred;
                    integral[bond] += (e[bond] + transferred) * (t - last[bond]);
                    integral[bond + 1] += (e[bond + 1] - transferred) * (t - last[bond + 1]);
                    last[bond] = t;
                    last[bond + 1] = t;
                }
                KmpEvent::Boundary { site, gained } => {
                    integral[site] += (e[site] - gained) * (t - last[site]);
                    last[site] = t;
                }
            }
        }
        for s in 0..n {
            integral[s] += state.energies[s] * (end - last[s]);
        }
        window_profiles.push(integral.iter().map(|v| v / block_time).collect());
        window_flux.push(moved / (block_time * (n - 1) as f64));
        t0 = end;
    }

    let flux = block_stats(&window_flux, blocks)?;
    let block_flux: Vec<f64> = window_flux.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
    let block_profiles: Vec<Vec<f64>> = window_profiles
        .chunks(2)
        .map(|c| c[0].iter().zip(&c[1]).map(|(a, b)| 0.5 * (a + b)).collect())
        .collect();
    let mean: Vec<f64> = (0..n)
        .map(|s| block_profiles.iter().map(|b| b[s]).sum::<f64>() / blocks as f64)
        .collect();
    let stderr: Vec<f64> = (0..n)
        .map(|s| {
            let v: Vec<f64> = block_profiles.iter().map(|b| b[s]).collect();
            let m = mean[s];
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((blocks - 1) * blocks) as f64).sqrt()
        })
        .collect();
    let (kappa, kappa_stderr) = jackknife(blocks, |skip| {
        let keep = |b: &usize| Some(*b) != skip;
        let count = (0..blocks).filter(keep).count() as f64;
        let f = (0..blocks).filter(keep).map(|b| block_flux[b]).sum::<f64>() / count;
        let e1 = (0..blocks)
            .filter(keep)
            .map(|b| block_profiles[b][0])
            .sum::<f64>()
            / count;
        let en = (0..blocks)
            .filter(keep)
            .map(|b| block_profiles[b][n - 1])
            .sum::<f64>()
            / count;
        f * (n - 1) as f64 / (e1 - en)
    });
    let delta = spec.t_left - spec.t_right;
    let kappa_nominal = (delta != 0.0).then(|| flux.mean * (n - 1) as f64 / delta);
    let max_linear_deviation = (1..n - 1)
        .map(|s| {
            let line = mean[0] + (mean[n - 1] - mean[0]) * s as f64 / (n - 1) as f64;
            (mean[s] - line).abs() / stderr[s]
        })
        .fold(0.0, f64::max);
    Ok(KmpResult {
        profile: ProfileStats {
            mean,
            stderr,
            blocks,
        },
        flux,
        kappa,
        kappa_stderr,
        kappa_nominal,
        max_linear_deviation,
        events,
        seed: spec.seed,
        stream: replica,
    })
}
