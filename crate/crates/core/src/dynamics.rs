//! Time integration of the Hamiltonian flow coupled to the reservoirs.
//!
//! One step of length `dt` is the symmetric composition
//!
//! ```text
//! R(dt/2)  B(dt/2)  A(dt)  B(dt/2)  R(dt/2)
//! ```
//!
//! where `B` kicks momenta with the lattice forces, `A` drifts positions and
//! `R` is the reservoir sub-step: an exact Ornstein-Uhlenbeck update for the
//! stochastic reservoirs, a symmetric feedback update for Nosé-Hoover and a
//! projection onto the constant-kinetic-energy surface for the isokinetic
//! thermostat. With no reservoir this is velocity Verlet.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{sample_gibbs, Lattice, LatticeSpec, SystemState};
use crate::observables::{
    entropy_production, layer_temperatures_into, plane_fluxes_into, BlockAccumulator,
    ObservableSeries, ProfileStats, DEFAULT_BLOCKS, MIN_BLOCKS,
};
use crate::rng::{stream_rng, RngPosition, SimRng};
use crate::thermostats::{reservoir_heat_increment, Reservoir, ReservoirSpec, SubstepRecord};

/// Time step used when none is configured: `0.05 / omega_max`.
pub fn default_dt(lattice: &Lattice) -> f64 {
    0.05 / lattice.max_frequency().max(1e-12)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Reservoir half-step around a velocity-Verlet core.
    #[default]
    VerletOu,
}

fn one_u64() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    /// Filled with [`default_dt`] during config validation when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
    /// Total steps, burn-in included.
    pub steps: u64,
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default = "one_u64")]
    pub stride: u64,
    #[serde(default)]
    pub seed: u64,
}

impl IntegratorSpec {
    pub fn new(dt: f64, steps: u64, burn_in: u64, stride: u64, seed: u64) -> Self {
        Self {
            dt: Some(dt),
            scheme: Scheme::VerletOu,
            steps,
            burn_in,
            stride,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::invalid("integrator.dt", "must be positive"));
            }
        }
        if self.burn_in >= self.steps {
            return Err(Error::invalid(
                "integrator.burn_in",
                "must be smaller than the total step count",
            ));
        }
        if self.stride == 0 {
            return Err(Error::invalid("integrator.stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn resolved_dt(&self, lattice: &Lattice) -> f64 {
        self.dt.unwrap_or_else(|| default_dt(lattice))
    }

    pub fn samples(&self) -> usize {
        ((self.steps - self.burn_in) / self.stride) as usize
    }
}

/// Advance `state` by one step, recomputing forces from scratch.
pub fn step(
    lattice: &Lattice,
    reservoir: &Reservoir,
    dt: f64,
    state: &mut SystemState,
    rng: &mut SimRng,
) -> Result<SubstepRecord> {
    lattice.check_state(state)?;
    let mut force = vec![0.0; lattice.dof()];
    lattice.forces_into(&state.q, &mut force);
    let record = advance(lattice, reservoir, dt, state, &mut force, rng)?;
    if !state.is_finite() {
        return Err(Error::BlowUp {
            step: 0,
            time: state.time,
        });
    }
    Ok(record)
}

/// One step given forces consistent with `state.q`; `force` is left
/// consistent with the new positions.
fn advance(
    lattice: &Lattice,
    reservoir: &Reservoir,
    dt: f64,
    state: &mut SystemState,
    force: &mut [f64],
    rng: &mut SimRng,
) -> Result<SubstepRecord> {
    let h = 0.5 * dt;
    let inv_m = 1.0 / lattice.mass();
    let mut record = SubstepRecord::default();
    reservoir.pre_half(state, h, rng, &mut record)?;
    reservoir.kick(&mut state.p, force, h, &mut record)?;
    for (q, p) in state.q.iter_mut().zip(&state.p) {
        *q += dt * inv_m * p;
    }
    lattice.forces_into(&state.q, force);
    reservoir.kick(&mut state.p, force, h, &mut record)?;
    reservoir.post_half(state, h, rng, &mut record)?;
    state.time += dt;
    Ok(record)
}

/// Resumable position of a simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema: String,
    pub state: SystemState,
    pub step: u64,
    pub rng: RngPosition,
}

pub const SNAPSHOT_SCHEMA: &str = "nesslab.snapshot.v1";

/// A lattice, its reservoirs and the evolving phase-space point.
pub struct Simulation {
    lattice: Lattice,
    reservoir: Reservoir,
    dt: f64,
    state: SystemState,
    force: Vec<f64>,
    rng: SimRng,
    seed: u64,
    steps_done: u64,
}

impl Simulation {
    pub fn new(
        lattice: Lattice,
        reservoir: Reservoir,
        dt: f64,
        mut state: SystemState,
        rng: SimRng,
        seed: u64,
    ) -> Result<Self> {
        lattice.check_state(&state)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("integrator.dt", "must be positive"));
        }
        reservoir.prepare(&mut state)?;
        let mut force = vec![0.0; lattice.dof()];
        lattice.forces_into(&state.q, &mut force);
        Ok(Self {
            lattice,
            reservoir,
            dt,
            state,
            force,
            rng,
            seed,
            steps_done: 0,
        })
    }

    pub fn from_snapshot(
        lattice: Lattice,
        reservoir: Reservoir,
        dt: f64,
        snapshot: &Snapshot,
    ) -> Result<Self> {
        let rng = snapshot.rng.restore().ok_or_else(|| Error::Config {
            path: "snapshot.rng.word_pos".into(),
            message: "not a valid stream position".into(),
        })?;
        let mut sim = Self::new(
            lattice,
            reservoir,
            dt,
            snapshot.state.clone(),
            rng,
            snapshot.rng.seed,
        )?;
        sim.steps_done = snapshot.step;
        Ok(sim)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            schema: SNAPSHOT_SCHEMA.into(),
            state: self.state.clone(),
            step: self.steps_done,
            rng: RngPosition::capture(self.seed, &self.rng),
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn reservoir(&self) -> &Reservoir {
        &self.reservoir
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut SystemState {
        &mut self.state
    }

    /// Re-synchronise cached forces after external edits of `state.q`.
    pub fn refresh_forces(&mut self) {
        self.lattice.forces_into(&self.state.q, &mut self.force);
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn forces(&self) -> &[f64] {
        &self.force
    }

    /// Advance one step and return the reservoir heats `(dQ_L, dQ_R)`.
    #[inline]
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let record = advance(
            &self.lattice,
            &self.reservoir,
            self.dt,
            &mut self.state,
            &mut self.force,
            &mut self.rng,
        )?;
        self.steps_done += 1;
        if self.steps_done.is_multiple_of(256) && !self.state.is_finite() {
            return Err(Error::BlowUp {
                step: self.steps_done,
                time: self.state.time,
            });
        }
        Ok(reservoir_heat_increment(&self.reservoir, &record))
    }

    /// Advance `n` steps, returning accumulated heats.
    pub fn run(&mut self, n: u64) -> Result<(f64, f64)> {
        let (mut ql, mut qr) = (0.0, 0.0);
        for _ in 0..n {
            let (l, r) = self.step()?;
            ql += l;
            qr += r;
        }
        if !self.state.is_finite() {
            return Err(Error::BlowUp {
                step: self.steps_done,
                time: self.state.time,
            });
        }
        Ok((ql, qr))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Gibbs sample at the given temperature (mean reservoir temperature by default).
    Gibbs {
        #[serde(default)]
        temperature: Option<f64>,
    },
    /// All displacements and momenta zero; the thermostats heat the lattice up.
    #[default]
    Zero,
}

fn default_blocks() -> usize {
    DEFAULT_BLOCKS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub lattice: LatticeSpec,
    pub reservoir: ReservoirSpec,
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub stride: u64,
    pub samples: usize,
    pub final_time: f64,
    pub wall_seconds: f64,
}

/// Series and profiles recorded by [`simulate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    /// Plane flux averaged over the transport planes.
    pub flux: ObservableSeries,
    /// Heat per unit time delivered to the left reservoir over each sampling interval.
    pub heat_left: ObservableSeries,
    pub heat_right: ObservableSeries,
    /// Reservoir entropy production per unit time over each sampling interval.
    pub entropy: ObservableSeries,
    /// Mean flux through each plane.
    pub plane_flux: ProfileStats,
    /// Planes between the thermostated regions, where the steady current is uniform.
    pub transport_planes: Range<usize>,
    /// Kinetic temperature of each layer.
    pub temperature: ProfileStats,
    pub meta: RunMeta,
    pub final_snapshot: Snapshot,
}

impl SimulationOutput {
    /// Largest pairwise disagreement between plane-flux means in units of
    /// their combined standard error.
    pub fn plane_disagreement(&self) -> f64 {
        let m = &self.plane_flux.mean;
        let s = &self.plane_flux.stderr;
        let planes = self.transport_planes.clone();
        let mut worst: f64 = 0.0;
        for i in planes.clone() {
            for j in i + 1..planes.end {
                let se = (s[i] * s[i] + s[j] * s[j]).sqrt();
                if se > 0.0 {
                    worst = worst.max((m[i] - m[j]).abs() / se);
                }
            }
        }
        worst
    }
}

/// Build the initial phase-space point for a run.
pub fn initial_state(
    lattice: &Lattice,
    reservoir: &ReservoirSpec,
    initial: &InitialCondition,
    rng: &mut SimRng,
) -> Result<SystemState> {
    match initial {
        InitialCondition::Zero => {
            let mut s = SystemState::zeros(lattice);
            if matches!(reservoir, ReservoirSpec::Gaussian { .. }) {
                // the isokinetic surface needs nonzero momenta
                s.p.iter_mut().for_each(|p| *p = 1.0);
            }
            Ok(s)
        }
        InitialCondition::Gibbs { temperature } => {
            let t = temperature
                .or_else(|| reservoir.temperatures().map(|(l, r)| 0.5 * (l + r)))
                .unwrap_or(1.0);
            sample_gibbs(lattice, t, rng)
        }
    }
}

/// Run burn-in then sampling for replica 0.
pub fn simulate(config: &SimulationConfig) -> Result<SimulationOutput> {
    simulate_replica(config, 0)
}

/// Run one replica; replicas use disjoint random streams of the same seed.
pub fn simulate_replica(config: &SimulationConfig, replica: u64) -> Result<SimulationOutput> {
    config.integrator.validate()?;
    let lattice = Lattice::new(config.lattice.clone())?;
    let reservoir = Reservoir::new(config.reservoir.clone(), &lattice)?;
    let dt = config.integrator.resolved_dt(&lattice);
    let seed = config.integrator.seed;
    let mut rng = stream_rng(seed, replica);
    let state = initial_state(&lattice, &config.reservoir, &config.initial, &mut rng)?;
    let sim = Simulation::new(lattice, reservoir, dt, state, rng, seed)?;
    sample_run(sim, config, replica)
}

/// Continue an existing simulation through the configured burn-in and sampling.
pub fn sample_run(
    mut sim: Simulation,
    config: &SimulationConfig,
    replica: u64,
) -> Result<SimulationOutput> {
    let started = Instant::now();
    let integ = &config.integrator;
    let blocks = config.blocks.max(MIN_BLOCKS);
    let samples = integ.samples();
    if samples < 2 * blocks {
        return Err(Error::invalid(
            "integrator.steps",
            format!("{samples} samples cannot fill {blocks} blocks"),
        ));
    }
    sim.run(integ.burn_in)?;

    let lattice = sim.lattice().clone();
    let (t_left, t_right) = sim.reservoir().temperatures().unwrap_or((1.0, 1.0));
    let thermostated = sim.reservoir().temperatures().is_some();
    let planes = lattice.plane_count();
    let transport = sim.reservoir().transport_planes(&lattice);
    let layers = lattice.length();
    let interval = integ.stride as f64 * sim.dt();
    let start_time = sim.state().time + interval;

    let mut flux = Vec::with_capacity(samples);
    let mut heat_left = Vec::with_capacity(samples);
    let mut heat_right = Vec::with_capacity(samples);
    let mut entropy = Vec::with_capacity(samples);
    let mut plane_acc = BlockAccumulator::new(planes, samples, blocks);
    let mut temp_acc = BlockAccumulator::new(layers, samples, blocks);
    let mut plane_buf = vec![0.0; planes];
    let mut temp_buf = vec![0.0; layers];

    for _ in 0..samples {
        let (ql, qr) = sim.run(integ.stride)?;
        let state = sim.state();
        plane_fluxes_into(&lattice, &state.q, &state.p, &mut plane_buf);
        layer_temperatures_into(&lattice, &state.p, &mut temp_buf);
        let mean_flux = if transport.is_empty() {
            0.0
        } else {
            plane_buf[transport.clone()].iter().sum::<f64>() / transport.len() as f64
        };
        if !mean_flux.is_finite() {
            return Err(Error::BlowUp {
                step: sim.steps_done(),
                time: state.time,
            });
        }
        let (phi_l, phi_r) = (ql / interval, qr / interval);
        flux.push(mean_flux);
        heat_left.push(phi_l);
        heat_right.push(phi_r);
        entropy.push(if thermostated {
            entropy_production(phi_l, phi_r, t_left, t_right)
        } else {
            0.0
        });
        plane_acc.push(&plane_buf);
        temp_acc.push(&temp_buf);
    }

    let meta = RunMeta {
        seed: integ.seed,
        stream: replica,
        dt: sim.dt(),
        steps: integ.steps,
        burn_in: integ.burn_in,
        stride: integ.stride,
        samples,
        final_time: sim.state().time,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(SimulationOutput {
        flux: ObservableSeries::new("heat_flux", start_time, interval, flux, blocks)?,
        heat_left: ObservableSeries::new("heat_left", start_time, interval, heat_left, blocks)?,
        heat_right: ObservableSeries::new("heat_right", start_time, interval, heat_right, blocks)?,
        entropy: ObservableSeries::new(
            "entropy_production",
            start_time,
            interval,
            entropy,
            blocks,
        )?,
        plane_flux: plane_acc.finish(),
        transport_planes: transport,
        temperature: temp_acc.finish(),
        meta,
        final_snapshot: sim.snapshot(),
    })
}
