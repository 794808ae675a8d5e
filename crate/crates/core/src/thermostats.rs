//! Heat-reservoir models attached to the left and right faces of the lattice.
//!
//! Each model contributes a vector-field term (exposed by the `*_terms`
//! functions for inspection and testing) and an exact or symmetric sub-step
//! used by the integrator. Heat is measured by bookkeeping: the energy
//! change of `H` produced by a reservoir's sub-steps is the negative of the
//! heat delivered to that reservoir.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Aux, Lattice, SystemState};
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReservoirSpec {
    /// Ornstein-Uhlenbeck noise and friction on the boundary momenta.
    Langevin {
        t_left: f64,
        t_right: f64,
        lambda_left: f64,
        lambda_right: f64,
        #[serde(default)]
        left_sites: Option<Vec<usize>>,
        #[serde(default)]
        right_sites: Option<Vec<usize>>,
    },
    /// One auxiliary force variable per chain end.
    Extended {
        t_left: f64,
        t_right: f64,
        lambda_left: f64,
        lambda_right: f64,
        gamma_left: f64,
        gamma_right: f64,
    },
    /// Nosé-Hoover feedback with response time `theta`.
    NoseHoover {
        t_left: f64,
        t_right: f64,
        theta: f64,
        /// Kinetic degrees of freedom per side; defaults to the thermostated component count.
        #[serde(default)]
        g_left: Option<f64>,
        #[serde(default)]
        g_right: Option<f64>,
        #[serde(default)]
        left_sites: Option<Vec<usize>>,
        #[serde(default)]
        right_sites: Option<Vec<usize>>,
    },
    /// Gaussian isokinetic constraint on each thermostated region.
    Gaussian {
        t_left: f64,
        t_right: f64,
        #[serde(default)]
        left_sites: Option<Vec<usize>>,
        #[serde(default)]
        right_sites: Option<Vec<usize>>,
    },
    None,
}

impl ReservoirSpec {
    pub fn langevin(t_left: f64, t_right: f64, lambda: f64) -> Self {
        ReservoirSpec::Langevin {
            t_left,
            t_right,
            lambda_left: lambda,
            lambda_right: lambda,
            left_sites: None,
            right_sites: None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ReservoirSpec::Langevin { .. } => "langevin",
            ReservoirSpec::Extended { .. } => "extended",
            ReservoirSpec::NoseHoover { .. } => "nose_hoover",
            ReservoirSpec::Gaussian { .. } => "gaussian",
            ReservoirSpec::None => "none",
        }
    }

    /// `(T_L, T_R)`; `None` for isolated dynamics.
    pub fn temperatures(&self) -> Option<(f64, f64)> {
        match *self {
            ReservoirSpec::Langevin {
                t_left, t_right, ..
            }
            | ReservoirSpec::Extended {
                t_left, t_right, ..
            }
            | ReservoirSpec::NoseHoover {
                t_left, t_right, ..
            }
            | ReservoirSpec::Gaussian {
                t_left, t_right, ..
            } => Some((t_left, t_right)),
            ReservoirSpec::None => None,
        }
    }

    /// Same reservoir with new end temperatures.
    pub fn with_temperatures(&self, left: f64, right: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ReservoirSpec::Langevin {
                t_left, t_right, ..
            }
            | ReservoirSpec::Extended {
                t_left, t_right, ..
            }
            | ReservoirSpec::NoseHoover {
                t_left, t_right, ..
            }
            | ReservoirSpec::Gaussian {
                t_left, t_right, ..
            } => {
                *t_left = left;
                *t_right = right;
            }
            ReservoirSpec::None => {}
        }
        out
    }
}

/// Energy changes of `H` caused by each reservoir's sub-steps during one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SubstepRecord {
    pub energy_change_left: f64,
    pub energy_change_right: f64,
}

/// Heat `(dQ_L, dQ_R)` delivered to each reservoir during a step.
pub fn reservoir_heat_increment(reservoir: &Reservoir, record: &SubstepRecord) -> (f64, f64) {
    match reservoir.spec {
        ReservoirSpec::None => (0.0, 0.0),
        _ => (-record.energy_change_left, -record.energy_change_right),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Validated reservoir bound to a lattice.
#[derive(Clone, Debug)]
pub struct Reservoir {
    spec: ReservoirSpec,
    /// Thermostated degree-of-freedom indices per side.
    left: Vec<usize>,
    right: Vec<usize>,
    left_sites: Vec<usize>,
    right_sites: Vec<usize>,
    mass: f64,
    components: usize,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be non-negative, got {v}"),
        ))
    }
}

impl Reservoir {
    pub fn new(spec: ReservoirSpec, lattice: &Lattice) -> Result<Self> {
        let n1 = lattice.length();
        let face = |i1: usize| lattice.layer(i1);
        let resolve = |field: &str, given: &Option<Vec<usize>>, default: Vec<usize>| {
            let sites = given.clone().unwrap_or(default);
            if sites.is_empty() {
                return Err(Error::invalid(field, "site set is empty"));
            }
            if let Some(&bad) = sites.iter().find(|&&s| s >= lattice.sites()) {
                return Err(Error::invalid(field, format!("site {bad} outside lattice")));
            }
            Ok(sites)
        };
        let (left_sites, right_sites) = match &spec {
            ReservoirSpec::Langevin {
                t_left,
                t_right,
                lambda_left,
                lambda_right,
                left_sites,
                right_sites,
            } => {
                positive("reservoir.t_left", *t_left)?;
                positive("reservoir.t_right", *t_right)?;
                non_negative("reservoir.lambda_left", *lambda_left)?;
                non_negative("reservoir.lambda_right", *lambda_right)?;
                (
                    resolve("reservoir.left_sites", left_sites, face(0))?,
                    resolve("reservoir.right_sites", right_sites, face(n1 - 1))?,
                )
            }
            ReservoirSpec::Extended {
                t_left,
                t_right,
                lambda_left,
                lambda_right,
                gamma_left,
                gamma_right,
            } => {
                positive("reservoir.t_left", *t_left)?;
                positive("reservoir.t_right", *t_right)?;
                non_negative("reservoir.lambda_left", *lambda_left)?;
                non_negative("reservoir.lambda_right", *lambda_right)?;
                non_negative("reservoir.gamma_left", *gamma_left)?;
                non_negative("reservoir.gamma_right", *gamma_right)?;
                if lattice.spec().sides.len() != 1 {
                    return Err(Error::invalid(
                        "reservoir.kind",
                        "extended reservoirs require a one-dimensional chain",
                    ));
                }
                (vec![0], vec![n1 - 1])
            }
            ReservoirSpec::NoseHoover {
                t_left,
                t_right,
                theta,
                g_left,
                g_right,
                left_sites,
                right_sites,
            } => {
                positive("reservoir.t_left", *t_left)?;
                positive("reservoir.t_right", *t_right)?;
                positive("reservoir.theta", *theta)?;
                if let Some(g) = g_left {
                    positive("reservoir.g_left", *g)?;
                }
                if let Some(g) = g_right {
                    positive("reservoir.g_right", *g)?;
                }
                (
                    resolve("reservoir.left_sites", left_sites, face(0))?,
                    resolve("reservoir.right_sites", right_sites, face(n1 - 1))?,
                )
            }
            ReservoirSpec::Gaussian {
                t_left,
                t_right,
                left_sites,
                right_sites,
            } => {
                positive("reservoir.t_left", *t_left)?;
                positive("reservoir.t_right", *t_right)?;
                let l = resolve("reservoir.left_sites", left_sites, face(0))?;
                let r = resolve("reservoir.right_sites", right_sites, face(n1 - 1))?;
                if l.len().min(r.len()) * lattice.components() < 2 {
                    return Err(Error::invalid(
                        "reservoir.left_sites",
                        "isokinetic regions need at least two momentum components",
                    ));
                }
                (l, r)
            }
            ReservoirSpec::None => (vec![], vec![]),
        };
        if !matches!(spec, ReservoirSpec::Extended { .. })
            && left_sites.iter().any(|s| right_sites.contains(s))
        {
            return Err(Error::invalid(
                "reservoir.right_sites",
                "left and right site sets overlap",
            ));
        }
        let nu = lattice.components();
        let expand = |sites: &[usize]| -> Vec<usize> {
            sites
                .iter()
                .flat_map(|&s| (0..nu).map(move |c| s * nu + c))
                .collect()
        };
        Ok(Self {
            left: expand(&left_sites),
            right: expand(&right_sites),
            left_sites,
            right_sites,
            spec,
            mass: lattice.mass(),
            components: nu,
        })
    }

    pub fn spec(&self) -> &ReservoirSpec {
        &self.spec
    }

    pub fn sites(&self, side: Side) -> &[usize] {
        match side {
            Side::Left => &self.left_sites,
            Side::Right => &self.right_sites,
        }
    }

    /// Planes carrying the steady current: those between the two thermostated
    /// regions, or every plane when there are none.
    pub fn transport_planes(&self, lattice: &Lattice) -> Range<usize> {
        lattice.planes_between(&self.left_sites, &self.right_sites)
    }

    fn dofs(&self, side: Side) -> &[usize] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn temperatures(&self) -> Option<(f64, f64)> {
        self.spec.temperatures()
    }

    /// Kinetic degrees of freedom `g_alpha` of a Nosé-Hoover or isokinetic region.
    pub fn degrees_of_freedom(&self, side: Side) -> f64 {
        let default = self.dofs(side).len() as f64;
        match (&self.spec, side) {
            (ReservoirSpec::NoseHoover { g_left, .. }, Side::Left) => g_left.unwrap_or(default),
            (ReservoirSpec::NoseHoover { g_right, .. }, Side::Right) => g_right.unwrap_or(default),
            _ => default,
        }
    }

    fn region_kinetic(&self, p: &[f64], side: Side) -> f64 {
        self.dofs(side).iter().map(|&i| p[i] * p[i]).sum::<f64>() / (2.0 * self.mass)
    }

    /// Auxiliary variables the reservoir needs, initialised at rest.
    pub fn initial_aux(&self) -> Aux {
        match self.spec {
            ReservoirSpec::Extended { .. } => Aux::Extended {
                r_left: vec![0.0; self.components],
                r_right: vec![0.0; self.components],
            },
            ReservoirSpec::NoseHoover { .. } => Aux::Zeta {
                zeta_left: 0.0,
                zeta_right: 0.0,
            },
            _ => Aux::None,
        }
    }

    /// Attach missing auxiliary variables and, for isokinetic regions,
    /// rescale momenta onto the constraint surface.
    pub fn prepare(&self, state: &mut SystemState) -> Result<()> {
        let wanted = self.initial_aux();
        let compatible = matches!(
            (&wanted, &state.aux),
            (Aux::None, Aux::None)
                | (Aux::Extended { .. }, Aux::Extended { .. })
                | (Aux::Zeta { .. }, Aux::Zeta { .. })
        );
        if !compatible {
            state.aux = wanted;
        }
        if let Aux::Extended { r_left, r_right } = &state.aux {
            if r_left.len() != self.components || r_right.len() != self.components {
                return Err(Error::Shape {
                    expected: self.components,
                    got: r_left.len().min(r_right.len()),
                });
            }
        }
        if matches!(self.spec, ReservoirSpec::Gaussian { .. }) {
            let mut record = SubstepRecord::default();
            self.isokinetic_rescale(&mut state.p, &mut record)?;
        }
        Ok(())
    }

    /// First reservoir half-step (before the Hamiltonian kick-drift-kick).
    pub(crate) fn pre_half(
        &self,
        state: &mut SystemState,
        h: f64,
        rng: &mut SimRng,
        record: &mut SubstepRecord,
    ) -> Result<()> {
        match self.spec {
            ReservoirSpec::Langevin { .. } => self.ou_half(&mut state.p, h, rng, record),
            ReservoirSpec::Extended { .. } => {
                self.aux_ou(state, h, rng)?;
                self.aux_kick(state, h, record)
            }
            ReservoirSpec::NoseHoover { .. } => self.nose_hoover_half(state, h, record),
            ReservoirSpec::Gaussian { .. } => self.isokinetic_rescale(&mut state.p, record),
            ReservoirSpec::None => Ok(()),
        }
    }

    /// Second reservoir half-step, mirror image of [`Reservoir::pre_half`].
    pub(crate) fn post_half(
        &self,
        state: &mut SystemState,
        h: f64,
        rng: &mut SimRng,
        record: &mut SubstepRecord,
    ) -> Result<()> {
        match self.spec {
            ReservoirSpec::Langevin { .. } => self.ou_half(&mut state.p, h, rng, record),
            ReservoirSpec::Extended { .. } => {
                self.aux_kick(state, h, record)?;
                self.aux_ou(state, h, rng)
            }
            ReservoirSpec::NoseHoover { .. } => self.nose_hoover_half(state, h, record),
            ReservoirSpec::Gaussian { .. } => self.isokinetic_rescale(&mut state.p, record),
            ReservoirSpec::None => Ok(()),
        }
    }

    /// Exact OU flow `dp = -(lambda/m) p dt + sqrt(2 lambda T) dW` over time `h`.
    fn ou_half(
        &self,
        p: &mut [f64],
        h: f64,
        rng: &mut SimRng,
        record: &mut SubstepRecord,
    ) -> Result<()> {
        let ReservoirSpec::Langevin {
            t_left,
            t_right,
            lambda_left,
            lambda_right,
            ..
        } = self.spec
        else {
            return Err(Error::WrongVariant {
                expected: "langevin",
            });
        };
        let m = self.mass;
        for (side, t, lambda) in [
            (Side::Left, t_left, lambda_left),
            (Side::Right, t_right, lambda_right),
        ] {
            let before = self.region_kinetic(p, side);
            let decay = (-lambda * h / m).exp();
            let amp = (m * t * (1.0 - decay * decay)).sqrt();
            let dofs = self.dofs(side);
            for pair in dofs.chunks(2) {
                let (z0, z1) = rng::normal_pair(rng);
                p[pair[0]] = decay * p[pair[0]] + amp * z0;
                if let Some(&i) = pair.get(1) {
                    p[i] = decay * p[i] + amp * z1;
                }
            }
            let delta = self.region_kinetic(p, side) - before;
            match side {
                Side::Left => record.energy_change_left += delta,
                Side::Right => record.energy_change_right += delta,
            }
        }
        Ok(())
    }

    /// Exact OU flow of `r` at frozen `q_end`:
    /// `dr = -gamma (r - lambda^2 q) dt + sqrt(2 gamma lambda^2 T) dW`.
    fn aux_ou(&self, state: &mut SystemState, h: f64, rng: &mut SimRng) -> Result<()> {
        let ReservoirSpec::Extended {
            t_left,
            t_right,
            lambda_left,
            lambda_right,
            gamma_left,
            gamma_right,
        } = self.spec
        else {
            return Err(Error::WrongVariant {
                expected: "extended",
            });
        };
        let Aux::Extended { r_left, r_right } = &mut state.aux else {
            return Err(Error::WrongVariant {
                expected: "extended",
            });
        };
        let nu = self.components;
        for (r, site, t, lambda, gamma) in [
            (r_left, self.left_sites[0], t_left, lambda_left, gamma_left),
            (
                r_right,
                self.right_sites[0],
                t_right,
                lambda_right,
                gamma_right,
            ),
        ] {
            let l2 = lambda * lambda;
            let decay = (-gamma * h).exp();
            let amp = (l2 * t * (1.0 - decay * decay)).sqrt();
            for c in 0..nu {
                let center = l2 * state.q[site * nu + c];
                let (z, _) = rng::normal_pair(rng);
                r[c] = center + (r[c] - center) * decay + amp * z;
            }
        }
        Ok(())
    }

    /// Momentum kick of the end sites by the auxiliary forces.
    fn aux_kick(&self, state: &mut SystemState, h: f64, record: &mut SubstepRecord) -> Result<()> {
        let Aux::Extended { r_left, r_right } = &state.aux else {
            return Err(Error::WrongVariant {
                expected: "extended",
            });
        };
        let nu = self.components;
        let m = self.mass;
        for (side, r) in [(Side::Left, r_left), (Side::Right, r_right)] {
            let site = self.sites(side)[0];
            let mut delta = 0.0;
            for c in 0..nu {
                let i = site * nu + c;
                let before = state.p[i];
                state.p[i] += h * r[c];
                delta += (state.p[i] * state.p[i] - before * before) / (2.0 * m);
            }
            match side {
                Side::Left => record.energy_change_left += delta,
                Side::Right => record.energy_change_right += delta,
            }
        }
        Ok(())
    }

    fn zeta_rate(&self, p: &[f64], side: Side) -> f64 {
        let ReservoirSpec::NoseHoover {
            t_left,
            t_right,
            theta,
            ..
        } = self.spec
        else {
            return 0.0;
        };
        let t = if side == Side::Left { t_left } else { t_right };
        let g = self.degrees_of_freedom(side);
        (2.0 * self.region_kinetic(p, side) / (g * t) - 1.0) / (theta * theta)
    }

    /// `zeta` half-update, momentum scaling `exp(-zeta h / m)`, `zeta` half-update.
    fn nose_hoover_half(
        &self,
        state: &mut SystemState,
        h: f64,
        record: &mut SubstepRecord,
    ) -> Result<()> {
        let rate_l = self.zeta_rate(&state.p, Side::Left);
        let rate_r = self.zeta_rate(&state.p, Side::Right);
        let Aux::Zeta {
            zeta_left,
            zeta_right,
        } = &mut state.aux
        else {
            return Err(Error::WrongVariant {
                expected: "nose_hoover",
            });
        };
        *zeta_left += 0.5 * h * rate_l;
        *zeta_right += 0.5 * h * rate_r;
        let (zl, zr) = (*zeta_left, *zeta_right);
        let m = self.mass;
        for (side, zeta) in [(Side::Left, zl), (Side::Right, zr)] {
            let before = self.region_kinetic(&state.p, side);
            let scale = (-zeta * h / m).exp();
            for &i in self.dofs(side) {
                state.p[i] *= scale;
            }
            let delta = before * (scale * scale - 1.0);
            match side {
                Side::Left => record.energy_change_left += delta,
                Side::Right => record.energy_change_right += delta,
            }
        }
        let rate_l = self.zeta_rate(&state.p, Side::Left);
        let rate_r = self.zeta_rate(&state.p, Side::Right);
        if let Aux::Zeta {
            zeta_left,
            zeta_right,
        } = &mut state.aux
        {
            *zeta_left += 0.5 * h * rate_l;
            *zeta_right += 0.5 * h * rate_r;
        }
        Ok(())
    }

    /// Momentum kick `p += h F`. Isokinetic regions instead follow the exact
    /// constant-force solution of `dp/dt = F - zeta(p) p`,
    /// `p(h) = (p + F s) / s'` with `s = (a/b)(cosh wh - 1) + sinh(wh)/w`,
    /// `a = p.F/p^2`, `b = w^2 = F^2/p^2`. The energy the constraint removes
    /// relative to the plain kick is booked as heat.
    pub(crate) fn kick(
        &self,
        p: &mut [f64],
        force: &[f64],
        h: f64,
        record: &mut SubstepRecord,
    ) -> Result<()> {
        if !matches!(self.spec, ReservoirSpec::Gaussian { .. }) {
            for (p, f) in p.iter_mut().zip(force) {
                *p += h * f;
            }
            return Ok(());
        }
        // along the constrained flow p.F/m = (p^2/m) s''/s', so the work done
        // by the force, and hence the heat, is (p^2/m) ln s'
        let mut constrained: Vec<(Side, Vec<f64>, f64)> = Vec::with_capacity(2);
        for side in [Side::Left, Side::Right] {
            let dofs = self.dofs(side);
            let (mut pp, mut pf, mut ff) = (0.0, 0.0, 0.0);
            for &i in dofs {
                pp += p[i] * p[i];
                pf += p[i] * force[i];
                ff += force[i] * force[i];
            }
            if pp <= 0.0 || !pp.is_finite() {
                return Err(Error::SingularConstraint { side: side.name() });
            }
            let (a, b) = (pf / pp, ff / pp);
            let w = b.sqrt();
            let x = w * h;
            let (s, ds, log_ds) = if x < 1e-4 {
                let excess = a * h + 0.5 * b * h * h + a * b * h * h * h / 6.0;
                (
                    h + 0.5 * a * h * h + b * h * h * h / 6.0,
                    1.0 + excess,
                    excess.ln_1p(),
                )
            } else {
                let ds = a / w * x.sinh() + x.cosh();
                (a / b * (x.cosh() - 1.0) + x.sinh() / w, ds, ds.ln())
            };
            let values = dofs.iter().map(|&i| (p[i] + force[i] * s) / ds).collect();
            constrained.push((side, values, -pp / self.mass * log_ds));
        }
        for (p, f) in p.iter_mut().zip(force) {
            *p += h * f;
        }
        for (side, values, heat) in constrained {
            for (&i, v) in self.dofs(side).iter().zip(values) {
                p[i] = v;
            }
            match side {
                Side::Left => record.energy_change_left += heat,
                Side::Right => record.energy_change_right += heat,
            }
        }
        Ok(())
    }

    /// Target kinetic energy `(g - 1) T / 2` of an isokinetic region. The
    /// constraint removes one degree of freedom, and with this target the
    /// Hamiltonian bulk equilibrates at `T`.
    pub fn isokinetic_target(&self, side: Side) -> f64 {
        let (tl, tr) = self.temperatures().unwrap_or((0.0, 0.0));
        let t = if side == Side::Left { tl } else { tr };
        0.5 * (self.degrees_of_freedom(side) - 1.0) * t
    }

    fn isokinetic_rescale(&self, p: &mut [f64], record: &mut SubstepRecord) -> Result<()> {
        for side in [Side::Left, Side::Right] {
            let before = self.region_kinetic(p, side);
            if before <= 0.0 || !before.is_finite() {
                return Err(Error::SingularConstraint { side: side.name() });
            }
            let target = self.isokinetic_target(side);
            let scale = (target / before).sqrt();
            for &i in self.dofs(side) {
                p[i] *= scale;
            }
            let delta = target - before;
            match side {
                Side::Left => record.energy_change_left += delta,
                Side::Right => record.energy_change_right += delta,
            }
        }
        Ok(())
    }

    pub fn kinetic_energy(&self, state: &SystemState, side: Side) -> f64 {
        self.region_kinetic(&state.p, side)
    }
}

/// Langevin drift `-lambda p / m` and noise amplitude `sqrt(2 lambda T)` per
/// momentum component; zero on bulk components.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinTerms {
    pub drift: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn langevin_terms(reservoir: &Reservoir, state: &SystemState) -> Result<LangevinTerms> {
    let ReservoirSpec::Langevin {
        t_left,
        t_right,
        lambda_left,
        lambda_right,
        ..
    } = reservoir.spec
    else {
        return Err(Error::WrongVariant {
            expected: "langevin",
        });
    };
    let mut drift = vec![0.0; state.p.len()];
    let mut noise = vec![0.0; state.p.len()];
    for (side, t, lambda) in [
        (Side::Left, t_left, lambda_left),
        (Side::Right, t_right, lambda_right),
    ] {
        for &i in reservoir.dofs(side) {
            drift[i] = -lambda * state.p[i] / reservoir.mass;
            noise[i] = (2.0 * lambda * t).sqrt();
        }
    }
    Ok(LangevinTerms { drift, noise })
}

/// Contributions of the extended (auxiliary-variable) reservoirs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedTerms {
    /// Force added to the first site (`r_L`) and last site (`r_R`).
    pub force_left: Vec<f64>,
    pub force_right: Vec<f64>,
    /// Deterministic part of `dr/dt`.
    pub r_drift_left: Vec<f64>,
    pub r_drift_right: Vec<f64>,
    /// White-noise amplitudes `sqrt(2 gamma lambda^2 T)`.
    pub noise_left: f64,
    pub noise_right: f64,
}

pub fn extended_terms(reservoir: &Reservoir, state: &SystemState) -> Result<ExtendedTerms> {
    let ReservoirSpec::Extended {
        t_left,
        t_right,
        lambda_left,
        lambda_right,
        gamma_left,
        gamma_right,
    } = reservoir.spec
    else {
        return Err(Error::WrongVariant {
            expected: "extended",
        });
    };
    let Aux::Extended { r_left, r_right } = &state.aux else {
        return Err(Error::WrongVariant {
            expected: "extended",
        });
    };
    let nu = reservoir.components;
    let drift = |r: &[f64], site: usize, lambda: f64, gamma: f64| -> Vec<f64> {
        (0..nu)
            .map(|c| -gamma * (r[c] - lambda * lambda * state.q[site * nu + c]))
            .collect()
    };
    Ok(ExtendedTerms {
        force_left: r_left.clone(),
        force_right: r_right.clone(),
        r_drift_left: drift(r_left, reservoir.left_sites[0], lambda_left, gamma_left),
        r_drift_right: drift(r_right, reservoir.right_sites[0], lambda_right, gamma_right),
        noise_left: (2.0 * gamma_left * lambda_left * lambda_left * t_left).sqrt(),
        noise_right: (2.0 * gamma_right * lambda_right * lambda_right * t_right).sqrt(),
    })
}

/// Effective chain energy after integrating out the auxiliary variables,
/// `H - lambda_L^2 q_1^2 / 2 - lambda_R^2 q_N^2 / 2`.
pub fn effective_energy(
    lattice: &Lattice,
    reservoir: &Reservoir,
    state: &SystemState,
) -> Result<f64> {
    let ReservoirSpec::Extended {
        lambda_left,
        lambda_right,
        ..
    } = reservoir.spec
    else {
        return Err(Error::WrongVariant {
            expected: "extended",
        });
    };
    let nu = reservoir.components;
    let sq = |site: usize| -> f64 {
        state.q[site * nu..(site + 1) * nu]
            .iter()
            .map(|v| v * v)
            .sum()
    };
    Ok(lattice.total_energy(state)?
        - 0.5 * lambda_left * lambda_left * sq(reservoir.left_sites[0])
        - 0.5 * lambda_right * lambda_right * sq(reservoir.right_sites[0]))
}

/// Nosé-Hoover momentum drift and feedback rates.
#[derive(Clone, Debug, PartialEq)]
pub struct NoseHooverTerms {
    /// `-zeta_alpha p_i / m` on thermostated components, zero elsewhere.
    pub drift: Vec<f64>,
    pub zeta_rate_left: f64,
    pub zeta_rate_right: f64,
}

pub fn nose_hoover_terms(reservoir: &Reservoir, state: &SystemState) -> Result<NoseHooverTerms> {
    if !matches!(reservoir.spec, ReservoirSpec::NoseHoover { .. }) {
        return Err(Error::WrongVariant {
            expected: "nose_hoover",
        });
    }
    let Aux::Zeta {
        zeta_left,
        zeta_right,
    } = state.aux
    else {
        return Err(Error::WrongVariant {
            expected: "nose_hoover",
        });
    };
    let mut drift = vec![0.0; state.p.len()];
    for (side, zeta) in [(Side::Left, zeta_left), (Side::Right, zeta_right)] {
        for &i in reservoir.dofs(side) {
            drift[i] = -zeta * state.p[i] / reservoir.mass;
        }
    }
    Ok(NoseHooverTerms {
        drift,
        zeta_rate_left: reservoir.zeta_rate(&state.p, Side::Left),
        zeta_rate_right: reservoir.zeta_rate(&state.p, Side::Right),
    })
}

/// Isokinetic multipliers `zeta_alpha = sum p.F / sum p^2` that keep each
/// region's kinetic energy constant along the flow.
pub fn gaussian_zeta(
    reservoir: &Reservoir,
    state: &SystemState,
    forces: &[f64],
) -> Result<(f64, f64)> {
    if !matches!(reservoir.spec, ReservoirSpec::Gaussian { .. }) {
        return Err(Error::WrongVariant {
            expected: "gaussian",
        });
    }
    let zeta = |side: Side| -> Result<f64> {
        let dofs = reservoir.dofs(side);
        let pp: f64 = dofs.iter().map(|&i| state.p[i] * state.p[i]).sum();
        if pp <= 0.0 {
            return Err(Error::SingularConstraint { side: side.name() });
        }
        let pf: f64 = dofs.iter().map(|&i| state.p[i] * forces[i]).sum();
        Ok(pf / pp)
    };
    Ok((zeta(Side::Left)?, zeta(Side::Right)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{EndCondition, LatticeSpec, PotentialSpec};
    use crate::rng::stream_rng;

    fn chain(n: usize) -> Lattice {
        Lattice::new(LatticeSpec::chain(n, PotentialSpec::Harmonic { k: 1.0 })).unwrap()
    }

    #[test]
    fn langevin_drift_and_noise() {
        let lat = chain(3);
        let res = Reservoir::new(ReservoirSpec::langevin(2.0, 1.0, 1.0), &lat).unwrap();
        let mut s = SystemState::zeros(&lat);
        s.p = vec![2.0, 5.0, 0.0];
        let terms = langevin_terms(&res, &s).unwrap();
        assert_eq!(terms.drift, vec![-2.0, 0.0, 0.0]);
        assert_eq!(terms.noise[0], 2.0);
        assert_eq!(terms.noise[1], 0.0);
        assert_eq!(terms.noise[2], 2.0f64.sqrt());
    }

    #[test]
    fn wrong_variant_rejected() {
        let lat = chain(3);
        let res = Reservoir::new(ReservoirSpec::None, &lat).unwrap();
        let s = SystemState::zeros(&lat);
        assert!(matches!(
            langevin_terms(&res, &s),
            Err(Error::WrongVariant { .. })
        ));
        assert!(extended_terms(&res, &s).is_err());
        assert!(nose_hoover_terms(&res, &s).is_err());
        assert!(gaussian_zeta(&res, &s, &[0.0; 3]).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        let lat = chain(3);
        assert!(Reservoir::new(ReservoirSpec::langevin(-1.0, 1.0, 1.0), &lat).is_err());
        let overlap = ReservoirSpec::Langevin {
            t_left: 1.0,
            t_right: 1.0,
            lambda_left: 1.0,
            lambda_right: 1.0,
            left_sites: Some(vec![0, 1]),
            right_sites: Some(vec![1, 2]),
        };
        assert!(Reservoir::new(overlap, &lat).is_err());
        let nh = ReservoirSpec::NoseHoover {
            t_left: 1.0,
            t_right: 1.0,
            theta: 0.0,
            g_left: None,
            g_right: None,
            left_sites: None,
            right_sites: None,
        };
        assert!(Reservoir::new(nh, &lat).is_err());
        // single scalar site cannot host an isokinetic region
        let gauss = ReservoirSpec::Gaussian {
            t_left: 1.0,
            t_right: 1.0,
            left_sites: None,
            right_sites: None,
        };
        assert!(Reservoir::new(gauss, &lat).is_err());
    }

    #[test]
    fn extended_requires_chain() {
        let spec = LatticeSpec {
            sides: vec![3, 2],
            ..LatticeSpec::chain(3, PotentialSpec::Harmonic { k: 1.0 })
        };
        let lat = Lattice::new(spec).unwrap();
        let ext = ReservoirSpec::Extended {
            t_left: 1.0,
            t_right: 1.0,
            lambda_left: 0.5,
            lambda_right: 0.5,
            gamma_left: 1.0,
            gamma_right: 1.0,
        };
        assert!(Reservoir::new(ext, &lat).is_err());
    }

    #[test]
    fn frozen_auxiliary_without_relaxation() {
        let lat = chain(2);
        let res = Reservoir::new(
            ReservoirSpec::Extended {
                t_left: 1.0,
                t_right: 1.0,
                lambda_left: 0.0,
                lambda_right: 0.0,
                gamma_left: 0.0,
                gamma_right: 0.0,
            },
            &lat,
        )
        .unwrap();
        let mut s = SystemState::zeros(&lat);
        s.aux = Aux::Extended {
            r_left: vec![0.3],
            r_right: vec![-0.7],
        };
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            res.aux_ou(&mut s, 0.01, &mut rng).unwrap();
        }
        assert_eq!(
            s.aux,
            Aux::Extended {
                r_left: vec![0.3],
                r_right: vec![-0.7]
            }
        );
    }

    #[test]
    fn effective_energy_two_sites() {
        let lat = Lattice::new(
            LatticeSpec::chain(2, PotentialSpec::Harmonic { k: 1.0 }).with_ends(EndCondition::Free),
        )
        .unwrap();
        let res = Reservoir::new(
            ReservoirSpec::Extended {
                t_left: 1.0,
                t_right: 1.0,
                lambda_left: 0.5,
                lambda_right: 1.0,
                gamma_left: 1.0,
                gamma_right: 1.0,
            },
            &lat,
        )
        .unwrap();
        let mut s = SystemState::zeros(&lat);
        s.aux = res.initial_aux();
        s.q = vec![1.0, 2.0];
        s.p = vec![1.0, 0.0];
        // H = 0.5 + 0.5 = 1; H_eff = 1 - 0.25/2 - 1*4/2 = -1.125
        assert_eq!(lat.total_energy(&s).unwrap(), 1.0);
        assert_eq!(effective_energy(&lat, &res, &s).unwrap(), -1.125);
        let terms = extended_terms(&res, &s).unwrap();
        assert_eq!(terms.r_drift_left, vec![0.25]);
        assert_eq!(terms.r_drift_right, vec![2.0]);
        assert_eq!(terms.noise_left, (2.0f64 * 0.25).sqrt());
    }

    #[test]
    fn nose_hoover_fixed_point() {
        let lat = chain(4);
        let res = Reservoir::new(
            ReservoirSpec::NoseHoover {
                t_left: 2.0,
                t_right: 1.0,
                theta: 1.0,
                g_left: None,
                g_right: None,
                left_sites: Some(vec![0, 1]),
                right_sites: Some(vec![3]),
            },
            &lat,
        )
        .unwrap();
        let mut s = SystemState::zeros(&lat);
        s.aux = Aux::Zeta {
            zeta_left: 0.5,
            zeta_right: 0.0,
        };
        // left: g=2, T=2 -> sum p^2/2 = 2 ; right: g=1, T=1 -> p^2/2 = 1/2
        s.p = vec![2.0f64.sqrt(), 2.0f64.sqrt(), 0.3, 1.0];
        let terms = nose_hoover_terms(&res, &s).unwrap();
        assert!(terms.zeta_rate_left.abs() < 1e-15);
        assert!(terms.zeta_rate_right.abs() < 1e-15);
        assert_eq!(terms.drift[0], -0.5 * 2.0f64.sqrt());
        assert_eq!(terms.drift[2], 0.0);
    }

    #[test]
    fn gaussian_multiplier() {
        let spec = LatticeSpec {
            components: 2,
            ..LatticeSpec::chain(2, PotentialSpec::Harmonic { k: 1.0 })
        };
        let lat = Lattice::new(spec).unwrap();
        let res = Reservoir::new(
            ReservoirSpec::Gaussian {
                t_left: 1.0,
                t_right: 1.0,
                left_sites: None,
                right_sites: None,
            },
            &lat,
        )
        .unwrap();
        let mut s = SystemState::zeros(&lat);
        s.p = vec![1.0, 0.0, 0.0, 1.0];
        let (zl, zr) = gaussian_zeta(&res, &s, &[2.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(zl, 2.0);
        assert_eq!(zr, 0.0);
        s.p = vec![0.0; 4];
        assert!(matches!(
            gaussian_zeta(&res, &s, &[0.0; 4]),
            Err(Error::SingularConstraint { .. })
        ));
    }

    #[test]
    fn isokinetic_kick_solves_constrained_flow() {
        let spec = LatticeSpec {
            components: 2,
            ..LatticeSpec::chain(2, PotentialSpec::Harmonic { k: 1.0 })
        };
        let lat = Lattice::new(spec).unwrap();
        let res = Reservoir::new(
            ReservoirSpec::Gaussian {
                t_left: 1.0,
                t_right: 1.0,
                left_sites: None,
                right_sites: None,
            },
            &lat,
        )
        .unwrap();
        let p0 = vec![0.7, -0.4, 0.2, 1.1];
        let force = [1.3, 0.5, -2.0, 0.3];
        for h in [1e-6, 0.05, 0.3] {
            let mut p = p0.clone();
            let mut record = SubstepRecord::default();
            res.kick(&mut p, &force, h, &mut record).unwrap();
            // RK4 on dp/dt = F - (p.F / p^2) p, each site a separate region
            let mut y = p0.clone();
            let rhs = |y: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; 4];
                for r in [0..2, 2..4] {
                    let pf: f64 = r.clone().map(|i| y[i] * force[i]).sum();
                    let pp: f64 = r.clone().map(|i| y[i] * y[i]).sum();
                    for i in r {
                        out[i] = force[i] - pf / pp * y[i];
                    }
                }
                out
            };
            let work = |y: &[f64]| -> f64 { (0..2).map(|i| y[i] * force[i]).sum() };
            let mut heat = 0.0;
            let n = 2000;
            let dt = h / n as f64;
            for _ in 0..n {
                let k1 = rhs(&y);
                let y2: Vec<f64> = (0..4).map(|i| y[i] + 0.5 * dt * k1[i]).collect();
                let k2 = rhs(&y2);
                let y3: Vec<f64> = (0..4).map(|i| y[i] + 0.5 * dt * k2[i]).collect();
                let k3 = rhs(&y3);
                let y4: Vec<f64> = (0..4).map(|i| y[i] + dt * k3[i]).collect();
                let k4 = rhs(&y4);
                heat -= dt / 6.0 * (work(&y) + 2.0 * work(&y2) + 2.0 * work(&y3) + work(&y4));
                for i in 0..4 {
                    y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            for i in 0..4 {
                assert!(
                    (p[i] - y[i]).abs() < 1e-10,
                    "h={h} dof {i}: {} vs {}",
                    p[i],
                    y[i]
                );
            }
            let scale = h.max(1e-3);
            assert!(
                (record.energy_change_left - heat).abs() < 1e-9 * scale,
                "h={h}: {} vs {heat}",
                record.energy_change_left
            );
            let k0 = 0.5 * (p0[0] * p0[0] + p0[1] * p0[1]);
            assert!(
                (res.kinetic_energy(
                    &SystemState {
                        p: p.clone(),
                        ..SystemState::zeros(&lat)
                    },
                    Side::Left
                ) - k0)
                    .abs()
                    < 1e-14
            );
        }
    }

    #[test]
    fn isolated_heat_is_zero() {
        let lat = chain(3);
        let res = Reservoir::new(ReservoirSpec::None, &lat).unwrap();
        let rec = SubstepRecord {
            energy_change_left: 1.0,
            energy_change_right: 2.0,
        };
        assert_eq!(reservoir_heat_increment(&res, &rec), (0.0, 0.0));
    }

    #[test]
    fn unknown_tag_fails_to_parse() {
        let r: std::result::Result<ReservoirSpec, _> =
            serde_json::from_str(r#"{"kind":"berendsen"}"#);
        assert!(r.is_err());
        let r: ReservoirSpec = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(r.tag(), "none");
    }
}
