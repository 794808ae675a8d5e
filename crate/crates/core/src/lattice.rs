//! Lattice geometry, potentials, energies and forces of the oscillator crystal.
//!
//! Sites are stored row-major with the longitudinal coordinate `i1` fastest:
//! `site = i1 + N1 * i2`. Each site carries `components` displacement and
//! momentum components, flattened into `q` and `p` of length
//! `sites * components`.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Pair or on-site potential as a function of a displacement `x`.
///
/// Vector displacements enter through `|x|^2`; `Rotator` is scalar only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `k x^2 / 2`
    Harmonic { k: f64 },
    /// `k2 x^2 + k4 x^4`
    FpuBeta { k2: f64, k4: f64 },
    /// `omega2 x^2 / 2`
    PinnedQuadratic { omega2: f64 },
    /// `a2 x^2 / 2 + a4 x^4 / 4`
    Quartic { a2: f64, a4: f64 },
    /// `j (1 - cos x)`
    Rotator { j: f64 },
}

impl PotentialSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PotentialSpec::Harmonic { .. } => "harmonic",
            PotentialSpec::FpuBeta { .. } => "fpu_beta",
            PotentialSpec::PinnedQuadratic { .. } => "pinned_quadratic",
            PotentialSpec::Quartic { .. } => "quartic",
            PotentialSpec::Rotator { .. } => "rotator",
        }
    }

    #[inline]
    pub fn value_scalar(&self, x: f64) -> f64 {
        match *self {
            PotentialSpec::Harmonic { k } => 0.5 * k * x * x,
            PotentialSpec::FpuBeta { k2, k4 } => {
                let x2 = x * x;
                k2 * x2 + k4 * x2 * x2
            }
            PotentialSpec::PinnedQuadratic { omega2 } => 0.5 * omega2 * x * x,
            PotentialSpec::Quartic { a2, a4 } => {
                let x2 = x * x;
                0.5 * a2 * x2 + 0.25 * a4 * x2 * x2
            }
            PotentialSpec::Rotator { j } => j * (1.0 - x.cos()),
        }
    }

    /// `V'(x)` for scalar displacements.
    #[inline]
    pub fn deriv_scalar(&self, x: f64) -> f64 {
        match *self {
            PotentialSpec::Rotator { j } => j * x.sin(),
            _ => self.radial_coeff(x * x) * x,
        }
    }

    /// `c(s)` with `grad V(x) = c(|x|^2) x` for the radial variants.
    #[inline]
    fn radial_coeff(&self, s: f64) -> f64 {
        match *self {
            PotentialSpec::Harmonic { k } => k,
            PotentialSpec::FpuBeta { k2, k4 } => 2.0 * k2 + 4.0 * k4 * s,
            PotentialSpec::PinnedQuadratic { omega2 } => omega2,
            PotentialSpec::Quartic { a2, a4 } => a2 + a4 * s,
            PotentialSpec::Rotator { .. } => unreachable!("rotator is scalar"),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        if x.len() == 1 {
            return self.value_scalar(x[0]);
        }
        let s: f64 = x.iter().map(|v| v * v).sum();
        match *self {
            PotentialSpec::Harmonic { k } => 0.5 * k * s,
            PotentialSpec::FpuBeta { k2, k4 } => k2 * s + k4 * s * s,
            PotentialSpec::PinnedQuadratic { omega2 } => 0.5 * omega2 * s,
            PotentialSpec::Quartic { a2, a4 } => 0.5 * a2 * s + 0.25 * a4 * s * s,
            PotentialSpec::Rotator { .. } => unreachable!("rotator is scalar"),
        }
    }

    /// Writes `grad V(x)` into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        if x.len() == 1 {
            out[0] = self.deriv_scalar(x[0]);
            return;
        }
        let s: f64 = x.iter().map(|v| v * v).sum();
        let c = self.radial_coeff(s);
        for (o, v) in out.iter_mut().zip(x) {
            *o = c * v;
        }
    }

    /// Curvature at the origin.
    pub fn curvature(&self) -> f64 {
        match *self {
            PotentialSpec::Harmonic { k } => k,
            PotentialSpec::FpuBeta { k2, .. } => 2.0 * k2,
            PotentialSpec::PinnedQuadratic { omega2 } => omega2,
            PotentialSpec::Quartic { a2, .. } => a2,
            PotentialSpec::Rotator { j } => j,
        }
    }

    /// Curvature if the potential is exactly quadratic.
    pub fn quadratic_stiffness(&self) -> Option<f64> {
        match *self {
            PotentialSpec::Harmonic { k } => Some(k),
            PotentialSpec::FpuBeta { k2, k4 } if k4 == 0.0 => Some(2.0 * k2),
            PotentialSpec::PinnedQuadratic { omega2 } => Some(omega2),
            PotentialSpec::Quartic { a2, a4 } if a4 == 0.0 => Some(a2),
            _ => None,
        }
    }

    /// `V(x) -> inf` as `|x| -> inf`.
    pub fn is_confining(&self) -> bool {
        match *self {
            PotentialSpec::Harmonic { k } => k > 0.0,
            PotentialSpec::FpuBeta { k2, k4 } => k4 > 0.0 || (k4 == 0.0 && k2 > 0.0),
            PotentialSpec::PinnedQuadratic { omega2 } => omega2 > 0.0,
            PotentialSpec::Quartic { a2, a4 } => a4 > 0.0 || (a4 == 0.0 && a2 > 0.0),
            PotentialSpec::Rotator { .. } => false,
        }
    }

    /// Bounded potential on a compact (angular) configuration space.
    pub fn is_compact(&self) -> bool {
        matches!(self, PotentialSpec::Rotator { .. })
    }

    fn coefficients(&self) -> Vec<f64> {
        match *self {
            PotentialSpec::Harmonic { k } => vec![k],
            PotentialSpec::FpuBeta { k2, k4 } => vec![k2, k4],
            PotentialSpec::PinnedQuadratic { omega2 } => vec![omega2],
            PotentialSpec::Quartic { a2, a4 } => vec![a2, a4],
            PotentialSpec::Rotator { j } => vec![j],
        }
    }

    fn validate(&self, field: &str, components: usize) -> Result<()> {
        if self.coefficients().iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(field, "non-finite coefficient"));
        }
        if self.is_compact() && components != 1 {
            return Err(Error::invalid(
                field,
                "rotator requires scalar displacements",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndCondition {
    Free,
    /// Phantom sites clamped at `q = 0` bonded to the first and last layer.
    #[default]
    Fixed,
    Periodic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransverseBoundary {
    #[default]
    Free,
    Periodic,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// `[N1]` or `[N1, N2]`; `N1` is the length along the heat flow.
    pub sides: Vec<usize>,
    #[serde(default = "one")]
    pub mass: f64,
    /// Displacement components per site.
    #[serde(default = "one_usize")]
    pub components: usize,
    pub pair: PotentialSpec,
    #[serde(default)]
    pub onsite: Option<PotentialSpec>,
    /// Sites carrying the on-site potential; all sites when absent.
    #[serde(default)]
    pub pinned_sites: Option<Vec<usize>>,
    #[serde(default)]
    pub ends: EndCondition,
    #[serde(default)]
    pub transverse: TransverseBoundary,
}

impl LatticeSpec {
    pub fn chain(n: usize, pair: PotentialSpec) -> Self {
        Self {
            sides: vec![n],
            mass: 1.0,
            components: 1,
            pair,
            onsite: None,
            pinned_sites: None,
            ends: EndCondition::Fixed,
            transverse: TransverseBoundary::Free,
        }
    }

    pub fn with_onsite(mut self, onsite: PotentialSpec) -> Self {
        self.onsite = Some(onsite);
        self
    }

    pub fn with_ends(mut self, ends: EndCondition) -> Self {
        self.ends = ends;
        self
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.mass = mass;
        self
    }

    pub fn length(&self) -> usize {
        self.sides[0]
    }

    pub fn cross_section(&self) -> usize {
        self.sides[1..].iter().product()
    }

    pub fn site_count(&self) -> usize {
        self.sides.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    /// Site `i`.
    pub from: usize,
    /// Site `i + 1_k`.
    pub to: usize,
    /// Lattice direction `k` (0 = longitudinal).
    pub direction: usize,
}

/// Validated lattice with precomputed topology.
#[derive(Clone, Debug)]
pub struct Lattice {
    spec: LatticeSpec,
    sites: usize,
    bonds: Vec<Bond>,
    /// Sites bonded to a clamped phantom site; a site appears once per wall.
    walls: Vec<usize>,
    pinned: Vec<bool>,
    /// Indices into `bonds` crossing plane `j` (between layers `j` and `j+1`).
    planes: Vec<Vec<usize>>,
}

/// Auxiliary thermostat variables carried with the phase-space point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aux {
    #[default]
    None,
    Extended {
        r_left: Vec<f64>,
        r_right: Vec<f64>,
    },
    Zeta {
        zeta_left: f64,
        zeta_right: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(default)]
    pub aux: Aux,
    #[serde(default)]
    pub time: f64,
}

impl SystemState {
    pub fn zeros(lattice: &Lattice) -> Self {
        let n = lattice.dof();
        Self {
            q: vec![0.0; n],
            p: vec![0.0; n],
            aux: Aux::None,
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        let aux_ok = match &self.aux {
            Aux::None => true,
            Aux::Extended { r_left, r_right } => {
                r_left.iter().chain(r_right).all(|v| v.is_finite())
            }
            Aux::Zeta {
                zeta_left,
                zeta_right,
            } => zeta_left.is_finite() && zeta_right.is_finite(),
        };
        aux_ok && self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

impl Lattice {
    pub fn new(spec: LatticeSpec) -> Result<Self> {
        let d = spec.sides.len();
        if !(1..=2).contains(&d) {
            return Err(Error::invalid("lattice.sides", "dimension must be 1 or 2"));
        }
        if spec.sides.contains(&0) {
            return Err(Error::invalid("lattice.sides", "sides must be positive"));
        }
        if !(spec.mass > 0.0 && spec.mass.is_finite()) {
            return Err(Error::invalid("lattice.mass", "mass must be positive"));
        }
        if spec.components == 0 {
            return Err(Error::invalid("lattice.components", "must be at least 1"));
        }
        spec.pair.validate("lattice.pair", spec.components)?;
        if let Some(u) = &spec.onsite {
            u.validate("lattice.onsite", spec.components)?;
        }

        let n1 = spec.sides[0];
        let n2 = if d == 2 { spec.sides[1] } else { 1 };
        let sites = n1 * n2;
        let mut bonds = Vec::new();
        let mut walls = Vec::new();
        let mut planes = Vec::new();
        let long_periodic = spec.ends == EndCondition::Periodic && n1 > 2;
        let plane_count = if long_periodic {
            n1
        } else {
            n1.saturating_sub(1)
        };
        planes.resize(plane_count, Vec::new());
        for i2 in 0..n2 {
            for i1 in 0..n1 {
                let site = i1 + n1 * i2;
                let next = if i1 + 1 < n1 {
                    Some(i1 + 1)
                } else if long_periodic {
                    Some(0)
                } else {
                    None
                };
                if let Some(j1) = next {
                    planes[i1].push(bonds.len());
                    bonds.push(Bond {
                        from: site,
                        to: j1 + n1 * i2,
                        direction: 0,
                    });
                }
            }
            if spec.ends == EndCondition::Fixed {
                walls.push(n1 * i2);
                walls.push(n1 - 1 + n1 * i2);
            }
        }
        if d == 2 {
            let trans_periodic = spec.transverse == TransverseBoundary::Periodic && n2 > 2;
            for i2 in 0..n2 {
                let next = if i2 + 1 < n2 {
                    Some(i2 + 1)
                } else if trans_periodic {
                    Some(0)
                } else {
                    None
                };
                if let Some(j2) = next {
                    for i1 in 0..n1 {
                        bonds.push(Bond {
                            from: i1 + n1 * i2,
                            to: i1 + n1 * j2,
                            direction: 1,
                        });
                    }
                }
            }
        }

        let mut pinned = vec![spec.onsite.is_some(); sites];
        if let (Some(_), Some(list)) = (&spec.onsite, &spec.pinned_sites) {
            pinned.iter_mut().for_each(|p| *p = false);
            for &s in list {
                if s >= sites {
                    return Err(Error::invalid(
                        "lattice.pinned_sites",
                        format!("site {s} outside lattice of {sites} sites"),
                    ));
                }
                pinned[s] = true;
            }
        }

        Ok(Self {
            spec,
            sites,
            bonds,
            walls,
            pinned,
            planes,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn components(&self) -> usize {
        self.spec.components
    }

    /// Total number of displacement components.
    pub fn dof(&self) -> usize {
        self.sites * self.spec.components
    }

    pub fn mass(&self) -> f64 {
        self.spec.mass
    }

    pub fn length(&self) -> usize {
        self.spec.sides[0]
    }

    pub fn cross_section(&self) -> usize {
        self.spec.cross_section()
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn walls(&self) -> &[usize] {
        &self.walls
    }

    pub fn plane_count(&self) -> usize {
        self.planes.len()
    }

    /// Planes strictly between two site sets: plane `j` joins layers `j` and
    /// `j + 1`. All planes when either set is empty or they interleave.
    pub fn planes_between(&self, left: &[usize], right: &[usize]) -> Range<usize> {
        let n1 = self.length();
        let inner = left.iter().map(|s| s % n1).max();
        let outer = right.iter().map(|s| s % n1).min();
        match (inner, outer) {
            (Some(l), Some(r)) if l < r => l..r,
            _ => 0..self.plane_count(),
        }
    }

    pub(crate) fn plane_bonds(&self, plane: usize) -> &[usize] {
        &self.planes[plane]
    }

    pub fn is_pinned(&self, site: usize) -> bool {
        self.pinned[site]
    }

    /// `(i1, i2)` lattice coordinates of a site.
    pub fn coords(&self, site: usize) -> (usize, usize) {
        let n1 = self.length();
        (site % n1, site / n1)
    }

    /// Sites in layer `i1`.
    pub fn layer(&self, i1: usize) -> Vec<usize> {
        let n1 = self.length();
        (0..self.cross_section()).map(|i2| i1 + n1 * i2).collect()
    }

    /// No on-site potential and no walls: total momentum is conserved.
    pub fn is_translation_invariant(&self) -> bool {
        !self.pinned.iter().any(|&p| p) && self.walls.is_empty()
    }

    /// True when every potential is quadratic.
    pub fn is_quadratic(&self) -> bool {
        self.spec.pair.quadratic_stiffness().is_some()
            && self
                .spec
                .onsite
                .is_none_or(|u| u.quadratic_stiffness().is_some())
    }

    fn check_confinement(&self) -> Result<()> {
        let mut pots = vec![self.spec.pair];
        pots.extend(self.spec.onsite);
        for u in pots {
            if !(u.is_confining() || u.is_compact()) {
                return Err(Error::NonConfining(u.name().into()));
            }
        }
        Ok(())
    }

    /// Gershgorin bound on the largest harmonic frequency.
    pub fn max_frequency(&self) -> f64 {
        let mut row = vec![0.0; self.sites];
        let kp = self.spec.pair.curvature().abs();
        for b in &self.bonds {
            row[b.from] += 2.0 * kp;
            row[b.to] += 2.0 * kp;
        }
        for &w in &self.walls {
            row[w] += kp;
        }
        if let Some(u) = &self.spec.onsite {
            for (s, r) in row.iter_mut().enumerate() {
                if self.pinned[s] {
                    *r += u.curvature().abs();
                }
            }
        }
        (row.into_iter().fold(0.0, f64::max) / self.spec.mass).sqrt()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dof() {
            return Err(Error::Shape {
                expected: self.dof(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn check_state(&self, state: &SystemState) -> Result<()> {
        self.check_len(state.q.len())?;
        self.check_len(state.p.len())
    }

    pub fn kinetic_energy(&self, p: &[f64]) -> f64 {
        p.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.spec.mass)
    }

    /// Energy of one bond `q_to - q_from`.
    fn bond_energy(&self, q: &[f64], b: &Bond) -> f64 {
        let nu = self.spec.components;
        if nu == 1 {
            return self.spec.pair.value_scalar(q[b.to] - q[b.from]);
        }
        let x: Vec<f64> = (0..nu)
            .map(|c| q[b.to * nu + c] - q[b.from * nu + c])
            .collect();
        self.spec.pair.value(&x)
    }

    fn wall_energy(&self, q: &[f64], site: usize) -> f64 {
        let nu = self.spec.components;
        self.spec.pair.value(&q[site * nu..(site + 1) * nu])
    }

    fn onsite_energy(&self, q: &[f64], site: usize) -> f64 {
        match (&self.spec.onsite, self.pinned[site]) {
            (Some(u), true) => {
                let nu = self.spec.components;
                u.value(&q[site * nu..(site + 1) * nu])
            }
            _ => 0.0,
        }
    }

    pub fn potential_energy(&self, q: &[f64]) -> Result<f64> {
        self.check_len(q.len())?;
        Ok(self.potential_energy_unchecked(q))
    }

    pub(crate) fn potential_energy_unchecked(&self, q: &[f64]) -> f64 {
        let bonds: f64 = self.bonds.iter().map(|b| self.bond_energy(q, b)).sum();
        let walls: f64 = self.walls.iter().map(|&w| self.wall_energy(q, w)).sum();
        let onsite: f64 = (0..self.sites).map(|s| self.onsite_energy(q, s)).sum();
        bonds + walls + onsite
    }

    /// `sum p^2 / 2m + sum_bonds V + sum_i U_i`, each bond once.
    pub fn total_energy(&self, state: &SystemState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.kinetic_energy(&state.p) + self.potential_energy_unchecked(&state.q))
    }

    /// Local energy: kinetic + on-site + half of every existing incident bond
    /// (all of a wall bond).
    pub fn local_energy(&self, state: &SystemState, site: usize) -> Result<f64> {
        self.check_state(state)?;
        if site >= self.sites {
            return Err(Error::SiteOutOfRange {
                site,
                sites: self.sites,
            });
        }
        Ok(self.local_energy_unchecked(&state.q, &state.p, site))
    }

    pub(crate) fn local_energy_unchecked(&self, q: &[f64], p: &[f64], site: usize) -> f64 {
        let nu = self.spec.components;
        let kinetic = p[site * nu..(site + 1) * nu]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / (2.0 * self.spec.mass);
        let bonds: f64 = self
            .bonds
            .iter()
            .filter(|b| b.from == site || b.to == site)
            .map(|b| self.bond_energy(q, b))
            .sum();
        let walls: f64 = self
            .walls
            .iter()
            .filter(|&&w| w == site)
            .map(|&w| self.wall_energy(q, w))
            .sum();
        // the phantom wall site holds no energy, so its bond belongs wholly to the site
        kinetic + self.onsite_energy(q, site) + 0.5 * bonds + walls
    }

    /// `-grad V(Q)` for every site, on-site and wall terms included.
    pub fn forces(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_len(q.len())?;
        let mut out = vec![0.0; q.len()];
        self.forces_into(q, &mut out);
        Ok(out)
    }

    /// Hot-path force evaluation; `out` is overwritten.
    pub fn forces_into(&self, q: &[f64], out: &mut [f64]) {
        debug_assert_eq!(q.len(), self.dof());
        debug_assert_eq!(out.len(), self.dof());
        if self.spec.components == 1 {
            match self.spec.pair {
                PotentialSpec::Harmonic { k } => self.scalar_pair_forces(q, out, |x| k * x),
                PotentialSpec::FpuBeta { k2, k4 } => {
                    self.scalar_pair_forces(q, out, |x| (2.0 * k2 + 4.0 * k4 * x * x) * x)
                }
                PotentialSpec::PinnedQuadratic { omega2 } => {
                    self.scalar_pair_forces(q, out, |x| omega2 * x)
                }
                PotentialSpec::Quartic { a2, a4 } => {
                    self.scalar_pair_forces(q, out, |x| (a2 + a4 * x * x) * x)
                }
                PotentialSpec::Rotator { j } => self.scalar_pair_forces(q, out, |x| j * x.sin()),
            }
            if let Some(u) = self.spec.onsite {
                for (s, f) in out.iter_mut().enumerate() {
                    if self.pinned[s] {
                        *f -= u.deriv_scalar(q[s]);
                    }
                }
            }
        } else {
            self.vector_forces(q, out);
        }
    }

    #[inline]
    fn scalar_pair_forces<F: Fn(f64) -> f64>(&self, q: &[f64], out: &mut [f64], dv: F) {
        out.iter_mut().for_each(|f| *f = 0.0);
        for b in &self.bonds {
            // V(q_to - q_from): force on `from` is +V', on `to` is -V'
            let g = dv(q[b.to] - q[b.from]);
            out[b.from] += g;
            out[b.to] -= g;
        }
        for &w in &self.walls {
            out[w] -= dv(q[w]);
        }
    }

    fn vector_forces(&self, q: &[f64], out: &mut [f64]) {
        let nu = self.spec.components;
        out.iter_mut().for_each(|f| *f = 0.0);
        let mut x = vec![0.0; nu];
        let mut g = vec![0.0; nu];
        for b in &self.bonds {
            for c in 0..nu {
                x[c] = q[b.to * nu + c] - q[b.from * nu + c];
            }
            self.spec.pair.gradient(&x, &mut g);
            for c in 0..nu {
                out[b.from * nu + c] += g[c];
                out[b.to * nu + c] -= g[c];
            }
        }
        for &w in &self.walls {
            self.spec.pair.gradient(&q[w * nu..(w + 1) * nu], &mut g);
            for c in 0..nu {
                out[w * nu + c] -= g[c];
            }
        }
        if let Some(u) = self.spec.onsite {
            for s in 0..self.sites {
                if self.pinned[s] {
                    u.gradient(&q[s * nu..(s + 1) * nu], &mut g);
                    for c in 0..nu {
                        out[s * nu + c] -= g[c];
                    }
                }
            }
        }
    }

    /// Hessian of the potential at `Q = 0`; requires quadratic potentials.
    pub fn stiffness_matrix(&self) -> Result<DMatrix<f64>> {
        let pair = self
            .spec
            .pair
            .quadratic_stiffness()
            .ok_or_else(|| Error::NotQuadratic(self.spec.pair.name().into()))?;
        let onsite = match &self.spec.onsite {
            Some(u) => u
                .quadratic_stiffness()
                .ok_or_else(|| Error::NotQuadratic(u.name().into()))?,
            None => 0.0,
        };
        let nu = self.spec.components;
        let n = self.dof();
        let mut k = DMatrix::zeros(n, n);
        for b in &self.bonds {
            for c in 0..nu {
                let (i, j) = (b.from * nu + c, b.to * nu + c);
                k[(i, i)] += pair;
                k[(j, j)] += pair;
                k[(i, j)] -= pair;
                k[(j, i)] -= pair;
            }
        }
        for &w in &self.walls {
            for c in 0..nu {
                k[(w * nu + c, w * nu + c)] += pair;
            }
        }
        for s in 0..self.sites {
            if self.pinned[s] {
                for c in 0..nu {
                    k[(s * nu + c, s * nu + c)] += onsite;
                }
            }
        }
        Ok(k)
    }
}

/// Overdamped-Langevin (Metropolis-adjusted) sweeps used to equilibrate `Q`.
pub const GIBBS_BURN_IN_SWEEPS: usize = 4000;

/// Draw a phase-space point from `exp(-H/T)`.
///
/// Momenta are exact Gaussians of variance `m T`. For quadratic potentials
/// the displacements are sampled exactly from the normal modes of the
/// stiffness matrix; otherwise `GIBBS_BURN_IN_SWEEPS` Metropolis-adjusted
/// overdamped-Langevin moves are run from the harmonic approximation.
/// Translation-invariant models are sampled with the center of mass fixed at
/// the origin.
pub fn sample_gibbs<R: Rng + ?Sized>(
    lattice: &Lattice,
    temperature: f64,
    rng: &mut R,
) -> Result<SystemState> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    lattice.check_confinement()?;
    let n = lattice.dof();
    let m = lattice.mass();
    let mut state = SystemState::zeros(lattice);
    let sd = (m * temperature).sqrt();
    rng::fill_normals(rng, &mut state.p);
    state.p.iter_mut().for_each(|v| *v *= sd);

    if lattice.is_quadratic() {
        state.q = sample_gaussian_q(lattice, temperature, rng)?;
    } else {
        state.q = if lattice.spec.pair.is_compact() {
            (0..n)
                .map(|_| std::f64::consts::PI * (2.0 * rng::unit(rng) - 1.0))
                .collect()
        } else {
            vec![0.0; n]
        };
        mala(
            lattice,
            temperature,
            &mut state.q,
            GIBBS_BURN_IN_SWEEPS,
            rng,
        );
        if lattice.spec.pair.is_compact() {
            for v in state.q.iter_mut() {
                *v -= std::f64::consts::TAU * (*v / std::f64::consts::TAU).round();
            }
        }
    }
    if lattice.is_translation_invariant() && !lattice.spec.pair.is_compact() {
        remove_mean(lattice, &mut state.q);
    }
    Ok(state)
}

fn remove_mean(lattice: &Lattice, x: &mut [f64]) {
    let nu = lattice.components();
    for c in 0..nu {
        let mean = x.iter().skip(c).step_by(nu).sum::<f64>() / lattice.sites() as f64;
        x.iter_mut().skip(c).step_by(nu).for_each(|v| *v -= mean);
    }
}

/// Zero total momentum, as required for microcanonical runs of
/// momentum-conserving models.
pub fn remove_total_momentum(lattice: &Lattice, p: &mut [f64]) {
    remove_mean(lattice, p);
}

fn sample_gaussian_q<R: Rng + ?Sized>(
    lattice: &Lattice,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let k = lattice.stiffness_matrix()?;
    let n = k.nrows();
    let eig = SymmetricEigen::new(k);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let mut z = vec![0.0; n];
    rng::fill_normals(rng, &mut z);
    let mut q = vec![0.0; n];
    for (mode, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-12 * scale {
            if lam < -1e-12 * scale {
                return Err(Error::NonConfining("negative stiffness mode".into()));
            }
            continue;
        }
        let amp = (temperature / lam).sqrt() * z[mode];
        for (i, qi) in q.iter_mut().enumerate() {
            *qi += amp * eig.eigenvectors[(i, mode)];
        }
    }
    Ok(q)
}

/// Metropolis-adjusted Langevin moves targeting `exp(-V(Q)/T)`.
fn mala<R: Rng + ?Sized>(
    lattice: &Lattice,
    temperature: f64,
    q: &mut [f64],
    sweeps: usize,
    rng: &mut R,
) {
    let n = q.len();
    let mut force = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_force = vec![0.0; n];
    let mut noise = vec![0.0; n];
    // step h: proposal q' = q + h F / T + sqrt(2h) xi
    let omega2 = lattice.max_frequency().powi(2) * lattice.mass();
    let mut h = 0.2 * temperature / omega2.max(1e-12);
    let mut energy = lattice.potential_energy_unchecked(q);
    lattice.forces_into(q, &mut force);
    let mut accepted = 0usize;
    for sweep in 0..sweeps {
        rng::fill_normals(rng, &mut noise);
        let amp = (2.0 * h).sqrt();
        for i in 0..n {
            trial[i] = q[i] + h * force[i] / temperature + amp * noise[i];
        }
        let trial_energy = lattice.potential_energy_unchecked(&trial);
        lattice.forces_into(&trial, &mut trial_force);
        // log q(x|x') - log q(x'|x)
        let mut log_ratio = -(trial_energy - energy) / temperature;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for i in 0..n {
            let a = trial[i] - q[i] - h * force[i] / temperature;
            let b = q[i] - trial[i] - h * trial_force[i] / temperature;
            fwd += a * a;
            bwd += b * b;
        }
        log_ratio += (fwd - bwd) / (4.0 * h);
        if log_ratio >= 0.0 || rng::unit(rng) < log_ratio.exp() {
            q.copy_from_slice(&trial);
            force.copy_from_slice(&trial_force);
            energy = trial_energy;
            accepted += 1;
        }
        // adapt the step during the first half only
        if sweep < sweeps / 2 && (sweep + 1) % 50 == 0 {
            let rate = accepted as f64 / 50.0;
            h *= if rate > 0.65 {
                1.2
            } else if rate < 0.45 {
                0.8
            } else {
                1.0
            };
            accepted = 0;
        }
    }
}
