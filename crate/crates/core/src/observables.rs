//! Microscopic heat flux, kinetic temperature and entropy production, with
//! block-averaged error bars.
//!
//! Sign convention: a positive bond or plane flux carries energy toward
//! increasing `i1`; reservoir heats `Phi_L`, `Phi_R` are positive when energy
//! enters the reservoir. In a stationary state with `T_L > T_R` the plane
//! fluxes and `Phi_R` are positive and `Phi_L` is negative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Bond, Lattice, SystemState};

/// Default number of blocks for error bars.
pub const DEFAULT_BLOCKS: usize = 32;

/// Minimum number of blocks behind any reported standard error.
pub const MIN_BLOCKS: usize = 16;

/// Relative change of the standard error under block doubling that marks
/// blocks as shorter than the correlation time.
pub const CORRELATION_FLAG_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub mean: f64,
    pub stderr: f64,
    pub blocks: usize,
    /// Standard error recomputed with blocks twice as long.
    pub stderr_doubled: f64,
    /// Doubling the block length changed the error by more than 20 %.
    pub correlated: bool,
}

fn stderr_of(means: &[f64]) -> f64 {
    let b = means.len() as f64;
    let mean = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

/// Non-overlapping block means of `values` split into `blocks` equal blocks;
/// a trailing remainder shorter than one block is dropped from the error
/// estimate but kept in the mean.
pub fn block_stats(values: &[f64], blocks: usize) -> Result<BlockStats> {
    if blocks < 4 || values.len() < 2 * blocks {
        return Err(Error::SeriesTooShort {
            len: values.len(),
            blocks,
        });
    }
    let len = values.len() / blocks;
    let means: Vec<f64> = values
        .chunks_exact(len)
        .take(blocks)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    let doubled: Vec<f64> = means.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect();
    let stderr = stderr_of(&means);
    let stderr_doubled = stderr_of(&doubled);
    let correlated = if stderr > 0.0 {
        (stderr_doubled - stderr).abs() / stderr > CORRELATION_FLAG_THRESHOLD
    } else {
        stderr_doubled > 0.0
    };
    Ok(BlockStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        stderr,
        blocks,
        stderr_doubled,
        correlated,
    })
}

/// Uniformly sampled scalar time series with its block statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub start_time: f64,
    pub interval: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
    pub stats: BlockStats,
}

impl ObservableSeries {
    pub fn new(
        name: impl Into<String>,
        start_time: f64,
        interval: f64,
        values: Vec<f64>,
        blocks: usize,
    ) -> Result<Self> {
        let stats = block_stats(&values, blocks)?;
        Ok(Self {
            name: name.into(),
            start_time,
            interval,
            values,
            stats,
        })
    }

    pub fn mean(&self) -> f64 {
        self.stats.mean
    }

    pub fn stderr(&self) -> f64 {
        self.stats.stderr
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |k| self.start_time + k as f64 * self.interval)
    }

    /// Two-column CSV `time,<name>`.
    pub fn write_csv<W: Write>(&self, mut out: W, unit: &str) -> Result<()> {
        writeln!(out, "time[natural units],{}[{}]", self.name, unit)?;
        for (t, v) in self.times().zip(&self.values) {
            writeln!(out, "{t},{v}")?;
        }
        Ok(())
    }
}

/// Per-component mean and standard error of a vector observable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub blocks: usize,
}

/// Streaming block accumulator for vector observables whose total sample
/// count is known in advance.
#[derive(Clone, Debug)]
pub struct BlockAccumulator {
    width: usize,
    block_len: usize,
    blocks: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
    total: Vec<f64>,
    seen: usize,
}

impl BlockAccumulator {
    pub fn new(width: usize, expected_samples: usize, blocks: usize) -> Self {
        let blocks = blocks.max(1);
        Self {
            width,
            block_len: (expected_samples / blocks).max(1),
            blocks,
            sums: vec![0.0; width * blocks],
            counts: vec![0; blocks],
            total: vec![0.0; width],
            seen: 0,
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.width);
        let b = (self.seen / self.block_len).min(self.blocks - 1);
        let row = &mut self.sums[b * self.width..(b + 1) * self.width];
        for ((s, t), v) in row.iter_mut().zip(self.total.iter_mut()).zip(sample) {
            *s += v;
            *t += v;
        }
        self.counts[b] += 1;
        self.seen += 1;
    }

    pub fn samples(&self) -> usize {
        self.seen
    }

    pub fn finish(&self) -> ProfileStats {
        let filled: Vec<usize> = (0..self.blocks).filter(|&b| self.counts[b] > 0).collect();
        let n = self.seen.max(1) as f64;
        let mean: Vec<f64> = self.total.iter().map(|t| t / n).collect();
        let stderr = (0..self.width)
            .map(|w| {
                if filled.len() < 2 {
                    return f64::NAN;
                }
                let means: Vec<f64> = filled
                    .iter()
                    .map(|&b| self.sums[b * self.width + w] / self.counts[b] as f64)
                    .collect();
                stderr_of(&means)
            })
            .collect();
        ProfileStats {
            mean,
            stderr,
            blocks: filled.len(),
        }
    }
}

/// Mergeable count/mean/second-moment accumulator (Chan et al. update).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        Self {
            count: self.count + other.count,
            mean: self.mean + delta * other.count as f64 / n,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Delete-one jackknife over `n` groups: `estimator(None)` is the full
/// estimate, `estimator(Some(i))` the estimate without group `i`.
/// Returns `(full, stderr)`.
pub fn jackknife(n: usize, estimator: impl Fn(Option<usize>) -> f64) -> (f64, f64) {
    let full = estimator(None);
    if n < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = (0..n).map(|i| estimator(Some(i))).collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|x| (x - mean).powi(2)).sum();
    (full, ((n - 1) as f64 / n as f64 * ss).sqrt())
}

/// Energy current through bond `from -> to`:
/// `f(q_to - q_from) . (p_from + p_to) / 2m` with `f = -grad V`.
#[inline]
pub(crate) fn bond_current(lattice: &Lattice, q: &[f64], p: &[f64], b: &Bond) -> f64 {
    let nu = lattice.components();
    let m = lattice.mass();
    let pair = lattice.spec().pair;
    if nu == 1 {
        let f = -pair.deriv_scalar(q[b.to] - q[b.from]);
        return f * (p[b.from] + p[b.to]) / (2.0 * m);
    }
    let x: Vec<f64> = (0..nu)
        .map(|c| q[b.to * nu + c] - q[b.from * nu + c])
        .collect();
    let mut g = vec![0.0; nu];
    pair.gradient(&x, &mut g);
    (0..nu)
        .map(|c| -g[c] * (p[b.from * nu + c] + p[b.to * nu + c]))
        .sum::<f64>()
        / (2.0 * m)
}

/// Flux `Psi_k(i)` through the bond from `site` to its neighbour in
/// direction `direction`.
pub fn bond_flux(
    lattice: &Lattice,
    state: &SystemState,
    site: usize,
    direction: usize,
) -> Result<f64> {
    lattice.check_state(state)?;
    let bond = lattice
        .bonds()
        .iter()
        .find(|b| b.from == site && b.direction == direction)
        .ok_or(Error::MissingBond { site, direction })?;
    Ok(bond_current(lattice, &state.q, &state.p, bond))
}

/// Heat flow `Phi(j)` through the plane between layers `j` and `j + 1`
/// (0-based), summed over the cross-section.
pub fn plane_flux(lattice: &Lattice, state: &SystemState, plane: usize) -> Result<f64> {
    lattice.check_state(state)?;
    if plane >= lattice.plane_count() {
        return Err(Error::PlaneOutOfRange {
            plane,
            planes: lattice.plane_count(),
        });
    }
    Ok(plane_flux_unchecked(lattice, &state.q, &state.p, plane))
}

fn plane_flux_unchecked(lattice: &Lattice, q: &[f64], p: &[f64], plane: usize) -> f64 {
    lattice
        .plane_bonds(plane)
        .iter()
        .map(|&b| bond_current(lattice, q, p, &lattice.bonds()[b]))
        .sum()
}

/// All plane fluxes at once.
pub fn plane_fluxes_into(lattice: &Lattice, q: &[f64], p: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), lattice.plane_count());
    let bonds = lattice.bonds();
    if lattice.cross_section() == 1 && lattice.components() == 1 {
        for (j, o) in out.iter_mut().enumerate() {
            *o = bond_current(lattice, q, p, &bonds[lattice.plane_bonds(j)[0]]);
        }
        return;
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = plane_flux_unchecked(lattice, q, p, j);
    }
}

/// Net energy current into `site` from its lattice bonds.
fn inflow(lattice: &Lattice, q: &[f64], p: &[f64], site: usize) -> f64 {
    lattice
        .bonds()
        .iter()
        .map(|b| {
            if b.to == site {
                bond_current(lattice, q, p, b)
            } else if b.from == site {
                -bond_current(lattice, q, p, b)
            } else {
                0.0
            }
        })
        .sum()
}

/// Site touches a reservoir face or a wall.
fn is_boundary_site(lattice: &Lattice, site: usize) -> bool {
    let (i1, _) = lattice.coords(site);
    let periodic = lattice.spec().ends == crate::lattice::EndCondition::Periodic;
    !periodic && (i1 == 0 || i1 + 1 == lattice.length())
}

/// Maximum over a uniformly spaced trajectory of
/// `|dh_i/dt - (inflow through bonds)|`, with `dh_i/dt` from centred
/// differences; the discrepancy is `O(dt^2)`.
pub fn continuity_residual(
    lattice: &Lattice,
    trajectory: &[SystemState],
    dt: f64,
    site: usize,
) -> Result<f64> {
    if site >= lattice.sites() {
        return Err(Error::SiteOutOfRange {
            site,
            sites: lattice.sites(),
        });
    }
    if is_boundary_site(lattice, site) {
        return Err(Error::invalid(
            "site",
            "continuity holds only for bulk sites away from reservoirs",
        ));
    }
    if trajectory.len() < 3 {
        return Err(Error::SeriesTooShort {
            len: trajectory.len(),
            blocks: 3,
        });
    }
    for s in trajectory {
        lattice.check_state(s)?;
    }
    let h: Vec<f64> = trajectory
        .iter()
        .map(|s| lattice.local_energy_unchecked(&s.q, &s.p, site))
        .collect();
    let residual = (1..trajectory.len() - 1)
        .map(|k| {
            let dh = (h[k + 1] - h[k - 1]) / (2.0 * dt);
            let s = &trajectory[k];
            (dh - inflow(lattice, &s.q, &s.p, site)).abs()
        })
        .fold(0.0, f64::max);
    Ok(residual)
}

/// Instantaneous `p^2 / (m nu)` averaged over each layer's cross-section.
pub fn layer_temperatures_into(lattice: &Lattice, p: &[f64], out: &mut [f64]) {
    let n1 = lattice.length();
    let nu = lattice.components();
    let a = lattice.cross_section();
    out.iter_mut().for_each(|v| *v = 0.0);
    let norm = 1.0 / (lattice.mass() * (nu * a) as f64);
    for (site, chunk) in p.chunks_exact(nu).enumerate() {
        let e: f64 = chunk.iter().map(|v| v * v).sum();
        out[site % n1] += e * norm;
    }
}

/// Time- and cross-section-averaged kinetic temperature per layer.
pub fn kinetic_temperature_profile(lattice: &Lattice, states: &[SystemState]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; lattice.length()];
    let mut buf = vec![0.0; lattice.length()];
    for s in states {
        lattice.check_state(s)?;
        layer_temperatures_into(lattice, &s.p, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
    }
    let n = states.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Reservoir entropy production `Phi_L / T_L + Phi_R / T_R`.
#[inline]
pub fn entropy_production(phi_left: f64, phi_right: f64, t_left: f64, t_right: f64) -> f64 {
    phi_left / t_left + phi_right / t_right
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Aux, EndCondition, LatticeSpec, PotentialSpec, TransverseBoundary};
    use crate::rng::{fill_normals, stream_rng};

    fn free_chain(n: usize) -> Lattice {
        Lattice::new(
            LatticeSpec::chain(n, PotentialSpec::Harmonic { k: 1.0 }).with_ends(EndCondition::Free),
        )
        .unwrap()
    }

    #[test]
    fn bond_flux_hand_value() {
        let lat = free_chain(2);
        let s = SystemState {
            q: vec![0.0, 1.0],
            p: vec![1.0, 1.0],
            aux: Aux::None,
            time: 0.0,
        };
        // bond stretched, both moving right: the left particle gains energy,
        // so energy flows toward decreasing i
        assert_eq!(bond_flux(&lat, &s, 0, 0).unwrap(), -1.0);
        assert!(matches!(
            bond_flux(&lat, &s, 1, 0),
            Err(Error::MissingBond { .. })
        ));
        assert_eq!(plane_flux(&lat, &s, 0).unwrap(), -1.0);
        assert!(plane_flux(&lat, &s, 1).is_err());
    }

    #[test]
    fn zero_momenta_zero_flux() {
        let lat = free_chain(4);
        let mut s = SystemState::zeros(&lat);
        s.q = vec![0.3, -1.0, 2.0, 0.1];
        for j in 0..3 {
            assert_eq!(plane_flux(&lat, &s, j).unwrap(), 0.0);
        }
    }

    #[test]
    fn plane_flux_is_additive_over_rows() {
        let row = free_chain(4);
        let spec = LatticeSpec {
            sides: vec![4, 2],
            transverse: TransverseBoundary::Free,
            ..row.spec().clone()
        };
        let grid = Lattice::new(spec).unwrap();
        let mut rng = stream_rng(4, 0);
        let mut s1 = SystemState::zeros(&row);
        fill_normals(&mut rng, &mut s1.q);
        fill_normals(&mut rng, &mut s1.p);
        let mut s2 = SystemState::zeros(&grid);
        for r in 0..2 {
            s2.q[r * 4..(r + 1) * 4].copy_from_slice(&s1.q);
            s2.p[r * 4..(r + 1) * 4].copy_from_slice(&s1.p);
        }
        for j in 0..3 {
            let a = plane_flux(&row, &s1, j).unwrap();
            let b = plane_flux(&grid, &s2, j).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_production_substitution() {
        assert_eq!(entropy_production(-1.0, 1.0, 2.0, 1.0), 0.5);
    }

    #[test]
    fn constant_series_has_zero_error() {
        let s = block_stats(&vec![3.0; 1024], 32).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.stderr, 0.0);
        assert!(!s.correlated);
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(
            block_stats(&[1.0; 10], 16),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn iid_stderr_matches_sqrt_n() {
        let n = 1 << 16;
        let mut rng = stream_rng(21, 0);
        let mut x = vec![0.0; n];
        fill_normals(&mut rng, &mut x);
        let s = block_stats(&x, 32).unwrap();
        let expected = 1.0 / (n as f64).sqrt();
        assert!((s.stderr / expected - 1.0).abs() < 0.2, "{}", s.stderr);
    }

    #[test]
    fn ar1_flagged_until_blocks_exceed_correlation_time() {
        // x_{k+1} = rho x_k + sqrt(1 - rho^2) z ; integrated correlation time ~ 200 samples
        let rho: f64 = 0.99;
        let n = 1 << 20;
        let mut rng = stream_rng(8, 0);
        let mut z = vec![0.0; n];
        fill_normals(&mut rng, &mut z);
        let mut x = vec![0.0; n];
        for k in 1..n {
            x[k] = rho * x[k - 1] + (1.0 - rho * rho).sqrt() * z[k];
        }
        // blocks of 16 samples: far shorter than the correlation time
        let short = block_stats(&x, n / 16).unwrap();
        assert!(short.correlated);
        assert!(short.stderr_doubled > 1.2 * short.stderr);
        // blocks of 16384 samples: the two estimates agree up to sampling noise
        let long = block_stats(&x, 64).unwrap();
        assert!((long.stderr_doubled / long.stderr - 1.0).abs() < 0.35);
    }

    #[test]
    fn running_moments_merge_is_order_independent() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = RunningMoments::default();
        data.iter().for_each(|&x| all.push(x));
        let mut a = RunningMoments::default();
        let mut b = RunningMoments::default();
        data[..37].iter().for_each(|&x| a.push(x));
        data[37..].iter().for_each(|&x| b.push(x));
        let ab = a.merge(&b);
        let ba = b.merge(&a);
        assert_eq!(ab.count, all.count);
        assert!((ab.mean - all.mean).abs() < 1e-14 && (ba.mean - all.mean).abs() < 1e-14);
        assert!((ab.m2 - all.m2).abs() < 1e-12 && (ba.m2 - all.m2).abs() < 1e-12);
    }

    #[test]
    fn block_accumulator_matches_scalar_blocks() {
        let n = 640;
        let xs: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64).collect();
        let mut acc = BlockAccumulator::new(1, n, 32);
        xs.iter().for_each(|&x| acc.push(&[x]));
        let prof = acc.finish();
        let scalar = block_stats(&xs, 32).unwrap();
        assert!((prof.mean[0] - scalar.mean).abs() < 1e-12);
        assert!((prof.stderr[0] - scalar.stderr).abs() < 1e-12);
    }

    #[test]
    fn static_state_has_zero_residual() {
        let lat = free_chain(5);
        let traj = vec![SystemState::zeros(&lat); 5];
        assert_eq!(continuity_residual(&lat, &traj, 0.01, 2).unwrap(), 0.0);
        assert!(continuity_residual(&lat, &traj, 0.01, 0).is_err());
    }

    #[test]
    fn layer_temperatures_average_cross_section() {
        let spec = LatticeSpec {
            sides: vec![2, 2],
            ..LatticeSpec::chain(2, PotentialSpec::Harmonic { k: 1.0 })
        };
        let lat = Lattice::new(spec).unwrap();
        let mut s = SystemState::zeros(&lat);
        s.p = vec![1.0, 2.0, 3.0, 0.0];
        let prof = kinetic_temperature_profile(&lat, &[s]).unwrap();
        assert_eq!(prof, vec![5.0, 2.0]);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let (m, se) = jackknife(x.len(), |skip| {
            let v: Vec<f64> = x
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != skip)
                .map(|(_, v)| *v)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        });
        assert!((m - 4.0).abs() < 1e-12);
        let var = x.iter().map(|v| (v - 4.0).powi(2)).sum::<f64>() / 4.0;
        assert!((se - (var / 5.0).sqrt()).abs() < 1e-12);
    }
}
