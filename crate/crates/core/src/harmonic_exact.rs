//! Exact stationary states of harmonic lattices driven by linear reservoirs.
//!
//! With quadratic potentials the Langevin and auxiliary-variable reservoirs
//! give a linear SDE `dX = A X dt + B dW` for `X = (Q, P, r)`. Its
//! stationary law is a centered Gaussian whose covariance solves the
//! Lyapunov equation `A C + C A^T + B B^T = 0`, computed here by a dense
//! Bartels-Stewart solve on the real Schur form of `A`.

use nalgebra::{DMatrix, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{EndCondition, Lattice, LatticeSpec};
use crate::thermostats::{Reservoir, ReservoirSpec, Side};

/// Relative Lyapunov residual `||A C + C A^T + B B^T|| / ||B B^T||` accepted.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
const REFINEMENT_STEPS: usize = 4;

/// One Langevin bath acting on a single momentum component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathCoupling {
    pub dof: usize,
    pub lambda: f64,
    pub temperature: f64,
    /// Face reservoir this bath belongs to; `None` for bulk baths.
    pub side: Option<Side>,
}

/// Auxiliary force variable of an extended reservoir.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxCoupling {
    /// Row of `r` in the state vector.
    pub row: usize,
    /// Chain component it acts on.
    pub dof: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub side: Side,
}

/// `dX = A X dt + B dW` with `X = (Q, P, r)`.
#[derive(Clone, Debug)]
pub struct LinearSdeModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Number of lattice degrees of freedom: `Q` occupies rows `0..dof`,
    /// `P` rows `dof..2 dof` and the auxiliary variables the rest.
    pub dof: usize,
    pub baths: Vec<BathCoupling>,
    pub aux: Vec<AuxCoupling>,
    lattice: Lattice,
}

/// Stationary covariance `C = <X X^T>`.
#[derive(Clone, Debug)]
pub struct StationaryCovariance {
    pub c: DMatrix<f64>,
    /// Certified relative residual of the Lyapunov equation.
    pub residual: f64,
}

fn hamiltonian_block(lattice: &Lattice) -> Result<DMatrix<f64>> {
    let n = lattice.dof();
    let k = lattice.stiffness_matrix()?;
    let m = lattice.mass();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0 / m;
        for j in 0..n {
            a[(n + i, j)] = -k[(i, j)];
        }
    }
    Ok(a)
}

impl LinearSdeModel {
    /// Harmonic lattice with an arbitrary set of single-component Langevin baths.
    pub fn langevin(lattice: &Lattice, baths: &[BathCoupling]) -> Result<Self> {
        let n = lattice.dof();
        let m = lattice.mass();
        let mut a = hamiltonian_block(lattice)?;
        let mut b = DMatrix::zeros(2 * n, n);
        for bath in baths {
            if bath.dof >= n {
                return Err(Error::SiteOutOfRange {
                    site: bath.dof,
                    sites: n,
                });
            }
            if !(bath.lambda >= 0.0 && bath.temperature >= 0.0) {
                return Err(Error::invalid(
                    "reservoir",
                    "coupling and temperature must be non-negative",
                ));
            }
            a[(n + bath.dof, n + bath.dof)] -= bath.lambda / m;
            b[(n + bath.dof, bath.dof)] = (2.0 * bath.lambda * bath.temperature).sqrt();
        }
        Ok(Self {
            a,
            b,
            dof: n,
            baths: baths.to_vec(),
            aux: Vec::new(),
            lattice: lattice.clone(),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn p_row(&self, dof: usize) -> usize {
        self.dof + dof
    }

    /// Real parts of the spectrum of `A`, largest first.
    pub fn max_real_eigenvalue(&self) -> Result<f64> {
        let (_, t) = schur(&self.a)?;
        Ok(eigen_real_parts(&t)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Assemble the linear SDE for a harmonic lattice and a Langevin or
/// extended reservoir.
pub fn build_linear_model(lattice: &Lattice, reservoir: &ReservoirSpec) -> Result<LinearSdeModel> {
    if !lattice.is_quadratic() {
        let name = match lattice.spec().onsite {
            Some(u) if u.quadratic_stiffness().is_none() => u.name(),
            _ => lattice.spec().pair.name(),
        };
        return Err(Error::NotQuadratic(name.into()));
    }
    let res = Reservoir::new(reservoir.clone(), lattice)?;
    let nu = lattice.components();
    match *reservoir {
        ReservoirSpec::Langevin {
            t_left,
            t_right,
            lambda_left,
            lambda_right,
            ..
        } => {
            let mut baths = Vec::new();
            for (side, t, lambda) in [
                (Side::Left, t_left, lambda_left),
                (Side::Right, t_right, lambda_right),
            ] {
                for &s in res.sites(side) {
                    for c in 0..nu {
                        baths.push(BathCoupling {
                            dof: s * nu + c,
                            lambda,
                            temperature: t,
                            side: Some(side),
                        });
                    }
                }
            }
            LinearSdeModel::langevin(lattice, &baths)
        }
        ReservoirSpec::Extended {
            t_left,
            t_right,
            lambda_left,
            lambda_right,
            gamma_left,
            gamma_right,
        } => {
            let n = lattice.dof();
            let dim = 2 * n + 2 * nu;
            let mut a = DMatrix::zeros(dim, dim);
            a.view_mut((0, 0), (2 * n, 2 * n))
                .copy_from(&hamiltonian_block(lattice)?);
            let mut b = DMatrix::zeros(dim, 2 * nu);
            let mut aux = Vec::new();
            for (k, (side, t, lambda, gamma)) in [
                (Side::Left, t_left, lambda_left, gamma_left),
                (Side::Right, t_right, lambda_right, gamma_right),
            ]
            .into_iter()
            .enumerate()
            {
                let site = res.sites(side)[0];
                for c in 0..nu {
                    let row = 2 * n + k * nu + c;
                    let dof = site * nu + c;
                    let l2 = lambda * lambda;
                    a[(n + dof, row)] += 1.0;
                    a[(row, row)] = -gamma;
                    a[(row, dof)] = gamma * l2;
                    b[(row, k * nu + c)] = (2.0 * gamma * l2 * t).sqrt();
                    aux.push(AuxCoupling {
                        row,
                        dof,
                        lambda,
                        gamma,
                        temperature: t,
                        side,
                    });
                }
            }
            Ok(LinearSdeModel {
                a,
                b,
                dof: n,
                baths: Vec::new(),
                aux,
                lattice: lattice.clone(),
            })
        }
        _ => Err(Error::WrongVariant {
            expected: "langevin or extended",
        }),
    }
}

fn schur(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let s =
        Schur::try_new(a.clone(), f64::EPSILON, 1000 * n.max(10)).ok_or(Error::NotConverged {
            iterations: 1000 * n.max(10),
            residual: f64::NAN,
        })?;
    Ok(s.unpack())
}

/// Diagonal block sizes of a quasi-triangular matrix.
fn blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        if k + 1 < n && t[(k + 1, k)] != 0.0 {
            out.push((k, 2));
            k += 2;
        } else {
            out.push((k, 1));
            k += 1;
        }
    }
    out
}

fn eigen_real_parts(t: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, size) in blocks(t) {
        if size == 1 {
            out.push(t[(k, k)]);
        } else {
            let (a, b, c, d) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
            let tr = a + d;
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc >= 0.0 {
                out.push(0.5 * tr + disc.sqrt());
                out.push(0.5 * tr - disc.sqrt());
            } else {
                out.push(0.5 * tr);
                out.push(0.5 * tr);
            }
        }
    }
    out
}

/// Solver for `A X + X A^T = F` reusing one Schur factorization of `A`.
pub struct LyapunovSolver {
    a: DMatrix<f64>,
    u: DMatrix<f64>,
    t: DMatrix<f64>,
    blocks: Vec<(usize, usize)>,
    max_real: f64,
}

impl LyapunovSolver {
    /// Factor `A`; fails unless every eigenvalue has negative real part.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let (u, t) = schur(a)?;
        let max_real = eigen_real_parts(&t)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let scale = a.amax().max(f64::MIN_POSITIVE);
        if !(max_real < -1e-12 * scale) {
            return Err(Error::NotHurwitz { max_real });
        }
        let blocks = blocks(&t);
        Ok(Self {
            a: a.clone(),
            u,
            t,
            blocks,
            max_real,
        })
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.max_real
    }

    /// Solve `T Y + Y T^T = G` for quasi-upper-triangular `T`.
    fn solve_triangular(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = &self.t;
        let n = t.nrows();
        let mut y = DMatrix::<f64>::zeros(n, n);
        for &(j0, q) in self.blocks.iter().rev() {
            for &(i0, p) in self.blocks.iter().rev() {
                // rhs = G_ij - sum_{l > i} T_il Y_lj - sum_{l > j} Y_il T_jl^T
                let mut rhs = [[0.0f64; 2]; 2];
                for (di, row) in rhs.iter_mut().enumerate().take(p) {
                    for (dj, v) in row.iter_mut().enumerate().take(q) {
                        let (i, j) = (i0 + di, j0 + dj);
                        let mut s = g[(i, j)];
                        for l in i0 + p..n {
                            s -= t[(i, l)] * y[(l, j)];
                        }
                        for l in j0 + q..n {
                            s -= y[(i, l)] * t[(j, l)];
                        }
                        *v = s;
                    }
                }
                // (I_q (x) T_ii + T_jj (x) I_p) vec(Y_ij) = vec(rhs), column-major
                let dim = p * q;
                let mut m = DMatrix::<f64>::zeros(dim, dim);
                let mut v = nalgebra::DVector::<f64>::zeros(dim);
                for dj in 0..q {
                    for di in 0..p {
                        let r = dj * p + di;
                        v[r] = rhs[di][dj];
                        for dk in 0..p {
                            m[(r, dj * p + dk)] += t[(i0 + di, i0 + dk)];
                        }
                        for dl in 0..q {
                            m[(r, dl * p + di)] += t[(j0 + dj, j0 + dl)];
                        }
                    }
                }
                let sol = m.lu().solve(&v).ok_or(Error::IllConditioned {
                    residual: f64::INFINITY,
                })?;
                for dj in 0..q {
                    for di in 0..p {
                        y[(i0 + di, j0 + dj)] = sol[dj * p + di];
                    }
                }
            }
        }
        Ok(y)
    }

    fn solve_once(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let g = self.u.transpose() * f * &self.u;
        let y = self.solve_triangular(&g)?;
        let x = &self.u * y * self.u.transpose();
        Ok(0.5 * (&x + x.transpose()))
    }

    fn residual(&self, x: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
        let ax = &self.a * x;
        &ax + ax.transpose() + q
    }

    /// Solve `A C + C A^T + Q = 0` with iterative refinement and a
    /// certified relative residual.
    pub fn solve(&self, q: &DMatrix<f64>) -> Result<StationaryCovariance> {
        let norm_q = q.norm();
        if norm_q == 0.0 {
            return Ok(StationaryCovariance {
                c: DMatrix::zeros(q.nrows(), q.ncols()),
                residual: 0.0,
            });
        }
        let mut c = self.solve_once(&(-q))?;
        let mut r = self.residual(&c, q);
        let mut rel = r.norm() / norm_q;
        for _ in 0..REFINEMENT_STEPS {
            if rel < 0.01 * RESIDUAL_TOLERANCE {
                break;
            }
            let dc = self.solve_once(&(-&r))?;
            let candidate = &c + dc;
            let r_new = self.residual(&candidate, q);
            let rel_new = r_new.norm() / norm_q;
            if rel_new >= rel {
                break;
            }
            c = candidate;
            r = r_new;
            rel = rel_new;
        }
        if !(rel < RESIDUAL_TOLERANCE) {
            return Err(Error::IllConditioned { residual: rel });
        }
        Ok(StationaryCovariance { c, residual: rel })
    }
}

/// Stationary covariance of `model`.
pub fn stationary_covariance(model: &LinearSdeModel) -> Result<StationaryCovariance> {
    let solver = LyapunovSolver::new(&model.a)?;
    solver.solve(&(&model.b * model.b.transpose()))
}

/// Exact stationary averages derived from the covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactObservables {
    /// Mean energy current through each plane.
    pub plane_flux: Vec<f64>,
    /// Plane flux averaged over planes.
    pub mean_flux: f64,
    /// Kinetic temperature `<p^2>/m` per layer.
    pub temperature: Vec<f64>,
    /// Finite-size conductivity `(flux / A) L / (T_L - T_R)`; absent when `T_L = T_R`.
    pub kappa: Option<f64>,
    /// Heat per unit time delivered to the left and right reservoirs.
    pub heat_left: f64,
    pub heat_right: f64,
}

/// Evaluate flux, temperature profile, conductivity and reservoir heats.
pub fn exact_observables(model: &LinearSdeModel, cov: &StationaryCovariance) -> ExactObservables {
    let lat = &model.lattice;
    let c = &cov.c;
    let n = model.dof;
    let nu = lat.components();
    let m = lat.mass();
    let k = lat
        .spec()
        .pair
        .quadratic_stiffness()
        .expect("linear model has a quadratic pair potential");
    // <f(q_to - q_from) (p_from + p_to)> / (2m) with f(x) = -k x
    let bond = |from: usize, to: usize| -> f64 {
        let mut s = 0.0;
        for comp in 0..nu {
            let (a, b) = (from * nu + comp, to * nu + comp);
            let cross = c[(b, n + a)] + c[(b, n + b)] - c[(a, n + a)] - c[(a, n + b)];
            s += -k * cross / (2.0 * m);
        }
        s
    };
    let planes = lat.plane_count();
    let plane_flux: Vec<f64> = (0..planes)
        .map(|j| {
            lat.plane_bonds(j)
                .iter()
                .map(|&bi| {
                    let b = &lat.bonds()[bi];
                    bond(b.from, b.to)
                })
                .sum()
        })
        .collect();
    let face = |side: Side| -> Vec<usize> {
        let baths = model
            .baths
            .iter()
            .filter(|b| b.side == Some(side))
            .map(|b| b.dof);
        let aux = model.aux.iter().filter(|a| a.side == side).map(|a| a.dof);
        baths.chain(aux).map(|d| d / nu).collect()
    };
    let transport = lat.planes_between(&face(Side::Left), &face(Side::Right));
    let mean_flux = if transport.is_empty() {
        0.0
    } else {
        plane_flux[transport.clone()].iter().sum::<f64>() / transport.len() as f64
    };
    let temperature: Vec<f64> = (0..lat.length())
        .map(|i1| {
            let sites = lat.layer(i1);
            let sum: f64 = sites
                .iter()
                .flat_map(|&s| (0..nu).map(move |comp| s * nu + comp))
                .map(|d| c[(n + d, n + d)] / m)
                .sum();
            sum / (sites.len() * nu) as f64
        })
        .collect();

    let mut heat_left = 0.0;
    let mut heat_right = 0.0;
    for bath in &model.baths {
        // d<H>/dt from this bath is (lambda/m)(T - <p^2>/m)
        let input = bath.lambda / m * (bath.temperature - c[(n + bath.dof, n + bath.dof)] / m);
        match bath.side {
            Some(Side::Left) => heat_left -= input,
            Some(Side::Right) => heat_right -= input,
            None => {}
        }
    }
    for aux in &model.aux {
        // power of the auxiliary force on the end momentum
        let input = c[(aux.row, n + aux.dof)] / m;
        match aux.side {
            Side::Left => heat_left -= input,
            Side::Right => heat_right -= input,
        }
    }
    let (tl, tr) = end_temperatures(model);
    let delta = tl - tr;
    let kappa = (delta != 0.0)
        .then(|| mean_flux / lat.cross_section() as f64 * lat.length() as f64 / delta);
    ExactObservables {
        plane_flux,
        mean_flux,
        temperature,
        kappa,
        heat_left,
        heat_right,
    }
}

fn end_temperatures(model: &LinearSdeModel) -> (f64, f64) {
    let find = |side: Side| {
        model
            .baths
            .iter()
            .find(|b| b.side == Some(side))
            .map(|b| b.temperature)
            .or_else(|| {
                model
                    .aux
                    .iter()
                    .find(|a| a.side == side)
                    .map(|a| a.temperature)
            })
            .unwrap_or(0.0)
    };
    (find(Side::Left), find(Side::Right))
}

/// Build, solve and evaluate in one call.
pub fn oracle(lattice_spec: &LatticeSpec, reservoir: &ReservoirSpec) -> Result<ExactObservables> {
    let lattice = Lattice::new(lattice_spec.clone())?;
    let model = build_linear_model(&lattice, reservoir)?;
    let cov = stationary_covariance(&model)?;
    Ok(exact_observables(&model, &cov))
}

/// Parameters of a chain with a Langevin reservoir on every site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfConsistentSpec {
    pub chain: LatticeSpec,
    pub t_left: f64,
    pub t_right: f64,
    /// Coupling of the two end reservoirs.
    pub lambda_end: f64,
    /// Coupling of every interior reservoir.
    pub lambda_bulk: f64,
    /// Convergence threshold on the largest net bulk heat exchange.
    pub tolerance: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_damping() -> f64 {
    0.5
}

fn default_max_iterations() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistentProfile {
    /// Reservoir temperatures, ends included.
    pub temperatures: Vec<f64>,
    /// Kinetic temperatures of the sites.
    pub kinetic: Vec<f64>,
    pub flux: f64,
    pub iterations: usize,
    /// Largest net heat exchange of an interior reservoir at exit.
    pub max_exchange: f64,
}

/// Find interior reservoir temperatures at which no interior reservoir
/// exchanges net heat with the chain.
pub fn self_consistent_profile(spec: &SelfConsistentSpec) -> Result<SelfConsistentProfile> {
    let chain = &spec.chain;
    if chain.cross_section() != 1 || chain.components != 1 {
        return Err(Error::invalid(
            "chain",
            "must be a scalar one-dimensional chain",
        ));
    }
    let n = chain.length();
    if n < 3 {
        return Err(Error::invalid("chain.sides", "need at least 3 sites"));
    }
    for (field, v) in [
        ("t_left", spec.t_left),
        ("t_right", spec.t_right),
        ("lambda_end", spec.lambda_end),
        ("lambda_bulk", spec.lambda_bulk),
        ("tolerance", spec.tolerance),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(field, "must be positive"));
        }
    }
    if !(spec.damping > 0.0 && spec.damping <= 1.0) {
        return Err(Error::invalid("damping", "must lie in (0, 1]"));
    }
    let lattice = Lattice::new(chain.clone())?;
    if !lattice.is_quadratic() {
        return Err(Error::NotQuadratic(chain.pair.name().into()));
    }
    let m = lattice.mass();
    let mut temps: Vec<f64> = (0..n)
        .map(|i| spec.t_left + (spec.t_right - spec.t_left) * i as f64 / (n - 1) as f64)
        .collect();
    let baths = |temps: &[f64]| -> Vec<BathCoupling> {
        (0..n)
            .map(|i| BathCoupling {
                dof: i,
                lambda: if i == 0 || i == n - 1 {
                    spec.lambda_end
                } else {
                    spec.lambda_bulk
                },
                temperature: temps[i],
                side: if i == 0 {
                    Some(Side::Left)
                } else if i == n - 1 {
                    Some(Side::Right)
                } else {
                    None
                },
            })
            .collect()
    };
    // the drift does not depend on the temperatures: factor once
    let model = LinearSdeModel::langevin(&lattice, &baths(&temps))?;
    let solver = LyapunovSolver::new(&model.a)?;
    let mut iterations = 0;
    let mut mixer = AndersonMixer::new(ANDERSON_DEPTH);
    loop {
        let model = LinearSdeModel::langevin(&lattice, &baths(&temps))?;
        let cov = solver.solve(&(&model.b * model.b.transpose()))?;
        let kinetic: Vec<f64> = (0..n).map(|i| cov.c[(n + i, n + i)] / m).collect();
        let max_exchange = (1..n - 1)
            .map(|i| (spec.lambda_bulk / m * (temps[i] - kinetic[i])).abs())
            .fold(0.0, f64::max);
        if max_exchange < spec.tolerance {
            let obs = exact_observables(&model, &cov);
            return Ok(SelfConsistentProfile {
                temperatures: temps,
                kinetic,
                flux: obs.mean_flux,
                iterations,
                max_exchange,
            });
        }
        if iterations >= spec.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                residual: max_exchange,
            });
        }
        // damped update with Anderson mixing over the recent iterates
        let x: Vec<f64> = temps[1..n - 1].to_vec();
        let f: Vec<f64> = (1..n - 1).map(|i| kinetic[i] - temps[i]).collect();
        let next = mixer.next(&x, &f, spec.damping);
        temps[1..n - 1].copy_from_slice(&next);
        iterations += 1;
    }
}

const ANDERSON_DEPTH: usize = 6;

/// Anderson acceleration of `x <- x + beta f(x)`.
struct AndersonMixer {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dx: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
}

impl AndersonMixer {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            prev: None,
            dx: Vec::new(),
            df: Vec::new(),
        }
    }

    fn next(&mut self, x: &[f64], f: &[f64], beta: f64) -> Vec<f64> {
        if let Some((px, pf)) = self.prev.take() {
            self.dx
                .push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.df
                .push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((x.to_vec(), f.to_vec()));
        let mut out: Vec<f64> = x.iter().zip(f).map(|(a, b)| a + beta * b).collect();
        let k = self.df.len();
        if k == 0 {
            return out;
        }
        let dfm = DMatrix::from_fn(f.len(), k, |i, j| self.df[j][i]);
        let rhs = nalgebra::DVector::from_column_slice(f);
        let Ok(gamma) = dfm.svd(true, true).solve(&rhs, 1e-12) else {
            return out;
        };
        for j in 0..k {
            for i in 0..out.len() {
                out[i] -= gamma[j] * (self.dx[j][i] + beta * self.df[j][i]);
            }
        }
        out
    }
}

/// Gibbs covariance `diag(T K^{-1}, m T I)` of an isolated harmonic lattice.
pub fn gibbs_covariance(lattice: &Lattice, temperature: f64) -> Result<DMatrix<f64>> {
    let n = lattice.dof();
    let k = lattice.stiffness_matrix()?;
    let kinv = k
        .try_inverse()
        .ok_or_else(|| Error::invalid("lattice", "stiffness matrix is singular"))?;
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    c.view_mut((0, 0), (n, n)).copy_from(&(kinv * temperature));
    for i in 0..n {
        c[(n + i, n + i)] = lattice.mass() * temperature;
    }
    Ok(c)
}

/// Chain used in the self-consistent examples: harmonic, fixed ends.
pub fn harmonic_chain(n: usize, k: f64) -> LatticeSpec {
    LatticeSpec::chain(n, crate::lattice::PotentialSpec::Harmonic { k })
        .with_ends(EndCondition::Fixed)
}
