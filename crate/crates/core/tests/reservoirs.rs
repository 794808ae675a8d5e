use nesslab::dynamics::{simulate, InitialCondition, IntegratorSpec, Simulation, SimulationConfig};
use nesslab::harmonic_exact::{gibbs_covariance, harmonic_chain, oracle};
use nesslab::lattice::{
    sample_gibbs, EndCondition, Lattice, LatticeSpec, PotentialSpec, SystemState,
};
use nesslab::observables::{
    block_stats, continuity_residual, kinetic_temperature_profile, plane_flux,
};
use nesslab::rng::stream_rng;
use nesslab::thermostats::{Reservoir, ReservoirSpec};

fn fpu(n: usize) -> LatticeSpec {
    LatticeSpec::chain(n, PotentialSpec::FpuBeta { k2: 1.0, k4: 1.0 })
}

fn variants(t_left: f64, t_right: f64) -> Vec<ReservoirSpec> {
    vec![
        ReservoirSpec::langevin(t_left, t_right, 1.0),
        ReservoirSpec::Extended {
            t_left,
            t_right,
            lambda_left: 1.0,
            lambda_right: 1.0,
            gamma_left: 1.0,
            gamma_right: 1.0,
        },
        ReservoirSpec::NoseHoover {
            t_left,
            t_right,
            theta: 1.0,
            g_left: None,
            g_right: None,
            left_sites: Some(vec![0, 1]),
            right_sites: Some(vec![6, 7]),
        },
        ReservoirSpec::Gaussian {
            t_left,
            t_right,
            left_sites: Some(vec![0, 1]),
            right_sites: Some(vec![6, 7]),
        },
    ]
}

fn run(
    lattice: LatticeSpec,
    reservoir: ReservoirSpec,
    dt: f64,
    steps: u64,
    seed: u64,
) -> nesslab::dynamics::SimulationOutput {
    simulate(&SimulationConfig {
        lattice,
        reservoir,
        integrator: IntegratorSpec::new(dt, steps, steps / 20, 10, seed),
        initial: InitialCondition::Gibbs { temperature: None },
        blocks: 32,
    })
    .unwrap()
}

#[test]
fn equal_temperatures_give_flat_profile_and_no_entropy_production() {
    for (i, spec) in variants(1.0, 1.0).into_iter().enumerate() {
        let tag = spec.tag();
        let isokinetic = matches!(spec, ReservoirSpec::Gaussian { .. });
        let out = run(fpu(8), spec, 0.02, 2_000_000, 30 + i as u64);
        let t = &out.temperature;
        for (site, (m, s)) in t.mean.iter().zip(&t.stderr).enumerate() {
            if isokinetic && [0, 1, 6, 7].contains(&site) {
                // the constraint keeps region sites at (g - 1) T / g summed over the pair
                let pair = if site < 2 {
                    t.mean[0] + t.mean[1]
                } else {
                    t.mean[6] + t.mean[7]
                };
                assert!((pair - 1.0).abs() < 1e-9, "{tag} site {site}: {pair}");
            } else if *s == 0.0 {
                assert!((m - 1.0).abs() < 1e-9, "{tag} site {site}: {m}");
            } else {
                assert!((m - 1.0).abs() < 3.0 * s, "{tag} site {site}: {m} +- {s}");
            }
        }
        let (e, se) = (out.entropy.mean(), out.entropy.stderr());
        assert!(e.abs() < 3.0 * se, "{tag}: sigma {e} +- {se}");
        let (f, fse) = (out.flux.mean(), out.flux.stderr());
        assert!(f.abs() < 3.0 * fse, "{tag}: flux {f} +- {fse}");
    }
}

#[test]
fn stationary_heat_balance_and_uniform_plane_flux() {
    for (i, spec) in variants(1.5, 0.5).into_iter().enumerate() {
        let tag = spec.tag();
        let out = run(fpu(8), spec, 0.02, 2_000_000, 40 + i as u64);
        let (l, r) = (&out.heat_left, &out.heat_right);
        let se = (l.stderr().powi(2) + r.stderr().powi(2)).sqrt();
        assert!(
            (l.mean() + r.mean()).abs() < 3.0 * se,
            "{tag}: {} + {} vs {se}",
            l.mean(),
            r.mean()
        );
        assert!(r.mean() > 0.0, "{tag}: heat should reach the cold side");
        assert!(out.entropy.mean() > 3.0 * out.entropy.stderr(), "{tag}");
        assert!(
            out.plane_disagreement() < 3.0,
            "{tag}: {}",
            out.plane_disagreement()
        );
    }
}

#[test]
fn langevin_single_site_momentum_variance() {
    let m = 2.0;
    let t = 1.5;
    // two uncoupled pinned sites, one bath each
    let lattice = LatticeSpec::chain(2, PotentialSpec::Harmonic { k: 0.0 })
        .with_ends(EndCondition::Free)
        .with_onsite(PotentialSpec::PinnedQuadratic { omega2: 1.0 })
        .with_mass(m);
    let out = simulate(&SimulationConfig {
        lattice,
        reservoir: ReservoirSpec::langevin(t, t, 1.0),
        integrator: IntegratorSpec::new(0.05, 2_000_000, 100_000, 10, 5),
        initial: InitialCondition::Zero,
        blocks: 32,
    })
    .unwrap();
    // the profile is <p^2>/m, so <p^2> = m T
    for (mean, se) in out.temperature.mean.iter().zip(&out.temperature.stderr) {
        assert!((mean * m - m * t).abs() < 3.0 * se * m, "{mean} +- {se}");
    }
}

#[test]
fn nose_hoover_region_kinetic_energy_matches_target() {
    let spec = ReservoirSpec::NoseHoover {
        t_left: 1.2,
        t_right: 1.2,
        theta: 1.0,
        g_left: None,
        g_right: None,
        left_sites: Some(vec![0, 1]),
        right_sites: Some(vec![6, 7]),
    };
    let out = run(fpu(8), spec, 0.02, 2_000_000, 8);
    let t = &out.temperature;
    for site in [0, 1, 6, 7] {
        assert!(
            (t.mean[site] - 1.2).abs() < 3.0 * t.stderr[site],
            "site {site}: {} +- {}",
            t.mean[site],
            t.stderr[site]
        );
    }
}

#[test]
fn slow_nose_hoover_approaches_isolated_dynamics() {
    let lattice = Lattice::new(fpu(8)).unwrap();
    let start = sample_gibbs(&lattice, 1.0, &mut stream_rng(2, 0)).unwrap();
    let evolve = |spec: ReservoirSpec| {
        let res = Reservoir::new(spec, &lattice).unwrap();
        let mut sim = Simulation::new(
            lattice.clone(),
            res,
            0.01,
            start.clone(),
            stream_rng(0, 0),
            0,
        )
        .unwrap();
        sim.run(1000).unwrap();
        sim.state().clone()
    };
    let isolated = evolve(ReservoirSpec::None);
    let distance = |theta: f64| {
        let s = evolve(ReservoirSpec::NoseHoover {
            t_left: 2.0,
            t_right: 0.5,
            theta,
            g_left: None,
            g_right: None,
            left_sites: None,
            right_sites: None,
        });
        s.q.iter()
            .chain(&s.p)
            .zip(isolated.q.iter().chain(&isolated.p))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let near = distance(1e3);
    let nearer = distance(1e5);
    assert!(nearer < 1e-3, "{nearer}");
    assert!(nearer < near, "{near} -> {nearer}");
}

/// Equal-temperature Langevin moments of a harmonic chain against the exact
/// Gibbs covariance.
#[test]
fn langevin_equilibrium_matches_gibbs_covariance() {
    let t = 0.8;
    let spec = harmonic_chain(4, 1.0);
    let lattice = Lattice::new(spec.clone()).unwrap();
    let exact = gibbs_covariance(&lattice, t).unwrap();
    let n = lattice.dof();
    let res = Reservoir::new(ReservoirSpec::langevin(t, t, 1.0), &lattice).unwrap();
    let mut rng = stream_rng(17, 0);
    let start = sample_gibbs(&lattice, t, &mut rng).unwrap();
    let mut sim = Simulation::new(lattice.clone(), res, 0.01, start, rng, 17).unwrap();
    sim.run(10_000).unwrap();
    let samples = 400_000;
    let mut series = vec![Vec::with_capacity(samples); 4 * n * n];
    for _ in 0..samples {
        sim.run(10).unwrap();
        let s = sim.state();
        let x: Vec<f64> = s.q.iter().chain(&s.p).copied().collect();
        for a in 0..2 * n {
            for b in 0..2 * n {
                series[a * 2 * n + b].push(x[a] * x[b]);
            }
        }
    }
    for a in 0..2 * n {
        for b in a..2 * n {
            let st = block_stats(&series[a * 2 * n + b], 32).unwrap();
            let want = exact[(a, b)];
            assert!(
                (st.mean - want).abs() < 3.0 * st.stderr,
                "C[{a},{b}] = {} +- {} vs {want}",
                st.mean,
                st.stderr
            );
        }
    }
}

#[test]
fn harmonic_simulation_matches_oracle() {
    let spec = harmonic_chain(8, 1.0);
    let reservoir = ReservoirSpec::langevin(1.5, 0.5, 1.0);
    let exact = oracle(&spec, &reservoir).unwrap();
    let out = run(spec, reservoir, 0.02, 4_000_000, 21);
    assert!(
        (out.flux.mean() - exact.mean_flux).abs() < 3.0 * out.flux.stderr(),
        "{} +- {} vs {}",
        out.flux.mean(),
        out.flux.stderr(),
        exact.mean_flux
    );
    for (i, e) in exact.temperature.iter().enumerate() {
        let (m, s) = (out.temperature.mean[i], out.temperature.stderr[i]);
        assert!((m - e).abs() < 3.0 * s, "site {i}: {m} +- {s} vs {e}");
    }
}

#[test]
fn halving_dt_leaves_harmonic_flux_within_one_stderr() {
    let spec = harmonic_chain(8, 1.0);
    let reservoir = ReservoirSpec::langevin(1.5, 0.5, 1.0);
    let coarse = simulate(&SimulationConfig {
        lattice: spec.clone(),
        reservoir: reservoir.clone(),
        integrator: IntegratorSpec::new(0.04, 2_000_000, 50_000, 5, 3),
        initial: InitialCondition::Gibbs { temperature: None },
        blocks: 32,
    })
    .unwrap();
    let fine = simulate(&SimulationConfig {
        lattice: spec,
        reservoir,
        integrator: IntegratorSpec::new(0.02, 4_000_000, 100_000, 10, 4),
        initial: InitialCondition::Gibbs { temperature: None },
        blocks: 32,
    })
    .unwrap();
    let se = (coarse.flux.stderr().powi(2) + fine.flux.stderr().powi(2)).sqrt();
    let diff = (coarse.flux.mean() - fine.flux.mean()).abs();
    assert!(
        diff < se,
        "{} vs {}: {diff} > {se}",
        coarse.flux.mean(),
        fine.flux.mean()
    );
}

#[test]
fn gibbs_samples_give_flat_kinetic_profile() {
    let lattice = Lattice::new(fpu(6)).unwrap();
    let mut rng = stream_rng(12, 0);
    let t = 1.3;
    let states: Vec<SystemState> = (0..20_000)
        .map(|_| sample_gibbs(&lattice, t, &mut rng).unwrap())
        .collect();
    let profile = kinetic_temperature_profile(&lattice, &states).unwrap();
    // momenta are exact Gaussian draws: <p^2/m> has variance 2 T^2
    let se = (2.0 * t * t / states.len() as f64).sqrt();
    for (i, v) in profile.iter().enumerate() {
        assert!((v - t).abs() < 3.0 * se, "site {i}: {v}");
    }
}

#[test]
fn continuity_residual_is_small_at_fine_dt() {
    let lattice = Lattice::new(harmonic_chain(8, 1.0)).unwrap();
    let start = sample_gibbs(&lattice, 1.0, &mut stream_rng(6, 0)).unwrap();
    let res = Reservoir::new(ReservoirSpec::None, &lattice).unwrap();
    let dt = 1e-3;
    let mut sim = Simulation::new(lattice.clone(), res, dt, start, stream_rng(0, 0), 0).unwrap();
    let mut traj = vec![sim.state().clone()];
    let mut scale: f64 = 0.0;
    for _ in 0..2000 {
        sim.step().unwrap();
        let s = sim.state().clone();
        for j in 0..lattice.plane_count() {
            scale = scale.max(plane_flux(&lattice, &s, j).unwrap().abs());
        }
        traj.push(s);
    }
    for site in 2..6 {
        let r = continuity_residual(&lattice, &traj, dt, site).unwrap();
        assert!(r < 1e-4 * scale, "site {site}: {r} vs flux scale {scale}");
    }
}
