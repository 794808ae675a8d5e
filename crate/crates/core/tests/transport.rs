use nesslab::dynamics::{simulate, InitialCondition, IntegratorSpec, SimulationConfig};
use nesslab::harmonic_exact::harmonic_chain;
use nesslab::lattice::{LatticeSpec, PotentialSpec};
use nesslab::thermostats::ReservoirSpec;
use nesslab::transport::{
    conductivity_scan, entropy_ldf, green_kubo, linear_response_check, GkSpec, LdfObservable,
    LdfSpec, LinearResponseSpec, ScanSpec,
};

fn phi4(n: usize) -> LatticeSpec {
    LatticeSpec::chain(n, PotentialSpec::Harmonic { k: 1.0 })
        .with_onsite(PotentialSpec::Quartic { a2: 0.0, a4: 1.0 })
}

fn fpu(n: usize) -> LatticeSpec {
    LatticeSpec::chain(n, PotentialSpec::FpuBeta { k2: 1.0, k4: 1.0 })
}

fn scan(stride: u64, seed: u64) -> ScanSpec {
    ScanSpec {
        lattice: fpu(4),
        reservoir: ReservoirSpec::langevin(1.2, 0.8, 1.0),
        integrator: IntegratorSpec::new(0.02, 1_000_000, 50_000, stride, seed),
        lengths: vec![4, 6, 8],
        replicas: 2,
        oracle: false,
        step_scaling_exponent: 0.0,
        exclude_smallest: false,
        initial: InitialCondition::Gibbs { temperature: None },
        blocks: 32,
    }
}

#[test]
fn conductivity_is_stable_under_stride_and_seed() {
    let base = conductivity_scan(&scan(10, 1), 1).unwrap();
    for other in [scan(20, 1), scan(10, 2)] {
        let alt = conductivity_scan(&other, 1).unwrap();
        for (a, b) in base.rows.iter().zip(&alt.rows) {
            let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            assert!(
                (a.kappa - b.kappa).abs() < 3.0 * se,
                "L={}: {} vs {} (se {se})",
                a.length,
                a.kappa,
                b.kappa
            );
        }
    }
}

#[test]
fn harmonic_response_matches_exact_slope_and_is_odd() {
    let spec = LinearResponseSpec {
        lattice: harmonic_chain(8, 1.0),
        reservoir: ReservoirSpec::langevin(1.0, 1.0, 1.0),
        temperature: 1.0,
        delta_ts: vec![-0.4, -0.1, 0.1, 0.4],
        integrator: IntegratorSpec::new(0.02, 1_000_000, 50_000, 10, 9),
        replicas: 1,
        initial: InitialCondition::Gibbs { temperature: None },
        gk_t_max: 30.0,
        gk_trajectory_time: 40_000.0,
        gk_sample_stride: 5,
        gk_replicas: 2,
    };
    let r = linear_response_check(&spec, 1).unwrap();
    let exact = r
        .oracle_slope
        .expect("harmonic Langevin has an exact slope");
    assert!(
        (r.slope - exact).abs() < 3.0 * r.slope_stderr,
        "slope {} +- {} vs {exact}",
        r.slope,
        r.slope_stderr
    );
    assert!(
        (r.correlation_slope - exact).abs() < 3.0 * r.correlation_slope_stderr,
        "correlation {} +- {} vs {exact}",
        r.correlation_slope,
        r.correlation_slope_stderr
    );
    let odd = r.odd_symmetry_deviation.unwrap();
    assert!(odd < 3.0, "mirrored fluxes differ by {odd} stderr");
    assert!(!r.nonlinear);
}

#[test]
fn anharmonic_response_agrees_with_correlation_integral() {
    let spec = LinearResponseSpec {
        lattice: fpu(8),
        reservoir: ReservoirSpec::langevin(1.0, 1.0, 1.0),
        temperature: 1.0,
        delta_ts: vec![0.1, 0.4],
        integrator: IntegratorSpec::new(0.02, 2_000_000, 50_000, 10, 4),
        replicas: 1,
        initial: InitialCondition::Gibbs { temperature: None },
        gk_t_max: 30.0,
        gk_trajectory_time: 40_000.0,
        gk_sample_stride: 5,
        gk_replicas: 2,
    };
    let r = linear_response_check(&spec, 1).unwrap();
    let se = (r.slope_stderr.powi(2) + r.correlation_slope_stderr.powi(2)).sqrt();
    let gap = (r.slope - r.correlation_slope).abs();
    assert!(
        gap < 3.0 * se || gap < 0.2 * r.slope.abs(),
        "slope {} +- {} vs correlation {} +- {}",
        r.slope,
        r.slope_stderr,
        r.correlation_slope,
        r.correlation_slope_stderr
    );
}

#[test]
fn zero_lag_correlation_is_the_flux_variance() {
    let gk = green_kubo(
        &GkSpec {
            lattice: phi4(16).with_ends(nesslab::lattice::EndCondition::Periodic),
            reservoir: ReservoirSpec::None,
            temperature: 1.0,
            dt: Some(0.05),
            sample_stride: 2,
            t_max: 10.0,
            trajectory_time: 5_000.0,
            equilibration_time: 50.0,
            replicas: 2,
            seed: 11,
            truncated: false,
            plateau_tolerance: 0.1,
        },
        1,
    )
    .unwrap();
    let (t0, c0) = gk.correlation[0];
    assert_eq!(t0, 0.0);
    assert!(
        (c0 - gk.flux_variance).abs() < 2.0 * gk.flux_variance_stderr,
        "{c0} vs {} +- {}",
        gk.flux_variance,
        gk.flux_variance_stderr
    );
    assert!(gk.kappa > 0.0);
}

fn ldf(t_left: f64, t_right: f64, observable: LdfObservable) -> LdfSpec {
    LdfSpec {
        simulation: SimulationConfig {
            lattice: fpu(4),
            reservoir: ReservoirSpec::langevin(t_left, t_right, 1.0),
            integrator: IntegratorSpec::new(0.05, 2_000_000, 20_000, 10, 6),
            initial: InitialCondition::Gibbs { temperature: None },
            blocks: 32,
        },
        segment_samples: 10,
        bins: 21,
        p_max: None,
        normalized: false,
        min_count: 100,
        replicas: 1,
        observable,
    }
}

#[test]
fn equal_temperature_rate_function_is_even() {
    let r = entropy_ldf(&ldf(1.0, 1.0, LdfObservable::Reservoir), 1).unwrap();
    let (slope, se) = (r.slope.unwrap(), r.slope_stderr.unwrap());
    assert!(slope.abs() < 3.0 * se, "odd slope {slope} +- {se}");
    for row in &r.odd {
        assert!(
            row.value.abs() < 4.0 * row.stderr,
            "p={}: {} +- {}",
            row.p,
            row.value,
            row.stderr
        );
    }
    assert!((r.histogram_integral - 1.0).abs() < 1e-3);
}

#[test]
fn segment_average_has_the_stationary_mean() {
    for observable in [LdfObservable::Reservoir, LdfObservable::Symmetrized] {
        let r = entropy_ldf(&ldf(1.5, 0.5, observable), 1).unwrap();
        assert!(r.mu_sigma > 0.0);
        assert!(
            (r.mean_segment_sigma - r.mu_sigma).abs() < 2.0 * r.mu_sigma_stderr,
            "{observable:?}: {} vs {} +- {}",
            r.mean_segment_sigma,
            r.mu_sigma,
            r.mu_sigma_stderr
        );
    }
}

#[test]
fn pinned_chain_profile_decreases_across_the_bulk() {
    let out = simulate(&SimulationConfig {
        lattice: phi4(12),
        reservoir: ReservoirSpec::langevin(1.5, 0.5, 1.0),
        integrator: IntegratorSpec::new(0.02, 2_000_000, 100_000, 10, 13),
        initial: InitialCondition::Gibbs { temperature: None },
        blocks: 32,
    })
    .unwrap();
    let t = &out.temperature;
    for i in 1..t.mean.len() - 2 {
        let se = (t.stderr[i].powi(2) + t.stderr[i + 1].powi(2)).sqrt();
        assert!(
            t.mean[i] > t.mean[i + 1] - 3.0 * se,
            "sites {i},{}: {} then {}",
            i + 1,
            t.mean[i],
            t.mean[i + 1]
        );
    }
    assert!(t.mean[1] > t.mean[t.mean.len() - 2] + 0.2);
}
