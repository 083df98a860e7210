use std::path::PathBuf;

use atomchain::analysis::{populations, SpectrumAnalyzer};
use atomchain::lattice::{EffectiveHamiltonian, FieldSchedule, ModelParams};
use atomchain::propagation::{gaussian_initial, GaussianSpec, SpectralPropagator, WavepacketState};
use atomchain::scenario::ScenarioConfig;
use atomchain::Complex64;
use proptest::prelude::*;

fn model(atoms: usize, slope: f64) -> ModelParams {
    ModelParams {
        atom_count: atoms,
        zeeman_slope: slope,
        sum_cutoff: 2000,
        ..Default::default()
    }
}

fn packet(params: &ModelParams, center: f64, k_c: f64, psi: (f64, f64, f64)) -> WavepacketState {
    let spec = GaussianSpec {
        width_denominator: 8.0,
        ..GaussianSpec::new(
            center,
            k_c,
            Complex64::new(psi.0, 0.0),
            Complex64::from_polar(psi.1, psi.2),
        )
    };
    gaussian_initial(&spec, params).unwrap()
}

fn psi() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.05..1.0f64, 0.05..1.0f64, -3.1..3.1f64)
}

fn times() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.5).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_complex_symmetric(atoms in 1usize..24, slope in -1.0..1.0f64, zero in -5.0..5.0f64) {
        let params = model(atoms, slope);
        let schedule = FieldSchedule::new(slope, vec![(0.0, zero)]).unwrap();
        let h = EffectiveHamiltonian::from_schedule(&params, &schedule, 0.0).unwrap();
        prop_assert!(h.symmetry_defect() <= 1e-12);
    }

    #[test]
    fn norm_never_grows(atoms in 3usize..20, slope in 0.0..0.5f64, k_c in -4.0..4.0f64, amps in psi()) {
        let params = model(atoms, slope);
        let p = SpectralPropagator::for_zero_point(&params, slope, 0.0).unwrap();
        let states = p.states_at(&packet(&params, 0.0, k_c, amps), &times()).unwrap();
        for w in states.windows(2) {
            prop_assert!(w[1].total_probability() <= w[0].total_probability() + 1e-10);
        }
    }

    #[test]
    fn spectrum_keeps_the_norm(atoms in 3usize..30, k_c in -4.0..4.0f64, amps in psi(), t in 0.0..5.0f64) {
        let params = model(atoms, 0.2);
        let p = SpectralPropagator::for_zero_point(&params, 0.2, 0.0).unwrap();
        let s = p.evolve(&packet(&params, 0.0, k_c, amps), t).unwrap();
        let spectrum = SpectrumAnalyzer::new(&params).unwrap().spectrum(&s).unwrap();
        prop_assert!((spectrum.total() - s.total_probability()).abs() <= 1e-10);
    }

    #[test]
    fn arms_add_up(atoms in 3usize..20, k_c in -4.0..4.0f64, amps in psi(), t in 0.0..5.0f64) {
        let params = model(atoms, 0.2);
        let p = SpectralPropagator::for_zero_point(&params, 0.2, 0.0).unwrap();
        let (plus, minus, total) = populations(&p.evolve(&packet(&params, 0.0, k_c, amps), t).unwrap());
        prop_assert!((plus + minus - total).abs() <= 1e-12);
    }

    // n -> -n with the arms exchanged maps the linear field onto itself.
    #[test]
    fn mirror_with_arm_exchange(half in 1usize..8, slope in 0.0..0.6f64, site in -7i64..=7, t in 0.1..6.0f64) {
        let params = model(2 * half + 1, slope);
        let site = site.clamp(-(half as i64), half as i64);
        let p = SpectralPropagator::for_zero_point(&params, slope, 0.0).unwrap();
        let a = p.evolve(&WavepacketState::localized(&params, site, true).unwrap(), t).unwrap();
        let b = p.evolve(&WavepacketState::localized(&params, -site, false).unwrap(), t).unwrap();
        let (ap, am, _) = populations(&a);
        let (bp, bm, _) = populations(&b);
        prop_assert!((ap - bm).abs() <= 1e-10 && (am - bp).abs() <= 1e-10);
        let n = params.atom_count;
        for i in 0..n {
            let plus_a = a.amplitudes()[2 * i].norm_sqr();
            let minus_b = b.amplitudes()[2 * (n - 1 - i) + 1].norm_sqr();
            prop_assert!((plus_a - minus_b).abs() <= 1e-10);
        }
    }

    #[test]
    fn config_round_trips(
        k_c in -4.5..4.5f64,
        center in -20.0..20.0f64,
        phase in -3.0..3.0f64,
        count in 2usize..50,
        end in 1.0..100.0f64,
    ) {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/fig3_right.json");
        let mut config = ScenarioConfig::from_path(&path).unwrap();
        config.initial.k_c_over_k0 = k_c;
        config.initial.center_site = center;
        config.initial.psi_phase = phase;
        config.samples = atomchain::scenario::SampleGrid::Linear {
            start_gamma0inv: 0.0,
            end_gamma0inv: end,
            count,
        };
        let text = serde_json::to_string_pretty(&config).unwrap();
        prop_assert_eq!(ScenarioConfig::from_json(&text).unwrap(), config);
    }
}
