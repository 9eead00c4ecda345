use proptest::prelude::*;
use tumour_rom::optim::jaccard_index;
use tumour_rom::params::*;
use tumour_rom::phantom::*;
use tumour_rom::Error;

/// Proliferation source per unit ν with `k_T = 0`: `φ(1−φ)(n−δ)`.
fn gamma_phi(phi: f64, n: f64, delta: f64) -> f64 {
    phi * (1.0 - phi) * (n - delta)
}

/// Nutrient source: production in healthy tissue minus tumour uptake.
fn gamma_n(phi: f64, n: f64, s_n: f64, delta_n: f64) -> f64 {
    s_n * (1.0 - phi) * (1.0 - n) - delta_n * phi * n
}

#[test]
fn equilibrium_at_table_values() {
    let phi = equilibrium_volume_fraction(1e4, 0.3, 8640.0).unwrap();
    let oracle = 1e4 * 0.7 / (1e4 + 0.3 * (8640.0 - 1e4));
    assert!((phi - oracle).abs() < 1e-15);
    assert!((phi - 0.72977).abs() < 5e-6);
    assert!(gamma_phi(phi, 0.3, 0.3).abs() <= 1e-12);
    assert!(gamma_n(phi, 0.3, 1e4, 8640.0).abs() <= 1e-12 * 1e4);
}

#[test]
fn equilibrium_boundary_and_degenerate_cases() {
    assert_eq!(equilibrium_volume_fraction(1e4, 0.0, 8640.0).unwrap(), 1.0);
    assert!(matches!(
        equilibrium_volume_fraction(1.0, 2.0, 0.0),
        Err(Error::DegenerateEquilibrium(_))
    ));
}

#[test]
fn radiotherapy_examples() {
    assert!((radiotherapy_rate(0.027, 0.0027, 1.0, 2.0) - 0.0648).abs() < 1e-15);
    assert_eq!(radiotherapy_rate(0.027, 0.0027, 0.0, 2.0), 0.0);
    assert_eq!(radiotherapy_rate(0.0, 0.0, 1.0, 2.0), 0.0);
}

#[test]
fn default_two_cycle_schedule_rates() {
    let s = TherapySchedule::two_chemo_cycles();
    assert_eq!(therapy_rate(5.0, &s), 0.0196);
    assert_eq!(therapy_rate(20.0, &s), 0.0);
    assert_eq!(therapy_rate(35.0, &s), 0.0196);
}

#[test]
fn radio_window_only_gives_r_eff() {
    let s = TherapySchedule {
        radio_windows: vec![[10.0, 15.0]],
        r_eff: radiotherapy_rate(0.027, 0.0027, 1.0, 2.0),
        chemo_windows: vec![],
    };
    assert!((therapy_rate(12.0, &s) - 0.0648).abs() < 1e-15);
    assert_eq!(therapy_rate(16.0, &s), 0.0);
}

#[test]
fn overlapping_windows_fail_validation() {
    let s = TherapySchedule {
        radio_windows: vec![],
        r_eff: 0.0,
        chemo_windows: vec![
            ChemoWindow { start: 0.0, end: 8.0, rate: 0.0196 },
            ChemoWindow { start: 7.0, end: 9.0, rate: 0.0147 },
        ],
    };
    assert!(matches!(s.validate(), Err(Error::Schedule(_))));
}

fn small(cfg: PhantomConfig) -> PhantomConfig {
    PhantomConfig { nx: 20, ny: 20, ..cfg }
}

#[test]
fn no_white_matter_means_unit_chemotaxis() {
    let case = generate_phantom(&small(PhantomConfig { white_matter: None, ..Default::default() })).unwrap();
    assert!(case.chi().iter().all(|&c| c == 1.0));
}

#[test]
fn white_matter_tensors_have_requested_ratio() {
    let case = generate_phantom(&small(PhantomConfig { anisotropy_wm: 4.0, ..Default::default() })).unwrap();
    let mut seen = 0;
    for (k, t) in case.tissue().iter().enumerate() {
        if *t == Tissue::White {
            let ev = case.mobility_tensor().eigenvalues(k);
            assert!((ev[1] / ev[0] - 4.0).abs() < 1e-12);
            assert!((ev[1] - 1.0).abs() < 1e-12);
            assert_eq!(case.chi()[k], 4.0);
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn initial_tumour_peaks_at_equilibrium() {
    let case = generate_phantom(&PhantomConfig::default()).unwrap();
    let phi_bar = equilibrium_volume_fraction(1e4, 0.3, 8640.0).unwrap();
    let max = case.phi0().iter().copied().fold(0.0, f64::max);
    assert_eq!(max, phi_bar);
    assert!(case.n0().iter().all(|&n| n == 1.0));
    assert!(case.phi0().iter().all(|&p| (0.0..=phi_bar).contains(&p)));
}

#[test]
fn seed_outside_domain_is_invalid() {
    let cfg = PhantomConfig {
        seed: Disk { center: [1.0, 20.0], radius: 6.0 },
        ..Default::default()
    };
    assert!(matches!(generate_phantom(&cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn synthetic_target_of_nearly_frozen_tumour_matches_initial_support() {
    let case = generate_phantom(&small(PhantomConfig { n_steps: 5, ..Default::default() })).unwrap();
    let mut p = ParameterSet::initial_guess();
    p.nu = 1e-12;
    p.l = 1e-12;
    let target = make_target(&case, &TargetMode::Synthetic(p)).unwrap();
    let initial = threshold_indicator(case.phi0(), 0.5 * p.phi_e());
    let w = case.mesh().lumped_mass();
    assert_eq!(jaccard_index(&target, &initial, w), 1.0);
}

#[test]
fn synthetic_target_is_the_thresholded_final_state() {
    let case = generate_phantom(&small(PhantomConfig { n_steps: 10, ..Default::default() })).unwrap();
    let p = ParameterSet::initial_guess();
    let target = make_target(&case, &TargetMode::Synthetic(p)).unwrap();
    let run = tumour_rom::fom::fom_solve(&case, &p, false).unwrap();
    let mask = threshold_indicator(&run.state.phi, 0.5 * p.phi_e());
    assert_eq!(jaccard_index(&target, &mask, case.mesh().lumped_mass()), 1.0);
    let again = make_target(&case, &TargetMode::Synthetic(p)).unwrap();
    assert_eq!(target.to_vec(), again.to_vec());
}

#[test]
fn mask_files_round_trip_and_reject_non_binary() {
    let case = generate_phantom(&small(PhantomConfig::default())).unwrap();
    let mask = threshold_indicator(case.phi0(), 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.json");
    save_mask(&mask, &path).unwrap();
    let back = make_target(&case, &TargetMode::File(path.clone())).unwrap();
    assert_eq!(back.to_vec(), mask);

    let mut bad = mask.clone();
    bad[0] = 0.5;
    save_mask(&bad, &path).unwrap();
    assert!(matches!(load_mask(case.mesh(), &path), Err(Error::InvalidTarget(_))));
}

#[test]
fn jittered_fibres_are_reproducible_per_seed() {
    let cfg = small(PhantomConfig { fiber_jitter_deg: 20.0, rng_seed: 7, ..Default::default() });
    let a = generate_phantom(&cfg).unwrap();
    let b = generate_phantom(&cfg).unwrap();
    assert_eq!(a.mobility_tensor().data(), b.mobility_tensor().data());
    let c = generate_phantom(&PhantomConfig { rng_seed: 8, ..cfg }).unwrap();
    assert_ne!(a.mobility_tensor().data(), c.mobility_tensor().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_cases_satisfy_invariants(
        angle in 0.0f64..180.0,
        jitter in 0.0f64..30.0,
        a_wm in 1.0f64..8.0,
        seed in 0u64..1000,
        csf in proptest::bool::ANY,
    ) {
        let cfg = PhantomConfig {
            nx: 12,
            ny: 12,
            fiber_angle_deg: angle,
            fiber_jitter_deg: jitter,
            anisotropy_wm: a_wm,
            csf: csf.then_some(Disk { center: [30.0, 30.0], radius: 4.0 }),
            rng_seed: seed,
            seed: Disk { center: [14.0, 20.0], radius: 4.0 },
            ..Default::default()
        };
        let case = generate_phantom(&cfg).unwrap();
        prop_assert!(case.chemotaxis_follows_tissue());
        prop_assert!(case.chi().iter().all(|&c| c == 1.0 || c == 4.0));
        for k in 0..case.mesh().n_cells() {
            for field in [case.diffusion(), case.mobility_tensor()] {
                let t = field.cell(k);
                prop_assert!((t[1] - t[2]).abs() <= 1e-15);
                prop_assert!(field.eigenvalues(k)[0] >= 0.0);
            }
        }
        let phi_bar = equilibrium_volume_fraction(1e4, 0.3, 8640.0).unwrap();
        prop_assert!(case.phi0().iter().all(|&p| p >= 0.0 && p <= phi_bar && p < 1.0));
        prop_assert!(case.n0().iter().all(|&n| n == 1.0));
        prop_assert!((case.t_final() - case.dt() * case.n_steps() as f64).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_zeroes_both_sources(s_n in 1e3f64..1e5, delta in 0.05f64..0.9, delta_n in 1e3f64..1e5) {
        let phi = equilibrium_volume_fraction(s_n, delta, delta_n).unwrap();
        prop_assert!(phi > 0.0 && phi < 1.0);
        prop_assert!(gamma_phi(phi, delta, delta).abs() <= 1e-12);
        prop_assert!(gamma_n(phi, delta, s_n, delta_n).abs() <= 1e-12 * (s_n + delta_n));
    }
}
