use proptest::prelude::*;
use tumour_rom::fom::*;
use tumour_rom::mesh::NodalField;
use tumour_rom::params::*;
use tumour_rom::phantom::*;
use tumour_rom::pod::*;
use tumour_rom::rom::*;
use tumour_rom::runner::build_rom;

fn small_case(n_steps: usize) -> CaseData {
    generate_phantom(&PhantomConfig {
        nx: 16,
        ny: 16,
        n_steps,
        seed: Disk { center: [16.0, 20.0], radius: 7.0 },
        ..Default::default()
    })
    .unwrap()
}

fn small_rom(n_steps: usize) -> (CaseData, PodArray, RomModel) {
    let case = small_case(n_steps);
    let run = fom_solve(&case, &ParameterSet::initial_guess(), true).unwrap();
    let (pods, model) = build_rom(&case, &run, DEFAULT_IC).unwrap();
    (case, pods, model)
}

fn basis_of(vectors: Vec<Vec<f64>>) -> PodBasis {
    let k = vectors.len();
    PodBasis { vectors, eigenvalues: vec![1.0; k], energy: vec![1.0; k], trace: 1.0, n_required: k }
}

/// Nodal basis `e_j / √m_j` for all five sequences: spans the whole P1 space.
fn exact_model(case: &CaseData) -> (PodArray, RomModel) {
    let w = case.mesh().lumped_mass();
    let nv = w.len();
    let vecs: Vec<Vec<f64>> = (0..nv)
        .map(|i| (0..nv).map(|j| if i == j { 1.0 / w[i].sqrt() } else { 0.0 }).collect())
        .collect();
    let b = basis_of(vecs);
    let pods = PodArray::from_bases([b.clone(), b.clone(), b.clone(), b.clone(), b], 1.0).unwrap();
    let model = RomModel::new(&pods, assemble_rom_tensors(&pods, case).unwrap(), case).unwrap();
    (pods, model)
}

/// A 16-vertex case with smooth, non-uniform initial data.
fn tiny_case(n_steps: usize) -> CaseData {
    let case = generate_phantom(&PhantomConfig {
        nx: 3,
        ny: 3,
        extent: [4.0, 4.0],
        white_matter: None,
        n_steps,
        seed: Disk { center: [2.0, 2.0], radius: 0.5 },
        ..Default::default()
    })
    .unwrap();
    let mesh = case.mesh().clone();
    let phi0 = (0..mesh.n_vertices())
        .map(|j| 0.3 + 0.1 * mesh.vertex(j)[0] + 0.025 * mesh.vertex(j)[1])
        .collect();
    case.with_initial(NodalField::new(&mesh, phi0).unwrap(), NodalField::constant(&mesh, 0.8))
        .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gram_matrices_of_lumped_orthonormal_bases_are_identities() {
    let (_, _, model) = small_rom(20);
    let t = &model.tensors;
    let n = t.n;
    for g in [&t.v1, &t.u1, &t.w1] {
        let d = g - nalgebra::DMatrix::<f64>::identity(n, n);
        assert!(d.amax() <= 1e-10);
    }
    assert!(t.all_finite());
}

#[test]
fn projected_tensors_are_symmetric_in_coefficient_indices() {
    let (_, _, model) = small_rom(20);
    let t = &model.tensors;
    let scale = |x: &Tensor| x.data().iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    for (x, k) in [(&t.v2, 3), (&t.v8, 3), (&t.v6, 2), (&t.v3, 2), (&t.v9, 2)] {
        assert!(x.symmetry_defect(k) <= 1e-12 * scale(x), "order {}", x.order());
    }
    // (ξ_i ξ_l, ξ_m)^h is symmetric in i and l.
    let v7 = &t.v7;
    for i in 0..t.n {
        for m in 0..t.n {
            for l in 0..t.n {
                assert!((v7.get(&[i, m, l]) - v7.get(&[l, m, i])).abs() <= 1e-12 * scale(v7));
            }
        }
    }
}

#[test]
fn constant_bases_give_analytic_operators() {
    let case = small_case(1);
    let area: f64 = case.mesh().lumped_mass().iter().sum();
    let c = 1.0 / area.sqrt();
    let b = basis_of(vec![vec![c; case.mesh().n_vertices()]]);
    let pods = PodArray::from_bases([b.clone(), b.clone(), b.clone(), b.clone(), b], 1.0).unwrap();
    let t = assemble_rom_tensors(&pods, &case).unwrap();
    assert!((t.v1[(0, 0)] - 1.0).abs() < 1e-12);
    assert!((t.u5[0] - c * area).abs() < 1e-12);
    assert!((t.w4[0] - c * area).abs() < 1e-12);
    assert!((t.v7.get(&[0, 0, 0]) - c).abs() < 1e-12);
    assert!(t.u6[(0, 0)].abs() < 1e-12 && t.w2[(0, 0)].abs() < 1e-12);
    assert!(t.v2.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn one_constant_mode_tracks_a_uniform_full_model() {
    // Uniform data stays uniform, so the scalar recursion of a single
    // constant mode must follow the full model.
    let case = small_case(15);
    let mesh = case.mesh().clone();
    let case = case
        .with_initial(NodalField::constant(&mesh, 0.4), NodalField::constant(&mesh, 0.9))
        .unwrap()
        .with_therapy(TherapySchedule::two_chemo_cycles())
        .unwrap();
    let area: f64 = mesh.lumped_mass().iter().sum();
    let b = basis_of(vec![vec![1.0 / area.sqrt(); mesh.n_vertices()]]);
    let pods = PodArray::from_bases([b.clone(), b.clone(), b.clone(), b.clone(), b], 1.0).unwrap();
    let model = RomModel::new(&pods, assemble_rom_tensors(&pods, &case).unwrap(), &case).unwrap();
    let p = ParameterSet::initial_guess();
    let tr = rom_solve(&model, &p, &RomSettings::tight()).unwrap();
    let run = fom_solve(&case, &p, true).unwrap();
    for s in 0..=case.n_steps() {
        let phi = model.reconstruct_phi(&tr.states[s].alpha);
        assert!(max_abs_diff(&phi, &run.snapshots.phi[s]) <= 1e-6, "step {s}");
        let n = pods.n.reconstruct(&tr.states[s].eta);
        assert!(max_abs_diff(&n, &run.snapshots.n[s]) <= 1e-6, "step {s}");
    }
}

#[test]
fn zero_steps_return_the_projected_initial_data() {
    let (case, pods, model) = small_rom(10);
    let dt = case.dt();
    let case0 = case.with_time_grid(dt, 0).unwrap();
    let model0 = RomModel::new(&pods, model.tensors.clone(), &case0).unwrap();
    let tr = rom_solve(&model0, &ParameterSet::initial_guess(), &RomSettings::default()).unwrap();
    assert_eq!(tr.states.len(), 1);
    assert_eq!(tr.states[0].alpha, pods.phi.project(case0.mesh().lumped_mass(), case0.phi0()));
    assert!(tr.newton_iterations.is_empty());
}

#[test]
fn nutrient_identity_step_without_sources_or_diffusion() {
    let (_, _, model) = small_rom(5);
    let mut t = model.tensors.clone();
    t.w2.fill(0.0);
    let p = ParameterSet { s_n: 0.0, delta_n: 0.0, ..ParameterSet::initial_guess() };
    let eta = vec![0.3, -0.2, 0.1, 0.05, 0.0, 0.7][..t.n].to_vec();
    let alpha = vec![0.1; t.n];
    let out = rom_nutrient_init(&t, &p, &alpha, &eta, 0.1225).unwrap();
    assert!(max_abs_diff(&out, &eta) <= 1e-12);
}

#[test]
fn saturated_nutrient_without_tumour_is_steady() {
    let case = tiny_case(1);
    let (pods, model) = exact_model(&case);
    let w = case.mesh().lumped_mass();
    let eta = pods.n.project(w, &vec![1.0; w.len()]);
    let out = rom_nutrient_init(&model.tensors, &ParameterSet::initial_guess(), &vec![0.0; w.len()], &eta, case.dt()).unwrap();
    assert!(max_abs_diff(&out, &eta) <= 1e-10);
}

#[test]
fn full_rank_basis_reproduces_the_full_model() {
    let case = tiny_case(20);
    let p = ParameterSet::initial_guess();
    let (pods, model) = exact_model(&case);
    let mut fom = initial_state(&case, &p);
    let trajs: Vec<RomTrajectory> = [NewtonJacobian::Interpolated, NewtonJacobian::Consistent]
        .into_iter()
        .map(|jacobian| rom_solve(&model, &p, &RomSettings { jacobian, ..RomSettings::tight() }).unwrap())
        .collect();
    for step in 1..=case.n_steps() {
        fom = advance(&case, &p, &fom, case.dt(), case.therapy().rate(case.time(step))).unwrap().0;
        for tr in &trajs {
            let s = &tr.states[step];
            assert!(max_abs_diff(&model.reconstruct_phi(&s.alpha), &fom.phi) <= 1e-6, "step {step}");
            assert!(max_abs_diff(&pods.n.reconstruct(&s.eta), &fom.n) <= 1e-6, "step {step}");
        }
        // Both Jacobians share one fixed point.
        assert!(max_abs_diff(&trajs[0].states[step].alpha, &trajs[1].states[step].alpha) <= 1e-8);
    }
}

#[test]
fn equilibrium_state_is_a_fixed_point() {
    let p = ParameterSet::initial_guess();
    let phi_bar = equilibrium_volume_fraction(p.s_n, p.delta, p.delta_n).unwrap();
    let case = tiny_case(5);
    let mesh = case.mesh().clone();
    let case = case
        .with_initial(NodalField::constant(&mesh, phi_bar), NodalField::constant(&mesh, p.delta))
        .unwrap();
    let (_, model) = exact_model(&case);
    let tr = rom_solve(&model, &p, &RomSettings::default()).unwrap();
    assert!(tr.newton_iterations.iter().all(|&i| i <= 2), "{:?}", tr.newton_iterations);
    for s in &tr.states {
        assert!(max_abs_diff(&s.alpha, &model.alpha0) <= 1e-6);
    }
}

#[test]
fn sensitivities_start_at_zero_and_stay_finite() {
    let (_, _, model) = small_rom(20);
    let p = ParameterSet::initial_guess();
    let tr = rom_solve(&model, &p, &RomSettings::tight()).unwrap();
    let s = rom_sensitivities(&model, &p, &tr).unwrap();
    assert_eq!(s.d_alpha.len(), tr.states.len());
    for mats in [&s.d_alpha, &s.d_beta, &s.d_eta] {
        assert_eq!(mats[0].amax(), 0.0);
        assert!(mats.iter().all(|m| m.iter().all(|v| v.is_finite())));
    }
    let single = rom_linearized_solve(&model, 4, &p, &tr).unwrap();
    let from_all = s.final_alpha_for(4).unwrap();
    assert!(max_abs_diff(&single.final_alpha_for(4).unwrap(), &from_all) <= 1e-14 * (1.0 + from_all.iter().fold(0.0f64, |a, b| a.max(b.abs()))));
    assert!(rom_linearized_solve(&model, N_PARAMS, &p, &tr).is_err());
}

#[test]
fn linearized_sensitivities_match_central_differences() {
    let (_, _, model) = small_rom(30);
    let p = ParameterSet::initial_guess();
    let tight = RomSettings::tight();
    let tr = rom_solve(&model, &p, &tight).unwrap();
    let s = rom_sensitivities(&model, &p, &tr).unwrap();
    for m in 0..N_PARAMS {
        let h = 1e-4 * p.get(m);
        let plus = rom_solve(&model, &p.with(m, p.get(m) + h), &tight).unwrap();
        let minus = rom_solve(&model, &p.with(m, p.get(m) - h), &tight).unwrap();
        let fd: Vec<f64> = plus.last().alpha.iter().zip(&minus.last().alpha).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let lin = s.final_alpha_for(m).unwrap();
        let num = fd.iter().zip(&lin).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num <= 1e-2 * den, "{}: {num} / {den}", PARAM_NAMES[m]);
    }
}

#[test]
fn chemotactic_speed_has_no_effect_without_chemotaxis() {
    let case = small_case(15);
    let case = case.clone().with_chemotaxis_override(vec![0.0; case.mesh().n_cells()]).unwrap();
    let p = ParameterSet::initial_guess();
    let run = fom_solve(&case, &p, true).unwrap();
    let (_, model) = build_rom(&case, &run, DEFAULT_IC).unwrap();
    let tr = rom_solve(&model, &p, &RomSettings::tight()).unwrap();
    let k_n = PARAM_NAMES.iter().position(|&n| n == "k_n").unwrap();
    let s = rom_linearized_solve(&model, k_n, &p, &tr).unwrap();
    for mats in [&s.d_alpha, &s.d_beta, &s.d_eta] {
        assert!(mats.iter().all(|m| m.amax() <= 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn reduced_states_respect_separation_at_the_nodes(
        nu in 0.05f64..0.2,
        delta in 0.2f64..0.33,
        c_e in 0.3f64..0.6,
    ) {
        let (_, _, model) = small_rom(20);
        let p = ParameterSet { nu, delta, c_e, ..ParameterSet::initial_guess() };
        let tr = rom_solve(&model, &p, &RomSettings::default()).unwrap();
        for s in &tr.states {
            prop_assert!(s.alpha.iter().chain(&s.beta).chain(&s.eta).all(|v| v.is_finite()));
            let phi = model.reconstruct_phi(&s.alpha);
            prop_assert!(model.nodes.iter().all(|&j| phi[j] < 1.0));
        }
    }
}
