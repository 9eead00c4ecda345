use proptest::prelude::*;
use tumour_rom::mesh::*;
use tumour_rom::Error;

fn unit_square_two_cells() -> Mesh {
    Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0], vec![0, 1, 2, 0, 2, 3]).unwrap()
}

#[test]
fn structured_counts_and_area() {
    let m = build_structured_mesh(2, 2, (1.0, 1.0)).unwrap();
    assert_eq!(m.n_vertices(), 9);
    assert_eq!(m.n_cells(), 8);
    assert!((m.total_volume() - 1.0).abs() < 1e-15);
}

#[test]
fn fifty_by_fifty_has_equal_cells() {
    let m = build_structured_mesh(50, 50, (60.0, 60.0)).unwrap();
    assert_eq!(m.n_vertices(), 2601);
    let a = 60.0 * 60.0 / (2.0 * 2500.0);
    for k in 0..m.n_cells() {
        assert!((m.cell_volume(k) - a).abs() < 1e-12 * a);
    }
}

#[test]
fn bad_extent_or_resolution_is_rejected() {
    assert!(matches!(build_structured_mesh(2, 2, (0.0, 1.0)), Err(Error::InvalidConfig(_))));
    assert!(matches!(build_structured_mesh(2, 2, (1.0, -1.0)), Err(Error::InvalidConfig(_))));
    assert!(matches!(build_structured_mesh(1, 2, (1.0, 1.0)), Err(Error::InvalidConfig(_))));
}

#[test]
fn degenerate_and_repeated_cells_are_rejected() {
    assert!(Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![0, 1, 2]).is_err());
    assert!(Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 1, 1]).is_err());
    assert!(Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 1, 3]).is_err());
}

#[test]
fn lumped_product_of_ones_is_area() {
    let m = build_structured_mesh(4, 3, (1.0, 1.0)).unwrap();
    let one = vec![1.0; m.n_vertices()];
    assert!((lumped_inner_product(&m, &one, &one).unwrap() - 1.0).abs() < 1e-14);
    for j in 0..m.n_vertices() {
        assert!(m.lumped_mass()[j] > 0.0);
    }
}

#[test]
fn lumped_and_consistent_differ_except_on_constants() {
    let m = unit_square_two_cells();
    // Vertices 0 and 2 belong to both cells, 1 and 3 to one each.
    let expected = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0];
    for (a, b) in m.lumped_mass().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let cm = consistent_mass(&m);
    let e0 = [1.0, 0.0, 0.0, 0.0];
    let e1 = [0.0, 1.0, 0.0, 0.0];
    assert!((cm.bilinear(&e0, &e1) - 1.0 / 24.0).abs() < 1e-15);
    assert_eq!(lumped_inner_product(&m, &e0, &e1).unwrap(), 0.0);
    let c = [2.0; 4];
    let lumped = lumped_inner_product(&m, &c, &c).unwrap();
    assert!((cm.bilinear(&c, &c) - lumped).abs() < 1e-14);
}

#[test]
fn mismatched_lengths_are_dimension_errors() {
    let m = unit_square_two_cells();
    assert!(matches!(lumped_inner_product(&m, &[1.0; 3], &[1.0; 4]), Err(Error::Dimension(_))));
}

#[test]
fn stiffness_kernel_and_linear_energy() {
    let m = build_structured_mesh(5, 5, (1.0, 1.0)).unwrap();
    let id = CellTensorField::isotropic(2, m.n_cells(), 1.0);
    let a = assemble_stiffness(&m, &id).unwrap();
    assert!(a.is_symmetric(1e-14));
    let au = a.matvec(&vec![1.0; m.n_vertices()]);
    assert!(au.iter().all(|v| v.abs() <= 1e-12 * a.max_abs()));
    let x: Vec<f64> = (0..m.n_vertices()).map(|j| m.vertex(j)[0]).collect();
    assert!((a.bilinear(&x, &x) - 1.0).abs() < 1e-12);

    let zero = CellTensorField::isotropic(2, m.n_cells(), 0.0);
    assert_eq!(assemble_stiffness(&m, &zero).unwrap().max_abs(), 0.0);
}

#[test]
fn anisotropic_energy_of_linear_field() {
    // K = [[a, b], [b, c]], u = x + 2y: ∇u·K∇u = a + 4b + 4c over unit area.
    let m = build_structured_mesh(3, 4, (1.0, 1.0)).unwrap();
    let (a, b, c) = (2.0, 0.5, 1.0);
    let k = CellTensorField::new(2, [a, b, b, c].repeat(m.n_cells())).unwrap();
    let s = assemble_stiffness(&m, &k).unwrap();
    let u: Vec<f64> = (0..m.n_vertices()).map(|j| m.vertex(j)[0] + 2.0 * m.vertex(j)[1]).collect();
    assert!((s.bilinear(&u, &u) - (a + 4.0 * b + 4.0 * c)).abs() < 1e-12);
}

#[test]
fn non_symmetric_tensor_is_rejected() {
    assert!(matches!(
        CellTensorField::new(2, vec![1.0, 0.5, 0.0, 1.0]),
        Err(Error::InvalidTensor { .. })
    ));
    assert!(CellTensorField::new(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
}

#[test]
fn interpolation_examples() {
    let m = build_structured_mesh(2, 2, (1.0, 1.0)).unwrap();
    let c = p1_interpolate(&m, |_| 3.5).unwrap();
    assert!(c.iter().all(|&v| v == 3.5));
    let f = p1_interpolate(&m, |x| x[0] + x[1]).unwrap();
    for (j, v) in f.iter().enumerate() {
        let x = m.vertex(j);
        assert_eq!(*v, x[0] + x[1]);
    }
    let corners = [0usize, 2, 6, 8];
    let vals: Vec<f64> = corners.iter().map(|&j| f[j]).collect();
    assert_eq!(vals, vec![0.0, 1.0, 1.0, 2.0]);
}

#[test]
fn smoothed_disk_vertex_on_the_circle() {
    use tumour_rom::phantom::{smoothed_disk, Disk};
    let seed = Disk { center: [0.0, 0.0], radius: 1.0 };
    // On the nominal boundary the ramp sits at its midpoint.
    assert!((smoothed_disk(&[1.0, 0.0], &seed, 0.4, 0.7) - 0.35).abs() < 1e-15);
    assert_eq!(smoothed_disk(&[0.0, 0.0], &seed, 0.4, 0.7), 0.7);
    assert_eq!(smoothed_disk(&[2.0, 0.0], &seed, 0.4, 0.7), 0.0);
}

/// `∫ (f − π_h f)²` with the three-point interior rule.
fn interpolation_error(n: usize) -> f64 {
    let m = build_structured_mesh(n, n, (1.0, 1.0)).unwrap();
    let f = |x: f64, y: f64| x * x + 0.5 * y * y + x * y;
    let u: Vec<f64> = (0..m.n_vertices()).map(|j| f(m.vertex(j)[0], m.vertex(j)[1])).collect();
    let pts = [[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]];
    let mut e = 0.0;
    for k in 0..m.n_cells() {
        let c = m.cell(k);
        for l in pts {
            let (mut x, mut y, mut uh) = (0.0, 0.0, 0.0);
            for a in 0..3 {
                x += l[a] * m.vertex(c[a])[0];
                y += l[a] * m.vertex(c[a])[1];
                uh += l[a] * u[c[a]];
            }
            e += m.cell_volume(k) / 3.0 * (f(x, y) - uh).powi(2);
        }
    }
    e.sqrt()
}

#[test]
fn halving_h_cuts_interpolation_error_by_three() {
    let (e1, e2, e3) = (interpolation_error(4), interpolation_error(8), interpolation_error(16));
    assert!(e1 / e2 >= 3.0, "{e1} / {e2}");
    assert!(e2 / e3 >= 3.0, "{e2} / {e3}");
}

#[test]
fn mesh_json_round_trip() {
    let m = build_structured_mesh(3, 2, (2.0, 1.0)).unwrap();
    let back = Mesh::from_data(&m.to_data()).unwrap();
    assert_eq!(m.coords(), back.coords());
    assert_eq!(m.n_cells(), back.n_cells());
}

proptest! {
    #[test]
    fn lumped_mass_sums_to_volume(nx in 2usize..12, ny in 2usize..12, lx in 0.5f64..50.0, ly in 0.5f64..50.0) {
        let m = build_structured_mesh(nx, ny, (lx, ly)).unwrap();
        let s: f64 = m.lumped_mass().iter().sum();
        prop_assert!((s - lx * ly).abs() <= 1e-12 * lx * ly);
        prop_assert!((m.total_volume() - lx * ly).abs() <= 1e-12 * lx * ly);
    }

    #[test]
    fn stiffness_annihilates_constants(nx in 2usize..8, ny in 2usize..8, a in 0.1f64..5.0, b in -0.3f64..0.3, c in 0.1f64..5.0) {
        let m = build_structured_mesh(nx, ny, (1.0, 2.0)).unwrap();
        let b = b * (a * c).sqrt();
        let k = CellTensorField::new(2, [a, b, b, c].repeat(m.n_cells())).unwrap();
        let s = assemble_stiffness(&m, &k).unwrap();
        prop_assert!(s.is_symmetric(1e-12 * s.max_abs()));
        let r = s.matvec(&vec![1.0; m.n_vertices()]);
        prop_assert!(r.iter().all(|v| v.abs() <= 1e-12 * s.max_abs()));
    }

    #[test]
    fn lumped_product_is_positive_definite(u in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let m = build_structured_mesh(3, 3, (1.0, 1.0)).unwrap();
        let q = lumped_inner_product(&m, &u, &u).unwrap();
        prop_assert!(q >= 0.0);
        prop_assert_eq!(q == 0.0, u.iter().all(|&v| v == 0.0));
    }
}
