mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_surface_metrics as brute, grid_cloud, random_sim3, ring_trajectory as trajectory};
use robust_nsr::eval::{ape_rpe, chamfer_fscore, classification_metrics};
use robust_nsr::geometry::{umeyama_sim3, Pose, Rotation, Vec3};
use robust_nsr::Error;

#[test]
fn umeyama_recovers_planted_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.gen_range(3..40);
        let src: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let s = random_sim3(&mut rng);
        let dst: Vec<Vec3> = src.iter().map(|p| s.apply(p)).collect();
        let got = umeyama_sim3(&src, &dst).unwrap();
        assert!((got.scale - s.scale).abs() < 1e-9);
        assert!((got.rotation.matrix() - s.rotation.matrix()).abs().max() < 1e-12);
        assert!((got.translation - s.translation).abs().max() < 1e-9);
    }
    let two = [Vec3::zeros(), Vec3::x()];
    assert!(matches!(umeyama_sim3(&two, &two), Err(Error::DegenerateConfiguration(_))));
    let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama_sim3(&line, &line), Err(Error::DegenerateConfiguration(_))));
}

#[test]
fn similarity_transformed_trajectory_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let gt = trajectory(&mut rng, 30);
        let s = random_sim3(&mut rng);
        let est: Vec<Pose> = gt.iter().map(|p| s.apply_pose(p)).collect();
        let m = ape_rpe(&est, &gt, &[true; 30]).unwrap();
        for v in [m.ape_rot_deg, m.ape_trans, m.rpe_rot_deg, m.rpe_trans, m.ape_full, m.rpe_full] {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }
}

#[test]
fn one_rotated_pose_costs_five_over_n_degrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = trajectory(&mut rng, 10);
    let mut est = gt.clone();
    // rotate about the camera center so the alignment is untouched
    est[4].rotation = est[4].rotation * Rotation::from_axis_angle(&Vec3::y(), 5f64.to_radians());
    let m = ape_rpe(&est, &gt, &[true; 10]).unwrap();
    assert!((m.ape_rot_deg - 0.5).abs() < 1e-9, "{}", m.ape_rot_deg);
    assert!(m.ape_trans < 1e-9);
}

#[test]
fn chamfer_and_fscore_match_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(n, m) in &[(1, 1), (7, 300), (500, 499), (2000, 2000), (1500, 64)] {
        let a = grid_cloud(&mut rng, n);
        let b = grid_cloud(&mut rng, m);
        let rho = 0.05;
        assert_eq!(chamfer_fscore(&a, &b, rho).unwrap(), brute(&a, &b, rho));
    }
}

#[test]
fn shifted_dense_cloud_scores_half_rho() {
    let rho = 0.02;
    let grid: Vec<Vec3> = (0..40)
        .flat_map(|i| (0..40).map(move |j| Vec3::new(i as f64 * 0.002, j as f64 * 0.002, 0.0)))
        .collect();
    let shifted: Vec<Vec3> = grid.iter().map(|p| p + Vec3::new(0.0, 0.0, rho / 2.0)).collect();
    let s = chamfer_fscore(&shifted, &grid, rho).unwrap();
    assert_eq!(s, brute(&shifted, &grid, rho));
    assert!((s.chamfer - rho / 2.0).abs() < 1e-12);
    assert_eq!(s.fscore, 1.0);

    let far: Vec<Vec3> = grid.iter().map(|p| p + Vec3::new(10.0 * rho + 0.1, 0.0, 0.0)).collect();
    assert_eq!(chamfer_fscore(&far, &grid, rho).unwrap().fscore, 0.0);
    assert!(matches!(chamfer_fscore(&[], &grid, rho), Err(Error::EmptyPointSet)));
}

#[test]
fn classification_counts() {
    assert_eq!(classification_metrics(&[true, false, true], &[true, false, true]), (1.0, 1.0));
    let pred = [true, true, false, false];
    let actual = [true, false, true, false];
    assert_eq!(classification_metrics(&pred, &actual), (0.5, 0.5));
    assert_eq!(classification_metrics(&[false; 4], &[false; 4]), (1.0, 1.0));
}
