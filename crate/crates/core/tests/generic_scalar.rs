use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tps_sdf::field_extract::{eval_grid, marching_cubes, padded_unit_bounds, LevelSetOutput};
use tps_sdf::geometry::{chamfer_l1, PointCloud};
use tps_sdf::pipeline::{reconstruct, ExtractOptions};
use tps_sdf::synthetic::sphere_points;
use tps_sdf::trainer::TrainConfig;
use tps_sdf::Real;

fn tiny() -> TrainConfig {
    TrainConfig {
        iterations: 10,
        chart_points: 100,
        supervision_points: 100,
        queries_per_iter: 50,
        feature_dim: 8,
        feature_width: 8,
        feature_layers: 3,
        chart_width: 16,
        chart_layers: 3,
        ..TrainConfig::default()
    }
}

fn run<T: Real>() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = PointCloud::new(sphere_points::<T, _>(60, 1.0, &mut rng)).unwrap();
    let extract = ExtractOptions {
        resolution_3d: 20,
        ..ExtractOptions::default()
    };
    let rec = reconstruct(&cloud, &tiny(), &extract, |_| {}).unwrap();
    let faces = match &rec.surface {
        LevelSetOutput::Mesh { mesh, .. } => mesh.faces.len(),
        LevelSetOutput::Lines { .. } => 0,
    };
    let loss = rec.state.history.last().unwrap().total;
    (faces, loss)
}

#[test]
fn pipeline_runs_in_both_precisions() {
    let (f64_faces, f64_loss) = run::<f64>();
    let (f32_faces, f32_loss) = run::<f32>();
    assert!(f64_faces > 0 && f32_faces > 0);
    assert!(f64_loss.is_finite() && f32_loss.is_finite());
}

#[test]
fn extraction_and_metrics_agree_across_precisions() {
    fn sphere<T: Real>() -> Vec<[f64; 3]> {
        let (lo, hi) = padded_unit_bounds::<T>(3, 0.1);
        let grid = eval_grid(&[24; 3], &lo, &hi, |q| {
            Ok(q.rows()
                .into_iter()
                .map(|p| p.dot(&p).sqrt() - T::lit(0.3))
                .collect())
        })
        .unwrap();
        marching_cubes(&grid, T::zero())
            .unwrap()
            .vertices
            .iter()
            .map(|v| [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()])
            .collect()
    }
    let a = sphere::<f64>();
    let b = sphere::<f32>();
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        for d in 0..3 {
            assert!((p[d] - q[d]).abs() < 1e-5);
        }
    }
    let to_cloud = |v: &[[f64; 3]]| {
        PointCloud::new(Array2::from_shape_fn((v.len(), 3), |(i, d)| v[i][d] as f32)).unwrap()
    };
    let cd: f32 = chamfer_l1(&to_cloud(&a), &to_cloud(&b)).unwrap();
    assert!(cd < 1e-5);
}
