//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The reconstruction criteria
//! train full-size models and take most of an hour on one core. Set
//! `ACCEPTANCE_ONLY=1,3` to run a subset.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tps_sdf::autodiff::{Graph, ParamTensors};
use tps_sdf::field_extract::{
    eval_grid, marching_cubes, marching_squares, padded_unit_bounds, raster_field, LevelSetOutput,
};
use tps_sdf::geometry::normalize_cloud;
use tps_sdf::io::{format_obj, format_ply, format_polylines, format_xyz, parse_obj, parse_ply, parse_polylines, parse_xyz};
use tps_sdf::neural_tps::{classic_tps_eval, classic_tps_solve, psi, BasisKind};
use tps_sdf::pipeline::{
    evaluate_against_shape, model_checkpoint, reconstruct, sign_accuracy, ExtractOptions, Reconstruction,
};
use tps_sdf::synthetic::{add_noise, sphere_points, Shape};
use tps_sdf::trainer::{Model, StepDraws, TrainConfig};
use tps_sdf::{PointCloud, Polylines};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let checks: [(usize, &str, Check); 8] = [
        (1, "second-order gradients match finite differences", criterion_gradients),
        (2, "pull loss does not reach the chart unless asked", criterion_gradient_stop),
        (3, "radial interpolation reproduces node values", criterion_tps_oracle),
        (4, "2-D crescent from 60 nonuniform points", criterion_moon),
        (5, "sphere and torus from 300 points", criterion_shapes),
        (6, "ablation orderings on the sphere", criterion_ablations),
        (7, "noise robustness on the sphere", criterion_noise),
        (8, "metric, extraction, determinism and format checks", criterion_units),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !r.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {name} ({}; {:.1} s)",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mini_config(grad_diff: bool) -> TrainConfig {
    let mut c = TrainConfig {
        chart_points: 12,
        supervision_points: 12,
        queries_per_iter: 10,
        feature_dim: 8,
        feature_width: 8,
        feature_layers: 3,
        chart_width: 8,
        chart_layers: 3,
        ..TrainConfig::default()
    };
    c.ablations.grad_diff = grad_diff;
    c
}

fn mini_model(config: &TrainConfig, seed: u64) -> (Model<f64>, StepDraws<f64>) {
    let mut r = rng(seed);
    let cloud = PointCloud::new(sphere_points(8, 0.4, &mut r)).unwrap();
    let mut model = Model::new(&cloud, config, &mut r).unwrap();
    // nonzero spline weights so every term depends on every field tensor
    let w = Array2::from_shape_simple_fn((1, 8), || r.random_range(-0.5..0.5));
    model.field.set_weights(w).unwrap();
    model.field.refresh_features().unwrap();
    let mut draws = model.draw_step(config, &mut r).unwrap();
    draws.queries = Some(model.resolve_queries(&draws, config).unwrap());
    (model, draws)
}

fn mini_loss(model: &Model<f64>, draws: &StepDraws<f64>, config: &TrainConfig) -> f64 {
    model.loss_and_grads(draws, config).unwrap().0.total
}

/// Largest relative deviation between recorded and central-difference
/// gradients over the chosen tensors.
fn max_fd_error(config: &TrainConfig, include_chart: bool) -> (f64, usize) {
    let (model, draws) = mini_model(config, 21);
    let (_, chart_grads, field_grads) = model.loss_and_grads(&draws, config).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut probe = |perturb: &dyn Fn(&mut Model<f64>, f64), analytic: f64| {
        let mut plus = model.clone();
        perturb(&mut plus, h);
        plus.field.refresh_features().unwrap();
        let mut minus = model.clone();
        perturb(&mut minus, -h);
        minus.field.refresh_features().unwrap();
        let fd = (mini_loss(&plus, &draws, config) - mini_loss(&minus, &draws, config)) / (2.0 * h);
        let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(err);
        count += 1;
    };
    if include_chart {
        for (t, g) in chart_grads.iter().enumerate() {
            for (idx, a) in g.indexed_iter() {
                probe(&|m, d| m.chart.tensors_mut()[t][idx] += d, *a);
            }
        }
    }
    for (t, g) in field_grads.iter().enumerate() {
        for (idx, a) in g.indexed_iter() {
            probe(&|m, d| m.field.tensors_mut()[t][idx] += d, *a);
        }
    }
    (worst, count)
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    // with gradients through the coarse surface every parameter sees the true derivative
    let (full, n_full) = max_fd_error(&mini_config(true), true);
    // by default the chart is cut out of the pull path, so only field tensors are comparable
    let (field, n_field) = max_fd_error(&mini_config(false), false);
    let secs = t.elapsed().as_secs_f64();
    let worst = full.max(field);
    outcome(
        worst < 1e-5 && secs < 10.0,
        format!("max rel err {worst:.2e} over {} entries, {secs:.1} s, bound 1e-5 and 10 s", n_full + n_field),
    )
}

fn pull_chart_gradient(grad_diff: bool) -> (f64, usize) {
    let config = mini_config(grad_diff);
    let (model, draws) = mini_model(&config, 22);
    let mut g = Graph::new();
    let chart = model.chart.bind(&mut g);
    let field = model.field.bind(&mut g);
    let step = model
        .build_loss(&mut g, &chart, &field, &draws, &config, None, false)
        .unwrap();
    let bundle = g.backward(step.pull, &chart.vars()).unwrap();
    let max = bundle
        .grads
        .iter()
        .flat_map(|t| t.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let nonzero = bundle.grads.iter().flat_map(|t| t.iter()).filter(|v| **v != 0.0).count();
    (max, nonzero)
}

fn criterion_gradient_stop() -> Outcome {
    let (stopped, nz) = pull_chart_gradient(false);
    let (through, _) = pull_chart_gradient(true);
    outcome(
        stopped == 0.0 && nz == 0 && through > 0.0,
        format!("default max |dL_pull/dphi| = {stopped:e} ({nz} nonzero), with grad_diff {through:.3e}"),
    )
}

fn criterion_tps_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let pos = Array2::from_shape_simple_fn((10, 2), || r.random_range(-1.0..1.0));
        let vals: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        for kind in [BasisKind::ThinPlate, BasisKind::Cubic] {
            let w = classic_tps_solve(&pos, &vals, kind).unwrap();
            for (i, v) in vals.iter().enumerate() {
                let p = [pos[[i, 0]], pos[[i, 1]]];
                worst = worst.max((classic_tps_eval(&pos, &w, &p, kind).unwrap() - v).abs());
            }
        }
    }
    let tp1 = psi(1.0, BasisKind::ThinPlate).unwrap();
    let tp0 = psi(0.0, BasisKind::ThinPlate).unwrap();
    let cu0 = psi(0.0, BasisKind::Cubic).unwrap();
    outcome(
        worst < 1e-8 && tp1 == 0.0 && tp0 == 0.0 && cu0 == 0.0,
        format!("max residual {worst:.2e} (bound 1e-8), psi(1) = {tp1}, psi(0) = {tp0}, cubic psi(0) = {cu0}"),
    )
}

fn run(cloud: &PointCloud, config: &TrainConfig) -> Reconstruction<f64> {
    reconstruct(cloud, config, &ExtractOptions::default(), |_| {}).unwrap()
}

fn closed_loops(lines: &Polylines) -> (usize, usize) {
    let chains = lines.chains();
    let closed = chains.iter().filter(|(_, c)| *c).count();
    (closed, chains.len())
}

fn criterion_moon() -> Outcome {
    let shape = Shape::default_moon();
    let mut r = rng(4);
    let cloud = shape.sample_nonuniform::<f64, _>(60, &mut r).unwrap().without_normals();
    let config = TrainConfig::default();
    let t = Instant::now();
    let rec = run(&cloud, &config);
    let secs = t.elapsed().as_secs_f64();
    let m = evaluate_against_shape(&rec.surface, &shape, 100_000, 41).unwrap();
    // every level near the surface should be one closed curve, so the levels
    // nest; the grid margin is 0.05, so higher levels may leave the grid
    let mut smooth = true;
    let mut levels = Vec::new();
    for iso in [-0.01, 0.0, 0.02, 0.04] {
        let (closed, total) = closed_loops(&marching_squares(&rec.grid, iso, None).unwrap());
        smooth &= closed == 1 && total == 1;
        levels.push(format!("{iso}:{closed}/{total}"));
    }
    let png = raster_field(&rec.grid, 0.05).unwrap().to_png().unwrap();
    let _ = std::fs::write(std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_moon.png"), png);
    outcome(
        m.cd_l1 < 0.02 && smooth && secs < 900.0,
        format!(
            "chamfer_l1 {:.4} (bound 0.02), closed/total loops per level {}, {secs:.0} s",
            m.cd_l1,
            levels.join(" ")
        ),
    )
}

fn criterion_shapes() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, shape) in [Shape::unit_sphere(), Shape::default_torus()].into_iter().enumerate() {
        let mut r = rng(50 + i as u64);
        let cloud = shape.sample_surface::<f64, _>(300, &mut r).unwrap().without_normals();
        let t = Instant::now();
        let rec = run(&cloud, &TrainConfig::default());
        let secs = t.elapsed().as_secs_f64();
        let m = evaluate_against_shape(&rec.surface, &shape, 100_000, 51).unwrap();
        let s = sign_accuracy(&rec.state.model.field, &rec.transform, &shape, 10_000, 52).unwrap();
        pass &= m.cd_l1_x10() < 0.15 && s >= 0.98 && secs < 1800.0;
        parts.push(format!(
            "{} CD_L1x10 {:.4} sign {:.4} {secs:.0} s",
            shape.name(),
            m.cd_l1_x10(),
            s
        ));
    }
    outcome(pass, format!("{}; bounds 0.15 and 0.98", parts.join(", ")))
}

/// Sphere runs at a reduced budget shared by the ablation and noise checks.
const DESK_ITERATIONS: usize = 1000;

fn desk_sphere(noise: f64, edit: impl FnOnce(&mut TrainConfig)) -> (f64, f64) {
    let shape = Shape::unit_sphere();
    let mut r = rng(60);
    let clean = shape.sample_surface::<f64, _>(300, &mut r).unwrap().without_normals();
    let cloud = add_noise(&clean, noise * shape.bounding_scale(), &mut r).unwrap();
    let mut config = TrainConfig {
        iterations: DESK_ITERATIONS,
        ..TrainConfig::default()
    };
    edit(&mut config);
    let rec = run(&cloud, &config);
    let m = evaluate_against_shape(&rec.surface, &shape, 100_000, 61).unwrap();
    (m.cd_l1_x10(), m.cd_l2_x100())
}

static BASELINE: std::sync::OnceLock<(f64, f64)> = std::sync::OnceLock::new();

fn baseline() -> (f64, f64) {
    *BASELINE.get_or_init(|| desk_sphere(0.0, |_| {}))
}

fn criterion_ablations() -> Outcome {
    let (_, ours) = baseline();
    let (_, no_cd) = desk_sphere(0.0, |c| c.ablations.no_cd = true);
    let (_, no_surf) = desk_sphere(0.0, |c| c.ablations.no_surf = true);
    let (_, p3) = desk_sphere(0.0, |c| c.ablations.patch_count = 3);
    let (_, p5) = desk_sphere(0.0, |c| c.ablations.patch_count = 5);
    let (_, no_feat) = desk_sphere(0.0, |c| c.ablations.no_feature = true);
    let loss_terms = ours < no_cd && ours < no_surf;
    let patches = ours < p3 && ours < p5;
    let features = no_feat >= 5.0 * ours;
    outcome(
        loss_terms && patches && features,
        format!(
            "CD_L2x100 ours {ours:.4}, no_cd {no_cd:.4}, no_surf {no_surf:.4}, patches 3 {p3:.4}, 5 {p5:.4}, \
             no_feature {no_feat:.4} ({:.1}x); terms {loss_terms}, patches {patches}, features {features}",
            no_feat / ours
        ),
    )
}

fn criterion_noise() -> Outcome {
    let (clean, _) = baseline();
    let (n1, _) = desk_sphere(0.01, |_| {});
    let (n3, n3_l2) = desk_sphere(0.03, |_| {});
    outcome(
        n1 <= 1.5 * clean && n3.is_finite() && n3_l2.is_finite(),
        format!("CD_L1x10 0% {clean:.4}, 1% {n1:.4} ({:.2}x, bound 1.5x), 3% {n3:.4}", n1 / clean),
    )
}

fn criterion_units() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // marching cubes on a sphere of radius 0.35
    let res = 48;
    let (lo, hi) = padded_unit_bounds::<f64>(3, 0.1);
    let grid = eval_grid(&[res; 3], &lo, &hi, |q| {
        Ok(q.rows().into_iter().map(|p| p.dot(&p).sqrt() - 0.35).collect())
    })
    .unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let diag = grid.cell_diagonal();
    let worst = mesh
        .vertices
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 0.35).abs())
        .fold(0.0, f64::max);
    check(!mesh.faces.is_empty() && worst <= diag, "marching cubes sphere bound");

    // marching squares on a circle
    let (lo, hi) = padded_unit_bounds::<f64>(2, 0.1);
    let grid2 = eval_grid(&[128, 128], &lo, &hi, |q| {
        Ok(q.rows().into_iter().map(|p| p.dot(&p).sqrt() - 0.3).collect())
    })
    .unwrap();
    let lines = marching_squares(&grid2, 0.0, None).unwrap();
    let worst2 = lines
        .vertices
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1]).sqrt() - 0.3).abs())
        .fold(0.0, f64::max);
    check(worst2 <= grid2.cell_diagonal() && closed_loops(&lines) == (1, 1), "marching squares circle");

    // shoelace area of the extracted loop against the disk
    let area: f64 = lines
        .segments
        .iter()
        .map(|&[a, b]| {
            let (p, q) = (lines.vertices[a], lines.vertices[b]);
            0.5 * (p[0] * q[1] - q[0] * p[1])
        })
        .sum();
    check((area - PI * 0.09).abs() < 0.01 * PI * 0.09, "circle area");

    // bit-identical reruns
    let mut r = rng(70);
    let cloud = PointCloud::new(sphere_points(40, 1.0, &mut r)).unwrap();
    let mut config = mini_config(false);
    config.iterations = 5;
    config.seed = 3;
    let extract = ExtractOptions {
        resolution_3d: 16,
        ..ExtractOptions::default()
    };
    let a = reconstruct(&cloud, &config, &extract, |_| {}).unwrap();
    let b = reconstruct(&cloud, &config, &extract, |_| {}).unwrap();
    let text = |x: &Reconstruction<f64>| model_checkpoint(&x.state.model, &x.transform).to_text();
    check(text(&a) == text(&b), "checkpoint determinism");
    let obj = |x: &Reconstruction<f64>| match &x.surface {
        LevelSetOutput::Mesh { mesh, .. } => format_obj(mesh),
        LevelSetOutput::Lines { lines, .. } => format_polylines(lines),
    };
    check(obj(&a) == obj(&b), "mesh determinism");

    // file formats
    let back: PointCloud = parse_xyz(&format_xyz(&cloud)).unwrap();
    check(back.points() == cloud.points(), "xyz round trip");
    for binary in [false, true] {
        let ply = parse_ply::<f64>(&format_ply(&cloud, binary).unwrap()).unwrap();
        check(ply.cloud.points() == cloud.points(), "ply round trip");
    }
    let mesh_back = parse_obj::<f64>(&format_obj(&mesh)).unwrap();
    check(mesh_back.faces == mesh.faces && mesh_back.vertices == mesh.vertices, "obj round trip");
    let lines_back = parse_polylines::<f64>(&format_polylines(&lines)).unwrap();
    check(lines_back.chains().len() == lines.chains().len(), "polyline round trip");

    // normalization maps into the half-unit box and back
    let (norm, t) = normalize_cloud(&cloud).unwrap();
    let max_abs = norm.points().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let restored = t.invert(norm.points());
    let drift = (&restored - cloud.points()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check((max_abs - 0.5).abs() < 1e-12 && drift < 1e-12, "normalization");

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("mc err {worst:.4} <= {diag:.4}, ms err {worst2:.4}, formats and reruns identical")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}
