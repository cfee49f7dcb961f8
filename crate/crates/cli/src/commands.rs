use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tps_sdf::autodiff::checkpoint::Checkpoint;
use tps_sdf::field_extract::{eval_grid, marching_squares, padded_unit_bounds, raster_field, LevelSetOutput, ScalarField};
use tps_sdf::geometry::{normalize_cloud, sample_mesh_surface, sample_polylines, NormalizationTransform};
use tps_sdf::io::{format_obj, format_polylines, format_xyz, parse_obj, parse_polylines, read_point_cloud};
use tps_sdf::pipeline::{
    compare_samples, evaluate_against_shape, transform_output, model_checkpoint, reconstruct, restore_checkpoint,
    sample_output, shape_frame, sign_accuracy, SurfaceMetrics,
};
use tps_sdf::synthetic::{add_noise, Shape};
use tps_sdf::trainer::LossRecord;
use tps_sdf::{Error, PointCloud};

use crate::error::{CliError, CliResult};
use crate::manifest::{GroundTruth, Manifest, SamplingRecord, SyntheticSpec};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Samples a synthetic cloud; points carry no normals.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> CliResult<(PointCloud, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = if spec.nonuniform {
        spec.shape.sample_nonuniform(spec.count, &mut rng)?
    } else {
        spec.shape.sample_surface(spec.count, &mut rng)?
    };
    let sigma = spec.noise * spec.shape.bounding_scale();
    let cloud = add_noise(&clean.without_normals(), sigma, &mut rng)?;
    let gt = GroundTruth {
        shape: Some(spec.shape),
        mesh: None,
        sampling: Some(SamplingRecord {
            count: spec.count,
            noise: spec.noise,
            noise_sigma: sigma,
            nonuniform: spec.nonuniform,
            seed,
        }),
    };
    Ok((cloud, gt))
}

fn gt_toml(gt: &GroundTruth) -> CliResult<String> {
    toml::to_string(gt).map_err(|e| CliError::internal(e.to_string()))
}

/// Descriptor path next to a point-cloud path: `a/b.xyz` -> `a/b.gt.toml`.
pub fn descriptor_path(cloud: &Path) -> PathBuf {
    cloud.with_extension("gt.toml")
}

pub fn cmd_gen(spec: &SyntheticSpec, seed: u64, out: &Path) -> CliResult<()> {
    let (cloud, gt) = synthesize(spec, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write(out, format_xyz(&cloud))?;
    let desc = descriptor_path(out);
    write(&desc, gt_toml(&gt)?)?;
    eprintln!("wrote {} and {}", out.display(), desc.display());
    Ok(())
}

/// Reconstructed surface read from disk (OBJ or polyline text).
pub fn read_surface(path: &Path) -> CliResult<LevelSetOutput<f64>> {
    let text = read_text(path)?;
    let is_obj = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    let out = if is_obj {
        LevelSetOutput::Mesh {
            mesh: parse_obj(&text).map_err(|e| CliError::from(e).in_file(path))?,
            iso: 0.0,
        }
    } else {
        LevelSetOutput::Lines {
            lines: parse_polylines(&text).map_err(|e| CliError::from(e).in_file(path))?,
            iso: 0.0,
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub surface: SurfaceMetrics,
    pub sign: Option<f64>,
}

/// Metrics of `surface` (input frame) against `gt`.
pub fn evaluate(
    surface: &LevelSetOutput<f64>,
    gt: &GroundTruth,
    samples: usize,
    seed: u64,
    field: Option<(&tps_sdf::neural_tps::TpsNet<f64>, &NormalizationTransform<f64>)>,
) -> CliResult<Evaluation> {
    if let Some(shape) = &gt.shape {
        let surface = evaluate_against_shape(surface, shape, samples, seed)?;
        let sign = match field {
            Some((f, t)) => Some(sign_accuracy(f, t, shape, 10_000, seed ^ 0x51)?),
            None => None,
        };
        return Ok(Evaluation { surface, sign });
    }
    let path = gt.mesh.as_ref().expect("validated ground truth");
    let reference = read_surface(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let gt_pts = match &reference {
        LevelSetOutput::Mesh { mesh, .. } => sample_mesh_surface(mesh, samples, true, &mut rng)?,
        LevelSetOutput::Lines { lines, .. } => sample_polylines(lines, samples, true, &mut rng)?,
    };
    let (gt_norm, frame) = normalize_cloud(&gt_pts)?;
    let recon = frame.apply_cloud(&sample_output(surface, samples, seed)?);
    Ok(Evaluation {
        surface: compare_samples(&recon, &gt_norm)?,
        sign: None,
    })
}

pub fn metric_header(metrics: &[String]) -> String {
    let mut cols = vec!["name".to_string()];
    for m in metrics {
        cols.push(
            match m.as_str() {
                "cd_l1" => "cd_l1_x10",
                "cd_l2" => "cd_l2_x100",
                "nc" => "nc",
                _ => "sign_accuracy",
            }
            .to_string(),
        );
    }
    cols.push("samples".into());
    cols.join("\t")
}

pub fn metric_row(name: &str, metrics: &[String], e: &Evaluation) -> String {
    let mut cols = vec![name.to_string()];
    for m in metrics {
        let v = match m.as_str() {
            "cd_l1" => e.surface.cd_l1_x10(),
            "cd_l2" => e.surface.cd_l2_x100(),
            "nc" => e.surface.nc,
            _ => e.sign.unwrap_or(f64::NAN),
        };
        cols.push(if v.is_nan() { "nan".into() } else { format!("{v:.6}") });
    }
    cols.push(e.surface.samples.to_string());
    cols.join("\t")
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub evaluation: Option<Evaluation>,
    pub seconds: f64,
    pub iterations: usize,
}

/// Runs one manifest end to end and writes every artifact to its output directory.
pub fn run_manifest(m: &Manifest, quiet: bool) -> CliResult<RunSummary> {
    m.validate()?;
    let out = &m.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log_line = |s: &str| -> CliResult<()> {
        writeln!(log, "{s}").map_err(|e| CliError::io(&log_path, e))
    };
    log_line(&format!("# run {} seed {}", m.name, m.seed))?;

    let (cloud, gt) = if let Some(spec) = &m.synthetic {
        let (cloud, gt) = synthesize(spec, m.seed)?;
        write(&out.join("input.xyz"), format_xyz(&cloud))?;
        write(&out.join("ground_truth.toml"), gt_toml(&gt)?)?;
        (cloud, Some(gt))
    } else {
        let path = m.input.as_ref().expect("validated input");
        let read = read_point_cloud(path).map_err(|e| CliError::from(e).in_file(path))?;
        for w in &read.warnings {
            eprintln!("warning: {}: {w}", path.display());
            log_line(&format!("# warning: {w}"))?;
        }
        (read.cloud, None)
    };
    let gt = match &m.ground_truth {
        Some(p) => Some(GroundTruth::load(p)?),
        None => gt,
    };
    write(&out.join("config.toml"), m.resolved_toml()?)?;

    log_line(LossRecord::HEADER)?;
    let every = m.train.log_every.max(1);
    let last = m.train.iterations.saturating_sub(1);
    let mut lines = Vec::new();
    let t = Instant::now();
    let result = reconstruct(&cloud, &m.train, &m.extract, |r| {
        if r.iter % every == 0 || r.iter == last {
            lines.push(r.to_line());
            if !quiet {
                eprintln!("[{}] {}", m.name, r.to_line());
            }
        }
    });
    for l in &lines {
        log_line(l)?;
    }
    let rec = match result {
        Ok(r) => r,
        Err(e) => {
            log_line(&format!("# failed: {e}"))?;
            if let Error::Diverged { .. } = e {
                eprintln!("training log: {}", log_path.display());
            }
            return Err(e.into());
        }
    };
    let seconds = t.elapsed().as_secs_f64();
    log_line(&format!("# trained in {seconds:.1} s"))?;

    let ck = model_checkpoint(&rec.state.model, &rec.transform);
    write(&out.join("checkpoint.txt"), ck.to_text())?;
    match &rec.surface {
        LevelSetOutput::Mesh { mesh, .. } => write(&out.join("mesh.obj"), format_obj(mesh))?,
        LevelSetOutput::Lines { lines, .. } => {
            write(&out.join("level_set.txt"), format_polylines(lines))?;
            let raster = raster_field(&rec.grid, m.raster_spacing)?;
            write(&out.join("field.png"), raster.to_png()?)?;
        }
    }

    let evaluation = match &gt {
        Some(gt) if !m.metrics.is_empty() => {
            let e = evaluate(
                &rec.surface,
                gt,
                m.eval_samples,
                m.seed,
                Some((&rec.state.model.field, &rec.transform)),
            )?;
            let tsv = format!(
                "{}\n{}\n",
                metric_header(&m.metrics),
                metric_row(&m.name, &m.metrics, &e)
            );
            write(&out.join("metrics.tsv"), &tsv)?;
            if !quiet {
                print!("{tsv}");
            }
            Some(e)
        }
        _ => None,
    };
    Ok(RunSummary {
        evaluation,
        seconds,
        iterations: rec.state.iteration,
    })
}

pub fn cmd_eval(
    surface: &Path,
    gt: &Path,
    samples: usize,
    seed: u64,
    name: &str,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let gt_desc = GroundTruth::load(gt)?;
    let s = read_surface(surface)?;
    let restored = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::<f64>::from_text(&read_text(p)?).map_err(|e| CliError::from(e).in_file(p))?;
            Some(restore_checkpoint(&ck)?)
        }
        None => None,
    };
    let field = restored.as_ref().map(|r| (&r.field, &r.transform));
    let e = evaluate(&s, &gt_desc, samples, seed, field)?;
    let metrics: Vec<String> = crate::manifest::METRICS.iter().map(|s| s.to_string()).collect();
    let tsv = format!(
        "{}\tcd_l1\tcd_l2\n{}\t{:.8}\t{:.8}\n",
        metric_header(&metrics),
        metric_row(name, &metrics, &e),
        e.surface.cd_l1,
        e.surface.cd_l2
    );
    print!("{tsv}");
    if let Some(o) = out {
        write(o, &tsv)?;
    }
    Ok(())
}

pub fn cmd_ablate(manifests: &[Manifest], out: Option<&Path>) -> CliResult<String> {
    let metrics: Vec<String> = crate::manifest::METRICS.iter().map(|s| s.to_string()).collect();
    let mut table = format!("{}\tstatus\tseconds\terror\n", metric_header(&metrics));
    for m in manifests {
        eprintln!("ablate: running {}", m.name);
        let row = match run_manifest(m, true) {
            Ok(s) => {
                let e = s.evaluation.unwrap_or(Evaluation {
                    surface: SurfaceMetrics {
                        cd_l1: f64::NAN,
                        cd_l2: f64::NAN,
                        nc: f64::NAN,
                        samples: 0,
                    },
                    sign: None,
                });
                format!("{}\tok\t{:.1}\t", metric_row(&m.name, &metrics, &e), s.seconds)
            }
            Err(err) => {
                let nan = vec!["nan"; metrics.len()].join("\t");
                format!("{}\t{nan}\t0\tfailed\t0\t{}", m.name, err.to_string().replace('\t', " "))
            }
        };
        table.push_str(&row);
        table.push('\n');
    }
    print!("{table}");
    if let Some(o) = out {
        write(o, &table)?;
    }
    Ok(table)
}

/// A 2-D field over the normalized square from a checkpoint or an analytic
/// shape. The optional zero level set is written in input coordinates.
pub fn cmd_field2d(
    checkpoint: Option<&Path>,
    gt: Option<&Path>,
    resolution: usize,
    padding: f64,
    spacing: f64,
    out: &Path,
    lines_out: Option<&Path>,
) -> CliResult<()> {
    let (lo, hi) = padded_unit_bounds::<f64>(2, padding);
    let dims = [resolution, resolution];
    let (grid, frame): (ScalarField<f64>, NormalizationTransform<f64>) = match (checkpoint, gt) {
        (Some(p), None) => {
            let ck = Checkpoint::<f64>::from_text(&read_text(p)?).map_err(|e| CliError::from(e).in_file(p))?;
            let mut r = restore_checkpoint(&ck)?;
            if r.field.dim() != 2 {
                return Err(CliError::invalid("field2d needs a 2-D checkpoint"));
            }
            r.field.refresh_features()?;
            (eval_grid(&dims, &lo, &hi, |q| r.field.sdf_batch(q))?, r.transform)
        }
        (None, Some(g)) => {
            let gt = GroundTruth::load(g)?;
            let shape: Shape = gt
                .shape
                .ok_or_else(|| CliError::invalid("field2d needs an analytic ground truth"))?;
            if shape.dim() != 2 {
                return Err(CliError::invalid("field2d needs a 2-D shape"));
            }
            let frame = shape_frame::<f64>(&shape);
            let grid = eval_grid(&dims, &lo, &hi, |q| {
                let x: Array2<f64> = frame.invert(&q.to_owned());
                Ok(x.rows()
                    .into_iter()
                    .map(|r| shape.sdf(&[r[0], r[1]]) * frame.scale)
                    .collect())
            })?;
            (grid, frame)
        }
        _ => return Err(CliError::invalid("give exactly one of --checkpoint or --gt")),
    };
    write(out, raster_field(&grid, spacing)?.to_png()?)?;
    if let Some(l) = lines_out {
        let lines = LevelSetOutput::Lines {
            lines: marching_squares(&grid, 0.0, None)?,
            iso: 0.0,
        };
        if let LevelSetOutput::Lines { lines, .. } = transform_output(&lines, |p| frame.invert(p)) {
            write(l, format_polylines(&lines))?;
        }
    }
    Ok(())
}
