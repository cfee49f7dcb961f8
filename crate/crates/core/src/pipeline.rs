//! End-to-end reconstruction: normalize, train, extract, map back; plus
//! checkpoints and surface metrics.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{Activation, Layer, MlpParams};
use crate::error::{invalid, Error, Result};
use crate::field_extract::{
    eval_grid, marching_cubes, marching_squares, padded_unit_bounds, LevelSetOutput, ScalarField,
};
use crate::geometry::{
    chamfer_l1, chamfer_l2, normal_consistency, normalize_cloud, sample_mesh_surface,
    sample_polylines, NormalizationTransform, PointCloud, Polylines, TriangleMesh,
};
use crate::neural_tps::{TpsNet, TpsOptions};
use crate::surface_param::{ParamNet, ParamOptions};
use crate::synthetic::Shape;
use crate::trainer::{train_with, LossRecord, Model, TrainConfig, TrainState};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    pub resolution_3d: usize,
    pub resolution_2d: usize,
    /// Grid padding around the normalized cube, relative to its side.
    pub padding: f64,
    pub iso: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            resolution_3d: 128,
            resolution_2d: 256,
            padding: 0.1,
            iso: 0.0,
        }
    }
}

impl ExtractOptions {
    pub fn resolution(&self, dim: usize) -> usize {
        if dim == 2 {
            self.resolution_2d
        } else {
            self.resolution_3d
        }
    }
}

/// Samples a trained field on the padded normalized cube.
pub fn field_grid<T: Real>(net: &TpsNet<T>, opts: &ExtractOptions) -> Result<ScalarField<T>> {
    let d = net.dim();
    let res = opts.resolution(d);
    let (lo, hi) = padded_unit_bounds::<T>(d, opts.padding);
    let mut cached;
    let net = if net.features_fresh() {
        net
    } else {
        cached = net.clone();
        cached.refresh_features()?;
        &cached
    };
    eval_grid(&vec![res; d], &lo, &hi, |p| net.sdf_batch(p))
}

/// Zero set of a trained field in normalized coordinates.
pub fn extract_level_set<T: Real>(
    net: &TpsNet<T>,
    opts: &ExtractOptions,
) -> Result<(ScalarField<T>, LevelSetOutput<T>)> {
    let grid = field_grid(net, opts)?;
    let iso = T::lit(opts.iso);
    let out = if grid.dim() == 3 {
        LevelSetOutput::Mesh {
            mesh: marching_cubes(&grid, iso)?,
            iso,
        }
    } else {
        let center = |p: &[T]| net.sdf_eval(p).unwrap_or(T::zero());
        LevelSetOutput::Lines {
            lines: marching_squares(&grid, iso, Some(&center))?,
            iso,
        }
    };
    Ok((grid, out))
}

pub fn transform_output<T: Real>(
    out: &LevelSetOutput<T>,
    f: impl Fn(&Array2<T>) -> Array2<T>,
) -> LevelSetOutput<T> {
    match out {
        LevelSetOutput::Mesh { mesh, iso } => {
            let v = f(&mesh.vertex_array());
            LevelSetOutput::Mesh {
                mesh: TriangleMesh {
                    vertices: v.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
                    faces: mesh.faces.clone(),
                },
                iso: *iso,
            }
        }
        LevelSetOutput::Lines { lines, iso } => {
            let v = f(&lines.vertex_array());
            LevelSetOutput::Lines {
                lines: Polylines {
                    vertices: v.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
                    segments: lines.segments.clone(),
                },
                iso: *iso,
            }
        }
    }
}

#[derive(Debug)]
pub struct Reconstruction<T: Real> {
    pub state: TrainState<T>,
    pub transform: NormalizationTransform<T>,
    /// Grid of the trained field in normalized coordinates.
    pub grid: ScalarField<T>,
    /// Extracted surface in the input frame.
    pub surface: LevelSetOutput<T>,
}

/// Normalizes `cloud`, trains, extracts the zero set and maps it back.
pub fn reconstruct<T: Real, F: FnMut(&LossRecord)>(
    cloud: &PointCloud<T>,
    config: &TrainConfig,
    extract: &ExtractOptions,
    observer: F,
) -> Result<Reconstruction<T>> {
    let cloud = cloud.clone().without_normals();
    let (normalized, transform) = normalize_cloud(&cloud)?;
    let state = train_with(&normalized, config, observer)?;
    let (grid, out) = extract_level_set(&state.model.field, extract)?;
    let surface = transform_output(&out, |v| transform.invert(v));
    Ok(Reconstruction {
        state,
        transform,
        grid,
        surface,
    })
}

fn vector_layer<T: Real>(m: &Array2<T>) -> MlpParams<T> {
    MlpParams {
        layers: vec![Layer {
            weight: m.clone(),
            bias: None,
            activation: Activation::Identity,
        }],
    }
}

fn meta_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("options serialize")
}

/// Snapshot of both networks and the normalization.
pub fn model_checkpoint<T: Real>(
    model: &Model<T>,
    transform: &NormalizationTransform<T>,
) -> Checkpoint<T> {
    let mut ck = Checkpoint::default();
    ck.meta.insert("dim".into(), model.dim().to_string());
    ck.meta
        .insert("tps_options".into(), meta_json(&model.field.options));
    ck.meta
        .insert("chart_options".into(), meta_json(&model.chart.options));
    let c: Vec<String> = transform.center.iter().map(|v| v.to_f64_lossy().to_string()).collect();
    ck.meta.insert("center".into(), c.join(" "));
    ck.meta
        .insert("scale".into(), transform.scale.to_f64_lossy().to_string());
    ck.networks
        .push(("chart.trunk".into(), model.chart.trunk.clone()));
    for (k, h) in model.chart.heads.iter().enumerate() {
        ck.networks.push((format!("chart.head.{k}"), h.clone()));
    }
    ck.networks
        .push(("field.controls".into(), vector_layer(model.field.controls())));
    if let Some(f) = model.field.feature_net() {
        ck.networks.push(("field.features".into(), f.clone()));
    }
    ck.networks
        .push(("field.weights".into(), vector_layer(model.field.weights())));
    if let Some(h) = model.field.head() {
        ck.networks.push(("field.head".into(), h.clone()));
    }
    ck
}

/// A restored model: chart, field and normalization.
#[derive(Debug, Clone)]
pub struct RestoredModel<T> {
    pub chart: ParamNet<T>,
    pub field: TpsNet<T>,
    pub transform: NormalizationTransform<T>,
}

pub fn restore_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<RestoredModel<T>> {
    let bad = |m: &str| Error::InvalidInput(format!("checkpoint: {m}"));
    let meta = |k: &str| ck.meta.get(k).ok_or_else(|| bad(&format!("missing {k}")));
    let tps: TpsOptions =
        serde_json::from_str(meta("tps_options")?).map_err(|e| bad(&e.to_string()))?;
    let chart_opts: ParamOptions =
        serde_json::from_str(meta("chart_options")?).map_err(|e| bad(&e.to_string()))?;
    let center = meta("center")?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map(T::lit))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| bad("bad center"))?;
    let scale = T::lit(meta("scale")?.parse::<f64>().map_err(|_| bad("bad scale"))?);
    let net = |name: &str| ck.network(name).cloned();
    let matrix = |name: &str| -> Result<Array2<T>> {
        net(name)
            .and_then(|m| m.layers.into_iter().next())
            .map(|l| l.weight)
            .ok_or_else(|| bad(&format!("missing {name}")))
    };
    let field = TpsNet::from_parts(
        tps,
        matrix("field.controls")?,
        net("field.features"),
        matrix("field.weights")?,
        net("field.head"),
    )?;
    let heads: Vec<MlpParams<T>> = (0..chart_opts.patch_count)
        .map(|k| net(&format!("chart.head.{k}")).ok_or_else(|| bad("missing chart head")))
        .collect::<Result<_>>()?;
    let chart = ParamNet {
        options: chart_opts,
        trunk: net("chart.trunk").ok_or_else(|| bad("missing chart trunk"))?,
        heads,
    };
    if center.len() != field.dim() {
        return Err(bad("center dimension mismatch"));
    }
    Ok(RestoredModel {
        chart,
        field,
        transform: NormalizationTransform { center, scale },
    })
}

/// Signed distance in the input frame.
pub fn sdf_in_input_frame<T: Real>(
    field: &TpsNet<T>,
    transform: &NormalizationTransform<T>,
    points: &Array2<T>,
) -> Result<Vec<T>> {
    let q = transform.apply(points);
    let v = if field.features_fresh() {
        field.sdf_batch(q.view())?
    } else {
        let mut f = field.clone();
        f.refresh_features()?;
        f.sdf_batch(q.view())?
    };
    Ok(v.into_iter().map(|x| x / transform.scale).collect())
}

/// Frame in which a synthetic shape's bounding scale maps to 0.5.
pub fn shape_frame<T: Real>(shape: &Shape) -> NormalizationTransform<T> {
    NormalizationTransform {
        center: vec![T::zero(); shape.dim()],
        scale: T::lit(0.5 / shape.bounding_scale()),
    }
}

/// Surface metrics; distances in whatever frame the inputs share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub nc: f64,
    pub samples: usize,
}

impl SurfaceMetrics {
    pub const TSV_HEADER: &'static str = "cd_l1_x10\tcd_l2_x100\tnc\tcd_l1\tcd_l2\tsamples";

    pub fn cd_l1_x10(&self) -> f64 {
        self.cd_l1 * 10.0
    }

    pub fn cd_l2_x100(&self) -> f64 {
        self.cd_l2 * 100.0
    }

    pub fn tsv_fields(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.8}\t{:.8}\t{}",
            self.cd_l1_x10(),
            self.cd_l2_x100(),
            self.nc,
            self.cd_l1,
            self.cd_l2,
            self.samples
        )
    }
}

/// Area- or length-uniform samples with normals on an extracted surface.
pub fn sample_output<T: Real>(out: &LevelSetOutput<T>, n: usize, seed: u64) -> Result<PointCloud<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match out {
        LevelSetOutput::Mesh { mesh, .. } => {
            if mesh.faces.is_empty() {
                return invalid("reconstructed mesh has no faces");
            }
            sample_mesh_surface(mesh, n, true, &mut rng)
        }
        LevelSetOutput::Lines { lines, .. } => {
            if lines.segments.is_empty() {
                return invalid("reconstructed level set has no segments");
            }
            sample_polylines(lines, n, true, &mut rng)
        }
    }
}

pub fn compare_samples<T: Real>(recon: &PointCloud<T>, gt: &PointCloud<T>) -> Result<SurfaceMetrics> {
    let nc = if recon.normals().is_some() && gt.normals().is_some() {
        normal_consistency(recon, gt)?.to_f64_lossy()
    } else {
        f64::NAN
    };
    Ok(SurfaceMetrics {
        cd_l1: chamfer_l1(recon, gt)?.to_f64_lossy(),
        cd_l2: chamfer_l2(recon, gt)?.to_f64_lossy(),
        nc,
        samples: recon.len().min(gt.len()),
    })
}

/// Metrics of a surface (input frame) against a synthetic shape, both
/// sampled `n` times and measured in the shape's normalized frame.
pub fn evaluate_against_shape(
    out: &LevelSetOutput<f64>,
    shape: &Shape,
    n: usize,
    seed: u64,
) -> Result<SurfaceMetrics> {
    if out_dim(out) != shape.dim() {
        return invalid("surface and shape dimensions differ");
    }
    let frame = shape_frame::<f64>(shape);
    let recon = frame.apply_cloud(&sample_output(out, n, seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let gt = frame.apply_cloud(&shape.sample_surface(n, &mut rng)?);
    compare_samples(&recon, &gt)
}

fn out_dim<T>(out: &LevelSetOutput<T>) -> usize {
    match out {
        LevelSetOutput::Mesh { .. } => 3,
        LevelSetOutput::Lines { .. } => 2,
    }
}

/// Fraction of inside/outside probe points where the field has the right sign.
pub fn sign_accuracy(
    field: &TpsNet<f64>,
    transform: &NormalizationTransform<f64>,
    shape: &Shape,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (probes, inside) = shape.probe_shells(n, &mut rng);
    let v = sdf_in_input_frame(field, transform, &probes)?;
    let ok = v
        .iter()
        .zip(&inside)
        .filter(|(f, i)| (**f < 0.0) == **i)
        .count();
    Ok(ok as f64 / n as f64)
}
