//! Command-line front end: synthetic data, reconstruction, evaluation and ablation sweeps.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tps_sdf::synthetic::Shape;

use crate::error::CliResult;
use crate::manifest::{Manifest, SyntheticSpec};

#[derive(Parser)]
#[command(name = "tps-sdf", version, about = "Signed distance fields from sparse point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic shape to an XYZ file plus a ground-truth descriptor.
    Gen {
        /// sphere, cube, torus or moon2d.
        #[arg(long, default_value = "sphere")]
        shape: String,
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Noise standard deviation as a fraction of the bounding scale.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Tip-biased sampling (moon2d).
        #[arg(long)]
        nonuniform: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train on a point cloud and extract its surface.
    Reconstruct(ReconstructArgs),
    /// Compare a reconstructed surface with ground truth; prints TSV.
    Eval {
        /// OBJ mesh or polyline text file.
        #[arg(long)]
        surface: PathBuf,
        /// Ground-truth descriptor (TOML).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        name: String,
        /// Checkpoint of the field, enables the sign metric.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run several manifests and merge their metrics into one table.
    Ablate {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// `key=value` override applied to every manifest.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render a 2-D field (trained or analytic) with its level sets.
    Field2d {
        #[arg(long, conflicts_with = "gt")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 0.1)]
        padding: f64,
        #[arg(long, default_value_t = 0.05)]
        spacing: f64,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write the zero level set as polylines.
        #[arg(long)]
        lines: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReconstructArgs {
    /// Experiment manifest (TOML); flags below override it.
    manifest: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    queries_per_iter: Option<usize>,
    /// S or P.
    #[arg(long)]
    query_anchor: Option<String>,
    #[arg(long)]
    patch_count: Option<usize>,
    /// thin_plate or cubic.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    no_cd: bool,
    #[arg(long)]
    no_surf: bool,
    #[arg(long)]
    grad_diff: bool,
    #[arg(long)]
    separate: bool,
    #[arg(long)]
    no_feature: bool,
    #[arg(long)]
    no_disp: bool,
    #[arg(long)]
    unsquared_arg: bool,
    /// Grid resolution for extraction.
    #[arg(long)]
    resolution: Option<usize>,
    /// Any manifest field as a dotted `key=value`, e.g. `train.alpha=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ReconstructArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let quote = |s: &str| format!("{s:?}");
        if let Some(v) = &self.input {
            o.push(format!("input={}", quote(&v.to_string_lossy())));
        }
        if let Some(v) = &self.ground_truth {
            o.push(format!("ground_truth={}", quote(&v.to_string_lossy())));
        }
        if let Some(v) = &self.out {
            o.push(format!("output={}", quote(&v.to_string_lossy())));
        }
        if let Some(v) = &self.name {
            o.push(format!("name={}", quote(v)));
        }
        let nums: [(&str, Option<String>); 6] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("train.iterations", self.iterations.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| format!("{v:?}"))),
            ("train.queries_per_iter", self.queries_per_iter.map(|v| v.to_string())),
            ("train.ablations.patch_count", self.patch_count.map(|v| v.to_string())),
            ("extract.resolution_3d", self.resolution.map(|v| v.to_string())),
        ];
        for (k, v) in nums {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        }
        if let Some(r) = self.resolution {
            o.push(format!("extract.resolution_2d={r}"));
        }
        if let Some(v) = &self.query_anchor {
            o.push(format!("train.query_anchor={}", quote(&v.to_uppercase())));
        }
        if let Some(v) = &self.basis {
            o.push(format!("train.ablations.basis_kind={}", quote(v)));
        }
        let flags = [
            ("no_cd", self.no_cd),
            ("no_surf", self.no_surf),
            ("grad_diff", self.grad_diff),
            ("separate", self.separate),
            ("no_feature", self.no_feature),
            ("no_disp", self.no_disp),
            ("unsquared_arg", self.unsquared_arg),
        ];
        for (k, on) in flags {
            if on {
                o.push(format!("train.ablations.{k}=true"));
            }
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen {
            shape,
            count,
            noise,
            nonuniform,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                shape: Shape::by_name(&shape)?,
                count,
                noise,
                nonuniform,
            };
            commands::cmd_gen(&spec, seed, &out)
        }
        Command::Reconstruct(args) => {
            let m = Manifest::load(args.manifest.as_deref(), &args.overrides())?;
            let s = commands::run_manifest(&m, false)?;
            eprintln!(
                "done: {} iterations in {:.1} s, artifacts in {}",
                s.iterations,
                s.seconds,
                m.output.display()
            );
            Ok(())
        }
        Command::Eval {
            surface,
            gt,
            samples,
            seed,
            name,
            checkpoint,
            out,
        } => commands::cmd_eval(&surface, &gt, samples, seed, &name, checkpoint.as_deref(), out.as_deref()),
        Command::Ablate { manifests, set, out } => {
            let ms = manifests
                .iter()
                .map(|p| {
                    let m = Manifest::load(Some(p), &set)?;
                    m.validate()?;
                    Ok(m)
                })
                .collect::<CliResult<Vec<_>>>()?;
            commands::cmd_ablate(&ms, out.as_deref()).map(|_| ())
        }
        Command::Field2d {
            checkpoint,
            gt,
            resolution,
            padding,
            spacing,
            out,
            lines,
        } => commands::cmd_field2d(
            checkpoint.as_deref(),
            gt.as_deref(),
            resolution,
            padding,
            spacing,
            &out,
            lines.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
