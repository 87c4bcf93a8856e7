use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eqimaging::identifiability::{analyze, build_m, StackReport};
use eqimaging::io::{load_checkpoint, write_tensor};
use eqimaging::training::{self, format_psnr};
use eqimaging::{ImageAction, LinearOperator, Result, Tensor};
use eqimaging_harness::config::{read_config, ExperimentConfig};
use eqimaging_harness::experiment::{self, METRICS_HEADER};
use eqimaging_harness::imageio::{write_image, ImageFormat, Window};
use eqimaging_harness::synth::{synth_images, ShapeFamily, SynthSpec};

/// Equivariant-imaging experiments on synthetic or user-provided images.
#[derive(Parser)]
#[command(name = "eqimaging", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset as image files plus one EQT1 tensor.
    MakeDataset(MakeDataset),
    /// Train one method and write metrics, panels, checkpoint and report.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank analysis of the stacked virtual operators for an operator/group pair.
    AnalyzeOperator {
        /// Operator spec, e.g. `inpaint:p=0.5:seed=1`.
        #[arg(long)]
        operator: String,
        /// Group spec, e.g. `c4+shifts`.
        #[arg(long)]
        group: String,
        /// Image side length.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Relative rank threshold.
        #[arg(long, default_value_t = eqimaging::identifiability::RANK_RTOL)]
        tol: f64,
        /// Append the CSV row to this file (header written if new).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train several methods on the same data and tabulate them next to A^+ y.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated loss kinds.
        #[arg(long, default_value = "supervised,ei,mc", value_delimiter = ',')]
        methods: Vec<String>,
        /// Worker threads for the legs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct MakeDataset {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// ellipses | rectangles | mixed
    #[arg(long, default_value = "mixed")]
    family: ShapeFamily,
    /// Draw positions and orientations uniformly (group-invariant distribution).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    invariant: bool,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// pgm | png
    #[arg(long, default_value = "png")]
    format: String,
}

/// Config file plus overrides; flags win over file values.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    operator: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// supervised | supervised-da | mc | ei
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::default(),
        };
        let named = [
            ("experiment.output", self.output.as_ref().map(|p| p.display().to_string())),
            ("experiment.seed", self.seed.map(|v| v.to_string())),
            ("operator.spec", self.operator.clone()),
            ("operator.noise", self.noise.clone()),
            ("group.spec", self.group.clone()),
            ("model.spec", self.model.clone()),
            ("loss.kind", self.loss.clone()),
            ("loss.alpha", self.alpha.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| v.to_string())),
        ];
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        for (key, value) in named {
            if let Some(v) = value {
                c.apply_override(&format!("{key}={v}"))?;
            }
        }
        Ok(c)
    }
}

fn make_dataset(args: &MakeDataset) -> Result<()> {
    let format = ImageFormat::parse(&args.format)?;
    let spec = SynthSpec {
        count: args.count,
        size: args.size,
        family: args.family,
        invariant: args.invariant,
        seed: args.seed,
        max_shapes: args.max_shapes,
    };
    let images = synth_images::<f64>(&spec)?;
    let dir = args.out.join("images");
    std::fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        write_image(dir.join(format!("img_{i:05}.{}", format.extension())), img, Window::unit(), &[])?;
    }
    let mut data = Vec::with_capacity(args.count * args.size * args.size);
    for img in &images {
        data.extend_from_slice(img.data());
    }
    write_tensor(
        args.out.join("dataset.eqt"),
        &Tensor::new(vec![args.count, 1, args.size, args.size], data)?,
    )?;
    println!("wrote {} images to {}", images.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset(args) => make_dataset(&args),
        Command::Train(args) => {
            let config = args.resolve()?;
            let r = experiment::run_experiment(&config)?;
            for w in &r.warnings {
                eprintln!("{w}");
            }
            println!("test PSNR A^+ y: {} dB", format_psnr(r.pinv_psnr));
            println!("test PSNR {}: {} dB", r.leg.method, format_psnr(r.leg.test_psnr));
            println!("artifacts in {}", r.output.display());
            Ok(())
        }
        Command::Eval { config, checkpoint } => {
            let config = config.resolve()?;
            let prepared = experiment::prepare(&config)?;
            let model = load_checkpoint::<f64>(&checkpoint)?;
            let verdict = experiment::stack_report(&config.operator, &config.group, config.dataset.size)?
                .0
                .verdict();
            let pinv = training::evaluate_pinv(&prepared.test)?;
            let learned = training::evaluate_model(&model, &prepared.test)?;
            let csv = format!(
                "{METRICS_HEADER}\npinv,0,,{},{verdict}\ncheckpoint,,,{},{verdict}\n",
                format_psnr(pinv),
                format_psnr(learned)
            );
            std::fs::create_dir_all(&config.output)?;
            std::fs::write(config.output.join("eval.csv"), &csv)?;
            experiment::write_panels(
                &config.output.join("eval_images"),
                ImageFormat::parse(&config.image_format)?,
                config.images,
                &prepared,
                &[("checkpoint", &model)],
            )?;
            print!("{csv}");
            Ok(())
        }
        Command::AnalyzeOperator {
            operator,
            group,
            size,
            tol,
            csv,
        } => {
            let op = LinearOperator::<f64>::parse(&operator, size, size)?;
            let action = ImageAction::parse(&group, size, size)?;
            let report = analyze(&build_m(&op, &action)?, &op, &action, tol)?;
            print!("{report}");
            println!("{}\n{}", StackReport::CSV_HEADER, report.csv_row());
            if let Some(path) = csv {
                let mut text = if path.exists() {
                    std::fs::read_to_string(&path)?
                } else {
                    format!("{}\n", StackReport::CSV_HEADER)
                };
                text.push_str(&report.csv_row());
                text.push('\n');
                std::fs::write(path, text)?;
            }
            Ok(())
        }
        Command::Compare { config, methods, jobs } => {
            let config = config.resolve()?;
            let r = experiment::compare(&config, &methods, jobs)?;
            if methods.iter().any(|m| m == "ei") {
                if let Some(w) = r.report.warning() {
                    eprintln!("{w}");
                }
            }
            print!("{}", r.csv);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
