//! Command-line driver for the grid compression pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gridvq::pipeline::{self, PipelineConfig};
use gridvq::Dataset;

#[derive(Parser, Debug)]
#[command(name = "gridvq", version, about = "Compress voxel radiance fields")]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    beta_p: Option<f64>,
    #[arg(long, global = true)]
    beta_k: Option<f64>,
    #[arg(long, global = true)]
    codebook_size: Option<usize>,
    #[arg(long, global = true)]
    finetune_iters: Option<usize>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render train and held-out test views of the scene.
    GenScene,
    /// Fit a dense grid to the train views.
    Train,
    /// Prune, quantize, finetune and pack the fitted grid.
    Compress,
    /// Decode a container into a dense grid file.
    Decompress {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render the test views from a container or grid file.
    Render {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Test-view PSNR of a model, or of pre-rendered images.
    Eval {
        #[arg(long, conflicts_with = "renders")]
        model: Option<PathBuf>,
        /// Directory of VQIM renders to compare instead of rendering.
        #[arg(long)]
        renders: Option<PathBuf>,
        /// Ground-truth VQIM directory; the test views by default.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Quantile and codebook-size sweeps.
    Report,
    /// gen-scene, train, compress and eval in sequence.
    Run,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.beta_p {
        cfg.importance.beta_p = b;
    }
    if let Some(b) = cli.beta_k {
        cfg.importance.beta_k = b;
    }
    if let Some(k) = cli.codebook_size {
        cfg.vq.codebook_size = k;
        cfg.vq.expire_j = cfg.vq.expire_j.min(k.saturating_sub(1));
    }
    if let Some(n) = cli.finetune_iters {
        cfg.finetune.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_scene(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (train, test) = pipeline::gen_scene(cfg, out)?;
    println!("rendered {} train and {} test views", train.len(), test.len());
    Ok(())
}

fn train(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (_, s) = pipeline::train(cfg, out)?;
    println!("train PSNR {:.3} dB, test PSNR {:.3} dB", s.train_psnr, s.test_psnr);
    Ok(())
}

fn compress(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let c = pipeline::compress(cfg, out)?;
    let s = &c.summary;
    println!(
        "voxels: {} pruned, {} quantized, {} kept; K = {}",
        s.pruned, s.vq, s.kept, s.codebook_size
    );
    print!("{}", pipeline::stages_csv(&s.stages));
    Ok(())
}

fn eval_model(cfg: &PipelineConfig, out: &Path, model: Option<PathBuf>) -> Result<()> {
    let model = model.unwrap_or_else(|| out.join(pipeline::MODEL_FILE));
    let p = pipeline::eval(cfg, &model, out)?;
    println!("test PSNR {p:.4} dB");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::GenScene => gen_scene(&cfg, out)?,
        Command::Train => train(&cfg, out)?,
        Command::Compress => compress(&cfg, out)?,
        Command::Decompress { input, output } => {
            let input = input.clone().unwrap_or_else(|| out.join(pipeline::MODEL_FILE));
            let output = output.clone().unwrap_or_else(|| out.join("decoded.vqrg"));
            let g = pipeline::decompress(&input, &output)?;
            println!("wrote {} ({} voxels)", output.display(), g.dims.len());
        }
        Command::Render { model, dir } => {
            let model = model.clone().unwrap_or_else(|| out.join(pipeline::MODEL_FILE));
            let dir = dir.clone().unwrap_or_else(|| out.join("renders"));
            let grid = pipeline::load_any_grid(&model)?;
            let test = Dataset::load(&out.join(pipeline::TEST_DIR))?;
            let rcfg = cfg.train.render_config(test.background);
            let imgs = pipeline::render_to_dir(&grid, &test, &rcfg, &dir)?;
            println!("rendered {} views into {}", imgs.len(), dir.display());
        }
        Command::Eval {
            model,
            renders,
            reference,
        } => match renders {
            Some(r) => {
                let reference = reference.clone().unwrap_or_else(|| out.join(pipeline::TEST_DIR));
                let (per_view, pooled) = pipeline::compare_dirs(r, &reference)?;
                for (i, p) in per_view.iter().enumerate() {
                    println!("view {i}: {p:.4} dB");
                }
                println!("test PSNR {pooled:.4} dB");
            }
            None => eval_model(&cfg, out, model.clone())?,
        },
        Command::Report => {
            let grid = gridvq::container::read_grid(&out.join(pipeline::GRID_FILE))?;
            let train = Dataset::load(&out.join(pipeline::TRAIN_DIR))?;
            let test = Dataset::load(&out.join(pipeline::TEST_DIR))?;
            let (q, k) = pipeline::sweep(
                &cfg,
                &grid,
                &train,
                &test,
                &pipeline::SWEEP_BETA_P,
                &pipeline::SWEEP_BETA_K,
                &pipeline::SWEEP_K,
                |r| {
                    eprintln!(
                        "beta_p {} beta_k {} K {}: {} B, {:.3} dB",
                        r.beta_p, r.beta_k, r.codebook_size, r.container_bytes, r.test_psnr
                    )
                },
            )?;
            let qt = pipeline::quantile_table_csv(&q, &pipeline::SWEEP_BETA_P, &pipeline::SWEEP_BETA_K);
            let kt = pipeline::codebook_table_csv(&k);
            fs::write(out.join("sweep_quantiles.csv"), &qt)?;
            fs::write(out.join("sweep_codebook.csv"), &kt)?;
            print!("{qt}\n{kt}");
        }
        Command::Run => {
            gen_scene(&cfg, out)?;
            train(&cfg, out)?;
            compress(&cfg, out)?;
            eval_model(&cfg, out, None)?;
        }
    }
    if !matches!(cli.command, Command::Config) {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.json"), cfg.to_json())?;
    }
    Ok(())
}

/// 2 for bad or missing data, 3 for numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gridvq::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
