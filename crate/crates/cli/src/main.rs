use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hmba::context::VideoFeatures;
use hmba::costmodel::{sweep, write_csv, CostDims, CostModule};
use hmba::harness::{run_ablation, save_run, train, write_ablation_csv, Cell, RunConfig};
use hmba::model::HmbaModel;
use hmba::numeric::{Graph, Tensor};
use hmba::optim::Optimizer;
use hmba::ssm::{selective_scan_parallel, selective_scan_seq, MambaConfig, SsmParams};
use hmba::synthetic::{batch_of, generate_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED_ENV: &str = "HMBA_SEED";

#[derive(Parser)]
#[command(name = "hmba", version, about = "Hierarchical Mamba adapter toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference checks of every block; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Wall-clock timings of the scans, a block and a training step.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Closed-form parameter and FLOP counts.
    Flops {
        /// Frame counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "5")]
        t: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        c: usize,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "t_mamba,dst_mamba,jst_mamba,transformer,timesformer,joint_attention")]
        modules: Vec<String>,
        /// CSV file name, relative to `--out`.
        #[arg(long, default_value = "flops.csv")]
        csv: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Trains on the synthetic moving-target task.
    TrainSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Trains an ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Grid::Granularity)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// Frame-only, each granularity alone, and all three.
    Granularity,
    /// The two-module subsets.
    Pairs,
    /// DA, IC and Q-Mamba over all contexts.
    Adapters,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = std::env::var(SEED_ENV).ok().filter(|v| !v.trim().is_empty()) {
        cfg.seed = v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
    }
    Ok(cfg)
}

fn create(out: &Path, name: impl AsRef<Path>) -> Result<BufWriter<fs::File>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gradcheck(seeds: u64, out: &Path) -> Result<bool> {
    let rows = hmba::gradsuite::run(seeds)?;
    let mut w = create(out, "gradcheck.csv")?;
    writeln!(w, "block,seeds,worst_rel_err,worst_param,passed")?;
    let mut ok = true;
    for r in &rows {
        println!(
            "{:<20} {} seeds  worst {:.2e}  ({})  {}",
            r.block,
            r.seeds,
            r.worst,
            r.worst_param,
            if r.passed() { "ok" } else { "FAIL" }
        );
        writeln!(w, "{},{},{},{},{}", r.block, r.seeds, r.worst, r.worst_param, r.passed())?;
        ok &= r.passed();
    }
    w.flush()?;
    Ok(ok)
}

fn time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let start = Instant::now();
    for _ in 0..reps {
        f();
    }
    start.elapsed().as_secs_f64() * 1e3 / reps as f64
}

fn bench(reps: usize, out: &Path) -> Result<()> {
    if reps == 0 {
        bail!("--reps must be >= 1");
    }
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = MambaConfig::new(16).with_state(8);
    let params = SsmParams::init(&cfg, &mut rng);
    for t in [64, 256, 1024] {
        let x = Tensor::randn(&[t, cfg.d_inner()], 1.0, &mut rng);
        rows.push(("scan_sequential".into(), t, time_ms(reps, || {
            selective_scan_seq(&x, &params).unwrap();
        })));
        rows.push(("scan_parallel".into(), t, time_ms(reps, || {
            selective_scan_parallel(&x, &params).unwrap();
        })));
    }
    let run = RunConfig::default();
    let model = HmbaModel::init_seeded(&run.model_config(), 0)?;
    let mut data_cfg = run.data.clone();
    data_cfg.train_size = run.batch;
    data_cfg.test_size = 1;
    let data = generate_dataset(&data_cfg, 0)?;
    let picked: Vec<_> = data.train.iter().collect();
    let batch = batch_of(&picked)?;
    rows.push(("model_forward".into(), run.batch, time_ms(reps, || {
        let mut g = Graph::new();
        let x = g.constant(batch.frames.clone());
        model.logits(&mut g, x, batch.dims).unwrap();
    })));
    let mut trained = model.clone();
    let mut opt = Optimizer::new(run.optimizer, run.lr)?;
    let mut step = 0;
    rows.push(("train_step".into(), run.batch, time_ms(reps, || {
        trained.train_step(&batch, &mut opt, step).unwrap();
        step += 1;
    })));
    let video: &VideoFeatures = &data.train[0].video;
    rows.push(("single_video".into(), 1, time_ms(reps, || {
        model.apply(video).unwrap();
    })));

    let mut w = create(out, "bench.csv")?;
    writeln!(w, "name,size,reps,mean_ms")?;
    for (name, size, ms) in &rows {
        println!("{name:<16} {size:>5}  {ms:>10.3} ms");
        writeln!(w, "{name},{size},{reps},{ms}")?;
    }
    w.flush()?;
    Ok(())
}

fn flops(t: &[usize], c: usize, d: usize, modules: &[String], csv: &Path, out: &Path) -> Result<()> {
    let modules: Vec<CostModule> = modules.iter().map(|m| CostModule::parse(m)).collect::<hmba::Result<_>>()?;
    let base = CostDims::new(t.iter().copied().max().unwrap_or(1), c, d);
    let rows = sweep(&modules, t, &base)?;
    println!("{:<16} {:>4} {:>14} {:>12}", "module", "t", "params", "GFLOPs");
    for r in &rows {
        println!("{:<16} {:>4} {:>14} {:>12.3}", r.module, r.t, r.params, r.flops as f64 / 1e9);
    }
    let mut w = create(out, csv)?;
    write_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train_synthetic(config: Option<&Path>, seed: Option<u64>, steps: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let outcome = train(&cfg)?;
    save_run(&cfg, &outcome, out)?;
    println!(
        "seed {} steps {}  final loss {:.4}  test accuracy {:.3}  dataset {:016x}",
        cfg.seed,
        cfg.steps,
        outcome.log.last().map_or(f64::NAN, |r| r.loss),
        outcome.final_acc,
        outcome.dataset_checksum
    );
    Ok(())
}

fn ablate(config: Option<&Path>, grid: Grid, seeds: &[u64], steps: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let cells = match grid {
        Grid::Granularity => Cell::granularity_grid(cfg.adapter),
        Grid::Pairs => Cell::pair_grid(cfg.adapter),
        Grid::Adapters => Cell::adapter_grid(),
    };
    let rows = run_ablation(&cfg, &cells, seeds)?;
    for r in &rows {
        println!("{:<20} {:.3} ± {:.3}", r.id, r.mean, r.std);
    }
    let mut w = create(out, "ablation.csv")?;
    write_ablation_csv(&rows, &mut w)?;
    w.flush()?;
    fs::write(out.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gradcheck { seeds, out } => gradcheck(*seeds, out).inspect(|ok| {
            if !ok {
                eprintln!("gradient check failed");
            }
        }),
        Cmd::Bench { reps, out } => bench(*reps, out).map(|_| true),
        Cmd::Flops { t, c, d, modules, csv, out } => flops(t, *c, *d, modules, csv, out).map(|_| true),
        Cmd::TrainSynthetic { config, seed, steps, out } => {
            train_synthetic(config.as_deref(), *seed, *steps, out).map(|_| true)
        }
        Cmd::Ablate { config, grid, seeds, steps, out } => {
            ablate(config.as_deref(), *grid, seeds, *steps, out).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
