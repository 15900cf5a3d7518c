//! Run configuration, the synthetic training loop, ablations and run
//! directories.
//!
//! Config files are flat `key = value` lines; `#` starts a comment. Every
//! key is optional and falls back to [`RunConfig::default`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::{Branch, ContextConfig, Granularity};
use crate::error::{Error, Result};
use crate::fusion::{AdapterKind, KvScope};
use crate::model::{BaseMode, HmbaModel, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{load_dir, save_dir};
use crate::ssm::MambaConfig;
use crate::synthetic::{batch_of, generate_dataset, Dataset, Motion, SyntheticConfig, SyntheticSample};

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub granularities: Vec<Granularity>,
    pub branches: Vec<Branch>,
    pub low_stride: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub dt_rank: usize,
    pub t_max: usize,
    pub input_norm: bool,
    pub adapter: AdapterKind,
    pub kv_scope: KvScope,
    pub query_residual: bool,
    pub latent_residual: bool,
    pub mode: BaseMode,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Evaluate on the test split every this many steps; 0 means only at
    /// the end.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        Self {
            granularities: Granularity::ALL.to_vec(),
            branches: Branch::ALL.to_vec(),
            low_stride: 2,
            d_state: 8,
            d_conv: 4,
            expand: 2,
            dt_rank: data.d_model.div_ceil(16),
            t_max: data.frames.max(8),
            input_norm: true,
            adapter: AdapterKind::QMamba,
            kv_scope: KvScope::Channel,
            query_residual: true,
            latent_residual: true,
            mode: BaseMode::CurrentFrame,
            seed: 0,
            steps: 150,
            batch: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            eval_every: 0,
            data,
        }
    }
}

fn list<T: Copy>(items: &[T], name: fn(T) -> &'static str) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.iter().map(|&x| name(x)).collect::<Vec<_>>().join(",")
    }
}

fn parse_list<T: PartialEq>(v: &str, parse: fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if v.trim() == "none" || v.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in v.split(',') {
        let item = parse(part)?;
        if !out.contains(&item) {
            out.push(item);
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn context_config(&self) -> ContextConfig {
        let mut m = MambaConfig::new(self.data.d_model);
        m.dt_rank = self.dt_rank;
        m.input_norm = self.input_norm;
        ContextConfig {
            frames: self.data.frames,
            low_stride: self.low_stride,
            granularities: self.granularities.clone(),
            branches: self.branches.clone(),
            d_model: self.data.d_model,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            t_max: self.t_max,
            mamba_template: Some(m),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            context: self.context_config(),
            channels: self.data.channels,
            adapter: self.adapter,
            kv_scope: self.kv_scope,
            query_residual: self.query_residual,
            latent_residual: self.latent_residual,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let mc = self.model_config();
        if !mc.frame_only() {
            mc.context.validate()?;
            mc.context.mamba().validate()?;
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("frames", d.frames.to_string());
        kv("channels", d.channels.to_string());
        kv("d_model", d.d_model.to_string());
        kv("distractors", d.distractors.to_string());
        kv("motion", d.motion.name().to_string());
        kv("margin", d.margin.to_string());
        kv("noise", d.noise.to_string());
        kv("max_speed", d.max_speed.to_string());
        kv("train_size", d.train_size.to_string());
        kv("test_size", d.test_size.to_string());
        kv("stub_seed", d.stub_seed.to_string());
        kv("granularities", list(&self.granularities, Granularity::name));
        kv("branches", list(&self.branches, Branch::name));
        kv("low_stride", self.low_stride.to_string());
        kv("d_state", self.d_state.to_string());
        kv("d_conv", self.d_conv.to_string());
        kv("expand", self.expand.to_string());
        kv("dt_rank", self.dt_rank.to_string());
        kv("t_max", self.t_max.to_string());
        kv("input_norm", self.input_norm.to_string());
        kv("adapter", self.adapter.name().to_string());
        kv("kv_scope", self.kv_scope.name().to_string());
        kv("query_residual", self.query_residual.to_string());
        kv("latent_residual", self.latent_residual.to_string());
        kv("mode", self.mode.name().to_string());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("optimizer", self.optimizer.name().to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "frames" => d.frames = num(key, v)?,
            "channels" => d.channels = num(key, v)?,
            "d_model" => d.d_model = num(key, v)?,
            "distractors" => d.distractors = num(key, v)?,
            "motion" => d.motion = Motion::parse(v)?,
            "margin" => d.margin = num(key, v)?,
            "noise" => d.noise = num(key, v)?,
            "max_speed" => d.max_speed = num(key, v)?,
            "train_size" => d.train_size = num(key, v)?,
            "test_size" => d.test_size = num(key, v)?,
            "stub_seed" => d.stub_seed = num(key, v)?,
            "granularities" => self.granularities = parse_list(v, Granularity::parse)?,
            "branches" => self.branches = parse_list(v, Branch::parse)?,
            "low_stride" => self.low_stride = num(key, v)?,
            "d_state" => self.d_state = num(key, v)?,
            "d_conv" => self.d_conv = num(key, v)?,
            "expand" => self.expand = num(key, v)?,
            "dt_rank" => self.dt_rank = num(key, v)?,
            "t_max" => self.t_max = num(key, v)?,
            "input_norm" => self.input_norm = num(key, v)?,
            "adapter" => self.adapter = AdapterKind::parse(v)?,
            "kv_scope" => self.kv_scope = KvScope::parse(v)?,
            "query_residual" => self.query_residual = num(key, v)?,
            "latent_residual" => self.latent_residual = num(key, v)?,
            "mode" => self.mode = BaseMode::parse(v)?,
            "seed" => self.seed = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Stream ids derived from the run seed; the dataset uses 1 and 2.
const INIT_STREAM: u64 = 3;
const ORDER_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HmbaModel,
    pub log: Vec<LogRow>,
    pub final_acc: f64,
    pub dataset_checksum: u64,
}

/// Fraction of samples whose argmax channel equals the label.
pub fn evaluate(model: &HmbaModel, samples: &[SyntheticSample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut correct = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SyntheticSample> = chunk.iter().collect();
        let b = batch_of(&refs)?;
        let pred = model.predict(&b)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn init_model(cfg: &RunConfig) -> Result<HmbaModel> {
    HmbaModel::init(&cfg.model_config(), &mut stream(cfg.seed, INIT_STREAM))
}

/// Trains on an already generated dataset.
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picked.push(&data.train[order[cursor]]);
            cursor += 1;
        }
        let batch = batch_of(&picked)?;
        let loss = model.train_step(&batch, &mut opt, step)?;
        let last = step + 1 == cfg.steps;
        let eval_acc = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !last {
            Some(evaluate(&model, &data.test, cfg.batch.max(64))?)
        } else {
            None
        };
        log.push(LogRow { step, loss, eval_acc });
    }
    let final_acc = evaluate(&model, &data.test, cfg.batch.max(64))?;
    if let Some(row) = log.last_mut() {
        row.eval_acc = Some(final_acc);
    }
    Ok(TrainOutcome {
        model,
        log,
        final_acc,
        dataset_checksum: data.checksum(),
    })
}

/// Generates the dataset for `cfg.seed` and trains on it.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    train_on(cfg, &data)
}

pub const LOG_HEADER: &str = "step,loss,eval_acc";

pub fn write_log_csv<W: Write>(log: &[LogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in log {
        match r.eval_acc {
            Some(a) => writeln!(w, "{},{},{}", r.step, r.loss, a)?,
            None => writeln!(w, "{},{},", r.step, r.loss)?,
        }
    }
    Ok(())
}

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const PARAMS_DIR: &str = "params";

/// Writes `config.txt`, `train_log.csv` and `params/` under `dir`.
pub fn save_run(cfg: &RunConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = dir.join(LOG_FILE);
    let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_log_csv(&outcome.log, std::io::BufWriter::new(f)).map_err(|e| Error::io(&log_path, e))?;
    save_dir(&outcome.model, &dir.join(PARAMS_DIR))
}

/// Rebuilds the model described by `dir/config.txt` and loads its
/// parameters.
pub fn load_run(dir: &Path) -> Result<(RunConfig, HmbaModel)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = init_model(&cfg)?;
    load_dir(&mut model, &dir.join(PARAMS_DIR))?;
    Ok((cfg, model))
}

/// One point of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub granularities: Vec<Granularity>,
    pub adapter: AdapterKind,
}

impl Cell {
    pub fn new(granularities: &[Granularity], adapter: AdapterKind) -> Self {
        Self {
            granularities: granularities.to_vec(),
            adapter,
        }
    }

    /// `frame` for no context, otherwise e.g. `t+dst/qmamba`.
    pub fn id(&self) -> String {
        if self.granularities.is_empty() {
            return "frame".to_string();
        }
        let g: Vec<&str> = self.granularities.iter().map(|g| g.name()).collect();
        format!("{}/{}", g.join("+"), self.adapter.name())
    }

    /// Frame-only, each single granularity and all three, with `adapter`.
    pub fn granularity_grid(adapter: AdapterKind) -> Vec<Cell> {
        let mut cells = vec![Cell::new(&[], adapter)];
        cells.extend(Granularity::ALL.iter().map(|&g| Cell::new(&[g], adapter)));
        cells.push(Cell::new(&Granularity::ALL, adapter));
        cells
    }

    /// The three two-module subsets.
    pub fn pair_grid(adapter: AdapterKind) -> Vec<Cell> {
        use Granularity::*;
        vec![
            Cell::new(&[T, Jst], adapter),
            Cell::new(&[T, Dst], adapter),
            Cell::new(&[Dst, Jst], adapter),
        ]
    }

    /// All contexts under each adapter.
    pub fn adapter_grid() -> Vec<Cell> {
        [AdapterKind::Da, AdapterKind::Ic, AdapterKind::QMamba]
            .into_iter()
            .map(|a| Cell::new(&Granularity::ALL, a))
            .collect()
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            granularities: self.granularities.clone(),
            adapter: self.adapter,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub id: String,
    pub seeds: Vec<u64>,
    pub accs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub dataset_checksums: Vec<u64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every cell under every seed. Datasets are generated once per
/// seed and shared by all cells. Cells run on scoped threads, up to the
/// available parallelism; results come back sorted by cell id.
pub fn run_ablation(base: &RunConfig, cells: &[Cell], seeds: &[u64]) -> Result<Vec<CellResult>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let data: Vec<Dataset> = seeds
        .iter()
        .map(|&s| generate_dataset(&base.data, s))
        .collect::<Result<_>>()?;
    let run_cell = |cell: &Cell| -> Result<CellResult> {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut sums = Vec::with_capacity(seeds.len());
        for (&seed, ds) in seeds.iter().zip(&data) {
            let cfg = RunConfig { seed, ..cell.apply(base) };
            let out = train_on(&cfg, ds).map_err(|e| Error::Cell {
                cell: format!("{} seed {seed}", cell.id()),
                source: Box::new(e),
            })?;
            accs.push(out.final_acc);
            sums.push(out.dataset_checksum);
        }
        let (mean, std) = mean_std(&accs);
        Ok(CellResult {
            id: cell.id(),
            seeds: seeds.to_vec(),
            accs,
            mean,
            std,
            dataset_checksums: sums,
        })
    };
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cells.len());
    let mut results: Vec<Result<CellResult>> = if workers <= 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<CellResult>>>> =
            cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(run_cell(&cells[i]));
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
    };
    let mut ok = Vec::with_capacity(results.len());
    for r in results.drain(..) {
        ok.push(r?);
    }
    ok.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ok)
}

pub const ABLATION_HEADER: &str = "cell,seeds,mean_acc,std_acc,accs";

pub fn write_ablation_csv<W: Write>(rows: &[CellResult], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        let accs: Vec<String> = r.accs.iter().map(|a| a.to_string()).collect();
        writeln!(w, "{},{},{},{},{}", r.id, r.seeds.len(), r.mean, r.std, accs.join(";"))?;
    }
    Ok(())
}
