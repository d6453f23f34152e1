//! Command implementations behind the `ddnerf` binary: dataset generation,
//! training with checkpoints and CSV logs, evaluation metrics, full-frame
//! rendering, and the two-variant comparison sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{DdError, Result};
use crate::losses::LossReport;
use crate::radiance_field::{Activation, Ray};
use crate::sampling_pipeline::{
    uniform_01, SamplingConfig, TrainState, TrainStateConfig, Variant,
};
use crate::scene_toolkit::{
    parse_kv_file, render_ground_truth, scene_by_name, SyntheticDataset,
};
use crate::volume_rendering::{psnr, ssim, GrayMap, Rgb};

/// Fully resolved run settings. Precedence, lowest to highest: built-in
/// defaults, config-file keys, command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub iters: u64,
    pub seed: u64,
    pub variant: Variant,
    pub lambda_de: f64,
    /// Overrides the dataset's unbounded flag when set.
    pub unbounded: Option<bool>,
    pub jitter: bool,
    pub width: usize,
    pub height: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub num_frequencies: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub checkpoint_every: u64,
    pub n_quad: usize,
    /// Starting value of the training-time widening factor (1 disables it).
    pub u_start: f64,
    /// Caps the number of steps run in one invocation without shortening the
    /// training schedule; later invocations resume from the checkpoint.
    pub stop_after: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "wall".into(),
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            n_coarse: 8,
            n_fine: 8,
            iters: 10_000,
            seed: 1,
            variant: Variant::Dd,
            lambda_de: 0.1,
            unbounded: None,
            jitter: true,
            width: 64,
            height: 64,
            batch: 64,
            hidden: vec![32, 32],
            num_frequencies: 4,
            lr_start: 5e-4,
            lr_end: 5e-5,
            checkpoint_every: 1000,
            n_quad: 256,
            u_start: 3.0,
            stop_after: None,
        }
    }
}

impl RunConfig {
    /// Applies one key=value assignment; unknown keys are errors so typos in
    /// config files fail loudly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| DdError::InvalidInput(format!("bad value '{value}' for {what}"));
        match key {
            "scene" => self.scene = value.to_string(),
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "samples" => {
                let n = value.parse().map_err(|_| bad("samples"))?;
                self.n_coarse = n;
                self.n_fine = n;
            }
            "n_coarse" => self.n_coarse = value.parse().map_err(|_| bad("n_coarse"))?,
            "n_fine" => self.n_fine = value.parse().map_err(|_| bad("n_fine"))?,
            "iters" => self.iters = value.parse().map_err(|_| bad("iters"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "variant" => self.variant = Variant::from_str(value)?,
            "lambda_de" => self.lambda_de = value.parse().map_err(|_| bad("lambda_de"))?,
            "unbounded" => {
                self.unbounded = Some(value.parse().map_err(|_| bad("unbounded"))?)
            }
            "jitter" => self.jitter = value.parse().map_err(|_| bad("jitter"))?,
            "width" => self.width = value.parse().map_err(|_| bad("width"))?,
            "height" => self.height = value.parse().map_err(|_| bad("height"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad("hidden")))
                    .collect::<Result<_>>()?
            }
            "num_frequencies" => {
                self.num_frequencies = value.parse().map_err(|_| bad("num_frequencies"))?
            }
            "lr_start" => self.lr_start = value.parse().map_err(|_| bad("lr_start"))?,
            "lr_end" => self.lr_end = value.parse().map_err(|_| bad("lr_end"))?,
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad("checkpoint_every"))?
            }
            "n_quad" => self.n_quad = value.parse().map_err(|_| bad("n_quad"))?,
            "u_start" => self.u_start = value.parse().map_err(|_| bad("u_start"))?,
            "stop_after" => self.stop_after = Some(value.parse().map_err(|_| bad("stop_after"))?),
            _ => return Err(DdError::InvalidInput(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Builds a config from an optional file plus flag overrides, applied in
    /// that order.
    pub fn resolve(config_file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = config_file {
            for (k, v) in parse_kv_file(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Key=value serialization; `resolve` on the output reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "scene={}", self.scene);
        let _ = writeln!(s, "data={}", self.data.display());
        let _ = writeln!(s, "out={}", self.out.display());
        let _ = writeln!(s, "n_coarse={}", self.n_coarse);
        let _ = writeln!(s, "n_fine={}", self.n_fine);
        let _ = writeln!(s, "iters={}", self.iters);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "variant={}", self.variant.as_str());
        let _ = writeln!(s, "lambda_de={}", self.lambda_de);
        if let Some(u) = self.unbounded {
            let _ = writeln!(s, "unbounded={u}");
        }
        let _ = writeln!(s, "jitter={}", self.jitter);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "hidden={}", hidden.join(","));
        let _ = writeln!(s, "num_frequencies={}", self.num_frequencies);
        let _ = writeln!(s, "lr_start={}", self.lr_start);
        let _ = writeln!(s, "lr_end={}", self.lr_end);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "n_quad={}", self.n_quad);
        let _ = writeln!(s, "u_start={}", self.u_start);
        if let Some(n) = self.stop_after {
            let _ = writeln!(s, "stop_after={n}");
        }
        s
    }
}

/// Caps the global rayon pool from DDNERF_THREADS. A no-op once the pool
/// exists, so only the first call in a process takes effect.
pub fn init_threads() {
    if let Ok(v) = std::env::var("DDNERF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

/// Exclusive ownership of an output directory for the duration of a command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DdError::InvalidInput(format!(
                    "output directory {} is locked by another run (stale? remove {})",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Renders a scene's ground-truth dataset and writes it to `cfg.out`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let scene = scene_by_name(&cfg.scene, (cfg.width, cfg.height))?;
    let _lock = DirLock::acquire(&cfg.out)?;
    // per-camera renders are independent
    let rendered: Vec<_> = scene
        .cameras
        .par_iter()
        .map(|cam| render_ground_truth(&scene.field, cam, scene.background, cfg.n_quad))
        .collect::<Result<_>>()?;
    let (images, depths) = rendered.into_iter().unzip();
    let dataset = SyntheticDataset::from_renders(&scene, images, depths, cfg.n_quad)?;
    dataset.save(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_kv_string())?;
    Ok(())
}

fn sampling_for(cfg: &RunConfig, dataset: &SyntheticDataset) -> SamplingConfig {
    let mut s = SamplingConfig::new(cfg.n_coarse, cfg.n_fine, dataset.near, dataset.far);
    s.jitter = cfg.jitter;
    s.unbounded = cfg.unbounded.unwrap_or(dataset.unbounded);
    s.seed = cfg.seed;
    s
}

fn train_state_for(cfg: &RunConfig, dataset: &SyntheticDataset) -> Result<TrainState> {
    let sampling = sampling_for(cfg, dataset);
    let mut tc = TrainStateConfig::new(sampling, cfg.variant, cfg.iters, dataset.background);
    // the baseline arm is exactly lambda_de = 0
    tc.loss.lambda_de = if cfg.variant == Variant::Baseline { 0.0 } else { cfg.lambda_de };
    tc.lr_start = cfg.lr_start;
    tc.lr_end = cfg.lr_end;
    tc.schedule.u_start = cfg.u_start;
    TrainState::new(tc, &cfg.hidden, cfg.num_frequencies, Activation::Relu)
}

/// Draws a training batch: uniform (camera, pixel) pairs over the training
/// split, with rays through pixel centers and ground-truth colors.
pub fn sample_batch(
    state: &mut TrainState,
    dataset: &SyntheticDataset,
    train_idx: &[usize],
    batch: usize,
) -> (Vec<Ray>, Vec<Rgb>) {
    let mut rays = Vec::with_capacity(batch);
    let mut gt = Vec::with_capacity(batch);
    for _ in 0..batch {
        let ci = train_idx
            [((uniform_01(&mut state.rng) * train_idx.len() as f64) as usize).min(train_idx.len() - 1)];
        let cam = &dataset.cameras[ci];
        let px = ((uniform_01(&mut state.rng) * cam.width as f64) as usize).min(cam.width - 1);
        let py = ((uniform_01(&mut state.rng) * cam.height as f64) as usize).min(cam.height - 1);
        rays.push(cam.generate_ray(px as f64, py as f64));
        gt.push(dataset.images[ci].at(px, py));
    }
    (rays, gt)
}

/// Trains (or resumes) a model on a dataset directory. Writes checkpoints,
/// a per-step CSV log, and the resolved config into `cfg.out`. On a
/// numerical abort the last good checkpoint stays on disk.
pub fn cmd_train(cfg: &RunConfig) -> Result<LossReport> {
    let dataset = SyntheticDataset::load(&cfg.data)?;
    if dataset.cameras.is_empty() {
        return Err(DdError::InvalidInput("dataset has no cameras".into()));
    }
    let _lock = DirLock::acquire(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_kv_string())?;
    let ckpt_path = cfg.out.join("checkpoint.ddnt");
    let log_path = cfg.out.join("train_log.csv");
    let (mut state, resuming) = if ckpt_path.exists() {
        (TrainState::load(&ckpt_path)?, true)
    } else {
        (train_state_for(cfg, &dataset)?, false)
    };
    if state.step >= cfg.iters {
        return Err(DdError::InvalidInput(format!(
            "checkpoint already at step {} >= iters {}",
            state.step, cfg.iters
        )));
    }
    let mut log = String::new();
    if !resuming || !log_path.exists() {
        log.push_str(LossReport::CSV_HEADER);
        log.push('\n');
        std::fs::write(&log_path, &log)?;
        log.clear();
    }
    let train_idx = dataset.train_indices();
    let mut last = LossReport::default();
    use std::io::Write as _;
    let mut log_file = std::fs::OpenOptions::new().append(true).open(&log_path)?;
    let stop_at = match cfg.stop_after {
        Some(n) => (state.step + n).min(cfg.iters),
        None => cfg.iters,
    };
    while state.step < stop_at {
        let (rays, gt) = sample_batch(&mut state, &dataset, &train_idx, cfg.batch);
        let step_before = state.step;
        match state.train_step(&rays, &gt) {
            Ok(report) => {
                let _ = writeln!(log, "{}", report.csv_row(step_before));
                last = report;
            }
            Err(e) => {
                log_file.write_all(log.as_bytes())?;
                return Err(e);
            }
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.iters {
            state.save(&ckpt_path)?;
            log_file.write_all(log.as_bytes())?;
            log.clear();
        }
    }
    state.save(&ckpt_path)?;
    log_file.write_all(log.as_bytes())?;
    Ok(last)
}

/// Per-image evaluation metrics plus the dataset mean.
#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

#[derive(Debug, Clone, Default)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae_coarse: f64,
    pub depth_mae_fine: f64,
}

impl EvalRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.image, self.psnr, self.ssim, self.depth_mae_coarse, self.depth_mae_fine
        )
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Evaluates a checkpoint over the dataset's validation images: PSNR, SSIM,
/// and mean absolute depth error of the coarse and fine estimates against
/// the stored ground-truth depth. Writes `eval.csv` when `out` is given.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<EvalSummary> {
    let state = TrainState::load(checkpoint)?;
    let dataset = SyntheticDataset::load(data)?;
    let results: Vec<(usize, EvalRow)> = dataset
        .val_indices
        .par_iter()
        .map(|&vi| -> Result<(usize, EvalRow)> {
            let cam = &dataset.cameras[vi];
            let gt = &dataset.images[vi];
            if gt.width != cam.width || gt.height != cam.height {
                return Err(DdError::DimensionMismatch(format!(
                    "image {vi} resolution differs from its camera"
                )));
            }
            let render = state.render(cam)?;
            Ok((
                vi,
                EvalRow {
                    image: format!("img_{vi:03}"),
                    psnr: psnr(&render.image, gt)?,
                    ssim: ssim(&render.image, gt)?,
                    depth_mae_coarse: mean_abs_diff(&render.depth_coarse, &dataset.depths[vi]),
                    depth_mae_fine: mean_abs_diff(&render.depth, &dataset.depths[vi]),
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<EvalRow> = {
        let mut r = results;
        r.sort_by_key(|(vi, _)| *vi);
        r.into_iter().map(|(_, row)| row).collect()
    };
    let n = rows.len().max(1) as f64;
    let mean = EvalRow {
        image: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        depth_mae_coarse: rows.iter().map(|r| r.depth_mae_coarse).sum::<f64>() / n,
        depth_mae_fine: rows.iter().map(|r| r.depth_mae_fine).sum::<f64>() / n,
    };
    if let Some(path) = out {
        let mut csv = String::from("image,psnr,ssim,depth_mae_coarse,depth_mae_fine\n");
        for r in &rows {
            let _ = writeln!(csv, "{}", r.csv());
        }
        let _ = writeln!(csv, "{}", mean.csv());
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, csv)?;
    }
    rows.push(mean.clone());
    let mean_row = rows.pop().unwrap();
    Ok(EvalSummary { rows, mean: mean_row })
}

/// Renders every validation camera of a dataset with a trained checkpoint:
/// color PPMs plus normalized depth and disparity PGMs.
pub fn cmd_render(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let state = TrainState::load(checkpoint)?;
    let dataset = SyntheticDataset::load(data)?;
    let _lock = DirLock::acquire(out)?;
    for &vi in &dataset.val_indices {
        let cam = &dataset.cameras[vi];
        let render = state.render(cam)?;
        render.image.save_ppm(&out.join(format!("img_{vi:03}.ppm")))?;
        let norm = |vals: &[f64], lo: f64, hi: f64| {
            let mut g = GrayMap::new(cam.width, cam.height);
            for (o, &v) in g.values.iter_mut().zip(vals) {
                *o = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
            g
        };
        norm(&render.depth, cam.near, cam.far)
            .save_pgm(&out.join(format!("dep_{vi:03}.pgm")))?;
        norm(&render.disparity, 1.0 / cam.far, 1.0 / cam.near)
            .save_pgm(&out.join(format!("dis_{vi:03}.pgm")))?;
    }
    Ok(())
}

/// One (budget, variant) cell of the comparison report, averaged over seeds.
#[derive(Debug, Clone)]
pub struct CompareCell {
    pub budget: usize,
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae_coarse: f64,
    pub depth_mae_fine: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
}

impl CompareReport {
    pub fn cell(&self, budget: usize, variant: Variant) -> Option<&CompareCell> {
        self.cells.iter().find(|c| c.budget == budget && c.variant == variant)
    }

    /// dd PSNR minus baseline PSNR at one budget.
    pub fn psnr_margin(&self, budget: usize) -> Option<f64> {
        Some(self.cell(budget, Variant::Dd)?.psnr - self.cell(budget, Variant::Baseline)?.psnr)
    }
}

/// Trains both variants at every budget with shared per-seed RNG streams,
/// evaluates each run, and writes `runs.csv` (per run) and `compare.csv`
/// (budget x variant means with difference columns) into `out`.
pub fn cmd_compare(
    base: &RunConfig,
    budgets: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Result<CompareReport> {
    if budgets.is_empty() || seeds.is_empty() {
        return Err(DdError::InvalidInput("compare needs budgets and seeds".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let mut runs_csv =
        String::from("budget,variant,seed,psnr,ssim,depth_mae_coarse,depth_mae_fine\n");
    let mut cells = Vec::new();
    for &budget in budgets {
        let mut per_variant = Vec::new();
        for variant in [Variant::Dd, Variant::Baseline] {
            let mut acc = [0.0f64; 4];
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.n_coarse = budget;
                cfg.n_fine = budget;
                cfg.variant = variant;
                cfg.seed = seed;
                cfg.out = out.join(format!("run_b{budget}_{}_s{seed}", variant.as_str()));
                cmd_train(&cfg)?;
                let eval = cmd_eval(
                    &cfg.out.join("checkpoint.ddnt"),
                    &cfg.data,
                    Some(&cfg.out.join("eval.csv")),
                )?;
                let m = &eval.mean;
                let _ = writeln!(
                    runs_csv,
                    "{budget},{},{seed},{},{},{},{}",
                    variant.as_str(),
                    m.psnr,
                    m.ssim,
                    m.depth_mae_coarse,
                    m.depth_mae_fine
                );
                acc[0] += m.psnr;
                acc[1] += m.ssim;
                acc[2] += m.depth_mae_coarse;
                acc[3] += m.depth_mae_fine;
            }
            let n = seeds.len() as f64;
            per_variant.push(CompareCell {
                budget,
                variant,
                psnr: acc[0] / n,
                ssim: acc[1] / n,
                depth_mae_coarse: acc[2] / n,
                depth_mae_fine: acc[3] / n,
            });
        }
        cells.extend(per_variant);
    }
    std::fs::write(out.join("runs.csv"), &runs_csv)?;

    let report = CompareReport { cells };
    let mut csv = String::from(
        "budget,psnr_dd,psnr_baseline,psnr_diff,ssim_dd,ssim_baseline,ssim_diff,\
         depth_mae_coarse_dd,depth_mae_coarse_baseline,depth_mae_fine_dd,depth_mae_fine_baseline\n",
    );
    for &budget in budgets {
        let dd = report.cell(budget, Variant::Dd).unwrap();
        let bl = report.cell(budget, Variant::Baseline).unwrap();
        let _ = writeln!(
            csv,
            "{budget},{},{},{},{},{},{},{},{},{},{}",
            dd.psnr,
            bl.psnr,
            dd.psnr - bl.psnr,
            dd.ssim,
            bl.ssim,
            dd.ssim - bl.ssim,
            dd.depth_mae_coarse,
            bl.depth_mae_coarse,
            dd.depth_mae_fine,
            bl.depth_mae_fine
        );
    }
    std::fs::write(out.join("compare.csv"), csv)?;
    Ok(report)
}

/// Parses "a,b,c" integer lists for --budgets style flags.
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| DdError::InvalidInput(format!("bad list entry '{v}'")))
        })
        .collect()
}
