//! End-to-end runs: generate, reconstruct, window, train, evaluate, and the
//! window-size by fusion-variant sweep.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataio::{build_windows, generate_stream, normalize, DatasetManifest, DatasetSplit};
use crate::error::{Error, Result};
use crate::fringe::{reconstruct_stream, PhaseResult, ShotRecord};
use crate::fusion::FusionVariant;
use crate::head::Metrics;
use crate::training::{circular_mean_baseline, persistence_baseline, train, RunReport, TrainedModel};

/// Generated stream, reconstructed phases and the normalized split.
pub struct Prepared {
    pub shots: Vec<ShotRecord<f64>>,
    pub truth: Vec<f64>,
    pub phases: Vec<PhaseResult<f64>>,
    pub split: DatasetSplit<f64>,
}

impl Prepared {
    pub fn manifest(&self) -> DatasetManifest {
        let missing = self.phases.iter().filter(|p| !p.is_ok()).count();
        let l = self.split.train.first().map_or(0, |s| s.features.values.rows());
        DatasetManifest::new(self.shots.len(), missing, l, &self.split)
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (shots, truth) = generate_stream::<f64>(&cfg.generator)?;
    let phases = reconstruct_stream(&shots, &cfg.fringe)?;
    let samples = build_windows(&shots, &phases, cfg.train.window_len)?;
    let split = DatasetSplit::time_ordered(samples, cfg.data.train_frac, cfg.data.val_frac)?;
    let split = normalize(&split)?;
    Ok(Prepared {
        shots,
        truth,
        phases,
        split,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub persistence: Metrics,
    pub circular_mean: Metrics,
}

pub fn baselines(split: &DatasetSplit<f64>) -> Result<Baselines> {
    Ok(Baselines {
        persistence: persistence_baseline(&split.test)?,
        circular_mean: circular_mean_baseline(&split.train, &split.test)?,
    })
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub window_len: usize,
    pub variant: FusionVariant,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub aborted: Option<String>,
    pub model: Metrics,
    pub baselines: Baselines,
}

pub struct RunOutput {
    pub trained: TrainedModel<f64>,
    pub metrics: RunMetrics,
}

pub fn run_prepared(cfg: &ExperimentConfig, data: &Prepared) -> Result<RunOutput> {
    let trained = train(&data.split, &cfg.network(), &cfg.train)?;
    let (train_n, val_n, test_n) = data.split.sizes();
    let r = &trained.report;
    let metrics = RunMetrics {
        window_len: cfg.train.window_len,
        variant: cfg.fusion.variant,
        seed: cfg.train.seed,
        train: train_n,
        val: val_n,
        test: test_n,
        epochs_run: r.epochs.len(),
        best_epoch: r.best_epoch,
        stopped_early: r.stopped_early,
        aborted: r.aborted.clone(),
        model: r.test,
        baselines: baselines(&data.split)?,
    };
    Ok(RunOutput { trained, metrics })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_prepared(cfg, &prepare(cfg)?)
}

pub fn write_epochs_csv<W: Write>(w: W, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in &report.epochs {
        out.serialize(e)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `checkpoint.bin`, `metrics.json`, `epochs.csv` and `config.toml` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("checkpoint.bin"), out.trained.params.checkpoint_bytes())?;
    let mut json = serde_json::to_vec_pretty(&out.metrics)?;
    json.push(b'\n');
    fs::write(dir.join("metrics.json"), json)?;
    write_epochs_csv(fs::File::create(dir.join("epochs.csv"))?, &out.trained.report)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

/// One line of `sweep.csv`. Failed cells keep their error in `status` and
/// carry NaN metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_len: usize,
    pub variant: FusionVariant,
    pub status: String,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_samples: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub persistence_mae: f64,
    pub circular_mean_mae: f64,
}

impl SweepRow {
    fn failed(window_len: usize, variant: FusionVariant, e: &Error) -> Self {
        Self {
            window_len,
            variant,
            status: format!("error: {e}"),
            mse: f64::NAN,
            mae: f64::NAN,
            rmse: f64::NAN,
            n_samples: 0,
            best_epoch: 0,
            epochs_run: 0,
            persistence_mae: f64::NAN,
            circular_mean_mae: f64::NAN,
        }
    }

    fn from_metrics(m: &RunMetrics) -> Self {
        Self {
            window_len: m.window_len,
            variant: m.variant,
            status: match &m.aborted {
                Some(msg) => format!("aborted: {msg}"),
                None => "ok".into(),
            },
            mse: m.model.mse,
            mae: m.model.mae,
            rmse: m.model.rmse,
            n_samples: m.model.n_samples,
            best_epoch: m.best_epoch,
            epochs_run: m.epochs_run,
            persistence_mae: m.baselines.persistence.mae,
            circular_mean_mae: m.baselines.circular_mean.mae,
        }
    }
}

/// Runs every `(window, variant)` cell on the worker pool. Rows come back in
/// grid order (windows outer, variants inner) regardless of scheduling.
/// With `out_dir`, each cell's artifacts go to `L{window}_{variant}/`.
pub fn sweep(base: &ExperimentConfig, windows: &[usize], variants: &[FusionVariant], out_dir: Option<&Path>) -> Vec<SweepRow> {
    let cells: Vec<(usize, FusionVariant)> = windows
        .iter()
        .flat_map(|&l| variants.iter().map(move |&v| (l, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(l, v)| {
            let mut cfg = base.clone();
            cfg.train.window_len = l;
            cfg.fusion.variant = v;
            let result = cfg.validate().and_then(|_| run(&cfg)).and_then(|out| {
                if let Some(dir) = out_dir {
                    write_run(&dir.join(format!("L{l}_{}", v.as_str())), &cfg, &out)?;
                }
                Ok(out)
            });
            match result {
                Ok(out) => SweepRow::from_metrics(&out.metrics),
                Err(e) => SweepRow::failed(l, v, &e),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
