//! Pipeline driver: dataset synthesis, pretraining, contrastive
//! continuation, feature extraction, linear probes, and reconstruction
//! dumps.
//!
//! Every subcommand reads defaults, then an optional `--config` file of
//! `key=value` lines, then `--set key=value` overrides. Runs are
//! reproducible: identical config and seed give identical output bytes
//! (training logs differ only in the wall-clock column). The worker count
//! comes from `CHANNEL_MAE_THREADS` (0 = serial, the default).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use channel_mae::config::RunConfig;
use channel_mae::dataset;
use channel_mae::downstream::{
    beam_metrics, budget_subset, build_probe_dataset, linear_probe, los_metrics, FeatureSource,
    MetricLine, Task,
};
use channel_mae::model::checkpoint;
use channel_mae::model::reassemble;
use channel_mae::patchpipe::{denormalize, normalize, patch_tokens, visible_from_tokens};
use channel_mae::trainer::{self, val_mask, PeriodicCheckpoints};
use channel_mae::{Error, Result};

#[derive(Parser)]
#[command(name = "channel-mae", version, about = "Masked-autoencoder pipeline for wireless channel matrices")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. --set model.d_e=32 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic channel dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional warm-start checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training log file (tab-separated, one line per epoch).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory for periodic checkpoints (cadence: train.checkpoint_every).
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
    },
    /// Contrastive continual pretraining from a checkpoint.
    Contrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Warm-start checkpoint (required).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
    },
    /// Extract features to a binary file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint; omit with --task raw.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// One of: beam, los, raw.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-selection linear probe on frozen features.
    ProbeBeam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Probe the raw-channel baseline instead of encoder features.
        #[arg(long, default_value_t = false)]
        raw: bool,
        #[arg(long, default_value_t = 16)]
        cs: usize,
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
        /// Metrics file; lines also go to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// LoS-detection linear probe on frozen features.
    ProbeLos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        raw: bool,
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump original/masked/reconstructed channel grids as CSV.
    ReconDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    ExitCode::from(dispatch(&args))
}

/// Parses argv and runs the subcommand. Exit status: 0 success, 1 validation
/// or runtime failure (single-line error on stderr), 2 usage errors.
fn dispatch(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn worker_threads() -> usize {
    std::env::var("CHANNEL_MAE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { common, count, seed, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let summary = channel_mae::chansynth::generate_dataset(
                count,
                &cfg.synth_ratios,
                &cfg.system,
                seed,
                worker_threads(),
                &out,
            )?;
            println!(
                "wrote {} records to {} (splits {:?}, normalization std {:.6e})",
                summary.count,
                out.display(),
                summary.split_counts,
                summary.normalization_std
            );
            Ok(())
        }
        Cmd::Pretrain { common, data, out, init, log, ckpt_dir } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let ds = dataset::read(&data)?;
            let init_params = match init {
                Some(p) => {
                    let (params, meta) = checkpoint::load(&p)?;
                    check_meta(&meta, &cfg, false)?;
                    Some(params)
                }
                None => None,
            };
            let periodic = ckpt_dir.map(|dir| PeriodicCheckpoints { dir });
            if let Some(p) = &periodic {
                std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            }
            let outcome = trainer::pretrain_with_checkpoints(
                &ds,
                &cfg.model,
                &cfg.patch,
                &cfg.train,
                None,
                init_params,
                periodic,
            )?;
            checkpoint::save(&outcome.params, &outcome.meta, checkpoint::Dtype::F64, &out)?;
            write_log(log.as_deref(), &outcome.log)?;
            println!(
                "pretrained {} epochs; final val recon {}",
                cfg.train.epochs,
                outcome.final_val_recon.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
            );
            Ok(())
        }
        Cmd::Contrain { common, data, init, out, log, ckpt_dir } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let init = init.ok_or_else(|| Error::contract("warm-start checkpoint required".to_string()))?;
            let ds = dataset::read(&data)?;
            let (params, meta) = checkpoint::load_warm_start(&init, cfg.train.seed)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.contrastive_enabled = true;
            model_cfg.d_c = meta.model.d_c;
            check_meta(&meta, &cfg, true)?;
            let periodic = ckpt_dir.map(|dir| PeriodicCheckpoints { dir });
            if let Some(p) = &periodic {
                std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            }
            let outcome = trainer::pretrain_with_checkpoints(
                &ds,
                &model_cfg,
                &cfg.patch,
                &cfg.train,
                Some(cfg.loss),
                Some(params),
                periodic,
            )?;
            checkpoint::save(&outcome.params, &outcome.meta, checkpoint::Dtype::F64, &out)?;
            write_log(log.as_deref(), &outcome.log)?;
            println!(
                "contrastive pretraining done; final val recon {}",
                outcome.final_val_recon.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
            );
            Ok(())
        }
        Cmd::Embed { common, data, ckpt, task, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let ds = dataset::read(&data)?;
            let task_kind = match task.as_str() {
                "beam" => Task::Beam { codebook_size: 16 },
                "los" => Task::Los,
                "raw" => Task::Beam { codebook_size: 16 }, // feature layout only
                other => return Err(Error::config(format!("unknown embed task {other:?}"))),
            };
            let loaded;
            let source = if task == "raw" {
                FeatureSource::Raw
            } else {
                let p = ckpt.ok_or_else(|| Error::contract("--ckpt required unless --task raw".to_string()))?;
                loaded = checkpoint::load(&p)?;
                FeatureSource::Encoder { params: &loaded.0, model: &loaded.1.model }
            };
            let features = channel_mae::downstream::extract_features(
                &ds,
                &cfg.patch,
                &source,
                task_kind,
                worker_threads(),
            )?;
            write_features(&out, &features)?;
            println!("wrote {} feature vectors of width {} to {}", features.len(),
                features.first().map(Vec::len).unwrap_or(0), out.display());
            Ok(())
        }
        Cmd::ProbeBeam { common, data, ckpt, raw, cs, budget, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let ds = dataset::read(&data)?;
            let task = Task::Beam { codebook_size: cs };
            let (lines, _) = run_probe(&cfg, &ds, ckpt.as_deref(), raw, task, budget, &cfg.probe_beam)?;
            emit_metrics(&lines, out.as_deref())
        }
        Cmd::ProbeLos { common, data, ckpt, raw, budget, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let ds = dataset::read(&data)?;
            let (lines, _) = run_probe(&cfg, &ds, ckpt.as_deref(), raw, Task::Los, budget, &cfg.probe_los)?;
            emit_metrics(&lines, out.as_deref())
        }
        Cmd::ReconDump { common, data, ckpt, n, out_dir } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let ds = dataset::read(&data)?;
            recon_dump(&cfg, &ds, &ckpt, n, &out_dir)
        }
    }
}

fn check_meta(meta: &checkpoint::CheckpointMeta, cfg: &RunConfig, allow_head: bool) -> Result<()> {
    if meta.patch != cfg.patch {
        return Err(Error::config(format!(
            "checkpoint patch {:?} differs from configured {:?}",
            meta.patch, cfg.patch
        )));
    }
    let mut want = cfg.model.clone();
    want.contrastive_enabled = meta.model.contrastive_enabled;
    want.d_c = meta.model.d_c;
    if meta.model != want {
        return Err(Error::config(
            "checkpoint model architecture differs from the configured one".to_string(),
        ));
    }
    if meta.model.contrastive_enabled && !allow_head {
        return Err(Error::config("checkpoint already carries a contrastive head".to_string()));
    }
    Ok(())
}

fn write_log(path: Option<&Path>, log: &[trainer::EpochLog]) -> Result<()> {
    if let Some(p) = path {
        let mut text = String::new();
        for entry in log {
            text.push_str(&entry.line());
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Feature file: magic "WFEA", u32 version=1, u32 count, u32 dim, then
/// count*dim little-endian f64 values row-major.
fn write_features(path: &Path, features: &[Vec<f64>]) -> Result<()> {
    let dim = features.first().map(Vec::len).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + features.len() * dim * 8);
    out.extend_from_slice(b"WFEA");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(features.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in features {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn run_probe(
    cfg: &RunConfig,
    ds: &dataset::Dataset,
    ckpt: Option<&Path>,
    raw: bool,
    task: Task,
    budget: f64,
    probe_cfg: &channel_mae::downstream::ProbeConfig,
) -> Result<(Vec<MetricLine>, String)> {
    let loaded;
    let (source, model_name) = if raw {
        (FeatureSource::Raw, "raw".to_string())
    } else {
        let p = ckpt.ok_or_else(|| Error::contract("--ckpt required unless --raw".to_string()))?;
        loaded = checkpoint::load(p)?;
        let name = if loaded.1.model.contrastive_enabled { "contra-mae" } else { "mae" };
        (
            FeatureSource::Encoder { params: &loaded.0, model: &loaded.1.model },
            name.to_string(),
        )
    };
    let pd = build_probe_dataset(ds, &cfg.patch, &source, task, &cfg.probe_ratios, worker_threads())?;
    let train = budget_subset(&pd.splits[0], budget, cfg.probe_seed)?;
    let val = pd.splits.get(1).cloned().unwrap_or_default();
    let test = pd.splits.get(2).cloned().unwrap_or_else(|| val.clone());
    let mut pcfg = probe_cfg.clone();
    pcfg.seed = cfg.probe_seed;
    let clf = linear_probe(&pd, &train, &val, &pcfg)?;
    let lines = match task {
        Task::Beam { codebook_size } => {
            beam_metrics(&clf, &pd, &test, &model_name, codebook_size, budget)
        }
        Task::Los => los_metrics(&clf, &pd, &test, &model_name, budget),
    };
    Ok((lines, model_name))
}

fn emit_metrics(lines: &[MetricLine], out: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        println!("{}", l.line());
        text.push_str(&l.line());
        text.push('\n');
    }
    if let Some(p) = out {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn csv_of(values: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in values {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn recon_dump(
    cfg: &RunConfig,
    ds: &dataset::Dataset,
    ckpt: &Path,
    n: usize,
    out_dir: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(Error::contract("recon-dump needs n >= 1".to_string()));
    }
    let (params, meta) = checkpoint::load(ckpt)?;
    let geo = meta.geometry()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let std = ds.normalization_std;

    for (i, rec) in ds.records.iter().take(n).enumerate() {
        let mask = val_mask(rec.seed, geo.k, cfg.train.mask_ratio)?;
        let tokens = patch_tokens(&normalize(&rec.h_low, std)?, &meta.patch)?;
        let visible = visible_from_tokens(&tokens, &mask)?;

        let mut tape = channel_mae::numerics::Tape::new();
        let bound = channel_mae::model::bind_params(&mut tape, &params);
        let z0 = channel_mae::model::embed(&mut tape, &bound, &visible)?;
        let z_enc = channel_mae::model::encoder_forward(&mut tape, &bound, &meta.model, z0)?;
        let z_d = channel_mae::model::decoder_restore(
            &mut tape,
            &bound,
            z_enc,
            &visible.token_indices,
            geo.total_tokens(),
        )?;
        let p_pred = channel_mae::model::decoder_forward(&mut tape, &bound, &meta.model, z_d)?;
        let h_hat = denormalize(&reassemble(tape.value(p_pred), &meta.patch, ds.n_s, ds.n_f)?, std)?;

        let masked_grid = |h: &channel_mae::complexmat::ComplexMatrix, keep_visible: bool| {
            let mut mag = vec![vec![f64::NAN; ds.n_f]; ds.n_s];
            let mut phase = vec![vec![f64::NAN; ds.n_f]; ds.n_s];
            let grid_cols = ds.n_f / meta.patch.patch_cols;
            for r in 0..ds.n_s {
                for c in 0..ds.n_f {
                    let patch = (r / meta.patch.patch_rows) * grid_cols + c / meta.patch.patch_cols;
                    if mask.is_visible(patch) == keep_visible {
                        let v = h.at(r, c);
                        mag[r][c] = v.norm();
                        phase[r][c] = v.arg();
                    }
                }
            }
            (mag, phase)
        };
        let full_grid = |h: &channel_mae::complexmat::ComplexMatrix| {
            let mag: Vec<Vec<f64>> =
                (0..ds.n_s).map(|r| (0..ds.n_f).map(|c| h.at(r, c).norm()).collect()).collect();
            let phase: Vec<Vec<f64>> =
                (0..ds.n_s).map(|r| (0..ds.n_f).map(|c| h.at(r, c).arg()).collect()).collect();
            (mag, phase)
        };

        let (orig_mag, orig_phase) = full_grid(&rec.h_low);
        let (masked_mag, masked_phase) = masked_grid(&rec.h_low, true);
        let (recon_mag, recon_phase) = full_grid(&h_hat);
        let (rm_mag, rm_phase) = masked_grid(&h_hat, false);

        for (name, grid) in [
            ("original_mag", &orig_mag),
            ("original_phase", &orig_phase),
            ("masked_mag", &masked_mag),
            ("masked_phase", &masked_phase),
            ("recon_mag", &recon_mag),
            ("recon_phase", &recon_phase),
            ("recon_masked_mag", &rm_mag),
            ("recon_masked_phase", &rm_phase),
        ] {
            let path = out_dir.join(format!("sample{i}_{name}.csv"));
            std::fs::write(&path, csv_of(grid)).map_err(|e| Error::io(&path, e))?;
        }
    }
    println!("wrote {} samples x 8 grids to {}", n.min(ds.records.len()), out_dir.display());
    Ok(())
}
