use std::fs;
use std::io::Write;
use std::path::Path;

use humansense::network::Model;
use humansense::params::Checkpoint;
use humansense::syndata::dataset;
use humansense::trainer::{preflight, LogRecord, Trainer};
use humansense::{io, Error};
use serde_json::json;

use super::{checkpoint_path, load_config, read_config_file, write_config, CHECKPOINT_FILE, CONFIG_FILE};
use crate::args::TrainArgs;
use crate::manifest::{config_hash, ManifestBuilder, RunManifest};
use crate::outdir::{Mode, OutDir};
use crate::CliResult;

pub const LOG_FILE: &str = "log.jsonl";

/// Keeps the log lines of epochs before `epochs`.
fn truncate_log(path: &Path, epochs: usize) -> CliResult<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e).into()),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let r: LogRecord = serde_json::from_str(line).map_err(|e| Error::format(path, e))?;
        if r.epoch < epochs {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(io::write_atomic(path, kept.as_bytes())?)
}

fn append(path: &Path, lines: &[String]) -> CliResult<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> CliResult<RunManifest> {
    let (cfg, resume_from) = if args.resume {
        let mut cfg = read_config_file(&args.out.join(CONFIG_FILE))?;
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
        }
        let ckpt = Checkpoint::load(&args.out.join(CHECKPOINT_FILE))?;
        (cfg, Some(ckpt))
    } else {
        let mut cfg = load_config(&args.config)?;
        if let Some(s) = args.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = args.coverage_strategy {
            cfg.train.coverage_strategy = s;
        }
        if let Some(a) = args.ablation {
            cfg.network.r_inputs = a;
        }
        (cfg, None)
    };
    cfg.network.validate()?;
    cfg.train.validate()?;

    let ds = dataset::read_manifest(&args.data)?;
    cfg.check_data(&ds.config)?;
    let data = dataset::read_split(&args.data, &ds, &args.split)?;
    preflight(&data, &cfg.network, &cfg.train)?;

    let skeleton = Some(ds.config.skeleton());
    let mut trainer = match resume_from {
        Some(ckpt) => {
            let state = ckpt
                .optimizer
                .clone()
                .ok_or_else(|| Error::format(args.out.join(CHECKPOINT_FILE), "checkpoint has no optimizer state"))?;
            let model = Model::from_params(cfg.network.clone(), ckpt.params()?)?;
            Trainer::resume(model, cfg.train.clone(), skeleton, state)?
        }
        None => {
            let model = match &args.init_from {
                Some(p) => {
                    let path = checkpoint_path(p);
                    let ckpt = Checkpoint::load(&path)?;
                    Model::from_params(cfg.network.clone(), ckpt.params()?)
                        .map_err(|e| Error::format(&path, format!("cannot initialize from this checkpoint: {e}")))?
                }
                None => Model::new(cfg.network.clone(), cfg.train.seed)?,
            };
            Trainer::new(model, cfg.train.clone(), skeleton)?
        }
    };

    let mode = if args.resume { Mode::Reuse } else { Mode::from_force(args.force) };
    let out = OutDir::acquire(&args.out, mode)?;
    let log_path = out.join(LOG_FILE);
    // a resumed run records its new epoch total
    write_config(out.path(), &cfg)?;
    if args.resume {
        truncate_log(&log_path, trainer.epochs_completed)?;
    } else {
        io::write_atomic(&log_path, b"")?;
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);

    let mut last_mean = None;
    while trainer.epochs_completed < cfg.train.epochs {
        let mut lines = Vec::new();
        let mut sum = 0.0;
        let mut steps = 0usize;
        let result = trainer.run_epoch(&data, &mut |report, epoch| {
            for r in report.records(epoch) {
                lines.push(serde_json::to_string(&r).expect("log records serialize"));
            }
            sum += report.total;
            steps += 1;
            Ok(())
        });
        append(&log_path, &lines)?;
        result?;
        let mean = sum / steps.max(1) as f64;
        eprintln!("epoch {}: mean loss {mean:.6}", trainer.epochs_completed - 1);
        last_mean = Some(mean);
        Checkpoint::new(trainer.model.params(), Some(trainer.optimizer_state())).save(&ckpt_path)?;
    }
    if !ckpt_path.exists() || cfg.train.epochs == 0 {
        Checkpoint::new(trainer.model.params(), Some(trainer.optimizer_state())).save(&ckpt_path)?;
    }

    let mut m = ManifestBuilder::new("train", config_hash(&cfg), Some(cfg.train.seed));
    m.arg("--data", args.data.display())
        .arg("--split", &args.split)
        .arg("--out", args.out.display())
        .arg("--config", out.join(CONFIG_FILE).display());
    if let Some(p) = &args.init_from {
        m.arg("--init-from", p.display());
        m.input("init_from", p);
    }
    m.input("data", &args.data)
        .output(CONFIG_FILE)
        .output(CHECKPOINT_FILE)
        .output(LOG_FILE);
    let summary = json!({
        "epochs": trainer.epochs_completed,
        "steps": trainer.global_step,
        "samples": data.len(),
        "parameters": trainer.model.params().num_values(),
        "coverage_strategy": cfg.train.coverage_strategy.to_string(),
        "r_inputs": cfg.network.r_inputs.to_string(),
        "last_epoch_mean_loss": last_mean,
    });
    m.finish(out.path(), summary)
}
