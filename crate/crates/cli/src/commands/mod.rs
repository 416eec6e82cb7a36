pub mod ablate;
pub mod eval;
pub mod generate;
pub mod infer;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use humansense::config::RunConfig;
use humansense::network::Model;
use humansense::params::Checkpoint;
use humansense::{io, Error};

use crate::args::{ConfigArgs, Preset};
use crate::CliResult;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn preset(p: Preset) -> RunConfig {
    match p {
        Preset::Default => RunConfig::default(),
        Preset::Overfit => RunConfig::overfit(),
        Preset::Ablation => RunConfig::ablation(),
    }
}

/// Writes `over` into `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_config(text: &str, base: &RunConfig, origin: &Path) -> CliResult<RunConfig> {
    let over: toml::Table = toml::from_str(text).map_err(|e| Error::format(origin, e.message()))?;
    let mut table = toml::Table::try_from(base).map_err(|e| Error::format(origin, e))?;
    merge(&mut table, over);
    Ok(table.try_into().map_err(|e: toml::de::Error| Error::format(origin, e.message()))?)
}

pub fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let base = preset(args.preset);
    match &args.config {
        None => Ok(base),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text, &base, path)
        }
    }
}

pub fn read_config_file(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &RunConfig::default(), path)
}

pub fn config_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("configs serialize to TOML")
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    Ok(io::write_atomic(&dir.join(CONFIG_FILE), config_toml(cfg).as_bytes())?)
}

/// Resolves a checkpoint file, accepting a run directory in its place.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// A checkpoint together with the run configuration stored next to it.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
}

pub fn load_run(path: &Path) -> CliResult<LoadedRun> {
    let path = checkpoint_path(path);
    let dir = path.parent().unwrap_or(Path::new("."));
    let config = read_config_file(&dir.join(CONFIG_FILE))?;
    config.network.validate()?;
    let checkpoint = Checkpoint::load(&path)?;
    let model = Model::from_params(config.network.clone(), checkpoint.params()?)
        .map_err(|e| Error::format(&path, format!("checkpoint does not match its config: {e}")))?;
    Ok(LoadedRun {
        config,
        model,
        checkpoint,
        path,
    })
}

/// Default evaluation split: `test` when it holds samples.
pub fn default_split(manifest: &humansense::syndata::dataset::DatasetManifest) -> String {
    match manifest.splits.get("test") {
        Some(v) if !v.is_empty() => "test".into(),
        _ => "train".into(),
    }
}
