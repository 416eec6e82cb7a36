use std::collections::BTreeMap;

use humansense::syndata::dataset::{self, DatasetManifest, DATASET_FORMAT, DATASET_VERSION};
use humansense::syndata::{generate_dataset, FigureInstance};
use indexmap::IndexMap;
use serde_json::json;

use super::{load_config, write_config, CONFIG_FILE};
use crate::args::GenerateArgs;
use crate::manifest::{config_hash, ManifestBuilder, RunManifest};
use crate::outdir::{Mode, OutDir};
use crate::{CliError, CliResult};

pub fn test_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// `train` takes the first `n - n_test` samples, `test` the rest.
fn split(mut samples: Vec<FigureInstance>, n_test: usize) -> IndexMap<String, Vec<FigureInstance>> {
    let test = samples.split_off(samples.len() - n_test);
    IndexMap::from([("train".to_string(), samples), ("test".to_string(), test)])
}

pub fn run(args: &GenerateArgs) -> CliResult<RunManifest> {
    let cfg = load_config(&args.config)?;
    cfg.data.validate()?;
    if args.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let samples = generate_dataset(&cfg.data, args.n, args.profile, args.seed)?;
    let fg: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.labels.as_ref())
        .map(|l| l.data.iter().filter(|&&v| v != 0).count() as f64 / l.data.len() as f64)
        .collect();
    let skel = cfg.data.skeleton();
    let splits = split(samples, test_count(args.n, args.test_fraction));
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed: args.seed,
        profile: args.profile,
        config: cfg.data.clone(),
        joints: skel.num_joints(),
        parts: skel.num_parts(),
        splits: splits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| s.index).collect()))
            .collect(),
    };

    let out = OutDir::acquire(&args.out, Mode::from_force(args.force))?;
    dataset::write_dataset(out.path(), &manifest, &splits)?;
    write_config(out.path(), &cfg)?;

    let mut m = ManifestBuilder::new("generate", config_hash(&cfg), Some(args.seed));
    m.arg("--out", args.out.display())
        .arg("--n", args.n)
        .arg("--profile", args.profile)
        .arg("--seed", args.seed)
        .arg("--test-fraction", args.test_fraction)
        .arg("--config", out.join(CONFIG_FILE).display())
        .output("dataset.json")
        .output(CONFIG_FILE);
    for name in splits.keys() {
        m.output(name.clone());
    }
    let summary = json!({
        "samples": args.n,
        "splits": manifest.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect::<BTreeMap<_, _>>(),
        "mean_foreground": (!fg.is_empty()).then(|| fg.iter().sum::<f64>() / fg.len() as f64),
    });
    m.finish(out.path(), summary)
}
