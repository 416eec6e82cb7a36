use humansense::eval::{evaluate, AlignKind, AlignScope, EvalOptions, MetricsReport};
use humansense::io;
use humansense::syndata::dataset;
use serde_json::json;

use super::{default_split, load_run};
use crate::args::EvalArgs;
use crate::manifest::{config_hash, ManifestBuilder, RunManifest};
use crate::outdir::{Mode, OutDir};
use crate::CliResult;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.txt";

pub fn run(args: &EvalArgs) -> CliResult<(RunManifest, MetricsReport)> {
    let loaded = load_run(&args.checkpoint)?;
    let ds = dataset::read_manifest(&args.data)?;
    loaded.config.check_data(&ds.config)?;
    let split = args.split.clone().unwrap_or_else(|| default_split(&ds));
    let samples = dataset::read_split(&args.data, &ds, &split)?;
    let opts = EvalOptions {
        align: if args.similarity { AlignKind::Similarity } else { AlignKind::Rigid },
        scope: if args.pooled { AlignScope::Pooled } else { AlignScope::PerFrame },
    };
    let train = &loaded.config.train;
    let report = evaluate(&loaded.model, &samples, &opts, &train.loss, train.heatmap_sigma)?;

    let out = OutDir::acquire(&args.out, Mode::from_force(args.force))?;
    io::write_json_pretty(&out.join(METRICS_JSON), &report)?;
    io::write_atomic(&out.join(METRICS_CSV), report.to_csv().as_bytes())?;
    io::write_atomic(&out.join(TABLE_FILE), report.to_table().as_bytes())?;

    let mut m = ManifestBuilder::new("eval", config_hash(&loaded.config), Some(train.seed));
    m.arg("--data", args.data.display())
        .arg("--split", &split)
        .arg("--checkpoint", loaded.path.display())
        .arg("--out", args.out.display());
    if args.similarity {
        m.flag("--similarity");
    }
    if args.pooled {
        m.flag("--pooled");
    }
    m.input("data", &args.data)
        .input("checkpoint", &loaded.path)
        .output(METRICS_JSON)
        .output(METRICS_CSV)
        .output(TABLE_FILE);
    let summary = json!({
        "split": split,
        "samples": report.samples,
        "mpjpe_mm": report.pose.as_ref().map(|p| p.mpjpe_mm),
        "aligned_mpjpe_mm": report.pose.as_ref().map(|p| p.aligned_mpjpe_mm),
        "pixel_fg": report.segmentation.as_ref().map(|s| s.pixel_fg),
    });
    let manifest = m.finish(out.path(), summary)?;
    print!("{}", report.to_table());
    Ok((manifest, report))
}
