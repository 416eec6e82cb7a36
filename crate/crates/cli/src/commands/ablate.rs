use std::fmt::Write as _;

use humansense::network::InputSet;
use humansense::syndata::dataset;
use humansense::{io, Error};
use serde::Serialize;
use serde_json::json;

use super::{default_split, load_config, write_config, CONFIG_FILE};
use crate::args::{AblateArgs, ConfigArgs, EvalArgs, Preset, TrainArgs};
use crate::manifest::{config_hash, ManifestBuilder, RunManifest};
use crate::outdir::{Mode, OutDir};
use crate::{CliError, CliResult};

pub const TABLE_CSV: &str = "ablation.csv";
pub const TABLE_TXT: &str = "ablation.txt";

pub fn default_subsets() -> Vec<InputSet> {
    ["J", "D", "J,B", "J,D", "J,B,D"].iter().map(|s| s.parse().expect("valid subset")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub seed: u64,
    pub mpjpe_mm: f64,
    pub aligned_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub inputs: String,
    pub cells: Vec<Cell>,
}

impl Row {
    pub fn mean(&self) -> f64 {
        self.cells.iter().map(|c| c.mpjpe_mm).sum::<f64>() / self.cells.len() as f64
    }

    pub fn mean_aligned(&self) -> f64 {
        self.cells.iter().map(|c| c.aligned_mpjpe_mm).sum::<f64>() / self.cells.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
}

impl AblationTable {
    pub fn row(&self, inputs: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.inputs == inputs)
    }

    /// Long format, one line per variant and seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,mpjpe_mm,aligned_mpjpe_mm\n");
        for r in &self.rows {
            for c in &r.cells {
                let _ = writeln!(out, "\"R({})\",{},{},{}", r.inputs, c.seed, c.mpjpe_mm, c.aligned_mpjpe_mm);
            }
        }
        out
    }

    /// Variants by rows, held-out MPJPE per seed by columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "Variant");
        for s in &self.seeds {
            let _ = write!(out, " {:>10}", format!("seed {s}"));
        }
        let _ = writeln!(out, " {:>10} {:>12}", "mean", "mean aligned");
        for r in &self.rows {
            let _ = write!(out, "{:<12}", format!("R({})", r.inputs));
            for c in &r.cells {
                let _ = write!(out, " {:>10.2}", c.mpjpe_mm);
            }
            let _ = writeln!(out, " {:>10.2} {:>12.2}", r.mean(), r.mean_aligned());
        }
        out
    }
}

fn slug(inputs: &InputSet) -> String {
    inputs.tokens().join("-")
}

pub fn run(args: &AblateArgs) -> CliResult<(RunManifest, AblationTable)> {
    let cfg = load_config(&args.config)?;
    cfg.network.validate()?;
    cfg.train.validate()?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("at least one --seed is required".into()));
    }
    let subsets = if args.ablation.is_empty() { default_subsets() } else { args.ablation.clone() };
    let ds = dataset::read_manifest(&args.data)?;
    cfg.check_data(&ds.config)?;
    let eval_split = args.eval_split.clone().unwrap_or_else(|| default_split(&ds));
    for split in [&args.train_split, &eval_split] {
        if !ds.splits.get(split).is_some_and(|v| !v.is_empty()) {
            return Err(Error::Data(format!("dataset split {split:?} is missing or empty")).into());
        }
    }

    let out = OutDir::acquire(&args.out, Mode::from_force(args.force))?;
    write_config(out.path(), &cfg)?;
    let base = ConfigArgs {
        config: Some(out.join(CONFIG_FILE)),
        preset: Preset::Default,
    };

    let mut rows = Vec::new();
    for inputs in &subsets {
        let mut cells = Vec::new();
        for &seed in &args.seeds {
            let dir = out.join(slug(inputs)).join(format!("seed-{seed}"));
            let train_dir = dir.join("train");
            crate::commands::train::run(&TrainArgs {
                config: base.clone(),
                data: args.data.clone(),
                split: args.train_split.clone(),
                out: train_dir.clone(),
                seed: Some(seed),
                epochs: args.epochs,
                init_from: None,
                coverage_strategy: args.coverage_strategy,
                ablation: Some(*inputs),
                resume: false,
                force: false,
            })?;
            let (_, report) = crate::commands::eval::run(&EvalArgs {
                data: args.data.clone(),
                split: Some(eval_split.clone()),
                checkpoint: train_dir,
                out: dir.join("eval"),
                similarity: args.similarity,
                pooled: false,
                force: false,
            })?;
            let pose = report
                .pose
                .ok_or_else(|| Error::Data(format!("split {eval_split:?} has no 3D pose to score")))?;
            eprintln!("R({inputs}) seed {seed}: MPJPE {:.2} mm", pose.mpjpe_mm);
            cells.push(Cell {
                seed,
                mpjpe_mm: pose.mpjpe_mm,
                aligned_mpjpe_mm: pose.aligned_mpjpe_mm,
            });
        }
        rows.push(Row {
            inputs: inputs.to_string(),
            cells,
        });
    }
    let table = AblationTable {
        seeds: args.seeds.clone(),
        rows,
    };
    io::write_atomic(&out.join(TABLE_CSV), table.to_csv().as_bytes())?;
    io::write_atomic(&out.join(TABLE_TXT), table.to_table().as_bytes())?;
    print!("{}", table.to_table());

    let mut m = ManifestBuilder::new("ablate", config_hash(&cfg), args.seeds.first().copied());
    m.arg("--data", args.data.display())
        .arg("--out", args.out.display())
        .arg("--config", out.join(CONFIG_FILE).display())
        .arg("--train-split", &args.train_split)
        .arg("--eval-split", &eval_split)
        .arg(
            "--seed",
            args.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
    for s in &subsets {
        m.arg("--ablation", s);
        m.output(slug(s));
    }
    if let Some(e) = args.epochs {
        m.arg("--epochs", e);
    }
    if let Some(s) = args.coverage_strategy {
        m.arg("--coverage-strategy", s);
    }
    if args.similarity {
        m.flag("--similarity");
    }
    m.input("data", &args.data)
        .output(CONFIG_FILE)
        .output(TABLE_CSV)
        .output(TABLE_TXT);
    let manifest = m.finish(out.path(), json!(table))?;
    Ok((manifest, table))
}
