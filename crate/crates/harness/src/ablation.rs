//! The module ablation grid: per seed, one pretrained model, then one
//! adaptation run per module set, a source-only continuation as baseline and
//! a target-supervised continuation as oracle. Cells are resumable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tubeshift_model::{ModuleFlags, Phase};

use crate::config::{file_sha256, RunConfig, TARGET_TRAIN};
use crate::run::{self, CHECKPOINT_FILE};

pub const CELL_FILE: &str = "cell.json";
pub const BASELINE: &str = "baseline";
pub const ORACLE: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub seed: u64,
    pub key: String,
    pub frame_map: f64,
    pub video_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub flags: ModuleFlags,
    pub cells: Vec<CellResult>,
}

impl AblationRow {
    pub fn median_frame_map(&self) -> f64 {
        median(self.cells.iter().map(|c| c.frame_map).collect())
    }

    pub fn median_video_map(&self) -> f64 {
        median(self.cells.iter().map(|c| c.video_map).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,timg,tinst,simg");
        for seed in &self.seeds {
            let _ = write!(s, ",frame_map_seed{seed}");
        }
        s.push_str(",median_frame_map,median_video_map\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.row, r.flags.timg as u8, r.flags.tinst as u8, r.flags.simg as u8);
            for c in &r.cells {
                let _ = write!(s, ",{}", c.frame_map);
            }
            let _ = writeln!(s, ",{},{}", r.median_frame_map(), r.median_video_map());
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| row | T img | T ins | S img |");
        for seed in &self.seeds {
            let _ = write!(s, " seed {seed} |");
        }
        s.push_str(" frame-mAP (median) | video-mAP (median) |\n|---|---|---|---|");
        s.push_str(&"---|".repeat(self.seeds.len() + 2));
        s.push('\n');
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {} | {} | {} |",
                r.row,
                mark(r.flags.timg),
                mark(r.flags.tinst),
                mark(r.flags.simg)
            );
            for c in &r.cells {
                let _ = write!(s, " {:.1} |", 100.0 * c.frame_map);
            }
            let _ = writeln!(
                s,
                " {:.1} | {:.1} |",
                100.0 * r.median_frame_map(),
                100.0 * r.median_video_map()
            );
        }
        s
    }
}

fn read_cell(dir: &Path, key: &str) -> Option<CellResult> {
    let text = fs::read_to_string(dir.join(CELL_FILE)).ok()?;
    let cell: CellResult = serde_json::from_str(&text).ok()?;
    (cell.key == key).then_some(cell)
}

/// Trains (unless already done with the same inputs) and evaluates one cell.
fn run_cell(config: &RunConfig, row: &str, mode: Phase, flags: ModuleFlags, dir: &Path) -> Result<CellResult> {
    let init = config.init_checkpoint.as_deref().map(file_sha256).transpose()?;
    let key = format!("{}:{}", config.run_hash(mode), init.unwrap_or_default());
    if let Some(cell) = read_cell(dir, &key) {
        log::info!("{row} seed {}: cached in {}", config.train.seed, dir.display());
        return Ok(cell);
    }
    log::info!("{row} seed {}: training in {}", config.train.seed, dir.display());
    let trained = run::train(config, mode, flags, dir)?;
    let report = run::evaluate(config, &trained.checkpoint, &dir.join("eval"))?;
    let cell = CellResult {
        row: row.to_string(),
        seed: config.train.seed,
        key,
        frame_map: report.frame_map,
        video_map: report.video_map,
    };
    fs::write(dir.join(CELL_FILE), serde_json::to_string_pretty(&cell)?)?;
    log::info!(
        "{row} seed {}: frame-mAP {:.1}, video-mAP {:.1}",
        cell.seed,
        100.0 * cell.frame_map,
        100.0 * cell.video_map
    );
    Ok(cell)
}

pub fn parse_rows(config: &RunConfig) -> Result<Vec<(String, ModuleFlags)>> {
    config
        .ablation_rows
        .iter()
        .map(|r| {
            let flags: ModuleFlags = r.parse().with_context(|| format!("ablation row {r:?}"))?;
            Ok((flags.to_string(), flags))
        })
        .collect()
}

/// Runs the full grid under `out` and writes `ablation.csv` / `ablation.md`.
pub fn run_grid(config: &RunConfig, out: &Path) -> Result<AblationTable> {
    config.validate()?;
    let rows = parse_rows(config)?;
    let mut table = AblationTable {
        seeds: config.seeds.clone(),
        rows: Vec::new(),
    };
    let mut push = |name: &str, flags: ModuleFlags, cell: CellResult| {
        match table.rows.iter_mut().find(|r| r.row == name) {
            Some(r) => r.cells.push(cell),
            None => table.rows.push(AblationRow {
                row: name.to_string(),
                flags,
                cells: vec![cell],
            }),
        }
    };
    for &seed in &config.seeds {
        let seed_dir = out.join(format!("seed{seed}"));
        let mut base = config.clone();
        base.train.seed = seed;
        base.init_checkpoint = None;
        let pre_dir = seed_dir.join("pretrain");
        run_cell(&base, "pretrain", Phase::Pretrain, ModuleFlags::NONE, &pre_dir)?;
        let adapt = RunConfig {
            init_checkpoint: Some(pre_dir.join(CHECKPOINT_FILE)),
            ..base.clone()
        };
        let cell = run_cell(&adapt, BASELINE, Phase::Adapt, ModuleFlags::NONE, &seed_dir.join(BASELINE))?;
        push(BASELINE, ModuleFlags::NONE, cell);
        for (name, flags) in &rows {
            let dir: PathBuf = seed_dir.join(flags.tag());
            let cell = run_cell(&adapt, name, Phase::Adapt, *flags, &dir)?;
            push(name, *flags, cell);
        }
        if config.ablation_oracle {
            let oracle = RunConfig {
                train_split: TARGET_TRAIN.into(),
                ..adapt.clone()
            };
            let cell = run_cell(&oracle, ORACLE, Phase::Adapt, ModuleFlags::NONE, &seed_dir.join(ORACLE))?;
            push(ORACLE, ModuleFlags::NONE, cell);
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    fs::write(out.join("ablation.md"), table.to_markdown())?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(vec![0.4, 0.1, 0.2, 0.3]), 0.25);
        assert!(median(Vec::new()).is_nan());
    }

    #[test]
    fn default_grid_has_seven_distinct_rows() {
        let rows = parse_rows(&RunConfig::default()).unwrap();
        assert_eq!(rows.len(), 7);
        let mut tags: Vec<String> = rows.iter().map(|r| r.1.tag()).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 7);
        assert!(rows.iter().all(|r| r.1.any()));
    }
}
