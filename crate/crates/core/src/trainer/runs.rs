use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Ablation;
use crate::error::{Error, Result};
use crate::metrics::{EvalMetrics, Report};

/// Outcome of one training run, written next to its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: String,
    pub seed: u64,
    pub best_dev_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: Option<EvalMetrics>,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        format!("run-{}-seed{}.json", self.setting, self.seed)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Reads every `run-*.json` below `dir`, recursively, in path order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    collect(dir, &mut paths)?;
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })
        })
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// One row per setting, from the test metrics of its runs. Known ablations
/// come first in their canonical order.
pub fn build_report(records: &[RunRecord]) -> Result<Report> {
    let mut groups: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let Some(test) = r.test else {
            log::warn!("run {} has no test metrics; left out of the report", r.file_name());
            continue;
        };
        let rank = r
            .setting
            .parse::<Ablation>()
            .map_or(Ablation::ALL.len(), |a| a as usize);
        let g = groups.entry((rank, r.setting.clone())).or_default();
        g.0.push(test.macro_f1);
        g.1.push(test.auc);
    }
    if groups.is_empty() {
        return Err(Error::Input("no runs with test metrics".into()));
    }
    let mut report = Report::default();
    for ((_, setting), (f1, auc)) in groups {
        report.push(setting, &f1, &auc)?;
    }
    Ok(report)
}
