//! Markdown report over every run manifest below a directory.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use log::warn;

use super::ablate::{fmt_opt, mean_std, test_r1};
use super::run::{RunManifest, RunStatus, MANIFEST_FILE};
use crate::error::{Error, Result};

const RUNS_HEADER: &str = "| param | value | seed | status | epoch | loss_contrastive | loss_swamp | val_r1_pair | test_pair_r1 | test_class_r1 | test_pair_r5 | test_pair_medr | run |";
const GROUPS_HEADER: &str =
    "| param | value | n_completed | pair_r1_mean | pair_r1_std | class_r1_mean | class_r1_std |";

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            find_manifests(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Numbers order numerically and before anything else.
pub fn compare_values(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

struct Row {
    param: String,
    value: String,
    rel: String,
    manifest: RunManifest,
}

impl Row {
    fn cmp_key(&self, other: &Row) -> Ordering {
        self.param
            .cmp(&other.param)
            .then_with(|| compare_values(&self.value, &other.value))
            .then_with(|| self.manifest.config.seed.cmp(&other.manifest.config.seed))
            .then_with(|| self.rel.cmp(&other.rel))
    }
}

fn cell(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn run_line(row: &Row) -> String {
    let m = &row.manifest;
    let status = match m.status {
        RunStatus::Completed => "completed",
        RunStatus::Failed => "failed",
    };
    let best = m.best.as_ref();
    let pair = m.test_report("a2b", "pair");
    let r1 = test_r1(m);
    let cols = [
        cell(&row.param).to_string(),
        cell(&row.value).to_string(),
        m.config.seed.to_string(),
        status.to_string(),
        best.map(|b| b.epoch.to_string()).unwrap_or_default(),
        best.map(|b| b.loss_contrastive.to_string())
            .unwrap_or_default(),
        best.and_then(|b| b.loss_swamp)
            .map(|v| v.to_string())
            .unwrap_or_default(),
        best.map(|b| b.val_r1_pair.to_string()).unwrap_or_default(),
        fmt_opt(r1.map(|r| r.0)),
        fmt_opt(r1.map(|r| r.1)),
        fmt_opt(pair.map(|p| p.recall(5))),
        pair.map(|p| p.median_rank.to_string()).unwrap_or_default(),
        row.rel.clone(),
    ];
    let cols: Vec<&str> = cols.iter().map(|c| cell(c)).collect();
    format!("| {} |", cols.join(" | "))
}

fn separator(header: &str) -> String {
    let n = header.matches('|').count() - 1;
    format!("|{}", "---|".repeat(n))
}

/// Builds the report text. Unreadable manifests are skipped with a warning
/// and listed at the end.
pub fn build_report(runs_dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    find_manifests(runs_dir, &mut paths)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let rel = path
            .parent()
            .and_then(|p| p.strip_prefix(runs_dir).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        match RunManifest::load(&path) {
            Ok(manifest) => {
                let (param, value) = manifest
                    .sweep
                    .as_ref()
                    .map(|t| (t.param.clone(), t.value.clone()))
                    .unwrap_or_default();
                rows.push(Row {
                    param,
                    value,
                    rel,
                    manifest,
                });
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(rel);
            }
        }
    }
    rows.sort_by(|a, b| a.cmp_key(b));
    skipped.sort();

    let mut out = String::from("# Run report\n\n## Runs\n\n");
    out.push_str(RUNS_HEADER);
    out.push('\n');
    out.push_str(&separator(RUNS_HEADER));
    out.push('\n');
    for row in &rows {
        out.push_str(&run_line(row));
        out.push('\n');
    }

    out.push_str("\n## By value\n\n");
    out.push_str(GROUPS_HEADER);
    out.push('\n');
    out.push_str(&separator(GROUPS_HEADER));
    out.push('\n');
    let mut i = 0;
    while i < rows.len() {
        let j = rows[i..]
            .iter()
            .position(|r| r.param != rows[i].param || r.value != rows[i].value)
            .map_or(rows.len(), |k| i + k);
        let r1: Vec<(f64, f64)> = rows[i..j]
            .iter()
            .filter_map(|r| test_r1(&r.manifest))
            .collect();
        let (pm, ps) = mean_std(&r1.iter().map(|r| r.0).collect::<Vec<_>>());
        let (cm, cs) = mean_std(&r1.iter().map(|r| r.1).collect::<Vec<_>>());
        let cols = [
            cell(&rows[i].param).to_string(),
            cell(&rows[i].value).to_string(),
            r1.len().to_string(),
            fmt_opt(pm),
            fmt_opt(ps),
            fmt_opt(cm),
            fmt_opt(cs),
        ];
        let cols: Vec<&str> = cols.iter().map(|c| cell(c)).collect();
        out.push_str(&format!("| {} |\n", cols.join(" | ")));
        i = j;
    }

    out.push_str("\n## Skipped manifests\n\n");
    if skipped.is_empty() {
        out.push_str("none\n");
    }
    for s in &skipped {
        out.push_str(&format!("- {s}/{MANIFEST_FILE}\n"));
    }
    Ok(out)
}
