//! Ablation sweeps: one training run per (value, seed), then a summary CSV.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};

use super::run::{
    run_train, LoadedData, RunManifest, RunRequest, RunStatus, SweepTag, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str =
    "param,value,seed,status,test_pair_r1,test_class_r1,n_completed,pair_r1_mean,pair_r1_std,class_r1_mean,class_r1_std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Classes,
    Lambda,
    Queue,
    Eta,
    Assignment,
    Init,
}

impl AblationParam {
    pub const ALL: [AblationParam; 6] = [
        AblationParam::Classes,
        AblationParam::Lambda,
        AblationParam::Queue,
        AblationParam::Eta,
        AblationParam::Assignment,
        AblationParam::Init,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Classes => "K",
            AblationParam::Lambda => "lambda",
            AblationParam::Queue => "queue",
            AblationParam::Eta => "eta",
            AblationParam::Assignment => "assignment",
            AblationParam::Init => "init",
        }
    }

    fn config_key(self) -> &'static str {
        match self {
            AblationParam::Classes => "num_classes",
            AblationParam::Lambda => "lambda",
            AblationParam::Queue => "queue_capacity",
            AblationParam::Eta => "eta",
            AblationParam::Assignment => "assignment",
            AblationParam::Init => "init",
        }
    }

    /// `base` with this parameter set to `value`, validated.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let bad =
            |what: &str| Error::Config(format!("{} value {value:?} is not {what}", self.name()));
        let json = match self {
            AblationParam::Classes | AblationParam::Queue => serde_json::Value::from(
                value
                    .parse::<u64>()
                    .map_err(|_| bad("a non-negative integer"))?,
            ),
            AblationParam::Lambda | AblationParam::Eta => {
                let v = value.parse::<f64>().map_err(|_| bad("a number"))?;
                serde_json::Number::from_f64(v)
                    .map(serde_json::Value::Number)
                    .ok_or_else(|| bad("finite"))?
            }
            AblationParam::Assignment | AblationParam::Init => serde_json::Value::from(value),
        };
        let mut obj = serde_json::to_value(base).expect("config serializes");
        obj[self.config_key()] = json;
        let cfg: TrainConfig = serde_json::from_value(obj)
            .map_err(|e| Error::Config(format!("{} value {value:?}: {e}", self.name())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let allowed: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown ablation param {s:?}; allowed: {}",
                    allowed.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub param: AblationParam,
    pub values: Vec<String>,
    pub seeds: usize,
    pub base: TrainConfig,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub threads: usize,
}

#[derive(Debug, Clone)]
struct Job {
    value: String,
    config: TrainConfig,
    dir: PathBuf,
}

/// Outcome of a sweep: manifests in (value, seed) order, and the first
/// failure if any run failed.
#[derive(Debug)]
pub struct SweepResult {
    pub manifests: Vec<RunManifest>,
    pub first_error: Option<Error>,
}

pub fn run_dir(out_dir: &Path, param: AblationParam, value: &str, seed: u64) -> PathBuf {
    out_dir
        .join(format!("{param}-{value}"))
        .join(format!("seed-{seed}"))
}

/// Number of concurrent runs from `SWAMP_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("SWAMP_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "SWAMP_THREADS must be a positive integer, got {s:?}"
            ))),
        },
    }
}

fn reusable(dir: &Path, config: &TrainConfig) -> Option<RunManifest> {
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).ok()?;
    (m.status == RunStatus::Completed && &m.config == config).then_some(m)
}

pub fn run_sweep(sweep: &Sweep, data: &LoadedData) -> Result<SweepResult> {
    if sweep.values.is_empty() || sweep.seeds == 0 {
        return Err(Error::Config(
            "ablation needs at least one value and one seed".into(),
        ));
    }
    let mut jobs = Vec::new();
    for value in &sweep.values {
        let at_value = sweep.param.apply(&sweep.base, value)?;
        for i in 0..sweep.seeds as u64 {
            let config = TrainConfig {
                seed: sweep.base.seed + i,
                ..at_value.clone()
            };
            let dir = run_dir(&sweep.out_dir, sweep.param, value, config.seed);
            jobs.push(Job {
                value: value.clone(),
                config,
                dir,
            });
        }
    }
    std::fs::create_dir_all(&sweep.out_dir).map_err(|e| Error::io(&sweep.out_dir, e))?;

    let slots: Vec<Mutex<Option<Result<RunManifest>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let outcome = match sweep
            .resume
            .then(|| reusable(&job.dir, &job.config))
            .flatten()
        {
            Some(m) => {
                info!("{}: reusing completed run", job.dir.display());
                Ok(m)
            }
            None => {
                info!("{}: training", job.dir.display());
                run_train(&RunRequest {
                    data,
                    config: job.config.clone(),
                    out_dir: job.dir.clone(),
                    timings: false,
                    sweep: Some(SweepTag {
                        param: sweep.param.name().into(),
                        value: job.value.clone(),
                    }),
                })
            }
        };
        *slots[i].lock().expect("slot lock") = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..sweep.threads.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
    });

    let mut manifests = Vec::with_capacity(jobs.len());
    let mut first_error = None;
    for (job, slot) in jobs.iter().zip(slots) {
        match slot
            .into_inner()
            .expect("slot lock")
            .expect("every job ran")
        {
            Ok(m) => manifests.push(m),
            Err(e) => {
                warn!("{}: {e}", job.dir.display());
                // The failed run wrote its own manifest; an I/O failure may not have.
                if let Ok(m) = RunManifest::load(&job.dir.join(MANIFEST_FILE)) {
                    manifests.push(m);
                }
                first_error.get_or_insert(e);
            }
        }
    }
    let summary = summary_csv(&manifests);
    let path = sweep.out_dir.join(SUMMARY_FILE);
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(SweepResult {
        manifests,
        first_error,
    })
}

/// Test R@1 (A to B) of a completed run: (pair, class).
pub fn test_r1(m: &RunManifest) -> Option<(f64, f64)> {
    let pair = m.test_report("a2b", "pair")?.recall(1);
    let class = m.test_report("a2b", "class")?.recall(1);
    Some((pair, class))
}

/// Mean and sample standard deviation; the deviation is absent below two
/// samples.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One row per run, each carrying its value's aggregates. Rows keep the
/// manifests' order.
pub fn summary_csv(manifests: &[RunManifest]) -> String {
    let key = |m: &RunManifest| {
        m.sweep
            .as_ref()
            .map(|t| (t.param.clone(), t.value.clone()))
            .unwrap_or_default()
    };
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for m in manifests {
        let group: Vec<(f64, f64)> = manifests
            .iter()
            .filter(|o| key(o) == key(m))
            .filter_map(test_r1)
            .collect();
        let pairs: Vec<f64> = group.iter().map(|g| g.0).collect();
        let classes: Vec<f64> = group.iter().map(|g| g.1).collect();
        let (pm, ps) = mean_std(&pairs);
        let (cm, cs) = mean_std(&classes);
        let own = test_r1(m);
        let (param, value) = key(m);
        out.push_str(&format!(
            "{param},{value},{},{},{},{},{},{},{},{},{}\n",
            m.config.seed,
            if m.status == RunStatus::Completed {
                "completed"
            } else {
                "failed"
            },
            fmt_opt(own.map(|o| o.0)),
            fmt_opt(own.map(|o| o.1)),
            group.len(),
            fmt_opt(pm),
            fmt_opt(ps),
            fmt_opt(cm),
            fmt_opt(cs),
        ));
    }
    out
}
