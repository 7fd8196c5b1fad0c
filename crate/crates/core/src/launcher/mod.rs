//! MPMD-style launcher: assigns ranks from the config, starts every rank
//! (threads in-process, or spawned OS processes over sockets), runs the
//! named program on each, and aggregates per-rank status and metrics into
//! an exit report.

mod config;

pub use config::{parse_config, AppFamily, GroupSpec, LaunchMode, RunConfig};

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::apps::{self, AppCtx};
use crate::error::{Error, Result};
use crate::harness::{self, RankMetrics, Recorder, RunReport};
use crate::transport::{Fabric, LoopbackFabric, TcpFabric};

/// Per-rank terminal state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub rank: u32,
    pub app: String,
    pub status: RankStatus,
}

/// Everything a run leaves behind, besides the app output files.
#[derive(Debug, Clone)]
pub struct ExitReport {
    pub outcomes: Vec<RankOutcome>,
    pub report: RunReport,
}

impl ExitReport {
    pub fn success(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == RankStatus::Ok) && !self.report.incomplete()
    }

    /// One line per failed rank.
    pub fn diagnostics(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter_map(|o| match &o.status {
                RankStatus::Ok => None,
                RankStatus::Failed(msg) => Some(format!("rank {} ({}): {msg}", o.rank, o.app)),
            })
            .collect()
    }
}

/// Runs one rank's program body against the given fabric. Used by both the
/// in-process rank threads and spawned child processes.
pub fn run_rank(rank: u32, config: &RunConfig, fabric: Arc<dyn Fabric>) -> Result<RankMetrics> {
    let (group, index_in_group) = config.group_for_rank(rank)?;
    let recorder = Arc::new(if config.metrics {
        Recorder::new(rank, group.role)
    } else {
        Recorder::disabled(rank, group.role)
    });
    recorder.record_start();
    let ctx = AppCtx {
        rank,
        config,
        group,
        index_in_group,
        fabric,
        recorder: Arc::clone(&recorder),
    };
    apps::run_app(&ctx)?;
    recorder.record_stop()?;
    recorder.finish()
}

/// Launches the whole run described by `config`. `config_path` and `exe`
/// are only needed in sockets mode, where every rank re-executes `exe`
/// with `self --rank N --config PATH`.
pub fn launch(
    config: &RunConfig,
    config_path: Option<&Path>,
    exe: Option<&Path>,
) -> Result<ExitReport> {
    fs::create_dir_all(&config.out_dir)?;
    let (outcomes, metrics) = match config.mode {
        LaunchMode::InProcess => launch_inprocess(config)?,
        LaunchMode::Sockets => {
            let path = config_path.ok_or_else(|| {
                Error::config("mode", "sockets mode needs the config file path for self-spawn")
            })?;
            let exe = exe.ok_or_else(|| {
                Error::config("mode", "sockets mode needs an executable to self-spawn")
            })?;
            launch_sockets(config, path, exe)?
        }
    };
    let expected: Vec<u32> = (0..config.total_ranks()).collect();
    let report = harness::aggregate(metrics, &expected);
    harness::write_csv(&config.out_dir.join("metrics.csv"), &report.ranks)?;
    Ok(ExitReport { outcomes, report })
}

fn launch_inprocess(config: &RunConfig) -> Result<(Vec<RankOutcome>, Vec<RankMetrics>)> {
    let fabric = Arc::new(LoopbackFabric::new());
    let mut handles = Vec::new();
    for rank in 0..config.total_ranks() {
        let config = config.clone();
        let fabric: Arc<dyn Fabric> = Arc::clone(&fabric) as Arc<dyn Fabric>;
        let handle = std::thread::Builder::new()
            .name(format!("rank-{rank}"))
            .spawn(move || run_rank(rank, &config, fabric))?;
        handles.push((rank, handle));
    }
    let mut outcomes = Vec::new();
    let mut metrics = Vec::new();
    for (rank, handle) in handles {
        let app = config.group_for_rank(rank)?.0.app.clone();
        let status = match handle.join() {
            Ok(Ok(m)) => {
                metrics.push(m);
                RankStatus::Ok
            }
            Ok(Err(e)) => RankStatus::Failed(e.to_string()),
            Err(panic) => RankStatus::Failed(format!("panicked: {}", panic_message(&panic))),
        };
        outcomes.push(RankOutcome { rank, app, status });
    }
    Ok((outcomes, metrics))
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

/// On-disk report a child rank leaves for the supervising launcher.
#[derive(Serialize, Deserialize)]
struct RankReportFile {
    ok: bool,
    error: Option<String>,
    metrics: Option<RankMetrics>,
}

fn ranks_dir(config: &RunConfig) -> std::path::PathBuf {
    config.out_dir.join(".ranks")
}

fn rank_report_path(config: &RunConfig, rank: u32) -> std::path::PathBuf {
    ranks_dir(config).join(format!("rank-{rank}.json"))
}

fn launch_sockets(
    config: &RunConfig,
    config_path: &Path,
    exe: &Path,
) -> Result<(Vec<RankOutcome>, Vec<RankMetrics>)> {
    let dir = ranks_dir(config);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;

    let mut children = Vec::new();
    for rank in 0..config.total_ranks() {
        let child = Command::new(exe)
            .arg("self")
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--config")
            .arg(config_path)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Connection(format!("cannot spawn rank {rank}: {e}")))?;
        children.push((rank, child));
    }

    let mut outcomes = Vec::new();
    let mut metrics = Vec::new();
    for (rank, child) in children {
        let app = config.group_for_rank(rank)?.0.app.clone();
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Connection(format!("cannot reap rank {rank}: {e}")))?;
        let report = fs::read_to_string(rank_report_path(config, rank))
            .ok()
            .and_then(|text| serde_json::from_str::<RankReportFile>(&text).ok());
        let status = match (output.status.success(), report) {
            (true, Some(r)) if r.ok => {
                if let Some(m) = r.metrics {
                    metrics.push(m);
                }
                RankStatus::Ok
            }
            (_, Some(r)) => RankStatus::Failed(
                r.error.unwrap_or_else(|| "rank reported failure without detail".into()),
            ),
            (_, None) => {
                let stderr_tail: String = String::from_utf8_lossy(&output.stderr)
                    .lines()
                    .rev()
                    .take(4)
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect::<Vec<_>>()
                    .join(" | ");
                let how = match output.status.code() {
                    Some(code) => format!("exited with status {code}"),
                    None => "terminated by signal".to_string(),
                };
                RankStatus::Failed(format!("{how} before reporting; stderr: {stderr_tail}"))
            }
        };
        outcomes.push(RankOutcome { rank, app, status });
    }
    Ok((outcomes, metrics))
}

/// Body of the internal `self --rank N --config PATH` invocation: run one
/// rank over the socket fabric and leave a report file for the parent.
pub fn run_child_rank(rank: u32, config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)?;
    let mut config = parse_config(&text)?;
    // A spawned rank exists only in sockets mode, whatever the document
    // says; the parent may have overridden the mode on the command line.
    config.set_mode(LaunchMode::Sockets)?;
    fs::create_dir_all(ranks_dir(&config))?;
    let result = run_rank(rank, &config, Arc::new(TcpFabric::new()));
    let file = match &result {
        Ok(m) => RankReportFile {
            ok: true,
            error: None,
            metrics: Some(m.clone()),
        },
        Err(e) => RankReportFile {
            ok: false,
            error: Some(e.to_string()),
            metrics: None,
        },
    };
    let path = rank_report_path(&config, rank);
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&file)?)?;
    fs::rename(&tmp, &path)?;
    result.map(|_| ())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            message: e.to_string(),
        }
    }
}
