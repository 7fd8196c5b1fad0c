//! Per-rank counters and the processing-rate report.
//!
//! Every rank owns one [`Recorder`]; the runtime bumps it on each send and
//! each processed element. After a run, [`aggregate`] folds all ranks into
//! a [`RunReport`] carrying the paper-style processing rate in two
//! flavors: total consumer elements divided by the mean consumer wall
//! time, and the more conservative max-wall variant (mean time overstates
//! the rate when ranks are imbalanced).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::Role;

fn unix_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Per-rank event counters. Hot-path methods are constant-time and
/// allocation-free; a disabled recorder reduces them to no-ops.
pub struct Recorder {
    rank: u32,
    role: Role,
    enabled: bool,
    elements_sent: AtomicU64,
    elements_processed: AtomicU64,
    /// Unix nanos of the first processed element; 0 = none yet.
    first_processed_ns: AtomicU64,
    /// Unix nanos of the most recent send; 0 = none yet.
    last_sent_ns: AtomicU64,
    clock: Mutex<RecorderClock>,
}

#[derive(Default)]
struct RecorderClock {
    started: Option<Instant>,
    wall: Option<f64>,
}

impl Recorder {
    pub fn new(rank: u32, role: Role) -> Self {
        Self::build(rank, role, true)
    }

    /// Counters become no-ops; start/stop still measure wall time.
    pub fn disabled(rank: u32, role: Role) -> Self {
        Self::build(rank, role, false)
    }

    fn build(rank: u32, role: Role, enabled: bool) -> Self {
        Recorder {
            rank,
            role,
            enabled,
            elements_sent: AtomicU64::new(0),
            elements_processed: AtomicU64::new(0),
            first_processed_ns: AtomicU64::new(0),
            last_sent_ns: AtomicU64::new(0),
            clock: Mutex::new(RecorderClock::default()),
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn record_start(&self) {
        let mut clock = self.clock.lock().unwrap();
        clock.started = Some(Instant::now());
        clock.wall = None;
    }

    pub fn record_stop(&self) -> Result<()> {
        let mut clock = self.clock.lock().unwrap();
        match clock.started {
            Some(t0) => {
                clock.wall = Some(t0.elapsed().as_secs_f64());
                Ok(())
            }
            None => Err(Error::Metrics("stop recorded before start".into())),
        }
    }

    #[inline]
    pub fn record_sent(&self) {
        if !self.enabled {
            return;
        }
        let n = self.elements_sent.fetch_add(1, Ordering::Relaxed);
        // Sampled clock: reading the wall clock on every send costs more
        // than the counter itself. A stale last-sent mark only ever
        // under-reports how late the producer was still sending, which is
        // the safe direction for overlap checks.
        if n % 16 == 0 {
            self.last_sent_ns.store(unix_ns(), Ordering::Relaxed);
        }
    }

    #[inline]
    pub fn record_processed(&self) {
        if !self.enabled {
            return;
        }
        self.elements_processed.fetch_add(1, Ordering::Relaxed);
        if self.first_processed_ns.load(Ordering::Relaxed) == 0 {
            self.first_processed_ns.store(unix_ns(), Ordering::Relaxed);
        }
    }

    pub fn elements_sent(&self) -> u64 {
        self.elements_sent.load(Ordering::Relaxed)
    }

    pub fn elements_processed(&self) -> u64 {
        self.elements_processed.load(Ordering::Relaxed)
    }

    /// Snapshots the counters into a metrics row. Requires start/stop to
    /// have framed the run.
    pub fn finish(&self) -> Result<RankMetrics> {
        let wall = {
            let clock = self.clock.lock().unwrap();
            match (clock.started, clock.wall) {
                (_, Some(w)) => w,
                (Some(t0), None) => t0.elapsed().as_secs_f64(),
                (None, None) => return Err(Error::Metrics("rank never started".into())),
            }
        };
        let sent = self.elements_sent();
        let processed = self.elements_processed();
        let rate = if wall > 0.0 {
            (sent + processed) as f64 / wall
        } else {
            0.0
        };
        let first = self.first_processed_ns.load(Ordering::Relaxed);
        let last = self.last_sent_ns.load(Ordering::Relaxed);
        Ok(RankMetrics {
            rank: self.rank,
            role: self.role.to_string(),
            elements_sent: sent,
            elements_processed: processed,
            wall_seconds: wall,
            rate_per_second: rate,
            first_processed_unix_ns: (first != 0).then_some(first),
            last_sent_unix_ns: (last != 0).then_some(last),
        })
    }
}

/// One row of the run report. The CSV form carries the first six fields;
/// the timestamps travel only in rank reports (they feed the pipeline
/// overlap check, not the rate arithmetic).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankMetrics {
    pub rank: u32,
    pub role: String,
    pub elements_sent: u64,
    pub elements_processed: u64,
    pub wall_seconds: f64,
    pub rate_per_second: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_processed_unix_ns: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_sent_unix_ns: Option<u64>,
}

impl RankMetrics {
    pub fn is_consumer(&self) -> bool {
        self.role == "consumer" || self.role == "both"
    }
}

/// Aggregated view over all ranks of one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub ranks: Vec<RankMetrics>,
    /// Ranks expected but never reported; nonempty marks an incomplete run.
    pub missing: Vec<u32>,
    pub total_sent: u64,
    pub total_processed: u64,
    /// Total consumer elements over the mean consumer wall time.
    pub aggregate_rate_mean: f64,
    /// Total consumer elements over the slowest consumer's wall time.
    pub aggregate_rate_max: f64,
}

impl RunReport {
    pub fn incomplete(&self) -> bool {
        !self.missing.is_empty()
    }
}

/// Folds per-rank rows into the run report. `expected_ranks` drives the
/// incomplete-run marker.
pub fn aggregate(mut ranks: Vec<RankMetrics>, expected_ranks: &[u32]) -> RunReport {
    ranks.sort_by_key(|m| m.rank);
    let missing: Vec<u32> = expected_ranks
        .iter()
        .copied()
        .filter(|r| !ranks.iter().any(|m| m.rank == *r))
        .collect();
    let total_sent = ranks.iter().map(|m| m.elements_sent).sum();
    let total_processed: u64 = ranks.iter().map(|m| m.elements_processed).sum();
    let consumers: Vec<&RankMetrics> = ranks.iter().filter(|m| m.is_consumer()).collect();
    let consumed: u64 = consumers.iter().map(|m| m.elements_processed).sum();
    let mean_wall = if consumers.is_empty() {
        0.0
    } else {
        consumers.iter().map(|m| m.wall_seconds).sum::<f64>() / consumers.len() as f64
    };
    let max_wall = consumers
        .iter()
        .map(|m| m.wall_seconds)
        .fold(0.0f64, f64::max);
    RunReport {
        missing,
        total_sent,
        total_processed,
        aggregate_rate_mean: if mean_wall > 0.0 {
            consumed as f64 / mean_wall
        } else {
            0.0
        },
        aggregate_rate_max: if max_wall > 0.0 {
            consumed as f64 / max_wall
        } else {
            0.0
        },
        ranks,
    }
}

const CSV_HEADER: &str = "rank,role,elements_sent,elements_processed,wall_seconds,rate_per_second";

/// Writes `metrics.csv`. Full float precision so the report is exactly
/// regeneratable from the file.
pub fn write_csv(path: &Path, ranks: &[RankMetrics]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in ranks {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.rank, m.role, m.elements_sent, m.elements_processed, m.wall_seconds, m.rate_per_second
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RankMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected metrics header {other:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: i + 2,
            message: format!("bad {what}"),
        };
        rows.push(RankMetrics {
            rank: cols[0].parse().map_err(|_| bad("rank"))?,
            role: cols[1].to_string(),
            elements_sent: cols[2].parse().map_err(|_| bad("elements_sent"))?,
            elements_processed: cols[3].parse().map_err(|_| bad("elements_processed"))?,
            wall_seconds: cols[4].parse().map_err(|_| bad("wall_seconds"))?,
            rate_per_second: cols[5].parse().map_err(|_| bad("rate_per_second"))?,
            first_processed_unix_ns: None,
            last_sent_unix_ns: None,
        });
    }
    Ok(rows)
}

/// Aligned text table plus the aggregate lines, as printed by the launcher.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5}  {:<9}  {:>14}  {:>18}  {:>12}  {:>16}\n",
        "rank", "role", "elements_sent", "elements_processed", "wall_seconds", "rate_per_second"
    ));
    for m in &report.ranks {
        out.push_str(&format!(
            "{:>5}  {:<9}  {:>14}  {:>18}  {:>12.6}  {:>16.1}\n",
            m.rank, m.role, m.elements_sent, m.elements_processed, m.wall_seconds, m.rate_per_second
        ));
    }
    for r in &report.missing {
        out.push_str(&format!("{:>5}  {:<9}  [no report: incomplete run]\n", r, "?"));
    }
    out.push_str(&format!(
        "total sent {}  total processed {}  rate(mean-wall) {:.1}/s  rate(max-wall) {:.1}/s\n",
        report.total_sent, report.total_processed, report.aggregate_rate_mean, report.aggregate_rate_max
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_count() {
        let r = Recorder::new(0, Role::PRODUCER);
        r.record_start();
        for _ in 0..100 {
            r.record_sent();
        }
        r.record_stop().unwrap();
        let m = r.finish().unwrap();
        assert_eq!(m.elements_sent, 100);
        assert_eq!(m.elements_processed, 0);
        assert!(m.wall_seconds > 0.0);
    }

    #[test]
    fn no_events_means_zero_rate() {
        let r = Recorder::new(3, Role::CONSUMER);
        r.record_start();
        r.record_stop().unwrap();
        let m = r.finish().unwrap();
        assert_eq!(m.rate_per_second, 0.0);
    }

    #[test]
    fn stop_before_start_is_an_error() {
        let r = Recorder::new(0, Role::PRODUCER);
        assert!(matches!(r.record_stop(), Err(Error::Metrics(_))));
    }

    #[test]
    fn disabled_recorder_ignores_counters() {
        let r = Recorder::disabled(0, Role::BOTH);
        r.record_start();
        r.record_sent();
        r.record_processed();
        r.record_stop().unwrap();
        let m = r.finish().unwrap();
        assert_eq!(m.elements_sent, 0);
        assert_eq!(m.elements_processed, 0);
    }

    fn row(rank: u32, role: &str, sent: u64, processed: u64, wall: f64) -> RankMetrics {
        RankMetrics {
            rank,
            role: role.into(),
            elements_sent: sent,
            elements_processed: processed,
            wall_seconds: wall,
            rate_per_second: if wall > 0.0 {
                (sent + processed) as f64 / wall
            } else {
                0.0
            },
            first_processed_unix_ns: None,
            last_sent_unix_ns: None,
        }
    }

    #[test]
    fn aggregate_two_consumers() {
        let report = aggregate(
            vec![
                row(0, "producer", 1000, 0, 1.0),
                row(1, "consumer", 0, 500, 1.0),
                row(2, "consumer", 0, 500, 1.0),
            ],
            &[0, 1, 2],
        );
        assert_eq!(report.aggregate_rate_mean, 1000.0);
        assert_eq!(report.aggregate_rate_max, 1000.0);
        assert!(!report.incomplete());
    }

    #[test]
    fn aggregate_single_rank_is_its_own_rate() {
        let report = aggregate(vec![row(0, "consumer", 0, 700, 2.0)], &[0]);
        assert_eq!(report.aggregate_rate_mean, 350.0);
        assert_eq!(report.aggregate_rate_max, 350.0);
    }

    #[test]
    fn missing_rank_marks_incomplete() {
        let report = aggregate(vec![row(0, "producer", 10, 0, 1.0)], &[0, 1]);
        assert_eq!(report.missing, vec![1]);
        assert!(report.incomplete());
    }

    #[test]
    fn imbalanced_consumers_split_the_two_rates() {
        let report = aggregate(
            vec![row(1, "consumer", 0, 900, 1.0), row(2, "consumer", 0, 100, 3.0)],
            &[1, 2],
        );
        assert_eq!(report.aggregate_rate_mean, 500.0); // 1000 / mean(1,3)
        assert!((report.aggregate_rate_max - 1000.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn csv_roundtrip_reproduces_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            row(0, "producer", 12345, 0, 0.7310000001),
            row(1, "both", 77, 12345, 1.2345678901234),
            row(2, "consumer", 0, 77, 0.0001),
        ];
        write_csv(&path, &rows).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back, rows);
        let a = aggregate(rows.clone(), &[0, 1, 2]);
        let b = aggregate(back, &[0, 1, 2]);
        assert_eq!(a.aggregate_rate_mean, b.aggregate_rate_mean);
        assert_eq!(a.aggregate_rate_max, b.aggregate_rate_max);
        assert_eq!(a.total_processed, b.total_processed);
    }
}
