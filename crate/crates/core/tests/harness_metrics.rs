//! Run-level metrics behavior: conservation cross-checks, offline report
//! regeneration from the CSV, and the cost of having metrics on at all.

use std::fs;
use std::path::Path;
use std::time::Instant;

use streamkit::apps::wordcount::generate_corpus;
use streamkit::harness;
use streamkit::launcher::{launch, parse_config};

fn wc_config(corpus: &Path, out: &Path, metrics: bool) -> String {
    format!(
        r#"
mode = "inprocess"
out_dir = "{out}"
metrics = {metrics}

[[group]]
app = "wc-map"
role = "producer"
count = 4
[group.params]
input_dir = "{corpus}"

[[group]]
app = "wc-reduce-mid"
role = "both"
count = 2

[[group]]
app = "wc-reduce-final"
role = "consumer"
count = 1
"#,
        out = out.display(),
        corpus = corpus.display(),
    )
}

#[test]
fn wordcount_metrics_conserve_elements_across_stages() {
    let base = tempfile::tempdir().unwrap();
    let corpus = base.path().join("corpus");
    generate_corpus(&corpus, 16, 600, 42).unwrap();
    let out = base.path().join("out");
    let config = parse_config(&wc_config(&corpus, &out, true)).unwrap();
    let report = launch(&config, None, None).unwrap();
    assert!(report.success(), "{:?}", report.diagnostics());

    let ranks = &report.report.ranks;
    let map_sent: u64 = ranks.iter().filter(|m| m.role == "producer").map(|m| m.elements_sent).sum();
    let mid_processed: u64 =
        ranks.iter().filter(|m| m.role == "both").map(|m| m.elements_processed).sum();
    let mid_sent: u64 = ranks.iter().filter(|m| m.role == "both").map(|m| m.elements_sent).sum();
    let final_processed: u64 =
        ranks.iter().filter(|m| m.role == "consumer").map(|m| m.elements_processed).sum();

    assert_eq!(map_sent, 16 * 600, "one element per corpus token");
    assert_eq!(mid_processed, map_sent, "stage one conserves elements");
    assert_eq!(final_processed, mid_sent, "stage two conserves elements");
}

#[test]
fn report_is_exactly_regeneratable_from_the_csv() {
    let base = tempfile::tempdir().unwrap();
    let corpus = base.path().join("corpus");
    generate_corpus(&corpus, 6, 400, 7).unwrap();
    let out = base.path().join("out");
    let config = parse_config(&wc_config(&corpus, &out, true)).unwrap();
    let report = launch(&config, None, None).unwrap();
    assert!(report.success());

    let rows = harness::read_csv(&out.join("metrics.csv")).unwrap();
    let expected: Vec<u32> = (0..7).collect();
    let regenerated = harness::aggregate(rows, &expected);
    assert_eq!(regenerated.total_sent, report.report.total_sent);
    assert_eq!(regenerated.total_processed, report.report.total_processed);
    assert_eq!(regenerated.aggregate_rate_mean, report.report.aggregate_rate_mean);
    assert_eq!(regenerated.aggregate_rate_max, report.report.aggregate_rate_max);
    assert!(regenerated.missing.is_empty());
}

/// Generous smoke bound: metrics on vs off within 5 percent end to end
/// on the wordcount fixture. Rounds are paired (both arms back to back,
/// alternating order) and the median of the per-round ratios is judged,
/// so a slow scheduling epoch that drags one whole round cancels out.
#[test]
fn metrics_overhead_stays_under_five_percent() {
    let base = tempfile::tempdir().unwrap();
    let corpus = base.path().join("corpus");
    generate_corpus(&corpus, 24, 16_000, 3).unwrap(); // ~4 * 10^5 tokens

    let time_run = |round: usize, metrics: bool| -> f64 {
        let out = base.path().join(format!("out-{round}-{metrics}"));
        let config = parse_config(&wc_config(&corpus, &out, metrics)).unwrap();
        let t0 = Instant::now();
        let report = launch(&config, None, None).unwrap();
        let wall = t0.elapsed().as_secs_f64();
        assert!(report.success());
        wall
    };

    // Round zero warms the page cache and thread pools.
    time_run(0, false);
    time_run(0, true);
    let mut ratios = Vec::new();
    for round in 1..=7 {
        let (off, on) = if round % 2 == 0 {
            let off = time_run(round, false);
            let on = time_run(round, true);
            (off, on)
        } else {
            let on = time_run(round, true);
            let off = time_run(round, false);
            (off, on)
        };
        ratios.push(on / off);
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!(
        median < 1.05,
        "metrics overhead too high: median on/off ratio x{median:.3} (rounds: {ratios:?})"
    );
    // Sanity: the disabled run recorded nothing.
    let off_csv = fs::read_to_string(base.path().join("out-0-false").join("metrics.csv")).unwrap();
    for line in off_csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "0");
        assert_eq!(cols[3], "0");
    }
}
