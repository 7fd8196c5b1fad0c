//! Online event filter.
//!
//! Sensor ranks read 29-column CSV event files (label plus 28 attributes)
//! in small batches and stream one element per event; classifier ranks
//! score each event and persist the signal ones. The label column exists
//! only for offline verification — the classifier never reads it.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::apps::{list_files, AppCtx};
use crate::error::{Error, Result};
use crate::launcher::GroupSpec;
use crate::runtime::{Channel, OperateMode, OperationSet, RoutingPolicy, SendMode};
use crate::schema::{FieldSpec, FieldValues, ScalarKind, StreamSchema, Values};
use crate::transport::{EndpointId, Role};

pub const ATTRIBUTE_COUNT: usize = 28;

/// Element layout: label, 28 attributes, and the global event index that
/// keys saved-set comparisons.
pub fn schema() -> StreamSchema {
    StreamSchema::new(vec![
        FieldSpec::new("label", ScalarKind::Float64, 1),
        FieldSpec::new("attributes", ScalarKind::Float64, ATTRIBUTE_COUNT),
        FieldSpec::new("event_index", ScalarKind::Int64, 1),
    ])
    .expect("static schema")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    /// 1.0 signal / 0.0 background in offline datasets; never consulted by
    /// the classifier.
    pub label: f64,
    pub attributes: [f64; ATTRIBUTE_COUNT],
    pub event_index: i64,
}

pub fn event_values(e: &EventRecord) -> Values {
    Values(vec![
        FieldValues::Float64(vec![e.label]),
        FieldValues::Float64(e.attributes.to_vec()),
        FieldValues::Int64(vec![e.event_index]),
    ])
}

pub fn event_from_values(v: &Values) -> Result<EventRecord> {
    let label = v
        .float64(0)
        .ok_or_else(|| Error::Schema("event element lacks its label".into()))?;
    let attrs = v
        .float64s(1)
        .ok_or_else(|| Error::Schema("event element lacks its attributes".into()))?;
    let event_index = v
        .int64(2)
        .ok_or_else(|| Error::Schema("event element lacks its index".into()))?;
    let attributes: [f64; ATTRIBUTE_COUNT] = attrs
        .try_into()
        .map_err(|_| Error::Schema(format!("expected {ATTRIBUTE_COUNT} attributes")))?;
    Ok(EventRecord {
        label,
        attributes,
        event_index,
    })
}

/// Parses one dataset line: label plus 28 comma-separated floats.
/// `line_no` is 1-based within the file for error reporting.
pub fn parse_event_line(line: &str, line_no: usize, event_index: i64) -> Result<EventRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 1 + ATTRIBUTE_COUNT {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected {} fields, got {}", 1 + ATTRIBUTE_COUNT, fields.len()),
        });
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("non-numeric {what} '{s}'"),
        })
    };
    let label = parse(fields[0], "label")?;
    let mut attributes = [0f64; ATTRIBUTE_COUNT];
    for (i, f) in fields[1..].iter().enumerate() {
        attributes[i] = parse(f, &format!("attribute {i}"))?;
    }
    Ok(EventRecord {
        label,
        attributes,
        event_index,
    })
}

/// Parses a whole document, assigning sequential indices from `base_index`.
pub fn parse_events(text: &str, base_index: i64) -> Result<Vec<EventRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| parse_event_line(line, i + 1, base_index + i as i64))
        .collect()
}

/// The filtering rule: signal iff score is non-negative.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    /// Score is `attributes[attribute] - cutoff`.
    Threshold { attribute: usize, cutoff: f64 },
    /// Score is `bias + Σ weights[j] * attributes[j]`.
    Linear { bias: f64, weights: Vec<f64> },
}

pub fn score(classifier: &Classifier, attributes: &[f64]) -> Result<f64> {
    match classifier {
        Classifier::Threshold { attribute, cutoff } => attributes
            .get(*attribute)
            .map(|a| a - cutoff)
            .ok_or_else(|| {
                Error::config(
                    "classifier.attribute",
                    format!("index {attribute} out of range for {} attributes", attributes.len()),
                )
            }),
        Classifier::Linear { bias, weights } => {
            if weights.len() != attributes.len() {
                return Err(Error::config(
                    "classifier.weights",
                    format!("expected {} weights, got {}", attributes.len(), weights.len()),
                ));
            }
            // Sequential accumulation, bias first: the defined arithmetic
            // order, so independent recomputation is bit-exact.
            let mut acc = *bias;
            for (w, a) in weights.iter().zip(attributes) {
                acc += w * a;
            }
            Ok(acc)
        }
    }
}

pub fn is_signal(score: f64) -> bool {
    score >= 0.0
}

/// Builds the classifier a group's params describe.
pub fn classifier_from_params(group: &GroupSpec) -> Result<Classifier> {
    let path = |f: &str| format!("group[{}].params.{f}", group.index);
    match group.param_str("classifier")?.as_str() {
        "threshold" => {
            let attribute = group.param_u64("attribute")? as usize;
            if attribute >= ATTRIBUTE_COUNT {
                return Err(Error::config(
                    path("attribute"),
                    format!("index {attribute} out of range for {ATTRIBUTE_COUNT} attributes"),
                ));
            }
            Ok(Classifier::Threshold {
                attribute,
                cutoff: group.param_f64("cutoff")?,
            })
        }
        "linear" => {
            let weights = group.param_f64_list("weights")?;
            if weights.len() != ATTRIBUTE_COUNT {
                return Err(Error::config(
                    path("weights"),
                    format!("expected {ATTRIBUTE_COUNT} weights, got {}", weights.len()),
                ));
            }
            Ok(Classifier::Linear {
                bias: group.param_f64("bias")?,
                weights,
            })
        }
        other => Err(Error::config(
            path("classifier"),
            format!("unknown classifier '{other}' (threshold|linear)"),
        )),
    }
}

/// Synthetic stand-in for the detector dataset: a two-component
/// 28-dimensional Gaussian mixture, labels split evenly, fully seeded.
pub fn generate_events(count: usize, seed: u64) -> Vec<EventRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu_signal: Vec<f64> = (0..ATTRIBUTE_COUNT).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu_background: Vec<f64> =
        (0..ATTRIBUTE_COUNT).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, 0.8).expect("static sigma");
    (0..count)
        .map(|i| {
            let signal = rng.random_bool(0.5);
            let mu = if signal { &mu_signal } else { &mu_background };
            let mut attributes = [0f64; ATTRIBUTE_COUNT];
            for (j, slot) in attributes.iter_mut().enumerate() {
                *slot = mu[j] + noise.sample(&mut rng);
            }
            EventRecord {
                label: if signal { 1.0 } else { 0.0 },
                attributes,
                event_index: i as i64,
            }
        })
        .collect()
}

pub fn format_dataset_row(e: &EventRecord) -> String {
    let mut row = format!("{}", e.label);
    for a in &e.attributes {
        row.push(',');
        row.push_str(&format!("{a}"));
    }
    row
}

/// Writes `count` synthetic events split across `files` CSV files in the
/// dataset layout. Returns the per-file event counts.
pub fn write_dataset(dir: &Path, files: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    fs::create_dir_all(dir)?;
    let events = generate_events(count, seed);
    let per_file = count.div_ceil(files.max(1));
    let mut sizes = Vec::new();
    for (f, chunk) in events.chunks(per_file.max(1)).enumerate() {
        let mut text = String::new();
        for e in chunk {
            text.push_str(&format_dataset_row(e));
            text.push('\n');
        }
        fs::write(dir.join(format!("events_{f:03}.csv")), text)?;
        sizes.push(chunk.len());
    }
    Ok(sizes)
}

/// Batch-reading stats the sensor loop reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SensorStats {
    pub events: u64,
    pub read_cycles: u64,
}

/// Reads one file in batches of `batch_size` lines, parsing and emitting
/// each event before the next batch is read, so memory stays bounded by
/// the batch.
pub fn stream_file_batches(
    path: &Path,
    batch_size: usize,
    base_index: i64,
    emit: &mut impl FnMut(&EventRecord) -> Result<()>,
) -> Result<SensorStats> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut stats = SensorStats::default();
    let mut line_no = 0usize;
    let mut index = base_index;
    let mut batch: VecDeque<(usize, String)> = VecDeque::with_capacity(batch_size);
    loop {
        batch.clear();
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            line_no += 1;
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if trimmed.is_empty() {
                continue;
            }
            batch.push_back((line_no, trimmed.to_string()));
            if batch.len() == batch_size {
                break;
            }
        }
        if batch.is_empty() {
            break;
        }
        stats.read_cycles += 1;
        for (no, line) in batch.drain(..) {
            let event = parse_event_line(&line, no, index)?;
            index += 1;
            stats.events += 1;
            emit(&event)?;
        }
    }
    Ok(stats)
}

fn count_events(path: &Path) -> Result<i64> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter(|l| !l.is_empty()).count() as i64)
}

fn members(config: &crate::launcher::RunConfig) -> Result<Vec<(u32, Role)>> {
    let sensors = config.group_by_app("event-sensor")?;
    let classifiers = config.group_by_app("event-classifier")?;
    Ok(sensors
        .ranks()
        .map(|r| (r, Role::PRODUCER))
        .chain(classifiers.ranks().map(|r| (r, Role::CONSUMER)))
        .collect())
}

/// Sensor rank: stream the assigned files batch by batch, round-robin
/// across classifiers.
pub fn run_sensor(ctx: &AppCtx) -> Result<()> {
    let input_dir = ctx.group.param_str("input_dir")?;
    let batch_size = ctx.group.param_u64_or("batch_size", 256)? as usize;
    if batch_size == 0 {
        return Err(Error::config(
            format!("group[{}].params.batch_size", ctx.group.index),
            "must be at least 1",
        ));
    }

    let all = list_files(Path::new(&input_dir))?;
    // Global event indices follow file order: each file's base is the sum
    // of all earlier files' line counts.
    let mut bases = Vec::with_capacity(all.len());
    let mut acc = 0i64;
    for f in &all {
        bases.push(acc);
        acc += count_events(f)?;
    }
    let mine: Vec<usize> = (0..all.len())
        .filter(|i| (*i as u32) % ctx.group.count == ctx.index_in_group)
        .collect();

    let roster = ctx.config.roster(0, &members(ctx.config)?);
    let mut channel: Channel = Channel::create(
        EndpointId(ctx.rank),
        Role::PRODUCER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("sensor rank received no channel".into()))?;
    let stream = channel.attach(schema(), None, RoutingPolicy::RoundRobin)?;

    for i in mine {
        stream_file_batches(&all[i], batch_size, bases[i], &mut |event| {
            channel.send(stream, &event_values(event), SendMode::Block)?;
            Ok(())
        })?;
    }
    channel.terminate(stream)?;
    channel.free()
}

struct ClassifierState {
    classifier: Classifier,
    buffer: Vec<EventRecord>,
    out_path: PathBuf,
    save_every: usize,
}

impl ClassifierState {
    /// Appends buffered signal events in the dataset layout plus the
    /// trailing event index.
    fn persist(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.out_path)?;
        let mut text = String::new();
        for e in self.buffer.drain(..) {
            text.push_str(&format_dataset_row(&e));
            text.push_str(&format!(",{}\n", e.event_index));
        }
        file.write_all(text.as_bytes())?;
        Ok(())
    }
}

/// Classifier rank: score each event, discard background on the fly, and
/// persist signal events every `save_every` hits and at termination.
pub fn run_classifier(ctx: &AppCtx) -> Result<()> {
    let classifier = classifier_from_params(ctx.group)?;
    let save_every = ctx.group.param_u64_or("save_every", 512)? as usize;
    let dir = match ctx.group.param_str_or("out_dir", "")? {
        s if s.is_empty() => ctx.config.out_dir.join("signals"),
        s => PathBuf::from(s),
    };
    fs::create_dir_all(&dir)?;
    let out_path = dir.join(format!("signals-{}.csv", ctx.index_in_group));
    // Replace any stale file: output is append-driven.
    if out_path.exists() {
        fs::remove_file(&out_path)?;
    }

    let roster = ctx.config.roster(0, &members(ctx.config)?);
    let mut channel: Channel<ClassifierState> = Channel::create(
        EndpointId(ctx.rank),
        Role::CONSUMER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("classifier rank received no channel".into()))?;

    let ops = OperationSet::new(|st: &mut ClassifierState, _meta, v: &Values| {
        let event = event_from_values(v)?;
        if is_signal(score(&st.classifier, &event.attributes)?) {
            st.buffer.push(event);
            if st.buffer.len() >= st.save_every.max(1) {
                st.persist()?;
            }
        }
        Ok(())
    })
    .on_term(|st: &mut ClassifierState| st.persist());
    let stream = channel.attach(schema(), Some(ops), RoutingPolicy::RoundRobin)?;

    let mut state = ClassifierState {
        classifier,
        buffer: Vec::new(),
        out_path,
        save_every,
    };
    channel.operate(stream, OperateMode::Block, &mut state)?;
    channel.free()
}

/// Reads saved signal rows back as (event_index, record) pairs.
pub fn read_saved(path: &Path) -> Result<Vec<EventRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + ATTRIBUTE_COUNT {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, got {}", 2 + ATTRIBUTE_COUNT, fields.len()),
            });
        }
        let event_index: i64 = fields[fields.len() - 1].parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: "bad event index".into(),
        })?;
        let record = parse_event_line(&line[..line.rfind(',').unwrap()], i + 1, event_index)?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_line(label: f64) -> String {
        let mut line = format!("{label}");
        for i in 0..ATTRIBUTE_COUNT {
            line.push_str(&format!(",{}", 0.1 * i as f64));
        }
        line
    }

    #[test]
    fn parse_signal_line() {
        let rec = parse_event_line(&sample_line(1.0), 1, 5).unwrap();
        assert_eq!(rec.label, 1.0);
        assert_eq!(rec.event_index, 5);
        assert_eq!(rec.attributes[1], 0.1);
    }

    #[test]
    fn short_line_parse_error_names_the_line() {
        let line = "1.0,0.5,0.25";
        match parse_event_line(line, 7, 0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_numeric_field_is_a_parse_error() {
        let mut line = sample_line(1.0);
        line = line.replace(",0.5,", ",abc,");
        assert!(matches!(
            parse_event_line(&line, 3, 0),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn score_boundary_convention() {
        let zero = Classifier::Linear {
            bias: 0.0,
            weights: vec![0.0; ATTRIBUTE_COUNT],
        };
        let s = score(&zero, &[0.5; ATTRIBUTE_COUNT]).unwrap();
        assert_eq!(s, 0.0);
        assert!(is_signal(s), "score 0 counts as signal");
    }

    #[test]
    fn threshold_score_example() {
        let c = Classifier::Threshold {
            attribute: 3,
            cutoff: 1.5,
        };
        let mut attrs = [0.0; ATTRIBUTE_COUNT];
        attrs[3] = 2.0;
        assert_eq!(score(&c, &attrs).unwrap(), 0.5);
    }

    #[test]
    fn threshold_out_of_range_is_config_error() {
        let c = Classifier::Threshold {
            attribute: 99,
            cutoff: 0.0,
        };
        assert!(matches!(
            score(&c, &[0.0; ATTRIBUTE_COUNT]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn linear_score_matches_independent_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let weights: Vec<f64> = (0..ATTRIBUTE_COUNT).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = rng.random_range(-1.0..1.0);
            let attrs: Vec<f64> = (0..ATTRIBUTE_COUNT).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c = Classifier::Linear {
                bias,
                weights: weights.clone(),
            };
            let mut expected = bias;
            for j in 0..ATTRIBUTE_COUNT {
                expected += weights[j] * attrs[j];
            }
            assert_eq!(score(&c, &attrs).unwrap(), expected);
        }
    }

    #[test]
    fn generator_is_deterministic_and_labeled() {
        let a = generate_events(100, 9);
        let b = generate_events(100, 9);
        assert_eq!(a, b);
        assert!(a.iter().any(|e| e.label == 1.0));
        assert!(a.iter().any(|e| e.label == 0.0));
        assert_eq!(a[99].event_index, 99);
    }

    #[test]
    fn batch_reader_counts_cycles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let events = generate_events(1000, 3);
        let text: String = events.iter().map(|e| format_dataset_row(e) + "\n").collect();
        fs::write(&path, text).unwrap();

        let mut seen = 0u64;
        let stats = stream_file_batches(&path, 100, 0, &mut |e| {
            assert_eq!(e.event_index, seen as i64);
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.events, 1000);
        assert_eq!(stats.read_cycles, 10);
        assert_eq!(seen, 1000);

        // A batch at least as large as the file means a single cycle.
        let stats = stream_file_batches(&path, 5000, 0, &mut |_| Ok(())).unwrap();
        assert_eq!(stats.read_cycles, 1);
        assert_eq!(stats.events, 1000);
    }

    #[test]
    fn dataset_roundtrip_through_parse() {
        let events = generate_events(50, 21);
        let text: String = events.iter().map(|e| format_dataset_row(e) + "\n").collect();
        let parsed = parse_events(&text, 0).unwrap();
        assert_eq!(parsed, events);
    }
}
