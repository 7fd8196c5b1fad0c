//! Streaming word-frequency counter.
//!
//! Map ranks read text files and emit one `(word, 1)` element per token;
//! a two-level reduce tree accumulates the counts. Key-hash routing pins
//! every occurrence of a token to one mid-level reducer, so tables never
//! need merging by key across reducers. The final reducer writes
//! `wordcount.tsv`, sorted by descending count then ascending token.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apps::{assigned_files, list_files, AppCtx};
use crate::error::{Error, Result};
use crate::runtime::{Channel, OperateMode, OperationSet, RoutingPolicy, SendMode, StreamHandle};
use crate::schema::{FieldSpec, FieldValues, ScalarKind, StreamSchema, Values};
use crate::transport::{EndpointId, Role};

/// Fixed key width: tokens are zero-padded (and capped) to this many bytes.
pub const KEY_BYTES: usize = 32;

pub type TokenKey = [u8; KEY_BYTES];

/// Element layout: 32-byte token key plus a signed 64-bit count.
pub fn schema() -> StreamSchema {
    StreamSchema::new(vec![
        FieldSpec::new("key", ScalarKind::Uint8, KEY_BYTES),
        FieldSpec::new("count", ScalarKind::Int64, 1),
    ])
    .expect("static schema")
}

/// Lowercase ASCII-alphabetic tokens; every other byte separates. Tokens
/// longer than the key width keep their first 32 bytes.
pub fn tokenize(text: &[u8]) -> Vec<TokenKey> {
    let mut tokens = Vec::new();
    let mut current = [0u8; KEY_BYTES];
    let mut len = 0usize;
    let mut in_token = false;
    for &b in text {
        if b.is_ascii_alphabetic() {
            if len < KEY_BYTES {
                current[len] = b.to_ascii_lowercase();
                len += 1;
            }
            in_token = true;
        } else if in_token {
            tokens.push(current);
            current = [0u8; KEY_BYTES];
            len = 0;
            in_token = false;
        }
    }
    if in_token {
        tokens.push(current);
    }
    tokens
}

/// Readable form of a key: the bytes before the zero padding.
pub fn key_to_string(key: &TokenKey) -> String {
    let end = key.iter().position(|b| *b == 0).unwrap_or(KEY_BYTES);
    String::from_utf8_lossy(&key[..end]).into_owned()
}

pub fn kv_values(key: TokenKey, count: i64) -> Values {
    Values(vec![
        FieldValues::Uint8(key.to_vec()),
        FieldValues::Int64(vec![count]),
    ])
}

pub fn kv_from_values(v: &Values) -> Result<(TokenKey, i64)> {
    let key_bytes = v
        .uint8s(0)
        .ok_or_else(|| Error::Schema("word-count element lacks its key field".into()))?;
    let count = v
        .int64(1)
        .ok_or_else(|| Error::Schema("word-count element lacks its count field".into()))?;
    let mut key = [0u8; KEY_BYTES];
    key.copy_from_slice(key_bytes);
    Ok((key, count))
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Routing extractor: hash of the key field, so equal tokens always land
/// on the same consumer.
pub fn routing_key(v: &Values) -> u64 {
    fnv64(v.uint8s(0).unwrap_or(&[]))
}

fn keyed_routing() -> RoutingPolicy {
    RoutingPolicy::key_hash(routing_key)
}

fn channel_members(config: &crate::launcher::RunConfig, channel: u32) -> Result<Vec<(u32, Role)>> {
    let (producers, consumers) = match channel {
        0 => ("wc-map", "wc-reduce-mid"),
        _ => ("wc-reduce-mid", "wc-reduce-final"),
    };
    let p = config.group_by_app(producers)?;
    let c = config.group_by_app(consumers)?;
    Ok(p.ranks()
        .map(|r| (r, Role::PRODUCER))
        .chain(c.ranks().map(|r| (r, Role::CONSUMER)))
        .collect())
}

/// Map rank: tokenize the assigned files and stream `(token, 1)` pairs.
pub fn run_map(ctx: &AppCtx) -> Result<()> {
    let members = channel_members(ctx.config, 0)?;
    let roster = ctx.config.roster(0, &members);
    let mut channel: Channel = Channel::create(
        EndpointId(ctx.rank),
        Role::PRODUCER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("map rank received no channel".into()))?;
    let stream = channel.attach(schema(), None, keyed_routing())?;

    let input_dir = ctx.group.param_str("input_dir")?;
    let files = assigned_files(&list_files(Path::new(&input_dir))?, ctx.index_in_group, ctx.group.count);
    for path in files {
        let text = fs::read(&path)?;
        for key in tokenize(&text) {
            channel.send(stream, &kv_values(key, 1), SendMode::Block)?;
        }
    }
    channel.terminate(stream)?;
    channel.free()
}

struct MidState {
    table: HashMap<TokenKey, i64>,
    out: Channel<()>,
    out_stream: StreamHandle,
}

/// Mid-level reducer: accumulate inbound pairs; at stream end, emit one
/// pair per distinct key to the final reducer and terminate.
pub fn run_reduce_mid(ctx: &AppCtx) -> Result<()> {
    let in_roster = ctx.config.roster(0, &channel_members(ctx.config, 0)?);
    let mut channel_in: Channel<MidState> = Channel::create(
        EndpointId(ctx.rank),
        Role::CONSUMER,
        &in_roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("mid reducer received no inbound channel".into()))?;

    let out_roster = ctx.config.roster(1, &channel_members(ctx.config, 1)?);
    let mut out: Channel<()> = Channel::create(
        EndpointId(ctx.rank),
        Role::PRODUCER,
        &out_roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(1),
    )?
    .ok_or_else(|| Error::Protocol("mid reducer received no outbound channel".into()))?;
    let out_stream = out.attach(schema(), None, keyed_routing())?;

    let ops = OperationSet::new(|st: &mut MidState, _meta, v: &Values| {
        let (key, count) = kv_from_values(v)?;
        *st.table.entry(key).or_insert(0) += count;
        Ok(())
    })
    .on_term(|st: &mut MidState| {
        let table = std::mem::take(&mut st.table);
        for (key, total) in table {
            st.out.send(st.out_stream, &kv_values(key, total), SendMode::Block)?;
        }
        st.out.terminate(st.out_stream)
    });
    let in_stream = channel_in.attach(schema(), Some(ops), RoutingPolicy::RoundRobin)?;

    let mut state = MidState {
        table: HashMap::new(),
        out,
        out_stream,
    };
    channel_in.operate(in_stream, OperateMode::Block, &mut state)?;
    channel_in.free()?;
    state.out.free()
}

struct FinalState {
    table: HashMap<TokenKey, i64>,
    out_path: PathBuf,
}

/// Final reducer: accumulate and, at stream end, write the sorted table.
pub fn run_reduce_final(ctx: &AppCtx) -> Result<()> {
    let roster = ctx.config.roster(1, &channel_members(ctx.config, 1)?);
    let mut channel: Channel<FinalState> = Channel::create(
        EndpointId(ctx.rank),
        Role::CONSUMER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(1),
    )?
    .ok_or_else(|| Error::Protocol("final reducer received no channel".into()))?;

    let ops = OperationSet::new(|st: &mut FinalState, _meta, v: &Values| {
        let (key, count) = kv_from_values(v)?;
        *st.table.entry(key).or_insert(0) += count;
        Ok(())
    })
    .on_term(|st: &mut FinalState| {
        let text = render_table(&st.table);
        fs::write(&st.out_path, text)?;
        Ok(())
    });
    let stream = channel.attach(schema(), Some(ops), RoutingPolicy::RoundRobin)?;

    let out_path = match ctx.group.param_str_or("output", "")? {
        s if s.is_empty() => ctx.config.out_dir.join("wordcount.tsv"),
        s => PathBuf::from(s),
    };
    let mut state = FinalState {
        table: HashMap::new(),
        out_path,
    };
    channel.operate(stream, OperateMode::Block, &mut state)?;
    channel.free()
}

/// Frequency table as TSV: token TAB count, descending count, ties by
/// ascending token.
pub fn render_table(table: &HashMap<TokenKey, i64>) -> String {
    let mut rows: Vec<(&TokenKey, &i64)> = table.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let mut out = String::new();
    for (key, count) in rows {
        out.push_str(&key_to_string(key));
        out.push('\t');
        out.push_str(&count.to_string());
        out.push('\n');
    }
    out
}

const SYLLABLES: &[&str] = &[
    "ba", "co", "di", "fen", "gu", "hal", "in", "jor", "kel", "lum", "mar", "nis", "or", "pel",
    "qui", "rost", "sa", "tem", "ul", "ver", "wex", "yal", "zon",
];

/// Writes a deterministic fixture corpus: `files` text files holding
/// `tokens_per_file` tokens each, with mixed case, digits and punctuation
/// as separators, and a few over-long words. Returns the token total.
pub fn generate_corpus(dir: &Path, files: usize, tokens_per_file: usize, seed: u64) -> Result<u64> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Skewed vocabulary: common words get short spellings.
    let vocab: Vec<String> = (0..500)
        .map(|i| {
            let parts = 1 + (i % 4);
            (0..parts)
                .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                .collect::<String>()
        })
        .chain(std::iter::once("x".repeat(40))) // exercises key truncation
        .collect();
    let mut total = 0u64;
    for f in 0..files {
        let mut text = String::new();
        for t in 0..tokens_per_file {
            let skew = rng.random::<f64>();
            let idx = ((skew * skew) * vocab.len() as f64) as usize;
            let word = &vocab[idx.min(vocab.len() - 1)];
            if rng.random_bool(0.08) {
                // Mixed case folds to the same token.
                text.push_str(&word.to_uppercase());
            } else {
                text.push_str(word);
            }
            total += 1;
            match rng.random_range(0..10) {
                0 => text.push_str(",\n"),
                1 => text.push_str(". "),
                2 => text.push_str(" 42 "),
                _ => text.push(' '),
            }
            if t % 11 == 10 {
                text.push('\n');
            }
        }
        fs::write(dir.join(format!("poem_{f:04}.txt")), text)?;
    }
    Ok(total)
}
