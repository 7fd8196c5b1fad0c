//! Particle streaming pipeline.
//!
//! A synthetic mover perturbs particle velocities with bounded random
//! kicks and advances positions. Any particle whose kinetic energy
//! reaches the threshold joins the tracked set permanently; every tracked
//! particle is streamed out once per step. The sink buffers records per
//! particle and appends trajectory files at a configurable flush
//! frequency, so simulation and file I/O stay decoupled.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apps::AppCtx;
use crate::error::{Error, Result};
use crate::runtime::{Channel, OperateMode, OperationSet, RoutingPolicy, SendMode};
use crate::schema::{FieldSpec, FieldValues, ScalarKind, StreamSchema, Values};
use crate::transport::{EndpointId, Role};

/// Element layout: position, velocity, charge, id, and the timestep that
/// lets the sink order irregular arrivals into trajectories.
pub fn schema() -> StreamSchema {
    StreamSchema::new(vec![
        FieldSpec::new("x", ScalarKind::Float64, 1),
        FieldSpec::new("y", ScalarKind::Float64, 1),
        FieldSpec::new("z", ScalarKind::Float64, 1),
        FieldSpec::new("u", ScalarKind::Float64, 1),
        FieldSpec::new("v", ScalarKind::Float64, 1),
        FieldSpec::new("w", ScalarKind::Float64, 1),
        FieldSpec::new("q", ScalarKind::Float64, 1),
        FieldSpec::new("id", ScalarKind::Int64, 1),
        FieldSpec::new("step", ScalarKind::Int64, 1),
    ])
    .expect("static schema")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub q: f64,
    pub id: i64,
}

/// Kinetic energy per unit mass.
pub fn energy(p: &Particle) -> f64 {
    0.5 * (p.u * p.u + p.v * p.v + p.w * p.w)
}

/// Synthetic particle mover. Fully deterministic for a given seed: the
/// constructor samples per particle in index order (x, y, z then u, v, w),
/// and each step samples three kicks per particle in the same order.
pub struct Mover {
    pub particles: Vec<Particle>,
    kick: f64,
    rng: ChaCha8Rng,
}

impl Mover {
    pub fn new(count: u64, id_base: i64, seed: u64, kick: f64) -> Mover {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let particles = (0..count)
            .map(|i| {
                let id = id_base + i as i64;
                Particle {
                    x: rng.random_range(0.0..1.0),
                    y: rng.random_range(0.0..1.0),
                    z: rng.random_range(0.0..1.0),
                    u: rng.random_range(-0.5..0.5),
                    v: rng.random_range(-0.5..0.5),
                    w: rng.random_range(-0.5..0.5),
                    q: if id % 2 == 0 { 1.0 } else { -1.0 },
                    id,
                }
            })
            .collect();
        Mover {
            particles,
            kick,
            rng,
        }
    }

    /// One timestep: bounded random velocity kicks, then positions advance
    /// by the updated velocity.
    pub fn step(&mut self) {
        let kick = self.kick;
        for p in &mut self.particles {
            if kick > 0.0 {
                p.u += self.rng.random_range(-kick..kick);
                p.v += self.rng.random_range(-kick..kick);
                p.w += self.rng.random_range(-kick..kick);
            }
            p.x += p.u;
            p.y += p.v;
            p.z += p.w;
        }
    }
}

/// Chooses this step's emissions: every already-tracked particle plus any
/// particle whose energy reached the threshold, which joins permanently.
pub fn select_tracked<'a>(
    particles: &'a [Particle],
    tracked: &mut HashSet<i64>,
    threshold: f64,
) -> Vec<&'a Particle> {
    particles
        .iter()
        .filter(|p| {
            if tracked.contains(&p.id) || energy(p) >= threshold {
                tracked.insert(p.id);
                true
            } else {
                false
            }
        })
        .collect()
}

/// Decoded stream element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleRecord {
    pub particle: Particle,
    pub step: i64,
}

pub fn record_values(p: &Particle, step: i64) -> Values {
    Values(vec![
        FieldValues::Float64(vec![p.x]),
        FieldValues::Float64(vec![p.y]),
        FieldValues::Float64(vec![p.z]),
        FieldValues::Float64(vec![p.u]),
        FieldValues::Float64(vec![p.v]),
        FieldValues::Float64(vec![p.w]),
        FieldValues::Float64(vec![p.q]),
        FieldValues::Int64(vec![p.id]),
        FieldValues::Int64(vec![step]),
    ])
}

pub fn record_from_values(v: &Values) -> Result<ParticleRecord> {
    let f = |i: usize| {
        v.float64(i)
            .ok_or_else(|| Error::Schema(format!("particle element lacks float field {i}")))
    };
    let n = |i: usize| {
        v.int64(i)
            .ok_or_else(|| Error::Schema(format!("particle element lacks int field {i}")))
    };
    Ok(ParticleRecord {
        particle: Particle {
            x: f(0)?,
            y: f(1)?,
            z: f(2)?,
            u: f(3)?,
            v: f(4)?,
            w: f(5)?,
            q: f(6)?,
            id: n(7)?,
        },
        step: n(8)?,
    })
}

fn id_routing() -> RoutingPolicy {
    // Destination is id % consumer_count: one sink owns each trajectory.
    RoutingPolicy::key_hash(|v| v.int64(7).unwrap_or(0) as u64)
}

fn members(config: &crate::launcher::RunConfig) -> Result<Vec<(u32, Role)>> {
    let sims = config.group_by_app("particle-sim")?;
    let sinks = config.group_by_app("particle-sink")?;
    Ok(sims
        .ranks()
        .map(|r| (r, Role::PRODUCER))
        .chain(sinks.ranks().map(|r| (r, Role::CONSUMER)))
        .collect())
}

/// Producer rank: run the mover and stream tracked particles each step.
pub fn run_sim(ctx: &AppCtx) -> Result<()> {
    let particles = ctx.group.param_u64("particles_per_producer")?;
    let steps = ctx.group.param_u64("steps")? as i64;
    let threshold = ctx.group.param_f64("threshold")?;
    let seed = ctx.group.param_u64("seed")?;
    let kick = ctx.group.param_f64_or("kick", 0.05)?;

    let roster = ctx.config.roster(0, &members(ctx.config)?);
    let mut channel: Channel = Channel::create(
        EndpointId(ctx.rank),
        Role::PRODUCER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("sim rank received no channel".into()))?;
    let stream = channel.attach(schema(), None, id_routing())?;

    let id_base = ctx.index_in_group as i64 * particles as i64;
    let mut mover = Mover::new(
        particles,
        id_base,
        seed.wrapping_add(ctx.index_in_group as u64),
        kick,
    );
    let mut tracked = HashSet::new();
    for step in 1..=steps {
        mover.step();
        for p in select_tracked(&mover.particles, &mut tracked, threshold) {
            channel.send(stream, &record_values(p, step), SendMode::Block)?;
        }
    }
    channel.terminate(stream)?;
    channel.free()
}

struct SinkState {
    buffers: BTreeMap<i64, Vec<ParticleRecord>>,
    dir: PathBuf,
    flush_every: i64,
    last_idle_flush: Instant,
}

impl SinkState {
    fn buffered(&self) -> usize {
        self.buffers.values().map(Vec::len).sum()
    }

    /// Appends every buffered row to its per-particle file and clears the
    /// buffers. Rows arrive per id in step order, so appends keep the
    /// trajectories sorted regardless of flush timing.
    fn flush(&mut self) -> Result<()> {
        for (id, rows) in self.buffers.iter_mut() {
            if rows.is_empty() {
                continue;
            }
            let path = self.dir.join(format!("particle_{id}.csv"));
            let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
            let mut text = String::new();
            for r in rows.drain(..) {
                let p = r.particle;
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.step, p.x, p.y, p.z, p.u, p.v, p.w, p.q
                ));
            }
            file.write_all(text.as_bytes())?;
        }
        self.last_idle_flush = Instant::now();
        Ok(())
    }
}

/// Consumer rank: buffer trajectories and flush them to per-particle CSV
/// files every `flush_every` steps, when idle, and at termination.
pub fn run_sink(ctx: &AppCtx) -> Result<()> {
    let flush_every = ctx.group.param_u64("flush_every")? as i64;
    if flush_every < 1 {
        return Err(Error::config(
            format!("group[{}].params.flush_every", ctx.group.index),
            "must be at least 1",
        ));
    }
    let dir = match ctx.group.param_str_or("out_dir", "")? {
        s if s.is_empty() => ctx.config.out_dir.join("trajectories"),
        s => PathBuf::from(s),
    };
    fs::create_dir_all(&dir)?;

    let roster = ctx.config.roster(0, &members(ctx.config)?);
    let mut channel: Channel<SinkState> = Channel::create(
        EndpointId(ctx.rank),
        Role::CONSUMER,
        &roster,
        ctx.fabric.as_ref(),
        ctx.channel_options(0),
    )?
    .ok_or_else(|| Error::Protocol("sink rank received no channel".into()))?;

    let ops = OperationSet::new(|st: &mut SinkState, _meta, v: &Values| {
        let rec = record_from_values(v)?;
        st.buffers.entry(rec.particle.id).or_default().push(rec);
        if rec.step % st.flush_every == 0 {
            st.flush()?;
        }
        Ok(())
    })
    .on_background(|st: &mut SinkState| {
        // Time-based flush while the stream is quiet.
        if st.buffered() > 0 && st.last_idle_flush.elapsed().as_millis() >= 100 {
            st.flush()?;
        }
        Ok(())
    })
    .on_term(|st: &mut SinkState| st.flush());
    let stream = channel.attach(schema(), Some(ops), RoutingPolicy::RoundRobin)?;

    let mut state = SinkState {
        buffers: BTreeMap::new(),
        dir,
        flush_every,
        last_idle_flush: Instant::now(),
    };
    channel.operate(stream, OperateMode::Block, &mut state)?;
    channel.free()
}

/// Reads one trajectory file back into rows (used by verification).
pub fn read_trajectory(path: &Path) -> Result<Vec<(i64, [f64; 7])>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let step: i64 = fields[0].parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: "bad step".into(),
        })?;
        let mut vals = [0f64; 7];
        for (j, f) in fields[1..].iter().enumerate() {
            vals[j] = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad float field {}", j + 1),
            })?;
        }
        rows.push((step, vals));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        let mut p = Particle {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            u: 0.0,
            v: 0.0,
            w: 0.0,
            q: 1.0,
            id: 0,
        };
        assert_eq!(energy(&p), 0.0);
        p.u = 3.0;
        p.v = 4.0;
        assert_eq!(energy(&p), 12.5);
    }

    #[test]
    fn zero_particles_is_a_noop() {
        let mut mover = Mover::new(0, 0, 1, 0.05);
        mover.step();
        assert!(mover.particles.is_empty());
    }

    #[test]
    fn zero_kick_moves_in_a_straight_line() {
        let mut mover = Mover::new(1, 0, 42, 0.0);
        let start = mover.particles[0];
        let mut expected_x = start.x;
        for _ in 0..10 {
            mover.step();
            expected_x += start.u;
        }
        let p = mover.particles[0];
        assert_eq!(p.x, expected_x);
        assert_eq!(p.u, start.u);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let mut a = Mover::new(16, 0, 7, 0.05);
        let mut b = Mover::new(16, 0, 7, 0.05);
        for _ in 0..10 {
            a.step();
            b.step();
        }
        for (pa, pb) in a.particles.iter().zip(&b.particles) {
            assert_eq!(pa.x.to_bits(), pb.x.to_bits());
            assert_eq!(pa.u.to_bits(), pb.u.to_bits());
        }
    }

    #[test]
    fn infinite_threshold_tracks_nothing() {
        let mover = Mover::new(8, 0, 3, 0.05);
        let mut tracked = HashSet::new();
        let sel = select_tracked(&mover.particles, &mut tracked, f64::INFINITY);
        assert!(sel.is_empty());
        assert!(tracked.is_empty());
    }

    #[test]
    fn zero_threshold_tracks_everything() {
        let mover = Mover::new(8, 100, 3, 0.05);
        let mut tracked = HashSet::new();
        let sel = select_tracked(&mover.particles, &mut tracked, 0.0);
        assert_eq!(sel.len(), 8);
        assert_eq!(tracked.len(), 8);
    }

    #[test]
    fn tracking_is_permanent() {
        let mut mover = Mover::new(4, 0, 9, 0.0);
        // Zero all velocities so nothing re-qualifies by energy.
        let mut tracked = HashSet::new();
        tracked.insert(mover.particles[2].id);
        for p in &mut mover.particles {
            p.u = 0.0;
            p.v = 0.0;
            p.w = 0.0;
        }
        let sel = select_tracked(&mover.particles, &mut tracked, 1.0);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].id, 2);
    }

    #[test]
    fn record_roundtrip() {
        let p = Particle {
            x: 1.5,
            y: -2.25,
            z: 0.125,
            u: 3.0,
            v: -4.5,
            w: 0.75,
            q: -1.0,
            id: 17,
        };
        let v = record_values(&p, 42);
        let rec = record_from_values(&v).unwrap();
        assert_eq!(rec.particle, p);
        assert_eq!(rec.step, 42);
    }
}
