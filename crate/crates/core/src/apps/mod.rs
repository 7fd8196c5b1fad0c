//! The reference applications run by the launcher.
//!
//! Each program is one rank body that builds its channels from the run
//! config, attaches its streams, and drives send or operate until done.

pub mod events;
pub mod particle;
pub mod wordcount;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::harness::Recorder;
use crate::launcher::{GroupSpec, RunConfig};
use crate::runtime::ChannelOptions;
use crate::transport::Fabric;

/// Everything one rank needs to run its program body.
pub struct AppCtx<'a> {
    pub rank: u32,
    pub config: &'a RunConfig,
    pub group: &'a GroupSpec,
    /// Zero-based position of this rank within its group; equals the dense
    /// role rank inside the channels the group participates in.
    pub index_in_group: u32,
    pub fabric: Arc<dyn Fabric>,
    pub recorder: Arc<Recorder>,
}

impl AppCtx<'_> {
    pub fn channel_options(&self, channel_tag: u32) -> ChannelOptions {
        ChannelOptions {
            channel_tag,
            transport: crate::transport::TransportOptions {
                rendezvous_timeout: self.config.rendezvous_timeout,
                ..Default::default()
            },
            recorder: Some(Arc::clone(&self.recorder)),
        }
    }
}

/// Dispatch table from program name to rank body.
pub fn run_app(ctx: &AppCtx) -> Result<()> {
    match ctx.group.app.as_str() {
        "wc-map" => wordcount::run_map(ctx),
        "wc-reduce-mid" => wordcount::run_reduce_mid(ctx),
        "wc-reduce-final" => wordcount::run_reduce_final(ctx),
        "particle-sim" => particle::run_sim(ctx),
        "particle-sink" => particle::run_sink(ctx),
        "event-sensor" => events::run_sensor(ctx),
        "event-classifier" => events::run_classifier(ctx),
        other => Err(Error::config("group.app", format!("unknown app '{other}'"))),
    }
}

/// Deterministic fan-out of an ordered file list across a group: member
/// `i` takes files `i, i+n, i+2n, ...`.
pub(crate) fn assigned_files(
    all: &[std::path::PathBuf],
    index_in_group: u32,
    group_size: u32,
) -> Vec<std::path::PathBuf> {
    all.iter()
        .enumerate()
        .filter(|(i, _)| (*i as u32) % group_size == index_in_group)
        .map(|(_, p)| p.clone())
        .collect()
}

/// Sorted listing of the plain files in a directory.
pub(crate) fn list_files(dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}
