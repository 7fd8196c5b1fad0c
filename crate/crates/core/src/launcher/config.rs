//! Run configuration: which programs run, with how many ranks, over which
//! transport.
//!
//! The document is TOML. Global ranks are assigned densely in group
//! declaration order, so the rank layout is a pure function of the
//! document:
//!
//! ```toml
//! mode = "inprocess"        # or "sockets"
//! base_port = 47100         # required in sockets mode
//! out_dir = "run-out"
//!
//! [[group]]
//! app = "wc-map"
//! role = "producer"
//! count = 4
//! [group.params]
//! input_dir = "corpus"
//! ```

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::transport::{Role, RosterEntry};

/// Transport selection for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchMode {
    /// Every rank is a thread in this process; links are in-process queues.
    InProcess,
    /// Every rank is a spawned OS process; links are TCP sockets.
    Sockets,
}

impl LaunchMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "inprocess" => Ok(LaunchMode::InProcess),
            "sockets" => Ok(LaunchMode::Sockets),
            other => Err(Error::config(
                "mode",
                format!("expected 'inprocess' or 'sockets', got '{other}'"),
            )),
        }
    }
}

/// The application families shipped with the launcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppFamily {
    WordCount,
    Particle,
    EventFilter,
}

impl AppFamily {
    /// How many channels the family's programs create; port assignment
    /// reserves one port per (channel, rank).
    pub fn channel_count(self) -> u32 {
        match self {
            AppFamily::WordCount => 2,
            AppFamily::Particle | AppFamily::EventFilter => 1,
        }
    }
}

/// Program registry: name, family, and the role its group must declare.
const KNOWN_APPS: &[(&str, AppFamily, Role)] = &[
    ("wc-map", AppFamily::WordCount, Role::PRODUCER),
    ("wc-reduce-mid", AppFamily::WordCount, Role::BOTH),
    ("wc-reduce-final", AppFamily::WordCount, Role::CONSUMER),
    ("particle-sim", AppFamily::Particle, Role::PRODUCER),
    ("particle-sink", AppFamily::Particle, Role::CONSUMER),
    ("event-sensor", AppFamily::EventFilter, Role::PRODUCER),
    ("event-classifier", AppFamily::EventFilter, Role::CONSUMER),
];

fn parse_role(s: &str) -> Option<Role> {
    match s {
        "producer" => Some(Role::PRODUCER),
        "consumer" => Some(Role::CONSUMER),
        "both" => Some(Role::BOTH),
        "none" => Some(Role::BYSTANDER),
        _ => None,
    }
}

/// One contiguous block of ranks running the same program.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    /// Position in the config document, for error paths.
    pub index: usize,
    pub app: String,
    pub role: Role,
    pub count: u32,
    pub first_rank: u32,
    pub params: toml::Table,
}

impl GroupSpec {
    pub fn ranks(&self) -> std::ops::Range<u32> {
        self.first_rank..self.first_rank + self.count
    }

    fn path(&self, field: &str) -> String {
        format!("group[{}].{field}", self.index)
    }

    pub fn param_str(&self, key: &str) -> Result<String> {
        match self.params.get(key) {
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::config(self.path(&format!("params.{key}")), "expected a string")),
            None => Err(Error::config(self.path(&format!("params.{key}")), "missing")),
        }
    }

    pub fn param_str_or(&self, key: &str, default: &str) -> Result<String> {
        if self.params.contains_key(key) {
            self.param_str(key)
        } else {
            Ok(default.to_string())
        }
    }

    pub fn param_u64(&self, key: &str) -> Result<u64> {
        match self.params.get(key) {
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            Some(_) => Err(Error::config(
                self.path(&format!("params.{key}")),
                "expected a non-negative integer",
            )),
            None => Err(Error::config(self.path(&format!("params.{key}")), "missing")),
        }
    }

    pub fn param_u64_or(&self, key: &str, default: u64) -> Result<u64> {
        if self.params.contains_key(key) {
            self.param_u64(key)
        } else {
            Ok(default)
        }
    }

    pub fn param_f64(&self, key: &str) -> Result<f64> {
        match self.params.get(key) {
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(Error::config(
                self.path(&format!("params.{key}")),
                "expected a number",
            )),
            None => Err(Error::config(self.path(&format!("params.{key}")), "missing")),
        }
    }

    pub fn param_f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.params.contains_key(key) {
            self.param_f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn param_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.params.get(key) {
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::Float(f) => Ok(*f),
                    toml::Value::Integer(i) => Ok(*i as f64),
                    _ => Err(Error::config(
                        self.path(&format!("params.{key}")),
                        "expected an array of numbers",
                    )),
                })
                .collect(),
            Some(_) => Err(Error::config(
                self.path(&format!("params.{key}")),
                "expected an array of numbers",
            )),
            None => Err(Error::config(self.path(&format!("params.{key}")), "missing")),
        }
    }
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: LaunchMode,
    pub base_port: u16,
    pub out_dir: PathBuf,
    /// Metrics collection toggle; on unless a measurement run disables it.
    pub metrics: bool,
    /// How long channel creation waits for missing members.
    pub rendezvous_timeout: std::time::Duration,
    pub groups: Vec<GroupSpec>,
    family: AppFamily,
    total_ranks: u32,
}

#[derive(Deserialize)]
struct RawConfig {
    mode: Option<String>,
    base_port: Option<u32>,
    out_dir: Option<String>,
    metrics: Option<bool>,
    rendezvous_timeout_ms: Option<u64>,
    #[serde(default)]
    group: Vec<RawGroup>,
}

#[derive(Deserialize)]
struct RawGroup {
    app: String,
    role: String,
    count: u32,
    #[serde(default)]
    params: toml::Table,
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| Error::config("<document>", e.to_string().trim().to_string()))?;

    let mode = LaunchMode::parse(raw.mode.as_deref().unwrap_or("inprocess"))?;
    if raw.group.is_empty() {
        return Err(Error::config("group", "at least one group is required"));
    }

    let mut groups = Vec::new();
    let mut next_rank = 0u32;
    let mut family: Option<AppFamily> = None;
    for (index, g) in raw.group.iter().enumerate() {
        let path = |field: &str| format!("group[{index}].{field}");
        let (_, app_family, expected_role) = *KNOWN_APPS
            .iter()
            .find(|(name, _, _)| *name == g.app)
            .ok_or_else(|| Error::config(path("app"), format!("unknown app '{}'", g.app)))?;
        let role = parse_role(&g.role).ok_or_else(|| {
            Error::config(
                path("role"),
                format!("unknown role '{}' (producer|consumer|both|none)", g.role),
            )
        })?;
        if role != expected_role {
            return Err(Error::config(
                path("role"),
                format!("app '{}' requires role '{expected_role}', got '{role}'", g.app),
            ));
        }
        if g.count == 0 {
            return Err(Error::config(path("count"), "groups must have at least one member"));
        }
        match family {
            None => family = Some(app_family),
            Some(f) if f != app_family => {
                return Err(Error::config(
                    path("app"),
                    "all groups in one run must belong to the same application",
                ))
            }
            Some(_) => {}
        }
        if groups.iter().any(|prev: &GroupSpec| prev.app == g.app) {
            return Err(Error::config(path("app"), format!("duplicate group for '{}'", g.app)));
        }
        groups.push(GroupSpec {
            index,
            app: g.app.clone(),
            role,
            count: g.count,
            first_rank: next_rank,
            params: g.params.clone(),
        });
        next_rank = next_rank
            .checked_add(g.count)
            .ok_or_else(|| Error::config(path("count"), "rank space overflow"))?;
    }
    let family = family.unwrap();
    let total_ranks = next_rank;

    if total_ranks < 2 {
        return Err(Error::config("group", "a run needs at least two ranks"));
    }
    if !groups.iter().any(|g| g.role.is_producer) {
        return Err(Error::config("group", "no producer group declared"));
    }
    if !groups.iter().any(|g| g.role.is_consumer) {
        return Err(Error::config("group", "no consumer group declared"));
    }

    // Family completeness: every program of the family must be present.
    for (name, f, _) in KNOWN_APPS {
        if *f == family && !groups.iter().any(|g| g.app == *name) {
            return Err(Error::config(
                "group",
                format!("application is missing its '{name}' group"),
            ));
        }
    }

    let base_port = match (mode, raw.base_port) {
        (LaunchMode::Sockets, None) => {
            return Err(Error::config("base_port", "required in sockets mode"))
        }
        (_, Some(p)) => {
            let top = p as u64 + (family.channel_count() as u64) * (total_ranks as u64);
            if p == 0 || p > u16::MAX as u32 || top > u16::MAX as u64 {
                return Err(Error::config(
                    "base_port",
                    format!(
                        "port range {p}..{top} collides with the 16-bit port space \
                         ({} channels x {total_ranks} ranks)",
                        family.channel_count()
                    ),
                ));
            }
            p as u16
        }
        (LaunchMode::InProcess, None) => 0,
    };

    Ok(RunConfig {
        mode,
        base_port,
        out_dir: PathBuf::from(raw.out_dir.unwrap_or_else(|| "streamkit-out".into())),
        metrics: raw.metrics.unwrap_or(true),
        rendezvous_timeout: std::time::Duration::from_millis(
            raw.rendezvous_timeout_ms.unwrap_or(10_000),
        ),
        groups,
        family,
        total_ranks,
    })
}

impl RunConfig {
    pub fn total_ranks(&self) -> u32 {
        self.total_ranks
    }

    /// Overrides the transport mode (the `--mode` flag). Switching to
    /// sockets still requires a usable `base_port` from the document.
    pub fn set_mode(&mut self, mode: LaunchMode) -> Result<()> {
        if mode == LaunchMode::Sockets && self.base_port == 0 {
            return Err(Error::config(
                "base_port",
                "required to override the mode to sockets",
            ));
        }
        self.mode = mode;
        Ok(())
    }

    pub fn family(&self) -> AppFamily {
        self.family
    }

    pub fn group_for_rank(&self, rank: u32) -> Result<(&GroupSpec, u32)> {
        self.groups
            .iter()
            .find(|g| g.ranks().contains(&rank))
            .map(|g| (g, rank - g.first_rank))
            .ok_or_else(|| Error::config("rank", format!("rank {rank} out of range")))
    }

    pub fn group_by_app(&self, app: &str) -> Result<&GroupSpec> {
        self.groups
            .iter()
            .find(|g| g.app == app)
            .ok_or_else(|| Error::config("group", format!("no '{app}' group in this run")))
    }

    /// Listen address for one rank on one channel: ports are laid out as
    /// `base_port + channel * total_ranks + rank`.
    pub fn addr(&self, channel: u32, rank: u32) -> SocketAddr {
        let port = self.base_port as u32 + channel * self.total_ranks + rank;
        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port as u16)
    }

    /// Builds the rendezvous roster for one channel from (rank, role)
    /// members, attaching addresses in sockets mode.
    pub fn roster(&self, channel: u32, members: &[(u32, Role)]) -> Vec<RosterEntry> {
        members
            .iter()
            .map(|(rank, role)| match self.mode {
                LaunchMode::InProcess => RosterEntry::new(*rank, *role),
                LaunchMode::Sockets => RosterEntry::with_addr(*rank, *role, self.addr(channel, *rank)),
            })
            .collect()
    }
}
