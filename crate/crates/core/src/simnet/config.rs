use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Everything that shapes a simulated run. Times are simulated milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_domains: usize,
    /// Members of the query cluster.
    pub spaces_per_run: usize,
    /// Extra spaces spread over the other domains.
    pub background_spaces: usize,
    pub attrs_per_space: usize,
    pub domain_attr_pool_size: usize,
    pub degree: usize,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub cost_register_parse_ms: u64,
    pub cost_match_per_attr_ms: u64,
    pub cost_sc_list_ms: u64,
    pub cost_join_ms: u64,
    pub cost_query_parse_ms: u64,
    pub cost_space_lookup_ms: u64,
    pub cost_csg_ms: u64,
    pub cost_eval_ms: u64,
    pub ttl: u32,
    pub seed: u64,
    /// Collector quiet window; `None` derives 3 × max hop latency × ttl.
    pub quiescence_ms: Option<u64>,
    pub qualifying_fraction: f64,
    pub ping_period_ms: u64,
    pub ping_max_missed: u64,
    pub liveness: bool,
    pub seen_capacity: usize,
    pub runs_per_point: usize,
    /// Upper bound on how long an open-ended subscription is followed.
    pub horizon_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_domains: 3,
            spaces_per_run: 1000,
            background_spaces: 0,
            attrs_per_space: 30,
            domain_attr_pool_size: 40,
            degree: super::CALIBRATED_DEGREE,
            latency_min_ms: 5,
            latency_max_ms: 20,
            cost_register_parse_ms: 5,
            cost_match_per_attr_ms: 1,
            cost_sc_list_ms: 2,
            cost_join_ms: 1,
            cost_query_parse_ms: 2,
            cost_space_lookup_ms: 1,
            cost_csg_ms: 1,
            cost_eval_ms: 1,
            ttl: crate::cql::DEFAULT_TTL,
            seed: 42,
            quiescence_ms: None,
            qualifying_fraction: 0.2,
            ping_period_ms: 30_000,
            ping_max_missed: 2,
            liveness: false,
            seen_capacity: crate::engine::DEFAULT_SEEN_CAPACITY,
            runs_per_point: 30,
            horizon_ms: 4 * 3_600_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
}

macro_rules! fields {
    ($m:ident) => {
        $m!(num_domains, spaces_per_run, background_spaces, attrs_per_space, domain_attr_pool_size, degree,
            latency_min_ms, latency_max_ms, cost_register_parse_ms, cost_match_per_attr_ms, cost_sc_list_ms,
            cost_join_ms, cost_query_parse_ms, cost_space_lookup_ms, cost_csg_ms, cost_eval_ms, ttl, seed,
            quiescence_ms, qualifying_fraction, ping_period_ms, ping_max_missed, liveness, seen_capacity,
            runs_per_point, horizon_ms)
    };
}

trait KvValue: Sized {
    fn parse_kv(s: &str) -> Option<Self>;
    fn render_kv(&self) -> String;
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
kv_from_str!(usize, u64, u32, bool);

impl KvValue for f64 {
    fn parse_kv(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render_kv(&self) -> String {
        self.to_string()
    }
}

impl KvValue for Option<u64> {
    fn parse_kv(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn render_kv(&self) -> String {
        self.map_or("auto".to_string(), |v| v.to_string())
    }
}

impl SimConfig {
    /// Reads `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = SimConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                ConfigError::BadValue { key, value, .. } => ConfigError::BadValue { line: i + 1, key, value },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line: 0,
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = KvValue::parse_kv(value).ok_or_else(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
                }
            };
        }
        fields!(assign);
        Ok(())
    }

    /// Every field, one `key = value` per line; `parse` reads it back.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        macro_rules! render {
            ($($f:ident),*) => {
                $( writeln!(out, "{} = {}", stringify!($f), self.$f.render_kv()).expect("string write"); )*
            };
        }
        fields!(render);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Infeasible(m));
        if self.num_domains == 0 {
            return fail("num_domains must be at least 1".into());
        }
        if self.attrs_per_space == 0 || self.attrs_per_space > self.domain_attr_pool_size {
            return fail(format!(
                "attrs_per_space ({}) must be in 1..=domain_attr_pool_size ({})",
                self.attrs_per_space, self.domain_attr_pool_size
            ));
        }
        if self.latency_min_ms > self.latency_max_ms {
            return fail("latency_min_ms exceeds latency_max_ms".into());
        }
        if self.ttl == 0 {
            return fail("ttl must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.qualifying_fraction) {
            return fail("qualifying_fraction must lie in [0, 1]".into());
        }
        if self.liveness && self.ping_period_ms == 0 {
            return fail("ping_period_ms must be positive when liveness is on".into());
        }
        if self.background_spaces > 0 && self.num_domains < 2 {
            return fail("background spaces need a second domain".into());
        }
        Ok(())
    }

    pub fn quiescence(&self) -> u64 {
        self.quiescence_ms
            .unwrap_or(3 * self.latency_max_ms * u64::from(self.ttl))
    }
}
