//! Run metrics and their CSV/JSON renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::checks::Violations;
use crate::ids::Rank;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RankMetrics {
    pub rank: Rank,
    pub end_time_ns: u64,
    pub barriers: u64,
    pub barrier_latency_sum_ns: u64,
    pub barrier_latency_max_ns: u64,
    pub halos: u64,
    pub halo_latency_sum_ns: u64,
    pub halo_latency_max_ns: u64,
    pub am_sent: u64,
    pub am_dispatched: u64,
    pub triggers: u64,
    pub fallback_instances: u64,
    /// High-water mark of queued barrier entries attributable to this rank.
    pub max_armed_barrier_entries: u32,
}

impl RankMetrics {
    pub fn mean_barrier_latency_ns(&self) -> f64 {
        if self.barriers == 0 {
            0.0
        } else {
            self.barrier_latency_sum_ns as f64 / self.barriers as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NicMetrics {
    pub nic: u32,
    pub flushes: u64,
    pub dwq_hwm: u32,
    pub increments_hwm: u32,
    pub counter_value_hwm: u32,
    pub queued: u64,
    pub released: u64,
    pub retired: u64,
}

/// A scalar metric: kept as integer when exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{}", fmt_float(*v)),
        }
    }
}

impl Value {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Value::Int(v) => v as f64,
            Value::Float(v) => v,
        }
    }
}

/// Shortest round-trip form, stable across platforms.
fn fmt_float(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    pub status: String,
    pub values: BTreeMap<String, Value>,
    pub ranks: Vec<RankMetrics>,
    pub nics: Vec<NicMetrics>,
    pub violations: Violations,
}

impl MetricsReport {
    pub fn set_int(&mut self, key: &str, v: i64) {
        self.values.insert(key.to_string(), Value::Int(v));
    }

    pub fn set_float(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), Value::Float(v));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values
            .get(key)
            .map(|v| v.as_f64())
            .or_else(|| self.builtin(key))
    }

    /// Keys derived from the structured fields.
    fn builtin(&self, key: &str) -> Option<f64> {
        let v = &self.violations;
        Some(match key {
            "violations" => v.total() as f64,
            "barrier_safety_violations" => v.barrier_safety as f64,
            "handoff_violations" => v.handoff as f64,
            "am_violations" => (v.am_order + v.am_content + v.am_early) as f64,
            "flushes" => self.nics.iter().map(|n| n.flushes).sum::<u64>() as f64,
            "fallback_instances" => {
                self.ranks.iter().map(|r| r.fallback_instances).sum::<u64>() as f64
            }
            "max_armed_barrier_entries" => self
                .ranks
                .iter()
                .map(|r| r.max_armed_barrier_entries)
                .max()
                .unwrap_or(0) as f64,
            "dwq_hwm" => self.nics.iter().map(|n| n.dwq_hwm).max().unwrap_or(0) as f64,
            "end_time_ns" => self.ranks.iter().map(|r| r.end_time_ns).max().unwrap_or(0) as f64,
            "barriers" => self.ranks.iter().map(|r| r.barriers).max().unwrap_or(0) as f64,
            "am_dispatched" => self.ranks.iter().map(|r| r.am_dispatched).sum::<u64>() as f64,
            _ => return None,
        })
    }

    /// One row per rank plus an `all` aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "rank,end_time_ns,barriers,barrier_latency_mean_ns,barrier_latency_max_ns,halos,halo_latency_max_ns,am_sent,am_dispatched,triggers,fallback_instances,max_armed_barrier_entries\n",
        );
        let mut agg = RankMetrics::default();
        for r in &self.ranks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.rank,
                r.end_time_ns,
                r.barriers,
                fmt_float(r.mean_barrier_latency_ns()),
                r.barrier_latency_max_ns,
                r.halos,
                r.halo_latency_max_ns,
                r.am_sent,
                r.am_dispatched,
                r.triggers,
                r.fallback_instances,
                r.max_armed_barrier_entries
            );
            agg.end_time_ns = agg.end_time_ns.max(r.end_time_ns);
            agg.barriers += r.barriers;
            agg.barrier_latency_sum_ns += r.barrier_latency_sum_ns;
            agg.barrier_latency_max_ns = agg.barrier_latency_max_ns.max(r.barrier_latency_max_ns);
            agg.halos += r.halos;
            agg.halo_latency_max_ns = agg.halo_latency_max_ns.max(r.halo_latency_max_ns);
            agg.am_sent += r.am_sent;
            agg.am_dispatched += r.am_dispatched;
            agg.triggers += r.triggers;
            agg.fallback_instances += r.fallback_instances;
            agg.max_armed_barrier_entries = agg
                .max_armed_barrier_entries
                .max(r.max_armed_barrier_entries);
        }
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{},{},{},{},{},{}",
            agg.end_time_ns,
            agg.barriers,
            fmt_float(agg.mean_barrier_latency_ns()),
            agg.barrier_latency_max_ns,
            agg.halos,
            agg.halo_latency_max_ns,
            agg.am_sent,
            agg.am_dispatched,
            agg.triggers,
            agg.fallback_instances,
            agg.max_armed_barrier_entries
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// `key=value` lines for scalar results.
    pub fn summary_lines(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_aggregate_row() {
        let mut m = MetricsReport::default();
        m.ranks.push(RankMetrics {
            rank: 0,
            end_time_ns: 10,
            barriers: 2,
            barrier_latency_sum_ns: 6,
            ..Default::default()
        });
        m.ranks.push(RankMetrics {
            rank: 1,
            end_time_ns: 12,
            barriers: 2,
            barrier_latency_sum_ns: 2,
            ..Default::default()
        });
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("all,12,4,2.0,"));
        assert_eq!(m.get("end_time_ns"), Some(12.0));
    }

    #[test]
    fn values_render_stably() {
        let mut m = MetricsReport::default();
        m.set_int("max_prestaged", 42);
        m.set_float("ratio", 229.0909090909091);
        m.set_float("whole", 3.0);
        assert_eq!(
            m.summary_lines(),
            ["max_prestaged=42", "ratio=229.0909090909091", "whole=3.0"]
        );
        assert!(m.to_json().contains("\"max_prestaged\": 42"));
    }
}
