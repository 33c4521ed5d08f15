//! Run statistics.

use chrono::{DateTime, SecondsFormat, Utc};
use indexmap::IndexMap;

use crate::value::Value;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PiperStats {
    pub items_in: u64,
    pub items_out: u64,
    pub faults_out: u64,
    pub timeouts: u64,
    pub wall_ms_total: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    /// Bytes carried between the manager and lanes for this piper.
    pub in_band_bytes: u64,
    /// Largest single in-band message for this piper.
    pub max_item_in_band_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub pipers: IndexMap<String, PiperStats>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunStats {
    pub fn piper(&self, name: &str) -> Option<&PiperStats> {
        self.pipers.get(name)
    }

    pub fn to_value(&self) -> Value {
        let ts = |t: &Option<DateTime<Utc>>| match t {
            Some(t) => Value::Str(t.to_rfc3339_opts(SecondsFormat::Micros, true)),
            None => Value::Null,
        };
        let pipers = self
            .pipers
            .iter()
            .map(|(name, s)| {
                let v = crate::vmap! {
                    "items_in" => s.items_in as i64,
                    "items_out" => s.items_out as i64,
                    "faults_out" => s.faults_out as i64,
                    "timeouts" => s.timeouts as i64,
                    "wall_ms_total" => s.wall_ms_total,
                    "latency_p50_ms" => s.latency_p50_ms,
                    "latency_p95_ms" => s.latency_p95_ms,
                    "in_band_bytes" => s.in_band_bytes as i64,
                    "max_item_in_band_bytes" => s.max_item_in_band_bytes as i64,
                };
                (name.clone(), v)
            })
            .collect();
        crate::vmap! {
            "pipers" => Value::Map(pipers),
            "started_at" => ts(&self.started_at),
            "finished_at" => ts(&self.finished_at),
        }
    }
}

/// Nearest-rank quantile of unsorted samples; 0 for no samples.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (q * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.5), 50.0);
        assert_eq!(quantile(&xs, 0.95), 95.0);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }
}
