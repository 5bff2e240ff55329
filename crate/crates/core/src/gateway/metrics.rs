use std::collections::{BTreeMap, VecDeque};

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::model::ProtocolId;

/// Arrival time and byte count, oldest first.
type Samples = VecDeque<(DateTime<Utc>, u64)>;

/// Received-byte samples per (protocol, node), kept for at least `retention`.
#[derive(Debug, Clone)]
pub struct ThroughputWindow {
    retention: Duration,
    samples: BTreeMap<(ProtocolId, String), Samples>,
}

impl ThroughputWindow {
    pub fn new(retention: Duration) -> Self {
        Self { retention, samples: BTreeMap::new() }
    }

    pub fn retention(&self) -> Duration {
        self.retention
    }

    pub fn record(&mut self, protocol: ProtocolId, node_id: &str, at: DateTime<Utc>, bytes: u64) {
        let ring = self.samples.entry((protocol, node_id.to_string())).or_default();
        ring.push_back((at, bytes));
        let horizon = at - self.retention;
        while ring.front().is_some_and(|(t, _)| *t <= horizon) {
            ring.pop_front();
        }
    }

    /// Bytes received in `(now - window, now]`, for one node or all of them.
    pub fn bytes_in(&self, protocol: ProtocolId, node_id: Option<&str>, now: DateTime<Utc>, window: Duration) -> u64 {
        let from = now - window;
        self.samples
            .iter()
            .filter(|((p, n), _)| *p == protocol && node_id.is_none_or(|id| id == n))
            .flat_map(|(_, ring)| ring.iter())
            .filter(|(t, _)| *t > from && *t <= now)
            .map(|(_, b)| *b)
            .sum()
    }

    /// kbps over the window: `bytes * 8 / 1000 / window_seconds`.
    pub fn throughput(&self, protocol: ProtocolId, node_id: Option<&str>, now: DateTime<Utc>, window_s: f64) -> f64 {
        if !(window_s.is_finite() && window_s > 0.0) {
            return 0.0;
        }
        let window = Duration::microseconds((window_s * 1e6).round() as i64);
        let bytes = self.bytes_in(protocol, node_id, now, window);
        (bytes as f64 * 8.0 / 1000.0) / window_s
    }

    /// Nodes that ever sent on `protocol` and still have retained samples.
    pub fn nodes(&self, protocol: ProtocolId) -> Vec<String> {
        self.samples
            .iter()
            .filter(|((p, _), ring)| *p == protocol && !ring.is_empty())
            .map(|((_, n), _)| n.clone())
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("host statistics unavailable: {0}")]
    SamplingUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostStats {
    pub timestamp: DateTime<Utc>,
    pub cpu_percent: f64,
    pub free_memory_bytes: u64,
}

/// One entry of the exported series; failed samples leave a gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum HostSample {
    Stats(HostStats),
    Gap { timestamp: DateTime<Utc>, gap: bool, reason: String },
}

impl HostSample {
    pub fn timestamp(&self) -> DateTime<Utc> {
        match self {
            HostSample::Stats(s) => s.timestamp,
            HostSample::Gap { timestamp, .. } => *timestamp,
        }
    }
}

/// Whole-host CPU and free memory from `/proc`. CPU usage is the busy share
/// of jiffies since the previous sample (since boot for the first one).
#[derive(Debug, Default)]
pub struct HostSampler {
    prev: Option<(u64, u64)>,
    last: Option<DateTime<Utc>>,
}

impl HostSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample(&mut self, now: DateTime<Utc>) -> Result<HostStats, StatsError> {
        let unavailable = |e: std::io::Error| StatsError::SamplingUnavailable(e.to_string());
        let stat = std::fs::read_to_string("/proc/stat").map_err(unavailable)?;
        let meminfo = std::fs::read_to_string("/proc/meminfo").map_err(unavailable)?;
        let (total, idle) = parse_cpu_jiffies(&stat)?;
        let free = parse_mem_available(&meminfo)?;

        let (dt, di) = match self.prev {
            Some((pt, pi)) if total > pt => (total - pt, idle.saturating_sub(pi)),
            _ => (total, idle),
        };
        self.prev = Some((total, idle));
        let cpu = if dt == 0 { 0.0 } else { 100.0 * (1.0 - di as f64 / dt as f64) };

        Ok(HostStats { timestamp: self.stamp(now), cpu_percent: cpu.clamp(0.0, 100.0), free_memory_bytes: free })
    }

    /// Series timestamps are strictly increasing even if the wall clock
    /// stalls or steps back.
    pub fn stamp(&mut self, now: DateTime<Utc>) -> DateTime<Utc> {
        let t = match self.last {
            Some(last) if now <= last => last + Duration::microseconds(1),
            _ => now,
        };
        self.last = Some(t);
        t
    }
}

fn parse_cpu_jiffies(stat: &str) -> Result<(u64, u64), StatsError> {
    let bad = || StatsError::SamplingUnavailable("unrecognised /proc/stat".into());
    let line = stat.lines().find(|l| l.starts_with("cpu ")).ok_or_else(bad)?;
    let fields: Vec<u64> = line.split_whitespace().skip(1).map(|f| f.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if fields.len() < 4 {
        return Err(bad());
    }
    // user nice system idle iowait irq softirq steal [guest guest_nice]
    // guest time is already folded into user/nice.
    let total: u64 = fields.iter().take(8).sum();
    let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
    Ok((total, idle))
}

fn parse_mem_available(meminfo: &str) -> Result<u64, StatsError> {
    let field = |name: &str| {
        meminfo
            .lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|kb| kb.parse::<u64>().ok())
    };
    field("MemAvailable:")
        .or_else(|| field("MemFree:"))
        .map(|kb| kb * 1024)
        .ok_or_else(|| StatsError::SamplingUnavailable("unrecognised /proc/meminfo".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(s: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap() + Duration::seconds(s)
    }

    #[test]
    fn six_thousand_bits_in_six_seconds_is_one_kbps() {
        let mut w = ThroughputWindow::new(Duration::seconds(60));
        for i in 1..=6 {
            w.record(ProtocolId::Wifi, "n1", t(i), 125);
        }
        assert_eq!(w.bytes_in(ProtocolId::Wifi, None, t(6), Duration::seconds(6)), 750);
        assert_eq!(w.throughput(ProtocolId::Wifi, Some("n1"), t(6), 6.0), 1.0);
        // the sample at exactly now - window is outside
        assert_eq!(w.throughput(ProtocolId::Wifi, Some("n1"), t(7), 6.0), 5.0 * 125.0 * 8.0 / 1000.0 / 6.0);
    }

    #[test]
    fn empty_window_is_zero() {
        let w = ThroughputWindow::new(Duration::seconds(60));
        assert_eq!(w.throughput(ProtocolId::Zigbee, None, t(0), 6.0), 0.0);
        assert_eq!(w.throughput(ProtocolId::Zigbee, None, t(0), 0.0), 0.0);
    }

    #[test]
    fn aggregate_is_sum_of_nodes() {
        let mut w = ThroughputWindow::new(Duration::seconds(60));
        w.record(ProtocolId::Bluetooth, "n1", t(1), 100);
        w.record(ProtocolId::Bluetooth, "n2", t(2), 300);
        w.record(ProtocolId::Wifi, "n1", t(2), 999);
        let per_node: u64 = w
            .nodes(ProtocolId::Bluetooth)
            .iter()
            .map(|n| w.bytes_in(ProtocolId::Bluetooth, Some(n), t(3), Duration::seconds(6)))
            .sum();
        assert_eq!(per_node, 400);
        assert_eq!(w.bytes_in(ProtocolId::Bluetooth, None, t(3), Duration::seconds(6)), 400);
    }

    #[test]
    fn old_samples_are_pruned() {
        let mut w = ThroughputWindow::new(Duration::seconds(10));
        w.record(ProtocolId::Wifi, "n1", t(0), 1);
        w.record(ProtocolId::Wifi, "n1", t(20), 1);
        assert_eq!(w.bytes_in(ProtocolId::Wifi, None, t(20), Duration::seconds(100)), 1);
    }

    #[test]
    fn proc_parsing() {
        let stat = "cpu  100 0 50 800 50 0 0 0 0 0\ncpu0 1 2 3 4\n";
        assert_eq!(parse_cpu_jiffies(stat).unwrap(), (1000, 850));
        assert!(parse_cpu_jiffies("intr 1 2").is_err());
        let mem = "MemTotal: 100 kB\nMemFree: 10 kB\nMemAvailable: 42 kB\n";
        assert_eq!(parse_mem_available(mem).unwrap(), 42 * 1024);
    }

    #[test]
    fn consecutive_samples_strictly_increase() {
        let mut s = HostSampler::new();
        let a = s.stamp(t(0));
        let b = s.stamp(t(0));
        let c = s.stamp(t(-5));
        assert!(a < b && b < c);
        if let Ok(stats) = s.sample(t(1)) {
            assert!((0.0..=100.0).contains(&stats.cpu_percent));
            assert!(stats.timestamp > c);
        }
    }
}
