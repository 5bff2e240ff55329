use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use tokio::sync::broadcast;
use tokio::task::JoinHandle;

use super::node::{run_node, NodeContext, NodeError, NodeStats};
use super::report::{ClockMode, CountRow, ScenarioReport, ThroughputPoint, Totals, Trace, TracePoint, AGGREGATE_NODE};
use super::spec::{Action, ScenarioSpec};
use super::ScenarioError;
use crate::clock::{Clock, SystemClock, VirtualClock};
use crate::gateway::{self, AlarmEvent, Gateway, GatewayConfig, GatewayEvent, RunningGateway};
use crate::model::{parse_reading, truncate_to_seconds, NormalizedReading, ProtocolId};
use crate::mqtt::{self, Broker, BrokerConfig, BrokerServer, ClientOptions, MqttClient, QoS};

const STARTUP_TIMEOUT: StdDuration = StdDuration::from_secs(10);
const SETTLE_TIMEOUT: StdDuration = StdDuration::from_secs(10);
const BROKER_TICK: StdDuration = StdDuration::from_millis(100);

struct SimNode {
    node_id: String,
    stats: Arc<NodeStats>,
    task: JoinHandle<Result<(), NodeError>>,
}

/// A scenario in progress. Boot order is cloud broker, gateway, nodes;
/// [`ScenarioRun::finish`] tears down in reverse and builds the report.
///
/// In virtual-clock mode time only moves inside [`ScenarioRun::run_until`],
/// and only once the system is quiet: every node parked on its next capture
/// timer, every frame sent so far ingested, every node on the latest
/// configuration revision.
pub struct ScenarioRun {
    spec: ScenarioSpec,
    mode: ClockMode,
    virtual_clock: Option<VirtualClock>,
    clock: Arc<dyn Clock>,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    window: Duration,
    next_sample: u64,
    actions: VecDeque<super::spec::ScheduledAction>,
    throughput: Vec<ThroughputPoint>,
    alarms: Vec<AlarmEvent>,
    events: broadcast::Receiver<GatewayEvent>,
    collected: Arc<Mutex<Vec<NormalizedReading>>>,
    collector: JoinHandle<()>,
    nodes: Vec<SimNode>,
    gateway: RunningGateway,
    cloud: BrokerServer,
}

/// Runs a whole scenario and returns its report.
pub async fn run_scenario(spec: &ScenarioSpec, mode: ClockMode) -> Result<ScenarioReport, ScenarioError> {
    ScenarioRun::start(spec.clone(), mode).await?.finish().await
}

impl ScenarioRun {
    pub async fn start(spec: ScenarioSpec, mode: ClockMode) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let io = |e: std::io::Error| ScenarioError::Io(e.to_string());

        let cloud = mqtt::serve(Broker::new(BrokerConfig::default(), Arc::new(SystemClock)), "127.0.0.1:0", BROKER_TICK)
            .await
            .map_err(io)?;
        let cloud_addr = cloud.local_addr().to_string();
        let sink = MqttClient::connect(&cloud_addr, ClientOptions::new("cloud-sink"), Arc::new(SystemClock))
            .await
            .map_err(|e| ScenarioError::Io(format!("cloud sink: {e}")))?;
        sink.subscribe("dat/#", QoS::AtLeastOnce)
            .await
            .map_err(|e| ScenarioError::Io(format!("cloud sink: {e}")))?;
        let collected = Arc::new(Mutex::new(Vec::new()));
        let sink_store = Arc::clone(&collected);
        let collector = tokio::spawn(async move {
            while let Some(p) = sink.poll().await {
                match parse_reading(&p.payload) {
                    Ok(r) => sink_store.lock().unwrap().push(r),
                    Err(e) => tracing::warn!("cloud sink got a malformed reading on {}: {e}", p.topic),
                }
            }
        });

        let (virtual_clock, clock, start): (_, Arc<dyn Clock>, _) = match mode {
            ClockMode::Virtual => {
                let vc = VirtualClock::new(spec.start);
                (Some(vc.clone()), Arc::new(vc), spec.start)
            }
            ClockMode::Real => (None, Arc::new(SystemClock), truncate_to_seconds(Utc::now())),
        };

        let config = GatewayConfig {
            gate_id: spec.gate_id.clone(),
            network_id: spec.network_id.clone(),
            bearer_token: spec.bearer_token.clone(),
            cloud_broker: Some(cloud_addr),
            throughput_window_s: spec.throughput_window_s,
            ..GatewayConfig::ephemeral()
        };
        let gw = Gateway::new(config, Arc::clone(&clock))?;
        let events = gw.subscribe_events();
        let running = gateway::start(gw).await?;

        let nodes = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, desc)| {
                let stats = Arc::new(NodeStats::default());
                let ctx = NodeContext {
                    gateway: running.addrs(),
                    clock: Arc::clone(&clock),
                    start,
                    seed: spec.seed.wrapping_add(i as u64),
                    calibration: spec.calibration,
                };
                let task = tokio::spawn(run_node(desc.clone(), ctx, Arc::clone(&stats)));
                SimNode { node_id: desc.node_id.clone(), stats, task }
            })
            .collect();

        let mut actions: Vec<_> = spec.actions.clone();
        actions.sort_by_key(|a| a.at_s);
        let window = Duration::milliseconds((spec.throughput_window_s * 1000.0).round() as i64);
        let mut run = Self {
            end: start + Duration::seconds(spec.duration_s as i64),
            spec,
            mode,
            virtual_clock,
            clock,
            start,
            window,
            next_sample: 1,
            actions: actions.into(),
            throughput: Vec::new(),
            alarms: Vec::new(),
            events,
            collected,
            collector,
            nodes,
            gateway: running,
            cloud,
        };

        let deadline = Instant::now() + STARTUP_TIMEOUT;
        while !run.nodes.iter().all(|n| n.stats.is_ready()) {
            run.check_nodes().await?;
            if Instant::now() > deadline {
                let waiting: Vec<_> = run.nodes.iter().filter(|n| !n.stats.is_ready()).map(|n| n.node_id.clone()).collect();
                return Err(ScenarioError::Timeout(format!("nodes never configured: {waiting:?}")));
            }
            tokio::time::sleep(StdDuration::from_millis(1)).await;
        }
        Ok(run)
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        self.gateway.gateway()
    }

    pub fn api_base(&self) -> String {
        format!("http://{}", self.gateway.addrs().api)
    }

    pub fn bearer_token(&self) -> &str {
        &self.spec.bearer_token
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn node_stats(&self, node_id: &str) -> Option<&Arc<NodeStats>> {
        self.nodes.iter().find(|n| n.node_id == node_id).map(|n| &n.stats)
    }

    async fn check_nodes(&mut self) -> Result<(), ScenarioError> {
        for n in &mut self.nodes {
            if n.task.is_finished() {
                let error = match (&mut n.task).await {
                    Ok(Ok(())) => "stopped".to_string(),
                    Ok(Err(e)) => e.to_string(),
                    Err(e) => e.to_string(),
                };
                return Err(ScenarioError::Node { node_id: n.node_id.clone(), error });
            }
        }
        Ok(())
    }

    fn drain_events(&mut self) {
        loop {
            match self.events.try_recv() {
                Ok(GatewayEvent::Alarm(a)) => self.alarms.push(a),
                Ok(_) => {}
                Err(broadcast::error::TryRecvError::Lagged(n)) => {
                    tracing::warn!("scenario event monitor skipped {n} events");
                }
                Err(_) => break,
            }
        }
    }

    fn converged(&self) -> bool {
        let gw = self.gateway();
        self.nodes
            .iter()
            .all(|n| n.stats.config_revision() >= gw.node(&n.node_id).map_or(0, |s| s.revision))
    }

    /// Virtual mode: waits for quiescence. Real mode: only for config
    /// convergence.
    async fn settle(&mut self) -> Result<(), ScenarioError> {
        let deadline = Instant::now() + SETTLE_TIMEOUT;
        let mut spins = 0u32;
        loop {
            self.check_nodes().await?;
            let sent: u64 = self.nodes.iter().map(|n| n.stats.frames_sent()).sum();
            let processed = self.gateway().counters().frames_processed;
            let quiet = match &self.virtual_clock {
                Some(vc) => vc.pending_timers() == self.nodes.len() && processed >= sent,
                None => true,
            };
            if quiet && self.converged() {
                self.drain_events();
                return Ok(());
            }
            if Instant::now() > deadline {
                let pending = self.virtual_clock.as_ref().map(|vc| vc.pending_timers());
                return Err(ScenarioError::Timeout(format!(
                    "system never settled: sent {sent}, processed {processed}, pending timers {pending:?}"
                )));
            }
            spins += 1;
            if spins < 200 {
                tokio::task::yield_now().await;
            } else {
                tokio::time::sleep(StdDuration::from_micros(200)).await;
            }
        }
    }

    fn sample_time(&self, k: u64) -> DateTime<Utc> {
        self.start + self.window * k as i32
    }

    fn take_samples(&mut self, now: DateTime<Utc>) {
        while self.sample_time(self.next_sample) <= now && self.sample_time(self.next_sample) < self.end {
            let at = self.sample_time(self.next_sample);
            let gw = Arc::clone(self.gateway());
            let w = self.spec.throughput_window_s;
            for p in ProtocolId::ALL {
                self.throughput.push(ThroughputPoint { timestamp: at, protocol: p, node: AGGREGATE_NODE.into(), kbps: gw.throughput(p, None, w) });
                for n in &self.spec.nodes {
                    self.throughput.push(ThroughputPoint {
                        timestamp: at,
                        protocol: p,
                        node: n.node_id.clone(),
                        kbps: gw.throughput(p, Some(&n.node_id), w),
                    });
                }
            }
            self.next_sample += 1;
        }
    }

    fn apply_action(&self, action: &Action) -> Result<(), ScenarioError> {
        let gw = self.gateway();
        let failed = |e: gateway::GatewayError| ScenarioError::Action(e.to_string());
        match action {
            Action::SetInterval { node_id, seconds } => gw.set_capture_interval(node_id, *seconds).map(drop).map_err(failed),
            Action::AssignProtocol { node_id, sensor_id, protocol } => {
                gw.assign_protocol(node_id, sensor_id, *protocol).map(drop).map_err(failed)
            }
            Action::AddAlarm { rule } => gw.add_alarm(rule.clone()).map(drop).map_err(failed),
            Action::RemoveAlarm { rule_id } => gw.remove_alarm(rule_id).map(drop).map_err(failed),
            Action::ForceValue { node_id, sensor_id, value } => {
                let stats = self
                    .node_stats(node_id)
                    .ok_or_else(|| ScenarioError::Action(format!("unknown node {node_id:?}")))?;
                stats.force_value(sensor_id, *value);
                Ok(())
            }
        }
    }

    /// Processes every instant up to and including `offset_s` seconds into
    /// the run (never the end instant itself, which is excluded from the
    /// run). Scheduled actions fire after that instant's captures.
    pub async fn run_until(&mut self, offset_s: f64) -> Result<(), ScenarioError> {
        let target = (self.start + Duration::milliseconds((offset_s * 1000.0).round() as i64)).min(self.end);
        loop {
            self.settle().await?;
            let now = self.clock.now();
            self.take_samples(now);
            let mut acted = false;
            while self.actions.front().is_some_and(|a| self.start + Duration::seconds(a.at_s as i64) <= now) {
                let a = self.actions.pop_front().expect("checked");
                self.apply_action(&a.action)?;
                acted = true;
            }
            if acted {
                continue;
            }
            self.drain_events();

            let mut next = self.sample_time(self.next_sample);
            if let Some(a) = self.actions.front() {
                next = next.min(self.start + Duration::seconds(a.at_s as i64));
            }
            if let Some(vc) = &self.virtual_clock {
                if let Some(d) = vc.next_deadline() {
                    next = next.min(d);
                }
            }
            if next > target || next >= self.end {
                return Ok(());
            }
            match &self.virtual_clock {
                Some(vc) => vc.advance_to(next),
                None => self.clock.sleep_until(next).await,
            }
        }
    }

    /// Runs to the end, drains the uplink, stops everything and reports.
    pub async fn finish(mut self) -> Result<ScenarioReport, ScenarioError> {
        self.run_until(self.spec.duration_s as f64).await?;
        if self.mode == ClockMode::Real {
            self.clock.sleep_until(self.end).await;
        }
        for n in &self.nodes {
            n.task.abort();
        }

        // Everything ingested has to make it through the uplink.
        let deadline = Instant::now() + SETTLE_TIMEOUT;
        loop {
            let c = self.gateway().counters();
            let received = self.collected.lock().unwrap().len() as u64;
            let uplink_done = c.uplink_acked + c.uplink_dropped >= c.uplink_published;
            if uplink_done && received >= c.uplink_acked {
                break;
            }
            if Instant::now() > deadline {
                return Err(ScenarioError::Timeout(format!(
                    "uplink never drained: published {}, acked {}, received {received}",
                    c.uplink_published, c.uplink_acked
                )));
            }
            tokio::time::sleep(StdDuration::from_millis(1)).await;
        }
        self.drain_events();
        let report = self.report();
        self.collector.abort();
        self.cloud.shutdown();
        Ok(report)
    }

    fn report(&self) -> ScenarioReport {
        let c = self.gateway().counters();
        let collected = self.collected.lock().unwrap().clone();

        let mut by_series: BTreeMap<(String, String), Trace> = BTreeMap::new();
        let mut readings: BTreeMap<(ProtocolId, String), u64> = BTreeMap::new();
        for r in &collected {
            *readings.entry((r.protocol(), r.node_id().to_string())).or_default() += 1;
            by_series
                .entry((r.node_id().to_string(), r.sensor_id().to_string()))
                .or_insert_with(|| Trace {
                    node_id: r.node_id().to_string(),
                    sensor_id: r.sensor_id().to_string(),
                    magnitude: r.magnitude(),
                    points: Vec::new(),
                })
                .points
                .push(TracePoint { date: r.date(), value: r.value(), protocol: r.protocol() });
        }
        let mut traces: Vec<Trace> = by_series.into_values().collect();
        for t in &mut traces {
            t.points.sort_by_key(|p| p.date);
        }

        let mut counts = Vec::new();
        for p in ProtocolId::ALL {
            for n in &self.nodes {
                counts.push(CountRow {
                    protocol: p,
                    node_id: n.node_id.clone(),
                    readings: readings.get(&(p, n.node_id.clone())).copied().unwrap_or(0),
                    sent: n.stats.traffic().get(&p).copied().unwrap_or_default(),
                });
            }
        }

        let mut alarms = self.alarms.clone();
        alarms.sort_by(|a, b| {
            (a.date, &a.node_id, &a.sensor_id, &a.rule_id).cmp(&(b.date, &b.node_id, &b.sensor_id, &b.rule_id))
        });

        ScenarioReport {
            duration_s: self.spec.duration_s,
            seed: self.spec.seed,
            clock: self.mode,
            throughput_window_s: self.spec.throughput_window_s,
            nodes: self.nodes.iter().map(|n| n.node_id.clone()).collect(),
            totals: Totals {
                frames_sent: self.nodes.iter().map(|n| n.stats.frames_sent()).sum(),
                frames_processed: c.frames_processed,
                readings_persisted: c.readings_persisted,
                uplink_published: c.uplink_published,
                cloud_received: collected.len() as u64,
                errors: c.errors.total(),
                alarms: alarms.len() as u64,
            },
            counts,
            throughput: self.throughput.clone(),
            traces,
            alarms,
        }
    }
}

impl Drop for ScenarioRun {
    fn drop(&mut self) {
        for n in &self.nodes {
            n.task.abort();
        }
        self.collector.abort();
    }
}
