use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::build::{filler_profile, space_schema};
use super::{build_world, QuerySetup, SimConfig, SimError, SimWorld, HIT};
use crate::engine::{PhaseTiming, QUERY_PHASES, REGISTRATION_PHASES};
use crate::model::{AttributeValue, PeerId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub query_id: u64,
    pub recall: f64,
    pub response_time: u64,
    pub phases: PhaseTiming,
    /// Peer-to-peer request deliveries.
    pub message_count: usize,
    pub reached_count: usize,
    pub qualifying_count: usize,
    pub entry: Option<PeerId>,
    pub reached: BTreeSet<PeerId>,
    pub responding: BTreeSet<PeerId>,
    pub qualifying: BTreeSet<PeerId>,
    /// Σ cluster degree over the reached peers.
    pub degree_sum: usize,
}

/// Brute-force scan of the query cluster's live members: which of them
/// hold the hit value, read straight from their data providers.
pub fn qualifying_oracle(world: &SimWorld, setup: &QuerySetup) -> BTreeSet<PeerId> {
    let hit = AttributeValue::text(HIT);
    setup
        .members
        .iter()
        .filter(|p| !world.departed.contains(p))
        .filter_map(|p| world.psgs.get(p))
        .filter(|psg| {
            let local = psg
                .mapping
                .as_ref()
                .and_then(|m| m.local_name(&setup.attribute))
                .unwrap_or(&setup.attribute);
            psg.profile.value_at(local, world.clock) == Some(hit.clone())
        })
        .map(|psg| psg.id)
        .collect()
}

fn recall_of(responding: &BTreeSet<PeerId>, qualifying: &BTreeSet<PeerId>) -> f64 {
    if qualifying.is_empty() {
        1.0
    } else {
        responding.intersection(qualifying).count() as f64 / qualifying.len() as f64
    }
}

/// Issues the world's query at `ttl`, runs it to collector close and scores
/// it against the oracle.
pub fn run_query_experiment(world: &mut SimWorld, setup: &QuerySetup, ttl: u32) -> Result<Metrics, SimError> {
    let qualifying = qualifying_oracle(world, setup);
    let qid = world.issue_query(&setup.text, ttl)?;
    world.run_until_closed(qid)?;
    let collector = &world.server.collectors[&qid];
    let responding = collector.responders();
    let entry = collector.entry.as_ref().map(|(_, head)| *head);
    let phases = world
        .query_timing(qid)
        .ok_or_else(|| SimError::Invariant(format!("query {qid} has no timing")))?;
    let track = &world.queries[&qid];
    let cluster = world
        .server
        .rings
        .get(&setup.domain)
        .and_then(|r| r.cluster(&setup.attribute));
    let degree_sum = cluster.map_or(0, |c| track.reached.iter().map(|p| c.degree(*p)).sum());
    Ok(Metrics {
        query_id: qid,
        recall: recall_of(&responding, &qualifying),
        response_time: phases.total(),
        phases,
        message_count: track.messages,
        reached_count: track.reached.len(),
        qualifying_count: qualifying.len(),
        entry,
        reached: track.reached.clone(),
        responding,
        qualifying,
        degree_sum,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtlRow {
    pub ttl: u32,
    pub mean_recall: f64,
    pub stdev: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtlSweep {
    pub rows: Vec<TtlRow>,
    /// Per run: its seed and the recall at each ttl, in row order.
    pub per_run: Vec<(u64, Vec<f64>)>,
    pub trace_digests: Vec<String>,
}

/// Recall against ttl. Run `r` builds one world from seed `config.seed + r`
/// and issues the query once per ttl on it.
pub fn sweep_ttl(config: &SimConfig, ttls: &[u32], runs: usize) -> Result<TtlSweep, SimError> {
    config.validate()?;
    let mut ttls = ttls.to_vec();
    ttls.sort_unstable();
    ttls.dedup();
    let per_run: Vec<(u64, Vec<f64>, String)> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(r);
            let (mut world, setup) = build_world(config, seed)?;
            let recalls = ttls
                .iter()
                .map(|t| run_query_experiment(&mut world, &setup, *t).map(|m| m.recall))
                .collect::<Result<Vec<f64>, SimError>>()?;
            Ok((seed, recalls, world.trace_digest()))
        })
        .collect::<Result<_, SimError>>()?;
    let rows = ttls
        .iter()
        .enumerate()
        .map(|(i, ttl)| {
            let xs: Vec<f64> = per_run.iter().map(|(_, r, _)| r[i]).collect();
            let (mean_recall, stdev) = mean_stdev(&xs);
            TtlRow {
                ttl: *ttl,
                mean_recall,
                stdev,
                runs: xs.len(),
            }
        })
        .collect();
    Ok(TtlSweep {
        rows,
        trace_digests: per_run.iter().map(|(_, _, d)| d.clone()).collect(),
        per_run: per_run.into_iter().map(|(s, r, _)| (s, r)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub mean_response_ms: f64,
    pub stdev: f64,
    pub runs: usize,
    pub mean_recall: f64,
    pub min_recall: f64,
    pub trace_digests: Vec<String>,
}

/// Response time against cluster size. Every size uses the same run seeds.
pub fn sweep_size(config: &SimConfig, sizes: &[usize], ttl: u32, runs: usize) -> Result<Vec<SizeRow>, SimError> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let jobs: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|s| (0..runs as u64).map(move |r| (*s, r)))
        .collect();
    let results: Vec<(usize, Metrics, String)> = jobs
        .into_par_iter()
        .map(|(size, r)| {
            let cfg = SimConfig {
                spaces_per_run: size,
                ..config.clone()
            };
            let (mut world, setup) = build_world(&cfg, config.seed.wrapping_add(r))?;
            let m = run_query_experiment(&mut world, &setup, ttl)?;
            Ok((size, m, world.trace_digest()))
        })
        .collect::<Result<_, SimError>>()?;
    Ok(sizes
        .iter()
        .map(|size| {
            let mine: Vec<&(usize, Metrics, String)> = results.iter().filter(|(s, _, _)| s == size).collect();
            let times: Vec<f64> = mine.iter().map(|(_, m, _)| m.response_time as f64).collect();
            let recalls: Vec<f64> = mine.iter().map(|(_, m, _)| m.recall).collect();
            let (mean_response_ms, stdev) = mean_stdev(&times);
            SizeRow {
                size: *size,
                mean_response_ms,
                stdev,
                runs: times.len(),
                mean_recall: mean_stdev(&recalls).0,
                min_recall: recalls.iter().copied().fold(1.0, f64::min),
                trace_digests: mine.iter().map(|(_, _, d)| d.clone()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: String,
    pub mean_ms: f64,
}

fn mean_phases(labels: &[&str], timings: &[PhaseTiming]) -> Vec<PhaseRow> {
    labels
        .iter()
        .map(|l| {
            let xs: Vec<f64> = timings.iter().map(|t| t.get(l).unwrap_or(0) as f64).collect();
            PhaseRow {
                phase: l.to_string(),
                mean_ms: mean_stdev(&xs).0,
            }
        })
        .collect()
}

/// Registers `runs` fresh spaces, one after another, into a world built
/// from `config` and averages their four registration phases.
pub fn registration_breakdown(config: &SimConfig, runs: usize) -> Result<(Vec<PhaseRow>, String), SimError> {
    let (mut world, setup) = build_world(config, config.seed)?;
    let mut timings = Vec::with_capacity(runs);
    for i in 0..runs {
        let schema = space_schema(&setup.domain, Some(&setup.attribute), config, &mut world.rngs.data);
        let profile = filler_profile(format!("fresh-{i:04}"), schema);
        let (_, timing) = world.register_via_network(profile)?;
        timings.push(timing);
    }
    Ok((mean_phases(&REGISTRATION_PHASES, &timings), world.trace_digest()))
}

/// Query phase means over `runs` seeded worlds at the config's ttl.
pub fn query_breakdown(config: &SimConfig, runs: usize) -> Result<Vec<PhaseRow>, SimError> {
    let timings = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let (mut world, setup) = build_world(config, config.seed.wrapping_add(r))?;
            Ok(run_query_experiment(&mut world, &setup, config.ttl)?.phases)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(mean_phases(&QUERY_PHASES, &timings))
}

fn fmt_ms(x: f64) -> String {
    format!("{}", (x * 1000.0).round() / 1000.0)
}

pub fn fig3_csv(rows: &[PhaseRow]) -> String {
    let mut out = String::from("phase,sim_ms\n");
    for r in rows {
        writeln!(out, "{},{}", r.phase, fmt_ms(r.mean_ms)).expect("string write");
    }
    out
}

pub fn fig5_csv(rows: &[TtlRow]) -> String {
    let mut out = String::from("ttl,mean_recall,stdev,runs\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{}", r.ttl, r.mean_recall, r.stdev, r.runs).expect("string write");
    }
    out
}

pub fn fig6_csv(rows: &[SizeRow]) -> String {
    let mut out = String::from("size,mean_response_ms,stdev,runs\n");
    for r in rows {
        writeln!(out, "{},{:.3},{:.3},{}", r.size, r.mean_response_ms, r.stdev, r.runs).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    pub departed: Vec<PeerId>,
    pub head_before: Option<PeerId>,
    pub head_after: Option<PeerId>,
    pub survivors: usize,
    /// Connected components of the query cluster after repair.
    pub components: usize,
    pub violations: Vec<String>,
    pub metrics: Metrics,
}

impl ChurnReport {
    pub fn connected(&self) -> bool {
        self.components <= 1
    }
}

/// Silently removes `fraction` of the query cluster (its head first), lets
/// ping-based failure detection purge them, then checks the overlay and
/// runs the query over the survivors.
pub fn churn_experiment(config: &SimConfig, seed: u64, fraction: f64, ttl: u32) -> Result<ChurnReport, SimError> {
    let (mut world, setup) = build_world(config, seed)?;
    let cluster_of = |w: &SimWorld| w.server.rings.get(&setup.domain).and_then(|r| r.cluster(&setup.attribute)).cloned();
    let head_before = cluster_of(&world).and_then(|c| c.head);

    let n = setup.members.len();
    let leaving = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut departed: Vec<PeerId> = head_before.into_iter().collect();
    let rest: Vec<PeerId> = setup.members.iter().copied().filter(|p| Some(*p) != head_before).collect();
    let extra = leaving.saturating_sub(departed.len()).min(rest.len());
    departed.extend(sample(&mut world.rngs.workload, rest.len(), extra).into_iter().map(|i| rest[i]));
    departed.sort();

    let start = world.clock;
    world.start_liveness();
    for p in &departed {
        world.schedule_departure(*p, start + 1);
    }
    let period = world.config.ping_period_ms;
    let settle = start + 1 + (world.config.ping_max_missed + 2) * period + 4 * world.config.latency_max_ms;
    world.run_until(settle)?;

    let mut violations = Vec::new();
    if let Err(e) = world.server.check_invariants() {
        violations.push(e);
    }
    let gone: BTreeSet<PeerId> = departed.iter().copied().collect();
    for ring in world.server.rings.values() {
        let still: Vec<PeerId> = ring.members().into_iter().filter(|p| gone.contains(p)).collect();
        if !still.is_empty() {
            violations.push(format!("ring {} still lists departed {:?}", ring.domain, still));
        }
        for (i, cluster) in ring.clusters.iter().enumerate() {
            let key = ring.key(&cluster.attribute);
            for p in &cluster.members {
                let Some(psg) = world.psgs.get(p) else { continue };
                let server_view: BTreeSet<PeerId> = cluster.neighbors(*p).collect();
                let local_view = psg.overlay.neighbors.get(&key).cloned().unwrap_or_default();
                if server_view != local_view {
                    violations.push(format!("cluster #{i} {key}: {p} sees {local_view:?}, server has {server_view:?}"));
                }
            }
        }
    }
    for psg in world.live_peers() {
        if psg.overlay.all_neighbors().iter().any(|n| gone.contains(n)) {
            violations.push(format!("{} still links to a departed peer", psg.id));
        }
    }

    let cluster = cluster_of(&world);
    let head_after = cluster.as_ref().and_then(|c| c.head);
    let components = cluster.as_ref().map_or(0, |c| c.components().len());
    let survivors = cluster.as_ref().map_or(0, |c| c.len());
    let metrics = run_query_experiment(&mut world, &setup, ttl)?;
    Ok(ChurnReport {
        departed,
        head_before,
        head_after,
        survivors,
        components,
        violations,
        metrics,
    })
}
