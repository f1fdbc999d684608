use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cql::{parse, validate};
use crate::matcher::{CriterionId, Decision, MatchError};
use crate::model::xml::render_template;
use crate::model::{AttributeDef, AttributeValue, CompareOp, DataSource, GlobalSchema, LocalSchema, ValueKind};
use crate::model::{Atom, SpaceProfile};
use crate::overlay::{bfs_reachable, LookupRequest};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn text_schema(domain: &str, attrs: &[&str]) -> LocalSchema {
    LocalSchema::new(domain, attrs.iter().map(|a| AttributeDef::new(*a, ValueKind::Text)).collect())
}

fn pool(prefix: &str, idx: impl IntoIterator<Item = usize>) -> Vec<String> {
    idx.into_iter().map(|i| format!("{prefix}_a{i:02}")).collect()
}

fn schema_of(domain: &str, attrs: &[String]) -> LocalSchema {
    LocalSchema::new(domain, attrs.iter().map(|a| AttributeDef::new(a.clone(), ValueKind::Text)).collect())
}

fn typed(server: &ServerState, text: &str) -> crate::cql::TypedQuery {
    validate(&parse(text).unwrap(), server.globals.values()).unwrap()
}

fn globals_of(server: &ServerState) -> Vec<&GlobalSchema> {
    server.globals.values().collect()
}

// ---- planning ----

fn person_server() -> ServerState {
    let mut s = ServerState::default();
    let local = LocalSchema::new(
        "PERSON",
        vec![
            AttributeDef::new("name", ValueKind::Text),
            AttributeDef::new("location", ValueKind::Text),
            AttributeDef::new("friend_list", ValueKind::ListOfText),
        ],
    );
    s.register_schema(local, "psg://keith", &mut rng(0)).unwrap();
    s
}

#[test]
fn plan_of_query_one() {
    let s = person_server();
    let p = plan(&typed(&s, "SELECT friend_list FROM PERSON WHERE name = \"Keith\""));
    assert_eq!(p.to_string(), "Project[friend_list] -> Scan(PERSON, name = \"Keith\", ttl=8)");
    let scan = p.scan();
    assert_eq!(scan.ttl, 8);
    assert_eq!(scan.mode, LookupMode::OneShot);
    assert_eq!(p.scans().len(), 1);
    // Selection lives in the scan only.
    match &p.root {
        PlanNode::Project { input, .. } => assert!(matches!(**input, PlanNode::Scan(_))),
        PlanNode::Scan(_) => panic!("root must project"),
    }
}

#[test]
fn plan_without_where_is_trivially_true() {
    let s = person_server();
    let p = plan(&typed(&s, "SELECT name FROM PERSON"));
    assert!(p.scan().predicate.is_trivial());
    assert_eq!(p.to_string(), "Project[name] -> Scan(PERSON, true, ttl=8)");
}

#[test]
fn plan_of_query_three_carries_job() {
    let s = person_server();
    let p = plan(&typed(
        &s,
        "SELECT CONT location FROM PERSON WHERE name = \"Keith\" SAMPLE PERIOD 1 min LIFETIME 2 hours",
    ));
    assert_eq!(
        p.scan().mode,
        LookupMode::Continuous {
            sample_period_ms: 60_000,
            lifetime_ms: 7_200_000
        }
    );
    assert_eq!(expected_samples(60_000, 7_200_000), 121);
}

#[test]
fn phase_timing_from_marks() {
    let t = PhaseTiming::from_marks(&REGISTRATION_PHASES, &[0, 12, 42, 55, 80]);
    assert_eq!(t.get("schema_matching"), Some(30));
    assert_eq!(t.total(), 80);
    assert_eq!(
        t.to_csv(),
        "phase,sim_ms\nregistration_request,12\nschema_matching,30\nreturn_sc_list,13\np2p_connection_establishment,25\n"
    );
}

// ---- registration ----

#[test]
fn first_space_bootstraps_domain_and_ring() {
    let mut s = ServerState::default();
    let attrs = pool("shop", 0..30);
    let reg = s.register_schema(schema_of("SHOP", &attrs), "psg://1", &mut rng(1)).unwrap();
    assert!(reg.created_domain);
    assert_eq!(reg.ack.sc_list.len(), 30);
    assert!(reg.ack.sc_list.iter().all(|e| e.head == reg.ack.peer));
    assert!(reg.ack.neighbors.iter().all(|(_, n)| n.is_empty()));
    assert_eq!(s.rings["SHOP"].clusters.len(), 30);
    s.check_invariants().unwrap();
}

#[test]
fn second_space_joins_shared_and_new_clusters() {
    let mut s = ServerState::default();
    let first = pool("shop", 0..30);
    let second = pool("shop", 5..35);
    s.register_schema(schema_of("SHOP", &first), "psg://1", &mut rng(1)).unwrap();
    let reg = s.register_schema(schema_of("SHOP", &second), "psg://2", &mut rng(2)).unwrap();
    let a: BTreeSet<&String> = first.iter().collect();
    let b: BTreeSet<&String> = second.iter().collect();
    let shared = a.intersection(&b).count();
    let fresh = b.difference(&a).count();
    assert_eq!((shared, fresh), (25, 5));
    let p2 = reg.ack.peer;
    let ring = &s.rings["SHOP"];
    let existing = ring.clusters.iter().filter(|c| c.members.len() == 2).count();
    let new_only = ring
        .clusters
        .iter()
        .filter(|c| c.members.len() == 1 && c.head == Some(p2))
        .count();
    assert_eq!((existing, new_only), (shared, fresh));
    assert_eq!(ring.clusters.len(), 35);
    assert_eq!(s.globals["SHOP"].member_count, 2);
    s.check_invariants().unwrap();
}

fn home_schema() -> LocalSchema {
    LocalSchema::new(
        "HOME",
        vec![
            AttributeDef::new("address", ValueKind::Text),
            AttributeDef::new("temperature", ValueKind::Number),
            AttributeDef::new("light", ValueKind::Number),
            AttributeDef::event("isVacant"),
        ],
    )
}

fn house_schema() -> LocalSchema {
    LocalSchema::new(
        "HOUSE",
        vec![
            AttributeDef::new("addr", ValueKind::Text),
            AttributeDef::new("temperatures", ValueKind::Number),
            AttributeDef::new("light", ValueKind::Number),
            AttributeDef::event("isEmpty"),
        ],
    )
}

#[test]
fn house_integrates_into_home_ring() {
    let mut s = ServerState::default();
    s.register_schema(home_schema(), "psg://home", &mut rng(1)).unwrap();
    let reg = s.register_schema(house_schema(), "psg://house", &mut rng(2)).unwrap();
    assert!(!reg.created_domain);
    assert!(!s.globals.contains_key("HOUSE"));
    let m = &reg.ack.mapping;
    assert_eq!(m.global_domain, "HOME");
    assert_eq!(m.local_domain, "HOUSE");
    assert_eq!(m.local_name("address"), Some("addr"));
    assert_eq!(m.local_name("temperature"), Some("temperatures"));
    assert_eq!(m.local_name("isVacant"), Some("isEmpty"));
    // light matched exactly, the other three wait for review
    assert_eq!(reg.review_ids.len(), 3);
    assert_eq!(s.rings["HOME"].clusters.len(), 4);
    assert!(s.rings["HOME"].clusters.iter().all(|c| c.members.len() == 2));
    s.check_invariants().unwrap();
}

#[test]
fn malformed_template_registers_nothing() {
    let mut s = ServerState::default();
    let err = s.register_space("<schema domain=\"X\"><bogus/></schema>", "psg://x", &mut rng(0));
    assert!(matches!(err, Err(EngineError::Template(_))));
    let err = s.register_space("<schema", "psg://x", &mut rng(0));
    assert!(matches!(err, Err(EngineError::Template(_))));
    assert!(s.peers.is_empty() && s.globals.is_empty() && s.rings.is_empty());
}

#[test]
fn template_round_trip_through_registration() {
    let mut s = ServerState::default();
    let xml = render_template(&home_schema());
    let reg = s.register_space(&xml, "psg://home", &mut rng(0)).unwrap();
    assert_eq!(s.peers[&reg.ack.peer].local, home_schema());
}

#[test]
fn identical_reregistration_changes_nothing() {
    let mut s = ServerState::default();
    let mut r = rng(5);
    for i in 0..6 {
        let attrs = pool("shop", i..i + 10);
        s.register_schema(schema_of("SHOP", &attrs), &format!("psg://{i}"), &mut r).unwrap();
    }
    let (globals, rings) = (s.globals.clone(), s.rings.clone());
    let again = s
        .register_schema(schema_of("SHOP", &pool("shop", 2..12)), "psg://2", &mut r)
        .unwrap();
    assert!(again.unchanged);
    assert_eq!(s.globals, globals);
    assert_eq!(s.rings, rings);
}

// ---- updates ----

#[test]
fn update_adding_one_attribute_joins_one_cluster() {
    let mut s = ServerState::default();
    let reg = s.register_schema(home_schema(), "psg://h", &mut rng(0)).unwrap();
    let mut v2 = home_schema();
    v2.attributes.push(AttributeDef::new("humidity", ValueKind::Number));
    let rep = s.update_schema_local(reg.ack.peer, v2, &mut rng(1)).unwrap();
    assert_eq!(rep.added, [("humidity".to_string(), "humidity".to_string())]);
    assert_eq!(rep.joined.len(), 1);
    assert!(rep.left.is_empty());
    s.check_invariants().unwrap();
}

#[test]
fn update_removing_everything_keeps_registration() {
    let mut s = ServerState::default();
    let reg = s.register_schema(home_schema(), "psg://h", &mut rng(0)).unwrap();
    let rep = s
        .update_schema_local(reg.ack.peer, LocalSchema::new("HOME", vec![]), &mut rng(1))
        .unwrap();
    assert_eq!(rep.left.len(), 4);
    assert!(s.peers.contains_key(&reg.ack.peer));
    assert!(s.rings["HOME"].members().is_empty());
    s.check_invariants().unwrap();
}

#[test]
fn update_of_unknown_peer_fails() {
    let mut s = ServerState::default();
    let err = s.update_schema_local(PeerId(9), home_schema(), &mut rng(0)).unwrap_err();
    assert_eq!(err, EngineError::UnknownPeer(PeerId(9)));
}

#[test]
fn incremental_rename_equals_fresh_registration() {
    // Two servers share a history; in one the last peer registers v1 and
    // renames an attribute, in the other it registers v2 straight away.
    let background: Vec<Vec<String>> = (0..5).map(|i| pool("home", i..i + 8)).collect();
    let v1 = pool("home", [0, 1, 2, 3, 4, 5]);
    let mut v2 = pool("home", [0, 1, 2, 3, 4]);
    v2.push("home_a09".into());

    let build = || {
        let mut s = ServerState::default();
        let mut r = rng(11);
        for (i, attrs) in background.iter().enumerate() {
            s.register_schema(schema_of("HOME", attrs), &format!("psg://bg{i}"), &mut r).unwrap();
        }
        s
    };
    let mut inc = build();
    let peer = inc.register_schema(schema_of("HOME", &v1), "psg://x", &mut rng(1)).unwrap().ack.peer;
    let rep = inc.update_schema_local(peer, schema_of("HOME", &v2), &mut rng(2)).unwrap();
    assert_eq!(rep.removed, ["home_a05"]);
    assert_eq!(rep.left, ["home_a05"]);

    let mut fresh = build();
    let peer2 = fresh.register_schema(schema_of("HOME", &v2), "psg://x", &mut rng(3)).unwrap().ack.peer;
    assert_eq!(peer, peer2);
    assert_eq!(inc.peers[&peer].mapping, fresh.peers[&peer].mapping);
    assert_eq!(inc.globals, fresh.globals);
    let clusters = |s: &ServerState| -> Vec<(String, BTreeSet<PeerId>)> {
        s.rings["HOME"].clusters.iter().map(|c| (c.attribute.clone(), c.members.clone())).collect()
    };
    assert_eq!(clusters(&inc), clusters(&fresh));
    inc.check_invariants().unwrap();
}

// ---- review ----

#[test]
fn confirming_everything_keeps_provisional_mapping() {
    let mut s = ServerState::default();
    s.register_schema(home_schema(), "psg://home", &mut rng(1)).unwrap();
    let reg = s.register_schema(house_schema(), "psg://house", &mut rng(2)).unwrap();
    let before = s.peers[&reg.ack.peer].mapping.clone();
    for id in &reg.review_ids {
        let out = s.review(*id, Decision::Confirm, &mut rng(3)).unwrap();
        assert!(out.mapping.is_none());
    }
    assert!(s.matcher.queue.is_empty());
    assert_eq!(s.peers[&reg.ack.peer].mapping, before);
    assert_eq!(s.matcher.criterion(CriterionId::Substring).weight_ratio(), (2, 3));
}

#[test]
fn rejecting_moves_the_attribute_to_its_own_cluster() {
    let mut s = ServerState::default();
    s.register_schema(home_schema(), "psg://home", &mut rng(1)).unwrap();
    let reg = s.register_schema(house_schema(), "psg://house", &mut rng(2)).unwrap();
    let peer = reg.ack.peer;
    let id = s
        .matcher
        .queue
        .iter()
        .find(|i| i.candidate.local_name == "addr")
        .unwrap()
        .id;
    let out = s.review(id, Decision::Reject, &mut rng(3)).unwrap();
    let m = out.mapping.unwrap();
    assert_eq!(m.global_name("addr"), Some("addr"));
    assert_eq!(out.left, ["address"]);
    assert_eq!(out.joined[0].attribute, "addr");
    assert!(!s.rings["HOME"].cluster("address").unwrap().members.contains(&peer));
    assert_eq!(s.rings["HOME"].cluster("addr").unwrap().head, Some(peer));
    s.check_invariants().unwrap();
}

#[test]
fn second_confirm_for_same_global_is_refused() {
    let mut s = ServerState::default();
    s.register_schema(home_schema(), "psg://home", &mut rng(1)).unwrap();
    let twin = LocalSchema::new(
        "HOME",
        vec![
            AttributeDef::new("addr", ValueKind::Text),
            AttributeDef::new("addresses", ValueKind::Text),
            AttributeDef::new("light", ValueKind::Number),
            AttributeDef::new("temperature", ValueKind::Number),
        ],
    );
    let reg = s.register_schema(twin, "psg://twin", &mut rng(2)).unwrap();
    assert_eq!(reg.review_ids.len(), 2);
    let items: Vec<_> = reg.review_ids.iter().map(|id| s.matcher.pending(*id).unwrap().clone()).collect();
    let (first, second) = if items[0].conflict { (&items[1], &items[0]) } else { (&items[0], &items[1]) };
    assert!(!first.conflict && second.conflict);
    assert_eq!(first.candidate.global_name, second.candidate.global_name);

    s.review(first.id, Decision::Confirm, &mut rng(3)).unwrap();
    let err = s.review(second.id, Decision::Confirm, &mut rng(3)).unwrap_err();
    assert!(matches!(err, EngineError::Match(MatchError::Conflict { .. })));
    assert!(s.matcher.pending(second.id).is_some(), "refused decision stays queued");
    s.review(second.id, Decision::Reject, &mut rng(3)).unwrap();
    s.check_invariants().unwrap();
}

// ---- gateway evaluation ----

fn office(vacant: bool, private_location: bool) -> PsgState {
    let mut loc = AttributeDef::new("location", ValueKind::Text);
    loc.is_private = private_location;
    let schema = LocalSchema::new(
        "OFFICE",
        vec![loc, AttributeDef::new("occupancy", ValueKind::Number), AttributeDef::event("isVacant")],
    );
    let profile = SpaceProfile::new("psg://office", schema)
        .with_value("location", AttributeValue::text("S14 #06-20, NUS"))
        .with_value("occupancy", AttributeValue::Number(if vacant { 0.0 } else { 3.0 }))
        .with_rule(
            "isVacant",
            Predicate::single(Atom::new("occupancy", CompareOp::Eq, AttributeValue::Number(0.0))),
        );
    let mut psg = PsgState::new(PeerId(1), profile.clone());
    psg.mapping = Some(crate::matcher::SchemaMapping::identity(PeerId(1), &profile.schema));
    psg
}

fn office_request(mode: LookupMode) -> LookupRequest {
    LookupRequest {
        query_id: 7,
        domain: "OFFICE".into(),
        cluster: "isVacant".into(),
        predicate: Predicate::single(Atom::new("location", CompareOp::Eq, AttributeValue::text("S14 #06-20, NUS"))),
        projection: vec!["isVacant".into()],
        ttl: 8,
        origin: "server".into(),
        mode,
    }
}

#[test]
fn office_answers_query_two_attributes() {
    let psg = office(true, false);
    let r = psg_evaluate(&psg, &office_request(LookupMode::OneShot), 0).unwrap();
    assert_eq!(r.values, [Some(AttributeValue::Boolean(true))]);
}

#[test]
fn missing_predicate_attribute_means_no_answer() {
    let psg = office(true, false);
    let mut req = office_request(LookupMode::OneShot);
    req.predicate = Predicate::single(Atom::new("floor", CompareOp::Eq, AttributeValue::Number(6.0)));
    assert!(psg_evaluate(&psg, &req, 0).is_none());
}

#[test]
fn privacy_flag_silences_matching_space() {
    let req = office_request(LookupMode::OneShot);
    let open = psg_evaluate(&office(true, false), &req, 0);
    let closed = psg_evaluate(&office(true, true), &req, 0);
    assert!(open.is_some());
    assert!(closed.is_none());
    // Projection of a private attribute is withheld, not an error.
    let mut proj = office_request(LookupMode::OneShot);
    proj.predicate = Predicate::always();
    proj.projection = vec!["location".into(), "isVacant".into()];
    let r = psg_evaluate(&office(true, true), &proj, 0).unwrap();
    assert_eq!(r.values, [None, Some(AttributeValue::Boolean(true))]);
}

#[test]
fn continuous_job_emits_floor_plus_one_samples() {
    for (period, lifetime) in [(60_000u64, 7_200_000u64), (1_000, 0), (1_000, 999), (250, 1_000), (7, 100)] {
        let mut psg = office(true, false);
        let req = office_request(LookupMode::Continuous {
            sample_period_ms: period,
            lifetime_ms: lifetime,
        });
        let t0 = 500;
        let mut samples = usize::from(psg.handle_lookup(&req, None, t0).result.is_some());
        while let Some(t) = psg.next_sample(7) {
            samples += usize::from(psg.run_continuous(7, t).is_some());
        }
        let oracle = (0..).take_while(|k| k * period <= lifetime).count();
        assert_eq!(samples, oracle, "period {period} lifetime {lifetime}");
        assert_eq!(psg.history_query("isVacant", 0, u64::MAX).unwrap().len(), oracle);
    }
}

#[test]
fn history_range_is_half_open() {
    let mut psg = office(true, false);
    let req = office_request(LookupMode::Continuous {
        sample_period_ms: 10,
        lifetime_ms: 30,
    });
    psg.handle_lookup(&req, None, 0);
    while let Some(t) = psg.next_sample(7) {
        psg.run_continuous(7, t);
    }
    let times = |a, b| -> Vec<u64> { psg.history_query("isVacant", a, b).unwrap().into_iter().map(|(_, t)| t).collect() };
    assert_eq!(times(0, 40), [0, 10, 20, 30]);
    assert_eq!(times(10, 30), [10, 20]);
    assert!(times(5, 5).is_empty());
    assert_eq!(
        psg.history_query("floor", 0, 1),
        Err(EngineError::UnknownAttribute("floor".into()))
    );
}

fn occupancy_script(steps: &[(u64, f64)]) -> PsgState {
    let mut psg = office(false, false);
    psg.profile = psg.profile.clone().with_source(
        "occupancy",
        DataSource::Script(steps.iter().map(|(t, v)| (*t, AttributeValue::Number(*v))).collect()),
    );
    psg
}

fn run_subscription(psg: &mut PsgState, lifetime: Option<u64>, horizon: u64) -> Vec<Notification> {
    let out = psg.handle_lookup(&office_request(LookupMode::Subscribe { lifetime_ms: lifetime }), None, 0);
    let mut notes: Vec<Notification> = out.notify.into_iter().collect();
    for t in psg.subscription_checks(7, 0, horizon) {
        notes.extend(psg.handle_subscription(7, t));
    }
    notes
}

#[test]
fn single_vacancy_flip_gives_two_notifications() {
    let mut psg = occupancy_script(&[(0, 2.0), (1_000, 0.0)]);
    let n = run_subscription(&mut psg, None, 10_000);
    let values: Vec<(bool, u64)> = n.iter().map(|n| (n.value, n.timestamp)).collect();
    assert_eq!(values, [(false, 0), (true, 1_000)]);
}

#[test]
fn no_transition_gives_only_initial_notification() {
    let mut psg = occupancy_script(&[(0, 2.0), (1_000, 4.0), (2_000, 1.0)]);
    assert_eq!(run_subscription(&mut psg, Some(5_000), 10_000).len(), 1);
}

#[test]
fn oscillating_occupancy_matches_replay() {
    let mut r = rng(9);
    use rand::Rng;
    for _ in 0..50 {
        let steps: Vec<(u64, f64)> = (0..40u64).map(|i| (i * 100, f64::from(r.gen_range(0..3u8)))).collect();
        let lifetime = r.gen_range(0..4_500u64);
        let mut psg = occupancy_script(&steps);
        let notes = run_subscription(&mut psg, Some(lifetime), u64::MAX);
        // replay: vacancy per step inside the lifetime, count flips
        let vacancy: Vec<bool> = steps.iter().filter(|(t, _)| *t <= lifetime).map(|(_, v)| *v == 0.0).collect();
        let flips = vacancy.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(notes.len(), 1 + flips);
    }
}

// ---- end to end over a fixture cluster ----

/// Hop-synchronous delivery of one query; returns the RESULT tuples.
fn run_one_shot(server: &mut ServerState, psgs: &mut BTreeMap<PeerId, PsgState>, text: &str, ttl: u32) -> Vec<ResultTuple> {
    let mut ast = parse(text).unwrap();
    ast.ttl = ttl;
    let typed = validate(&ast, globals_of(server)).unwrap();
    let d = server.start_query(&plan(&typed), 0, 100, SERVER_ADDRESS).unwrap();
    let Some((_, head)) = d.entry else {
        return Vec::new();
    };
    let mut results = Vec::new();
    let mut wave = vec![(head, None, d.request.clone())];
    while !wave.is_empty() {
        let mut next = Vec::new();
        for (to, from, req) in wave {
            let out = psgs.get_mut(&to).unwrap().handle_lookup(&req, from, 0);
            results.extend(out.result);
            next.extend(out.forwards.into_iter().map(|(n, r)| (n, Some(to), r)));
        }
        wave = next;
    }
    results
}

fn fixture_world(n: usize, degree: usize, seed: u64) -> (ServerState, BTreeMap<PeerId, PsgState>) {
    use rand::Rng;
    let mut server = ServerState::new(Default::default(), degree);
    let mut r = rng(seed);
    let mut psgs: BTreeMap<PeerId, PsgState> = BTreeMap::new();
    for i in 0..n {
        let attrs = text_schema("SHOP", &["shop_name", "crowd", "district"]);
        let profile = SpaceProfile::new(format!("psg://{i}"), attrs.clone())
            .with_value("shop_name", AttributeValue::text(format!("s{i}")))
            .with_value("crowd", AttributeValue::text(if r.gen_bool(0.3) { "high" } else { "low" }))
            .with_value("district", AttributeValue::text(format!("d{}", i % 4)));
        let reg = server.register_schema(attrs, &profile.address, &mut r).unwrap();
        let mut psg = PsgState::new(reg.ack.peer, profile);
        psg.apply_ack(&reg.ack, 0);
        for (cluster, neighbors) in &reg.ack.neighbors {
            for nb in neighbors {
                if let Some(p) = psgs.get_mut(nb) {
                    p.on_join(cluster, reg.ack.peer, 0);
                }
            }
        }
        psgs.insert(reg.ack.peer, psg);
    }
    (server, psgs)
}

#[test]
fn fifty_peer_results_equal_reach_times_qualifying() {
    for seed in 0..10 {
        for ttl in 1..=4 {
            let (mut server, mut psgs) = fixture_world(50, 2, seed);
            let rows = run_one_shot(&mut server, &mut psgs, "SELECT crowd FROM SHOP WHERE crowd = \"high\"", ttl);
            let got: BTreeSet<PeerId> = rows.iter().map(|r| r.peer).collect();
            let cluster = server.rings["SHOP"].cluster("crowd").unwrap();
            let reach = bfs_reachable(cluster, cluster.head.unwrap(), ttl);
            let qualifying: BTreeSet<PeerId> = psgs
                .values()
                .filter(|p| p.profile.data["crowd"].value_at(0) == Some(AttributeValue::text("high")))
                .map(|p| p.id)
                .collect();
            let oracle: BTreeSet<PeerId> = reach.intersection(&qualifying).copied().collect();
            assert_eq!(got, oracle, "seed {seed} ttl {ttl}");
            assert!(rows.iter().all(|r| r.values == [Some(AttributeValue::text("high"))]));
        }
    }
}

#[test]
fn zero_matches_close_cleanly() {
    let (mut server, mut psgs) = fixture_world(20, 3, 1);
    let rows = run_one_shot(&mut server, &mut psgs, "SELECT crowd FROM SHOP WHERE crowd = \"none\"", 8);
    assert!(rows.is_empty());
    let c = server.collectors.values().next().unwrap();
    assert_eq!(c.close_due_at(), 100);
    assert!(server.try_close(c.query_id, 100));
}

#[test]
fn unknown_domain_is_an_error() {
    let (mut server, _) = fixture_world(3, 3, 1);
    let mut typed = typed(&server, "SELECT crowd FROM SHOP");
    typed.ast.domain = "PUB".into();
    let err = server.start_query(&plan(&typed), 0, 10, SERVER_ADDRESS).unwrap_err();
    assert_eq!(err, EngineError::UnknownDomain("PUB".into()));
}

#[test]
fn results_render_as_csv() {
    let rows = vec![
        ResultTuple {
            query_id: 3,
            peer: PeerId(4),
            values: vec![Some(AttributeValue::ListOfText(vec!["Alice".into(), "Bob".into()])), None],
            timestamp: 0,
        },
        ResultTuple {
            query_id: 3,
            peer: PeerId(9),
            values: vec![Some(AttributeValue::text("a,b")), Some(AttributeValue::Boolean(true))],
            timestamp: 5,
        },
    ];
    let proj = vec!["friend_list".to_string(), "isVacant".to_string()];
    assert_eq!(
        results_csv(&proj, &rows, false),
        "query_id,peer,friend_list,isVacant\n3,psg-4,Alice;Bob,\n3,psg-9,\"a,b\",true\n"
    );
    assert!(results_csv(&proj, &rows, true).ends_with(",true,5\n"));
}

#[test]
fn wire_messages_are_tagged_records() {
    let m = Message::Ping { nonce: 3 };
    assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"type":"PING","nonce":3}"#);
    let req = office_request(LookupMode::Subscribe { lifetime_ms: None });
    let m = Message::for_request(req);
    assert_eq!(m.kind(), "SUBSCRIBE");
    let back: Message = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}
