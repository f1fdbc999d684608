use std::collections::BTreeSet;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError, SimWorld};
use crate::model::xml::parse_template;
use crate::model::{
    AttributeDef, AttributeValue, Atom, CompareOp, DataSource, LocalSchema, PeerId, Predicate, SpaceProfile, ValueKind,
};

const DOMAIN_NAMES: [&str; 6] = ["SHOP", "HOME", "PERSON", "OFFICE", "CAR", "PARK"];

pub const HIT: &str = "hit";
pub const MISS: &str = "miss";

pub fn domain_name(i: usize) -> String {
    DOMAIN_NAMES
        .get(i)
        .map_or_else(|| format!("DOMAIN{i}"), |d| d.to_string())
}

/// Attribute `j` of a domain's pool, e.g. `shop_a07`.
pub fn pool_attribute(domain: &str, j: usize, pool_size: usize) -> String {
    let width = pool_size.saturating_sub(1).to_string().len().max(2);
    format!("{}_a{j:0width$}", domain.to_lowercase())
}

/// What a generated world is for: the query cluster and the query aimed at it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySetup {
    pub domain: String,
    pub attribute: String,
    pub text: String,
    /// Every space of the query cluster, in registration order.
    pub members: Vec<PeerId>,
}

pub(super) fn space_schema<R: Rng>(domain: &str, must: Option<&str>, config: &SimConfig, rng: &mut R) -> LocalSchema {
    let pool: Vec<String> = (0..config.domain_attr_pool_size)
        .map(|j| pool_attribute(domain, j, config.domain_attr_pool_size))
        .collect();
    let mut names: Vec<&String> = match must {
        Some(m) => {
            let rest: Vec<&String> = pool.iter().filter(|a| a.as_str() != m).collect();
            let mut picked: Vec<&String> = sample(rng, rest.len(), config.attrs_per_space - 1)
                .into_iter()
                .map(|i| rest[i])
                .collect();
            picked.push(pool.iter().find(|a| a.as_str() == m).expect("query attribute is in the pool"));
            picked
        }
        None => sample(rng, pool.len(), config.attrs_per_space)
            .into_iter()
            .map(|i| &pool[i])
            .collect(),
    };
    names.shuffle(rng);
    LocalSchema::new(
        domain,
        names.into_iter().map(|n| AttributeDef::new(n.clone(), ValueKind::Text)).collect(),
    )
}

pub(super) fn filler_profile(address: String, schema: LocalSchema) -> SpaceProfile {
    let mut profile = SpaceProfile::new(address, schema);
    for (i, a) in profile.schema.attributes.iter().enumerate() {
        profile
            .data
            .insert(a.name.clone(), DataSource::Fixed(AttributeValue::text(format!("v{i}"))));
    }
    profile
}

/// Builds a seeded world: one query cluster of exactly `spaces_per_run`
/// spaces, plus `background_spaces` spread over the other domains. Every
/// space goes through the server's template registration pipeline.
pub fn build_world(config: &SimConfig, seed: u64) -> Result<(SimWorld, QuerySetup), SimError> {
    let config = SimConfig { seed, ..config.clone() };
    config.validate()?;
    let mut world = SimWorld::new(config.clone());

    let q_domain = domain_name(world.rngs.workload.gen_range(0..config.num_domains));
    let q_attr = pool_attribute(
        &q_domain,
        world.rngs.workload.gen_range(0..config.domain_attr_pool_size),
        config.domain_attr_pool_size,
    );
    let n = config.spaces_per_run;
    let hits = ((config.qualifying_fraction * n as f64).round() as usize).min(n);
    let hit_set: BTreeSet<usize> = sample(&mut world.rngs.workload, n, hits).into_iter().collect();

    let others: Vec<String> = (0..config.num_domains)
        .map(domain_name)
        .filter(|d| *d != q_domain)
        .collect();
    let mut members = Vec::with_capacity(n);
    let mut background = 0;
    for i in 0..n {
        let schema = space_schema(&q_domain, Some(&q_attr), &config, &mut world.rngs.data);
        let mut profile = filler_profile(format!("space-{i:05}"), schema);
        let v = if hit_set.contains(&i) { HIT } else { MISS };
        profile.data.insert(q_attr.clone(), DataSource::Fixed(AttributeValue::text(v)));
        members.push(world.register_direct(profile)?);
        // Interleave background registrations so cluster growth is mixed.
        while background < config.background_spaces && background * n <= i * config.background_spaces {
            let domain = &others[background % others.len()];
            let schema = space_schema(domain, None, &config, &mut world.rngs.data);
            world.register_direct(filler_profile(format!("bg-{background:05}"), schema))?;
            background += 1;
        }
    }
    while background < config.background_spaces {
        let domain = &others[background % others.len()];
        let schema = space_schema(domain, None, &config, &mut world.rngs.data);
        world.register_direct(filler_profile(format!("bg-{background:05}"), schema))?;
        background += 1;
    }
    let text = format!("SELECT {q_attr} FROM {q_domain} WHERE {q_attr} = \"{HIT}\"");
    Ok((
        world,
        QuerySetup {
            domain: q_domain,
            attribute: q_attr,
            text,
            members,
        },
    ))
}

pub const DEMO_OFFICE: &str = "S14 #06-20, NUS";

const HOME_TEMPLATE: &str = r#"<schema domain="HOME">
  <attribute name="address" kind="text"/>
  <attribute name="owner" kind="text"/>
  <attribute name="temperature" kind="number"/>
  <attribute name="light" kind="number"/>
</schema>"#;

const HOUSE_TEMPLATE: &str = r#"<schema domain="HOUSE">
  <attribute name="addr" kind="text"/>
  <attribute name="owner" kind="text"/>
  <attribute name="temperatures" kind="number"/>
  <attribute name="lightLevel" kind="number"/>
</schema>"#;

const MINUTE: u64 = 60_000;

fn text(s: &str) -> AttributeValue {
    AttributeValue::text(s)
}

fn number(n: f64) -> AttributeValue {
    AttributeValue::number(n).expect("finite")
}

fn person(address: &str, name: &str, friends: &[&str], location: DataSource) -> SpaceProfile {
    let schema = LocalSchema::new(
        "PERSON",
        vec![
            AttributeDef::new("name", ValueKind::Text),
            AttributeDef::new("friend_list", ValueKind::ListOfText),
            AttributeDef::new("location", ValueKind::Text),
        ],
    );
    SpaceProfile::new(address, schema)
        .with_value("name", text(name))
        .with_value(
            "friend_list",
            AttributeValue::ListOfText(friends.iter().map(|f| f.to_string()).collect()),
        )
        .with_source("location", location)
}

fn office(address: &str, location: &str, occupancy: Vec<(u64, f64)>) -> SpaceProfile {
    let schema = LocalSchema::new(
        "OFFICE",
        vec![
            AttributeDef::new("location", ValueKind::Text),
            AttributeDef::new("occupancy", ValueKind::Number),
            AttributeDef::event("isVacant"),
        ],
    );
    let steps = occupancy.into_iter().map(|(t, v)| (t, number(v))).collect();
    SpaceProfile::new(address, schema)
        .with_value("location", text(location))
        .with_source("occupancy", DataSource::Script(steps))
        .with_rule(
            "isVacant",
            Predicate::single(Atom::new("occupancy", CompareOp::Eq, number(0.0))),
        )
}

fn from_template(address: &str, template: &str, values: &[(&str, AttributeValue)]) -> Result<SpaceProfile, SimError> {
    let schema = parse_template(template).map_err(|e| SimError::Invariant(format!("demo template: {e}")))?;
    let mut profile = SpaceProfile::new(address, schema);
    for (a, v) in values {
        profile = profile.with_value(a, v.clone());
    }
    Ok(profile)
}

/// A small hand-written world for interactive use: people (Keith among
/// them), offices with scripted occupancy, and a HOME/HOUSE pair that
/// leaves candidate matches waiting for review.
pub fn demo_world(config: &SimConfig) -> Result<SimWorld, SimError> {
    let mut world = SimWorld::new(config.clone());
    let walk = DataSource::Script(vec![
        (0, text("COM1 #02-12, NUS")),
        (25 * MINUTE, text(DEMO_OFFICE)),
        (70 * MINUTE, text("Central Library, NUS")),
        (95 * MINUTE, text(DEMO_OFFICE)),
    ]);
    let spaces = vec![
        person("phone-keith", "Keith", &["Alice", "Bob"], walk),
        person("phone-alice", "Alice", &["Keith"], DataSource::Fixed(text("Central Library, NUS"))),
        person("phone-bob", "Bob", &["Keith", "Alice"], DataSource::Fixed(text("COM1 #02-12, NUS"))),
        office(
            "office-0620",
            DEMO_OFFICE,
            vec![(0, 2.0), (30 * MINUTE, 0.0), (75 * MINUTE, 1.0), (100 * MINUTE, 0.0)],
        ),
        office("office-0611", "S14 #06-11, NUS", vec![(0, 0.0), (45 * MINUTE, 3.0)]),
        from_template(
            "home-clementi",
            HOME_TEMPLATE,
            &[
                ("address", text("12 Clementi Ave")),
                ("owner", text("Keith")),
                ("temperature", number(27.5)),
                ("light", number(300.0)),
            ],
        )?,
        from_template(
            "house-bukit",
            HOUSE_TEMPLATE,
            &[
                ("addr", text("3 Bukit Timah Rd")),
                ("owner", text("Alice")),
                ("temperatures", number(29.0)),
                ("lightLevel", number(120.0)),
            ],
        )?,
    ];
    for profile in spaces {
        world.register_direct(profile)?;
    }
    Ok(world)
}
