//! `cdms`: build simulated worlds, run the experiment sweeps, query saved
//! worlds and work through the schema review queue.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdms::engine::{notifications_csv, results_csv, EngineError};
use cdms::matcher::{parse_queue, CandidateStatus, Decision, MatchError};
use cdms::simnet::{
    build_world, demo_world, fig3_csv, fig5_csv, fig6_csv, load_snapshot, query_breakdown, registration_breakdown,
    save_snapshot, sweep_size, sweep_ttl, SimConfig, SimError, SimWorld,
};

#[derive(Parser)]
#[command(name = "cdms", version, about = "Context data management: simulation, queries and schema review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV (also printed on stdout).
    SimRun(SimRun),
    /// Run one query against a saved world.
    Query(QueryArgs),
    /// Decide pending schema matches of a saved world.
    SchemaReview(ReviewArgs),
    /// Print the global schemas, or the review queue with --queue.
    SchemaDump(DumpArgs),
    /// Summary metrics of a saved world.
    Report(SnapshotArg),
    /// Per-cluster overlay statistics of a saved world.
    WorldInspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    /// Only build the seeded world (use with --save-world).
    World,
    /// The small hand-written demo world.
    Demo,
}

#[derive(Args)]
struct SimRun {
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// key = value file over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Query-cluster size.
    #[arg(long)]
    peers: Option<usize>,
    /// One ttl, a list (3,6,8) or a range (1..10).
    #[arg(long)]
    ttl: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    /// Cluster sizes for fig6, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also save the seeded world as a snapshot.
    #[arg(long)]
    save_world: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    snapshot: PathBuf,
    query: String,
    #[arg(long, default_value_t = cdms::cql::DEFAULT_TTL)]
    ttl: u32,
    /// Write the world after the query here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Write one line per processed event here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReviewArgs {
    snapshot: PathBuf,
    #[arg(long, conflicts_with = "decisions")]
    accept_all: bool,
    /// An edited `schema-dump --queue`: lines marked confirmed or rejected
    /// decide the matching pending candidates.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Where to write the updated world (default: in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    snapshot: PathBuf,
    #[arg(long)]
    queue: bool,
}

#[derive(Args)]
struct SnapshotArg {
    snapshot: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    snapshot: PathBuf,
    #[arg(long)]
    domain: Option<String>,
}

/// A failed command: exit code 2 for user errors, 1 for internal ones.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Config(_) | SimError::Query(_) | SimError::Snapshot(_) => 2,
            SimError::Engine(inner) => engine_code(inner),
            SimError::Invariant(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn engine_code(e: &EngineError) -> u8 {
    match e {
        EngineError::Template(_)
        | EngineError::Schema(_)
        | EngineError::UnknownDomain(_)
        | EngineError::UnknownAttribute(_)
        | EngineError::Match(_) => 2,
        _ => 1,
    }
}

type Outcome = Result<String, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SimRun(a) => sim_run(a),
        Command::Query(a) => query(a),
        Command::SchemaReview(a) => schema_review(a),
        Command::SchemaDump(a) => schema_dump(a),
        Command::Report(a) => report(a),
        Command::WorldInspect(a) => world_inspect(a),
    };
    match result {
        Ok(stdout) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::user(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::user(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<SimWorld, Failure> {
    Ok(load_snapshot(&read(path)?)?)
}

fn parse_ttls(spec: &str) -> Result<Vec<u32>, Failure> {
    let bad = || Failure::user(format!("bad --ttl {spec:?}: expected N, N,M,... or A..B"));
    let ttls: Vec<u32> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (a.trim().parse::<u32>().map_err(|_| bad())?, b.trim().parse::<u32>().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if ttls.is_empty() || ttls.contains(&0) {
        return Err(bad());
    }
    Ok(ttls)
}

/// Seed precedence: CDMS_SEED, then --seed, then the config file.
fn effective_seed(flag: Option<u64>, config: u64) -> Result<u64, Failure> {
    match std::env::var("CDMS_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::user(format!("CDMS_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(flag.unwrap_or(config)),
    }
}

fn sim_run(a: SimRun) -> Outcome {
    let mut config = match &a.config {
        Some(p) => SimConfig::parse(&read(p)?).map_err(SimError::from)?,
        None => SimConfig::default(),
    };
    config.seed = effective_seed(a.seed, config.seed)?;
    if let Some(p) = a.peers {
        config.spaces_per_run = p;
    }
    if let Some(r) = a.runs {
        config.runs_per_point = r;
    }
    let ttls = match &a.ttl {
        Some(t) => parse_ttls(t)?,
        None => vec![config.ttl],
    };
    if ttls.len() == 1 {
        config.ttl = ttls[0];
    }
    config.validate().map_err(SimError::from)?;
    if config.runs_per_point == 0 {
        return Err(Failure::user("--runs must be at least 1"));
    }
    if a.save_world.is_some() || matches!(a.experiment, Experiment::Fig3 | Experiment::Fig4 | Experiment::Fig5 | Experiment::Fig6) {
        std::fs::create_dir_all(&a.out).map_err(|e| Failure::user(format!("{}: {e}", a.out.display())))?;
    }
    if let Some(path) = &a.save_world {
        let world = match a.experiment {
            Experiment::Demo => demo_world(&config)?,
            _ => build_world(&config, config.seed)?.0,
        };
        write(path, &save_snapshot(&world))?;
        eprintln!("saved world {} to {}", world.digest(), path.display());
    }
    let runs = config.runs_per_point;
    let (file, csv) = match a.experiment {
        Experiment::Fig3 => {
            let (rows, digest) = registration_breakdown(&config, runs)?;
            eprintln!("trace {digest}");
            ("fig3.csv", fig3_csv(&rows))
        }
        Experiment::Fig4 => ("fig4.csv", fig3_csv(&query_breakdown(&config, runs)?)),
        Experiment::Fig5 => {
            let sweep = sweep_ttl(&config, &ttls, runs)?;
            for (seed, digest) in sweep.per_run.iter().map(|(s, _)| s).zip(&sweep.trace_digests) {
                eprintln!("seed {seed} trace {digest}");
            }
            ("fig5.csv", fig5_csv(&sweep.rows))
        }
        Experiment::Fig6 => {
            let sizes = a.sizes.clone().unwrap_or_else(|| vec![200, 400, 600, 800, 1000]);
            if sizes.iter().any(|s| !(200..=1000).contains(s)) {
                eprintln!("note: sizes outside 200..=1000 extrapolate beyond the measured range");
            }
            let rows = sweep_size(&config, &sizes, config.ttl, runs)?;
            for r in &rows {
                if r.min_recall < 1.0 {
                    eprintln!("size {}: recall fell to {}", r.size, r.min_recall);
                }
            }
            ("fig6.csv", fig6_csv(&rows))
        }
        Experiment::World | Experiment::Demo => {
            if a.save_world.is_none() {
                return Err(Failure::user("--experiment world/demo needs --save-world"));
            }
            return Ok(String::new());
        }
    };
    write(&a.out.join(file), &csv)?;
    Ok(csv)
}

fn query(a: QueryArgs) -> Outcome {
    let mut world = load(&a.snapshot)?;
    if a.trace.is_some() {
        world.enable_trace_dump();
    }
    let qid = world.issue_query(&a.query, a.ttl)?;
    let run = world.run_until_closed(qid);
    if let Some(path) = &a.trace {
        write(path, &world.trace_lines().unwrap_or_default().join("\n"))?;
    }
    if let Err(e) = run {
        if let Some(lines) = world.trace_lines() {
            for l in lines.iter().rev().take(20).rev() {
                eprintln!("{l}");
            }
        }
        return Err(e.into());
    }
    let collector = &world.server.collectors[&qid];
    let csv = match world.query_kind(qid) {
        Some(cdms::cql::QueryKind::Subscribe) => {
            let event = collector.projection.first().cloned().unwrap_or_default();
            notifications_csv(&event, world.notifications(qid))
        }
        _ => {
            let streamed = matches!(collector.mode, cdms::overlay::LookupMode::Continuous { .. });
            results_csv(&collector.projection, world.results(qid), streamed)
        }
    };
    let truncated = collector.truncated();
    if !truncated.is_empty() {
        eprintln!("note: {} peer(s) sent fewer samples than expected", truncated.len());
    }
    if let Some(path) = &a.save {
        write(path, &save_snapshot(&world))?;
    }
    Ok(csv)
}

fn schema_review(a: ReviewArgs) -> Outcome {
    let mut world = load(&a.snapshot)?;
    let mut decisions: Vec<(u64, Decision)> = Vec::new();
    if a.accept_all {
        decisions = world.server.matcher.queue.iter().map(|i| (i.id, Decision::Confirm)).collect();
    } else if let Some(path) = &a.decisions {
        let lines = parse_queue(&read(path)?).map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
        for item in &world.server.matcher.queue {
            let decided = lines.iter().find(|l| l.matches(&item.candidate) && l.status != CandidateStatus::Pending);
            if let Some(l) = decided {
                let d = if l.status == CandidateStatus::Confirmed { Decision::Confirm } else { Decision::Reject };
                decisions.push((item.id, d));
            }
        }
    }
    let interactive = !a.accept_all && a.decisions.is_none();
    let mut out = String::from("id,local,global,decision,result\n");
    let mut refused = 0;
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let ids: Vec<u64> = if interactive {
        world.server.matcher.queue.iter().map(|i| i.id).collect()
    } else {
        decisions.iter().map(|(id, _)| *id).collect()
    };
    for id in ids {
        let Some(item) = world.server.matcher.pending(id).cloned() else {
            continue;
        };
        let c = &item.candidate;
        let decision = if interactive {
            match ask(&mut input, &item)? {
                Some(d) => d,
                None => break,
            }
        } else {
            decisions.iter().find(|(i, _)| *i == id).expect("listed").1
        };
        let verdict = if decision == Decision::Confirm { "confirm" } else { "reject" };
        let result = match world.review(id, decision) {
            Ok(o) if o.mapping.is_some() => "remapped".to_string(),
            Ok(_) => "applied".to_string(),
            Err(SimError::Engine(EngineError::Match(e @ MatchError::Conflict { .. }))) => {
                eprintln!("refused #{id}: {e}");
                refused += 1;
                "refused".to_string()
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(out, "{id},{},{}.{},{verdict},{result}", c.local_name, c.global_domain, c.global_name)
            .expect("string write");
    }
    world.server.check_invariants().map_err(|e| Failure {
        code: 1,
        message: e,
    })?;
    write(a.out.as_ref().unwrap_or(&a.snapshot), &save_snapshot(&world))?;
    if refused > 0 {
        eprint!("{out}");
        return Err(Failure::user(format!("{refused} decision(s) refused")));
    }
    Ok(out)
}

/// Shows one candidate on stderr and reads y/n; None at end of input.
fn ask(input: &mut impl BufRead, item: &cdms::matcher::ReviewItem) -> Result<Option<Decision>, Failure> {
    let c = &item.candidate;
    loop {
        eprint!(
            "#{} {} → {}.{}  via {}  {:.4}  [y/n] ",
            item.id, c.local_name, c.global_domain, c.global_name, c.criterion, c.score
        );
        io::stderr().flush().ok();
        let mut line = String::new();
        let n = input
            .read_line(&mut line)
            .map_err(|e| Failure::user(format!("stdin: {e}")))?;
        if n == 0 {
            eprintln!();
            return Ok(None);
        }
        match line.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => return Ok(Some(Decision::Confirm)),
            "n" | "no" => return Ok(Some(Decision::Reject)),
            _ => eprintln!("answer y or n"),
        }
    }
}

fn schema_dump(a: DumpArgs) -> Outcome {
    let world = load(&a.snapshot)?;
    let mut out = String::new();
    if a.queue {
        out.push_str("# local  DOMAIN.global  criterion  score  status\n");
        for item in &world.server.matcher.queue {
            writeln!(out, "{}", item.candidate.queue_line()).expect("string write");
        }
        return Ok(out);
    }
    out.push_str("domain,attribute,kind,event,private,members\n");
    for g in world.server.globals.values() {
        for attr in &g.attributes {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                g.domain_name,
                attr.name,
                attr.kind.as_str(),
                attr.is_event,
                attr.is_private,
                g.member_count
            )
            .expect("string write");
        }
    }
    Ok(out)
}

fn report(a: SnapshotArg) -> Outcome {
    let world = load(&a.snapshot)?;
    let clusters: usize = world.server.rings.values().map(|r| r.clusters.len()).sum();
    let rows = [
        ("clock_ms", world.clock.to_string()),
        ("peers", world.psgs.len().to_string()),
        ("departed", world.departed.len().to_string()),
        ("domains", world.server.globals.len().to_string()),
        ("clusters", clusters.to_string()),
        ("pending_reviews", world.server.matcher.queue.len().to_string()),
        ("queries", world.server.collectors.len().to_string()),
        ("degree", world.config.degree.to_string()),
        ("digest", world.digest()),
    ];
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        writeln!(out, "{k},{v}").expect("string write");
    }
    Ok(out)
}

fn world_inspect(a: InspectArgs) -> Outcome {
    let world = load(&a.snapshot)?;
    if let Some(d) = &a.domain {
        if !world.server.rings.contains_key(d) {
            return Err(Failure::user(format!("unknown domain {d}")));
        }
    }
    let mut out = String::from("domain,cluster,members,head,edges,components\n");
    for ring in world.server.rings.values() {
        if a.domain.as_ref().is_some_and(|d| *d != ring.domain) {
            continue;
        }
        for c in &ring.clusters {
            let head = c.head.map(|h| h.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                ring.domain,
                c.attribute,
                c.len(),
                head,
                c.edge_count(),
                c.components().len()
            )
            .expect("string write");
        }
    }
    Ok(out)
}
