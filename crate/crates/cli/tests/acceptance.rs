//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use crowdlens_core::eval::{score, EvalResult, EventSpan};
use crowdlens_core::miner::{existence_step, mine_closed_crowds, ChainLink};
use crowdlens_core::model::Antenna;
use crowdlens_core::oracle::{oracle_components, oracle_mine, random_cluster_db, random_params};
use crowdlens_core::profile::{cosine, profile_vector};
use crowdlens_core::synth::{generate, SynthConfig};
use crowdlens_core::{
    build_events, build_profiles, run, AntennaIdx, AntennaRegistry, Call, Crowd, Dataset, Params, RunOptions,
    TimeGrid, UserIdx,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const HOUR: i64 = 3600;
const DAY: i64 = 24 * HOUR;
const GOLDEN_FALSE_POSITIVES: &str = include_str!("golden/planted_false_positives.txt");

type Check = fn() -> Result<String, String>;

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("existence-vector-regression", existence_vector_regression),
        ("profile-cosine-regression", profile_cosine_regression),
        ("oracle-equivalence", oracle_equivalence),
        ("closedness-and-commitment", closedness_and_commitment),
        ("event-assembly", event_assembly),
        ("planted-event-recovery", planted_event_recovery),
        ("precision-recall-arithmetic", precision_recall_arithmetic),
        ("performance-budget", performance_budget),
        ("parameter-monotonicity", parameter_monotonicity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let clock = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(budget_secs), || {
        format!("took {:.1}s, budget {budget_secs}s", elapsed.as_secs_f64())
    })
}

fn users(ids: &[u32]) -> Vec<UserIdx> {
    ids.iter().map(|&u| UserIdx(u)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Four-step worked example: users {1,2,3}, {2,4}, {1,2,3}, {1,2}.
fn worked_chain() -> Vec<Vec<UserIdx>> {
    vec![users(&[1, 2, 3]), users(&[2, 4]), users(&[1, 2, 3]), users(&[1, 2])]
}

fn replay(chain: &[Vec<UserIdx>], user: UserIdx) -> Vec<f64> {
    let mut out = Vec::new();
    let mut p: Option<f64> = None;
    for (k, members) in chain.iter().enumerate() {
        let observed = members.contains(&user);
        p = match p {
            None if observed => Some(1.0),
            None => None,
            Some(prev) => {
                let carried = chain[k - 1].iter().filter(|u| members.contains(u)).count();
                Some(existence_step(prev, carried, chain[k - 1].len(), observed).unwrap())
            }
        };
        out.push(p.unwrap_or(0.0));
    }
    out
}

fn existence_vector_regression() -> Result<String, String> {
    let clock = Instant::now();
    let chain = worked_chain();
    let u4 = replay(&chain, UserIdx(4));
    let expected = [0.0, 1.0, 0.5, 1.0 / 3.0];
    ensure(u4.iter().zip(expected).all(|(a, b)| close(*a, b)), || format!("user4 {u4:?}"))?;
    let u3 = replay(&chain, UserIdx(3));
    ensure(close(u3[1], 1.0 / 3.0), || format!("user3 {u3:?}"))?;

    let crowd = Crowd {
        chain: chain
            .iter()
            .enumerate()
            .map(|(t, observed)| ChainLink {
                t,
                antenna: AntennaIdx(t as u32),
                observed: observed.clone(),
            })
            .collect(),
        committed: users(&[1, 2, 3, 4]),
        total_users: 4,
    };
    let via_crowd = crowd.existence_vector(UserIdx(4));
    ensure(via_crowd.iter().zip(expected).all(|(a, b)| close(*a, b)), || format!("crowd vector {via_crowd:?}"))?;
    within(clock.elapsed(), 1)?;
    Ok(format!("user4 {u4:?}, user3 second step {:.6}", u3[1]))
}

fn profile_cosine_regression() -> Result<String, String> {
    let clock = Instant::now();
    // user4's history: (hour, antenna, days seen there)
    let history = [(9, 2, 3), (10, 7, 2), (10, 4, 5), (11, 9, 4), (11, 2, 1), (12, 8, 2), (12, 1, 1)];
    let mut calls = Vec::new();
    let mut day = 0;
    for (hour, antenna, n) in history {
        for _ in 0..n {
            calls.push(Call {
                user: UserIdx(4),
                at: day * DAY + hour * HOUR,
                antenna: AntennaIdx(antenna),
            });
            day += 1;
        }
    }
    let grid = TimeGrid::new(0, HOUR, HOUR / 2, 24 * 20);
    let store = build_profiles(&calls, &grid);
    let chain = [(9, AntennaIdx(0)), (10, AntennaIdx(7)), (11, AntennaIdx(2)), (12, AntennaIdx(8))];
    let w_m = profile_vector(store.get(UserIdx(4)), &chain, &grid);
    let expected = [0.0, 2.0 / 7.0, 1.0 / 5.0, 2.0 / 3.0];
    ensure(w_m == expected, || format!("profile vector {w_m:?}"))?;
    let c = cosine(&[0.0, 1.0, 0.5, 1.0 / 3.0], &w_m).map_err(|e| e.to_string())?;
    ensure((c - 0.692585).abs() <= 1e-6, || format!("cosine {c}"))?;
    within(clock.elapsed(), 1)?;
    Ok(format!("w_m {w_m:?}, cosine {c:.6}"))
}

const INSTANCES: u64 = 200;
const DRAWS: usize = 20;

/// Every (instance, draw) of the equivalence sweep with both outputs.
fn sweep(mut each: impl FnMut(u64, &Params, &[Crowd], &[Crowd]) -> Result<(), String>) -> Result<usize, String> {
    let mut crowds = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let db = random_cluster_db(&mut rng);
        for _ in 0..DRAWS {
            let params = random_params(&mut rng);
            let fast = mine_closed_crowds(&db, &params);
            let slow = oracle_mine(&db, &params).map_err(|e| e.to_string())?;
            crowds += slow.len();
            each(seed, &params, &fast, &slow)?;
        }
    }
    Ok(crowds)
}

fn oracle_equivalence() -> Result<String, String> {
    let clock = Instant::now();
    let mut mismatches = 0;
    let mut first = None;
    let crowds = sweep(|seed, params, fast, slow| {
        if fast != slow {
            mismatches += 1;
            first.get_or_insert((seed, *params));
        }
        Ok(())
    })?;
    ensure(mismatches == 0, || format!("{mismatches} mismatches, first {first:?}"))?;
    ensure(crowds > 100, || format!("only {crowds} crowds, sweep too sparse"))?;
    within(clock.elapsed(), 60)?;
    Ok(format!("{INSTANCES} instances x {DRAWS} draws, {crowds} crowds, 0 mismatches"))
}

/// `inner`'s span lies within `outer`'s and both visit the same antenna at
/// every timestamp of `inner`.
fn antenna_subchain(inner: &Crowd, outer: &Crowd) -> bool {
    let (s, e) = (inner.chain[0].t, inner.chain[inner.chain.len() - 1].t);
    let (os, oe) = (outer.chain[0].t, outer.chain[outer.chain.len() - 1].t);
    os <= s && e <= oe && inner.chain.iter().all(|l| outer.chain[l.t - os].antenna == l.antenna)
}

fn closedness_and_commitment() -> Result<String, String> {
    let mut checked = 0;
    sweep(|seed, params, fast, _| {
        for (i, a) in fast.iter().enumerate() {
            for (j, b) in fast.iter().enumerate() {
                ensure(i == j || !antenna_subchain(a, b), || {
                    format!("seed {seed}: crowd {i} lies inside crowd {j} under {params:?}")
                })?;
            }
            let chain: Vec<Vec<UserIdx>> = a.chain.iter().map(|l| l.observed.clone()).collect();
            ensure(a.committed.len() >= params.commitment, || {
                format!("seed {seed}: {} committed < {}", a.committed.len(), params.commitment)
            })?;
            ensure(a.chain.len() >= params.lifetime, || format!("seed {seed}: short crowd"))?;
            let distinct: BTreeSet<AntennaIdx> = a.chain.iter().map(|l| l.antenna).collect();
            ensure(distinct.len() >= params.min_locations, || format!("seed {seed}: too few antennas"))?;
            for &u in &a.committed {
                let p = replay(&chain, u);
                let first = chain.iter().position(|m| m.contains(&u));
                ensure(first.is_some(), || format!("seed {seed}: committed user {u:?} never observed"))?;
                let low = p[first.unwrap()..].iter().any(|&x| x + 1e-12 < params.commitment_probability);
                ensure(!low, || format!("seed {seed}: user {u:?} dips below {} in {p:?}", params.commitment_probability))?;
            }
            checked += 1;
        }
        Ok(())
    })?;
    Ok(format!("{checked} crowds closed and committed"))
}

fn random_crowd(rng: &mut impl Rng, n_antennas: u32) -> Crowd {
    let start = rng.gen_range(0..30);
    let len = rng.gen_range(2..=6);
    let mut committed: Vec<UserIdx> = (0..12).filter(|_| rng.gen_bool(0.4)).map(UserIdx).collect();
    if committed.is_empty() {
        committed.push(UserIdx(rng.gen_range(0..12)));
    }
    Crowd {
        chain: (0..len)
            .map(|k| ChainLink {
                t: start + k,
                antenna: AntennaIdx(rng.gen_range(0..n_antennas)),
                observed: committed.clone(),
            })
            .collect(),
        total_users: committed.len(),
        committed,
    }
}

fn partition(groups: impl IntoIterator<Item = Vec<usize>>) -> BTreeSet<BTreeSet<usize>> {
    groups.into_iter().map(|g| g.into_iter().collect()).collect()
}

fn event_assembly() -> Result<String, String> {
    let registry = AntennaRegistry::new(
        (0..6)
            .map(|k| Antenna {
                id: format!("S{k}"),
                lon: (k % 3) as f64 * 0.01,
                lat: (k / 3) as f64 * 0.01,
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut merged = 0;
    for set in 0..100 {
        let n = rng.gen_range(0..=100);
        let crowds: Vec<Crowd> = (0..n).map(|_| random_crowd(&mut rng, 6)).collect();
        let connected = |i: usize, j: usize| {
            let (a, b) = (&crowds[i], &crowds[j]);
            let overlap = a.chain[0].t <= b.chain[b.chain.len() - 1].t && b.chain[0].t <= a.chain[a.chain.len() - 1].t;
            let x: BTreeSet<_> = a.committed.iter().collect();
            let y: BTreeSet<_> = b.committed.iter().collect();
            overlap && 2 * x.intersection(&y).count() >= x.union(&y).count()
        };
        let expected = partition(oracle_components(n, connected).map_err(|e| e.to_string())?);
        let got = partition(build_events(&crowds, &registry).into_iter().map(|e| e.members));
        ensure(got == expected, || format!("set {set}: partition differs from oracle"))?;
        merged += n - expected.len();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Crowd> = order.iter().map(|&i| crowds[i].clone()).collect();
        let remapped = partition(
            build_events(&shuffled, &registry)
                .into_iter()
                .map(|e| e.members.into_iter().map(|k| order[k]).collect()),
        );
        ensure(remapped == expected, || format!("set {set}: partition depends on input order"))?;
    }
    ensure(merged > 100, || format!("only {merged} merges, sets too sparse"))?;
    Ok(format!("100 sets match the oracle and survive shuffling ({merged} merges)"))
}

fn default_city() -> (Dataset, Vec<EventSpan>) {
    let data = generate(&SynthConfig::default()).expect("default city");
    let truth = data
        .truth
        .events
        .iter()
        .map(|e| EventSpan::from_truth(e).expect("truth timestamps"))
        .collect();
    (Dataset::from_synth(data, Params::default().half_window_secs), truth)
}

fn planted_event_recovery() -> Result<String, String> {
    let clock = Instant::now();
    let (dataset, truth) = default_city();
    let out = run(&dataset, &Params::default(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let detected: Vec<EventSpan> = out
        .event_dumps(&dataset, &|_| Vec::new())
        .iter()
        .map(|e| EventSpan::from_detection(e).expect("detection timestamps"))
        .collect();
    let r = score(&detected, &truth);
    let elapsed = clock.elapsed();
    ensure(r.truth == 3 && r.matched == 3, || format!("recall {}/{}", r.matched, r.truth))?;
    let false_positives = r.detected - r.matched_detections;
    let golden: usize = GOLDEN_FALSE_POSITIVES.trim().parse().map_err(|e| format!("golden file: {e}"))?;
    ensure(false_positives == golden, || {
        format!("{false_positives} false positive events, golden snapshot says {golden}")
    })?;
    within(elapsed, 60)?;
    Ok(format!(
        "recall 3/3, {} events detected, {false_positives} false positives (golden {golden})",
        r.detected
    ))
}

fn precision_recall_arithmetic() -> Result<String, String> {
    let r = EvalResult::from_counts(23, 23, 340, 25).map_err(|e| e.to_string())?;
    let precision = r.precision.ok_or("no precision")?;
    let recall = r.recall.ok_or("no recall")?;
    ensure((precision - 0.0676).abs() <= 1e-4, || format!("precision {precision}"))?;
    ensure(recall == 0.92, || format!("recall {recall}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = dir.path().join("counts.json");
    std::fs::write(&fixture, r#"{"matched": 23, "detected": 340, "truth": 25}"#).map_err(|e| e.to_string())?;
    let o = crowdlens(&["eval", "--counts", path(&fixture)])?;
    let line = String::from_utf8_lossy(&o.stdout).lines().next().unwrap_or_default().to_owned();
    ensure(line.starts_with("precision 0.0676  recall 0.9200"), || format!("cli printed {line:?}"))?;
    Ok(format!("precision {precision:.4}, recall {recall:.4}"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn crowdlens(args: &[&str]) -> Result<std::process::Output, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_crowdlens"))
        .args(args)
        .env_remove("CROWDLENS_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("crowdlens {args:?} failed: {}", String::from_utf8_lossy(&o.stderr))
    })?;
    Ok(o)
}

fn performance_budget() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    crowdlens(&["synth", "--out", path(&data), "--users", "12000", "--max-calls", "2000000"])?;
    let calls = data.join("calls.csv");
    let rows = std::fs::read_to_string(&calls).map_err(|e| e.to_string())?.lines().count() - 1;
    ensure(rows == 2_000_000, || format!("generated {rows} rows"))?;

    let clock = Instant::now();
    crowdlens(&["detect", "--calls", path(&calls), "--antennas", path(&data.join("antennas.csv")), "--out", path(&out)])?;
    let wall = clock.elapsed();
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let ingest_ms = summary["ingest_ms"].as_u64().ok_or("no ingest time")?;
    within(wall, 120)?;
    ensure(ingest_ms <= 30_000, || format!("ingest took {ingest_ms} ms"))?;
    Ok(format!("2,000,000 rows: detect {:.1}s, ingest {:.1}s", wall.as_secs_f64(), ingest_ms as f64 / 1000.0))
}

fn parameter_monotonicity() -> Result<String, String> {
    let (dataset, _) = default_city();
    let base = Params::default();
    let unusual = |p: Params| -> Result<usize, String> {
        run(&dataset, &p, &RunOptions::default())
            .map(|o| o.unusual.len())
            .map_err(|e| format!("{p:?}: {e}"))
    };
    let ladders: [(&str, Vec<Params>, bool); 5] = [
        ("epsilon_n", [20, 25, 30, 40].map(|v| Params { scale: v, ..base }).to_vec(), false),
        ("epsilon_lt", [4, 5, 6].map(|v| Params { lifetime: v, ..base }).to_vec(), false),
        ("epsilon_ci", [10, 15, 20].map(|v| Params { commitment: v, ..base }).to_vec(), false),
        ("epsilon_p", [0.2, 0.3, 0.5].map(|v| Params { commitment_probability: v, ..base }).to_vec(), false),
        ("epsilon_si", [0.2, 0.5, 0.9].map(|v| Params { similarity: v, ..base }).to_vec(), true),
    ];
    let default_count = unusual(base)?;
    let mut report = Vec::new();
    for (name, ladder, rising) in ladders {
        let mut counts = vec![default_count];
        for p in &ladder[1..] {
            counts.push(unusual(*p)?);
        }
        let monotone = counts.windows(2).all(|w| if rising { w[0] <= w[1] } else { w[0] >= w[1] });
        ensure(monotone, || format!("{name}: unusual crowds {counts:?}"))?;
        report.push(format!("{name} {counts:?}"));
    }
    Ok(report.join(", "))
}
