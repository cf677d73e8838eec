use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use crowdlens_core::eval::{score, EvalResult, EventSpan};
use crowdlens_core::events::EventDump;
use crowdlens_core::pipeline::{PipelineError, RunSummary, Timings};
use crowdlens_core::profile::{build_profiles, ProfileStore, StoredProfiles};
use crowdlens_core::synth::{generate, GroundTruth, SynthConfig};
use crowdlens_core::{run, Dataset, Params, RunOptions};
use crowdlens_server::{router, AppState, Loaded, PoiTable};
use serde::{Deserialize, Serialize};

use crate::{DetectArgs, EvalArgs, Failure, ProfileArgs, ServeArgs, SynthArgs};

type Outcome = Result<(), Failure>;

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn check_params(params: &Params) -> Outcome {
    let violations = params.validate();
    if violations.is_empty() {
        return Ok(());
    }
    let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
    Err(Failure::Usage(text.join("; ")))
}

fn load_dataset(calls: &Path, antennas: &Path, half_window: i64) -> anyhow::Result<Dataset> {
    let dataset = Dataset::load(open(calls)?, open(antennas)?, half_window)
        .with_context(|| format!("cannot ingest {}", calls.display()))?;
    let r = &dataset.report;
    if r.unknown_antenna + r.out_of_range + r.malformed > 0 {
        eprintln!(
            "skipped rows: {} unknown antenna, {} out of range, {} malformed",
            r.unknown_antenna, r.out_of_range, r.malformed
        );
    }
    Ok(dataset)
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let config = SynthConfig {
        seed: a.seed,
        n_users: a.users,
        n_antennas: a.antennas_count,
        n_days: a.days,
        n_events: a.events,
        event_participants: a.participants,
        max_calls: a.max_calls,
        ..SynthConfig::default()
    };
    let data = generate(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    out_dir(&a.out)?;
    let files = [
        ("calls.csv", data.calls_csv()),
        ("antennas.csv", data.antennas_csv()),
        ("ground_truth.json", data.ground_truth_json()),
    ];
    for (name, bytes) in files {
        let bytes = bytes.map_err(anyhow::Error::from)?;
        let path = a.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "{} calls, {} users, {} antennas, {} planted events -> {}",
        data.calls.len(),
        data.users.len(),
        data.registry.len(),
        data.truth.events.len(),
        a.out.display()
    );
    Ok(())
}

/// `summary.json` next to a detection's artifacts.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectSummary {
    pub params: Params,
    pub summary: RunSummary,
    pub ingest_ms: u64,
    pub timings: Timings,
    pub total_ms: u64,
}

pub fn detect(a: &DetectArgs) -> Outcome {
    let params = a.params.params();
    check_params(&params)?;
    let clock = Instant::now();

    let mut dataset = load_dataset(&a.input.calls, &a.input.antennas, params.half_window_secs)?;
    let ingest_ms = clock.elapsed().as_millis() as u64;

    let mut options = RunOptions {
        holdout: !a.no_holdout,
        ..RunOptions::default()
    };
    if let Some(path) = &a.profiles {
        let stored: StoredProfiles = read_json(path)?;
        let store = ProfileStore::from_json(&stored, &mut dataset.users, &dataset.registry)
            .with_context(|| format!("cannot load profiles from {}", path.display()))?;
        options.profiles = Some(Arc::new(store));
        // a separate history never saw the crowd's own calls
        options.holdout = false;
    }
    let pois = match &a.pois {
        Some(path) => PoiTable::load(open(path)?, &dataset.registry)
            .with_context(|| format!("cannot load {}", path.display()))?,
        None => PoiTable::default(),
    };

    let out = run(&dataset, &params, &options).map_err(|e| match e {
        PipelineError::Params(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.into()),
    })?;

    out_dir(&a.out)?;
    write_json(&a.out.join("events.json"), &out.event_dumps(&dataset, &|idx| pois.at(idx)))?;
    let mut crowds = create(&a.out.join("crowds.jsonl"))?;
    for record in out.crowd_records(&dataset) {
        serde_json::to_writer(&mut crowds, &record).context("cannot write crowds")?;
        crowds.write_all(b"\n").context("cannot write crowds")?;
    }
    crowds.flush().context("cannot write crowds")?;
    let mut clusters = create(&a.out.join("clusters.jsonl"))?;
    out.clusters
        .write_jsonl(&mut clusters, &dataset.users, &dataset.registry)
        .and_then(|()| clusters.flush())
        .context("cannot write clusters")?;
    out.timeseries
        .write_csv(create(&a.out.join("timeseries.csv"))?)
        .context("cannot write timeseries.csv")?;
    write_json(&a.out.join("analyst_stats.json"), &out.analyst)?;

    let summary = DetectSummary {
        params,
        summary: out.summary(),
        ingest_ms,
        timings: out.timings,
        total_ms: clock.elapsed().as_millis() as u64,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    let s = summary.summary;
    println!(
        "calls {}  timestamps {}  clusters {}  crowds {}  unusual crowds {}  events {}",
        s.calls, s.timestamps, s.clusters, s.crowds, s.unusual_crowds, s.events
    );
    println!("ingest {} ms, total {} ms -> {}", ingest_ms, summary.total_ms, a.out.display());
    Ok(())
}

pub fn profile_build(a: &ProfileArgs) -> Outcome {
    let half_window = a.window.secs();
    if half_window <= 0 {
        return Err(Failure::Usage("half window must be positive".into()));
    }
    let dataset = load_dataset(&a.input.calls, &a.input.antennas, half_window)?;
    let store = build_profiles(&dataset.calls, dataset.grid());
    out_dir(&a.out)?;
    let path = a.out.join("profiles.json");
    write_json(&path, &store.to_json(&dataset.users, &dataset.registry))?;
    println!("{} user profiles -> {}", store.len(), path.display());
    Ok(())
}

/// Eval input given as plain counts.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    matched: usize,
    /// Detections matching some planted event; `matched` when absent.
    matched_detections: Option<usize>,
    detected: usize,
    truth: usize,
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let result = match (&a.counts, &a.truth, &a.detected) {
        (Some(path), _, _) => {
            let c: Counts = read_json(path)?;
            EvalResult::from_counts(c.matched, c.matched_detections.unwrap_or(c.matched), c.detected, c.truth)
                .with_context(|| format!("inconsistent counts in {}", path.display()))?
        }
        (None, Some(truth), Some(detected)) => {
            let truth: GroundTruth = read_json(truth)?;
            let detected: Vec<EventDump> = read_json(detected)?;
            let planted = truth
                .events
                .iter()
                .map(EventSpan::from_truth)
                .collect::<Result<Vec<_>, _>>()
                .context("bad ground truth")?;
            let found = detected
                .iter()
                .map(EventSpan::from_detection)
                .collect::<Result<Vec<_>, _>>()
                .context("bad detections")?;
            score(&found, &planted)
        }
        _ => return Err(Failure::Usage("give --counts, or both --truth and --detected".into())),
    };
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
    println!(
        "precision {}  recall {}  (matched {} of {} planted, {} of {} detections)",
        fmt(result.precision),
        fmt(result.recall),
        result.matched,
        result.truth,
        result.matched_detections,
        result.detected
    );
    println!("{}", serde_json::to_string(&result).map_err(anyhow::Error::from)?);
    if let Some(path) = &a.out {
        write_json(path, &result)?;
    }
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Outcome {
    let half_window = a.window.secs();
    if half_window <= 0 {
        return Err(Failure::Usage("half window must be positive".into()));
    }
    let loaded = match &a.data {
        Some(dir) => {
            let dataset = load_dataset(&dir.join("calls.csv"), &dir.join("antennas.csv"), half_window)?;
            let poi_path = dir.join("pois.csv");
            let pois = if poi_path.exists() {
                PoiTable::load(open(&poi_path)?, &dataset.registry)
                    .with_context(|| format!("cannot load {}", poi_path.display()))?
            } else {
                PoiTable::default()
            };
            eprintln!("loaded {} calls, {} pois", dataset.calls.len(), pois.len());
            Some(Loaded { dataset, pois })
        }
        None => {
            eprintln!("no --data given; runs will be refused");
            None
        }
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Failure::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let ui = (!a.no_ui_assets).then(|| a.ui_dir.clone()).filter(|dir| {
        let found = dir.is_dir();
        if !found {
            eprintln!("ui directory {} not found; serving the API only", dir.display());
        }
        found
    });

    let rt = tokio::runtime::Runtime::new().context("cannot start runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot bind {addr}"))?;
        let state = AppState::spawn(loaded, RunOptions::default());
        eprintln!("listening on http://{addr}");
        crowdlens_server::serve(listener, router(state, ui)).await.context("server failed")
    })?;
    Ok(())
}
