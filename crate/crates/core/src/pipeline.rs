//! Round orchestration: gate the stream, buffer `gamma * budget` candidates,
//! filter them to the budget and run one annotation round per buffer.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::filter::{filter, FilterConfig, Strategy};
use crate::gate::{Decision, GateConfig, GateState};
use crate::latent::{cosine_from_parts, dot, DensityMetric};
use crate::model::{self, CandidateSet, FilteredSet, FrameRecord, LabeledFrame, OracleLabels};
use crate::protocol::{Client, Loopback, Transport};

pub const DEFAULT_GAMMA: usize = 8;
pub const DEFAULT_BUDGET: usize = 32;

/// When the gate threshold is re-estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewarmPolicy {
    /// Every round starts with its own warm-up.
    #[default]
    PerRound,
    /// Only the first round warms up; later rounds reuse its threshold.
    Once,
}

impl std::str::FromStr for RewarmPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-round" => Ok(RewarmPolicy::PerRound),
            "once" => Ok(RewarmPolicy::Once),
            other => Err(Error::Config(format!(
                "unknown rewarm policy {other:?} (expected per-round or once)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub budget: usize,
    pub gamma: usize,
    pub gate: GateConfig,
    pub filter: FilterConfig,
    pub rounds: usize,
    pub rewarm: RewarmPolicy,
}

impl RoundConfig {
    pub fn new(budget: usize, gamma: usize, gate: GateConfig, strategy: Strategy) -> Self {
        RoundConfig {
            budget,
            gamma,
            gate,
            filter: FilterConfig::new(strategy, budget),
            rounds: 1,
            rewarm: RewarmPolicy::default(),
        }
    }

    pub fn candidate_target(&self) -> usize {
        self.gamma * self.budget
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.filter.budget != self.budget {
            return Err(Error::Config(format!(
                "filter budget {} differs from round budget {}",
                self.filter.budget, self.budget
            )));
        }
        self.gate.validate()?;
        self.filter.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub min_pairwise_cos_distance: f64,
    pub mean_pairwise_cos_similarity: f64,
}

/// Pairwise cosine statistics of a selection; `None` below two frames.
pub fn diversity_metrics(frames: &[FrameRecord]) -> Option<Diversity> {
    if frames.len() < 2 {
        return None;
    }
    let rows: Vec<&[f64]> = frames.iter().map(|f| f.embedding.as_slice()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut min_dist = f64::INFINITY;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s = cosine_from_parts(dot(rows[i], rows[j]), norms[i], norms[j]);
            min_dist = min_dist.min(1.0 - s);
            sum += s;
            pairs += 1;
        }
    }
    Some(Diversity {
        min_pairwise_cos_distance: min_dist,
        mean_pairwise_cos_similarity: sum / pairs as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u64,
    pub strategy: Strategy,
    pub budget: usize,
    pub gamma: usize,
    pub frames_observed: usize,
    pub warmup_frames: usize,
    pub frames_gated_in: usize,
    pub frames_gated_out: usize,
    pub candidate_count: usize,
    pub selected_count: usize,
    pub bytes_sent: u64,
    pub gate_threshold: f64,
    pub diversity: Option<Diversity>,
    /// The stream ended before the buffer reached `gamma * budget`.
    pub partial: bool,
    pub selected_frame_ids: Vec<u64>,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub filtered: FilteredSet,
    pub labeled: Vec<LabeledFrame>,
}

/// Drives rounds over one stream against one annotation session.
pub struct Pipeline<'a, T: Transport> {
    stream: &'a [FrameRecord],
    position: usize,
    config: RoundConfig,
    gate: Option<GateState>,
    client: Client<T>,
}

impl<'a, T: Transport> Pipeline<'a, T> {
    pub fn new(stream: &'a [FrameRecord], config: RoundConfig, client: Client<T>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            stream,
            position: 0,
            config,
            gate: None,
            client,
        })
    }

    pub fn client(&self) -> &Client<T> {
        &self.client
    }

    pub fn remaining(&self) -> usize {
        self.stream.len() - self.position
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let started = Instant::now();
        let cfg = self.config;
        let mut gate = match (self.gate.take(), cfg.rewarm) {
            (Some(g), RewarmPolicy::Once) => g,
            _ => GateState::new(cfg.gate)?,
        };
        let target = cfg.candidate_target();
        let mut candidates = CandidateSet::with_capacity(target);
        let (mut observed, mut warmup, mut gated_in, mut gated_out) = (0, 0, 0, 0);

        while !candidates.is_full() && self.position < self.stream.len() {
            let frame = &self.stream[self.position];
            self.position += 1;
            observed += 1;
            match gate.observe(frame) {
                Decision::DiscardedWarmup => warmup += 1,
                Decision::Selected => {
                    candidates.push(frame.clone())?;
                    gated_in += 1;
                }
                Decision::Rejected => gated_out += 1,
            }
        }

        let Some(threshold) = gate.threshold() else {
            return Err(Error::WarmupExhausted {
                warmup: cfg.gate.warmup,
                available: observed,
            });
        };
        if gated_in + gated_out == 0 {
            return Err(if warmup > 0 {
                Error::WarmupExhausted {
                    warmup: cfg.gate.warmup,
                    available: observed,
                }
            } else {
                Error::StreamExhausted {
                    achieved: 0,
                    budget: cfg.budget,
                }
            });
        }
        let partial = !candidates.is_full();
        if partial {
            if candidates.len() < cfg.budget {
                return Err(Error::StreamExhausted {
                    achieved: candidates.len(),
                    budget: cfg.budget,
                });
            }
            warn!(
                achieved = candidates.len(),
                target, "stream ended before the candidate buffer filled"
            );
        }
        self.gate = Some(gate);

        let filtered = filter(&candidates, &cfg.filter)?;
        let round = self.client.submit_round(&filtered)?;
        let report = RoundReport {
            round_id: round.round_id,
            strategy: cfg.filter.strategy,
            budget: cfg.budget,
            gamma: cfg.gamma,
            frames_observed: observed,
            warmup_frames: warmup,
            frames_gated_in: gated_in,
            frames_gated_out: gated_out,
            candidate_count: candidates.len(),
            selected_count: filtered.len(),
            bytes_sent: round.entry.bytes_sent,
            gate_threshold: threshold,
            diversity: diversity_metrics(filtered.items()),
            partial,
            selected_frame_ids: filtered.frame_ids(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        info!(
            round = report.round_id,
            candidates = report.candidate_count,
            selected = report.selected_count,
            bytes = report.bytes_sent,
            "round complete"
        );
        Ok(RoundOutcome {
            report,
            filtered,
            labeled: round.labeled,
        })
    }

    /// Runs the configured number of rounds, stopping early after a partial
    /// round or once the stream cannot support another round. Round reports
    /// and labeled sets are written to `out` if given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<RoundReport>> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        let mut reports = Vec::new();
        for _ in 0..self.config.rounds {
            let outcome = match self.run_round() {
                Ok(o) => o,
                // Later rounds may simply run out of stream.
                Err(e @ (Error::WarmupExhausted { .. } | Error::StreamExhausted { .. }))
                    if !reports.is_empty() =>
                {
                    warn!(completed = reports.len(), error = %e, "stream ended before all rounds ran");
                    break;
                }
                Err(e) => return Err(e),
            };
            if let Some(dir) = out {
                write_round_outputs(dir, &outcome)?;
            }
            let partial = outcome.report.partial;
            reports.push(outcome.report);
            if partial {
                break;
            }
        }
        Ok(reports)
    }
}

/// One round from the start of `stream` through `transport`.
pub fn run_round<T: Transport>(
    stream: &[FrameRecord],
    config: &RoundConfig,
    transport: T,
) -> Result<RoundReport> {
    let client = Client::connect(transport, "edge")?;
    let mut pipeline = Pipeline::new(stream, *config, client)?;
    Ok(pipeline.run_round()?.report)
}

pub fn write_round_outputs(dir: &Path, outcome: &RoundOutcome) -> Result<()> {
    let id = outcome.report.round_id;
    let mut f = BufWriter::new(File::create(dir.join(format!("round_{id}.json")))?);
    serde_json::to_writer_pretty(&mut f, &outcome.report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let f = BufWriter::new(File::create(dir.join(format!("labeled_{id}.ndjson")))?);
    model::write_labels(&outcome.labeled, f)
}

/// A stream participating in a sweep.
#[derive(Clone, Debug)]
pub struct SweepStream {
    pub name: String,
    pub frames: Vec<FrameRecord>,
    pub oracle: Arc<OracleLabels>,
}

impl SweepStream {
    /// Loads `path` and, when present, the oracle file beside it whose name
    /// swaps the `stream` prefix for `oracle`.
    pub fn load(path: &Path) -> Result<Self> {
        let frames = model::read_stream(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let oracle = match oracle_path_for(path) {
            Some(p) if p.exists() => model::read_oracle(&p)?,
            _ => OracleLabels::new(),
        };
        Ok(SweepStream {
            name,
            frames,
            oracle: Arc::new(oracle),
        })
    }
}

pub fn oracle_path_for(stream: &Path) -> Option<PathBuf> {
    let file = stream.file_name()?.to_str()?;
    let rest = file.strip_prefix("stream")?;
    Some(stream.with_file_name(format!("oracle{rest}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub gammas: Vec<usize>,
    pub budgets: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub gate: GateConfig,
    pub seed: u64,
    pub density_metric: DensityMetric,
    pub area_epsilon: f64,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            gammas: vec![1, 2, 4, 8, 12],
            budgets: vec![32, 64, 128, 256],
            strategies: vec![Strategy::FarthestFirst, Strategy::Random],
            gate: GateConfig::default(),
            seed: 0,
            density_metric: DensityMetric::default(),
            area_epsilon: crate::filter::DEFAULT_AREA_EPSILON,
            jobs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Partial,
    Infeasible,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Partial => "partial",
            CellStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stream: String,
    pub gamma: usize,
    pub budget: usize,
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub status: CellStatus,
    pub report: Option<RoundReport>,
    pub error: Option<String>,
}

fn cell_config(cfg: &SweepConfig, gamma: usize, budget: usize, strategy: Strategy) -> RoundConfig {
    let mut rc = RoundConfig::new(budget, gamma, cfg.gate, strategy);
    rc.filter.density_metric = cfg.density_metric;
    rc.filter.area_epsilon = cfg.area_epsilon;
    if strategy == Strategy::Random {
        rc.filter.seed = Some(cfg.seed);
    }
    rc
}

/// One round per (stream, gamma, budget, strategy) cell, each from the start
/// of its stream. Rows come back in stream, gamma, budget, strategy order
/// regardless of `jobs`.
pub fn run_sweep(streams: &[SweepStream], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if streams.is_empty() {
        return Err(Error::Empty("sweep needs at least one stream"));
    }
    let mut cells = Vec::new();
    for (si, _) in streams.iter().enumerate() {
        for &gamma in &cfg.gammas {
            for &budget in &cfg.budgets {
                for &strategy in &cfg.strategies {
                    let rc = cell_config(cfg, gamma, budget, strategy);
                    rc.validate()?;
                    cells.push((si, rc));
                }
            }
        }
    }
    let run_cell = |(si, rc): &(usize, RoundConfig)| -> SweepRow {
        let s = &streams[*si];
        let transport = Loopback::new(Arc::clone(&s.oracle));
        let (status, report, error) = match run_round(&s.frames, rc, transport) {
            Ok(r) => {
                let status = if r.partial {
                    CellStatus::Partial
                } else {
                    CellStatus::Ok
                };
                (status, Some(r), None)
            }
            Err(e) => (CellStatus::Infeasible, None, Some(e.to_string())),
        };
        SweepRow {
            stream: s.name.clone(),
            gamma: rc.gamma,
            budget: rc.budget,
            strategy: rc.filter.strategy,
            seed: rc.filter.seed,
            status,
            report,
            error,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SWEEP_CSV_HEADER: [&str; 15] = [
    "stream",
    "gamma",
    "budget",
    "strategy",
    "seed",
    "status",
    "frames_observed",
    "frames_gated_in",
    "candidate_count",
    "selected_count",
    "bytes_sent",
    "gate_threshold",
    "min_pairwise_cos_distance",
    "mean_pairwise_cos_similarity",
    "error",
];

/// One CSV row per cell. Timing is left out so that reruns are
/// byte-identical.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for row in rows {
        let r = row.report.as_ref();
        let div = r.and_then(|r| r.diversity);
        w.write_record([
            row.stream.clone(),
            row.gamma.to_string(),
            row.budget.to_string(),
            row.strategy.to_string(),
            row.seed.map(|s| s.to_string()).unwrap_or_default(),
            row.status.as_str().to_string(),
            r.map(|r| r.frames_observed.to_string()).unwrap_or_default(),
            r.map(|r| r.frames_gated_in.to_string()).unwrap_or_default(),
            r.map(|r| r.candidate_count.to_string()).unwrap_or_default(),
            r.map(|r| r.selected_count.to_string()).unwrap_or_default(),
            r.map(|r| r.bytes_sent.to_string()).unwrap_or_default(),
            fmt_opt(r.map(|r| r.gate_threshold)),
            fmt_opt(div.map(|d| d.min_pairwise_cos_distance)),
            fmt_opt(div.map(|d| d.mean_pairwise_cos_similarity)),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Means over the streams whose round completed (fully or partially).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub gamma: usize,
    pub budget: usize,
    pub strategy: Strategy,
    pub streams_completed: usize,
    pub streams_infeasible: usize,
    pub mean_candidate_count: Option<f64>,
    pub mean_selected_count: Option<f64>,
    pub mean_bytes_sent: Option<f64>,
    pub mean_min_pairwise_cos_distance: Option<f64>,
    pub mean_mean_pairwise_cos_similarity: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize_sweep(rows: &[SweepRow], cfg: &SweepConfig) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for &gamma in &cfg.gammas {
        for &budget in &cfg.budgets {
            for &strategy in &cfg.strategies {
                let cell: Vec<&SweepRow> = rows
                    .iter()
                    .filter(|r| r.gamma == gamma && r.budget == budget && r.strategy == strategy)
                    .collect();
                let done: Vec<&RoundReport> =
                    cell.iter().filter_map(|r| r.report.as_ref()).collect();
                let divs: Vec<Diversity> = done.iter().filter_map(|r| r.diversity).collect();
                out.push(CellSummary {
                    gamma,
                    budget,
                    strategy,
                    streams_completed: done.len(),
                    streams_infeasible: cell.len() - done.len(),
                    mean_candidate_count: mean(done.iter().map(|r| r.candidate_count as f64)),
                    mean_selected_count: mean(done.iter().map(|r| r.selected_count as f64)),
                    mean_bytes_sent: mean(done.iter().map(|r| r.bytes_sent as f64)),
                    mean_min_pairwise_cos_distance: mean(
                        divs.iter().map(|d| d.min_pairwise_cos_distance),
                    ),
                    mean_mean_pairwise_cos_similarity: mean(
                        divs.iter().map(|d| d.mean_pairwise_cos_similarity),
                    ),
                });
            }
        }
    }
    out
}

/// Loads every stream, runs the sweep and writes `sweep.csv` and
/// `sweep_summary.json` into `out_dir`.
pub fn run_sweep_files(
    paths: &[PathBuf],
    cfg: &SweepConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let streams = paths
        .iter()
        .map(|p| SweepStream::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_sweep(&streams, cfg)?;
    fs::create_dir_all(out_dir)?;
    write_sweep_csv(
        &rows,
        BufWriter::new(File::create(out_dir.join("sweep.csv"))?),
    )?;
    let mut f = BufWriter::new(File::create(out_dir.join("sweep_summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &summarize_sweep(&rows, cfg))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(rows)
}
