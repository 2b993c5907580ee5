//! End-to-end benchmark: per-composition pipeline construction, the four
//! evaluation methods, success metrics, trajectory probes, timing, and
//! report persistence.

use crate::config::{ConfigError, RunConfig};
use crate::crystal::Crystal;
use crate::io::fmt_f64;
use crate::optimize::{lcom_optimize, OptError, PhaseTimings};
use crate::oracle::{
    generate_dataset, global_minimum, mix_seed, random_stable_structure, total_energy,
    Composition, DatasetRecord, OracleError,
};
use crate::surrogate::{encode_dataset, train_naive, train_surrogate, SurrogateError, SurrogateModel};
use crate::vae::{train_vae, CdVaeModel, VaeError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("reference energy too close to zero: {0}")]
    ZeroReference(f64),
    #[error("report audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Success criterion: the found energy recovers the reference global
/// minimum up to `threshold` of its magnitude. The boundary is inclusive,
/// and `E_found == E_global` is always a success.
pub fn success(e_global: f64, e_found: f64, threshold: f64) -> Result<bool, BenchError> {
    if e_global.abs() < 1e-12 {
        return Err(BenchError::ZeroReference(e_global));
    }
    Ok((e_found - e_global) / e_global.abs() <= threshold)
}

/// Relative energy improvement `(E_init - E_final) / |E_init|`; positive
/// when optimization lowered the energy.
pub fn improvement(e_init: f64, e_final: f64) -> Result<f64, BenchError> {
    if e_init.abs() < 1e-12 {
        return Err(BenchError::ZeroReference(e_init));
    }
    Ok((e_init - e_final) / e_init.abs())
}

/// The four evaluated methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lcom,
    Sl,
    DecodeOnly,
    RandomSearch,
}

pub const METHODS: [Method; 4] = [Method::Lcom, Method::Sl, Method::DecodeOnly, Method::RandomSearch];

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Lcom => "LCOM",
            Method::Sl => "SL",
            Method::DecodeOnly => "decode-only",
            Method::RandomSearch => "random-search",
        }
    }
}

/// One benchmark row: a method evaluated from one seed on one composition.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub composition: String,
    pub seed: u64,
    pub e_init: f64,
    pub e_final: f64,
    pub e_global: f64,
    pub global_budget: usize,
    pub success: bool,
    pub improvement: f64,
    /// Optimization wall-clock for this run (excludes pipeline training).
    pub seconds: f64,
    /// Per-phase breakdown where the method has phases.
    pub phases: Option<PhaseTimings>,
}

/// Everything trained once per composition and shared by the methods.
pub struct CompositionArtifacts {
    pub composition: Composition,
    pub dataset: Vec<DatasetRecord>,
    pub vae: CdVaeModel,
    pub conservative: SurrogateModel,
    pub naive: SurrogateModel,
    pub e_global: f64,
    pub global_budget: usize,
    pub build_seconds: f64,
}

/// Builds the full pipeline for one composition: dataset, VAE, both
/// surrogates, and the brute-forced reference global minimum.
pub fn build_artifacts(
    config: &RunConfig,
    comp_id: &str,
    comp_seed: u64,
) -> Result<CompositionArtifacts, BenchError> {
    let t0 = Instant::now();
    let composition = Composition::parse(comp_id)?;
    let spec = config.potential_spec()?;
    let space = config.sample_space(&composition)?;

    let dataset = generate_dataset(
        std::slice::from_ref(&composition),
        config.dataset.per_composition,
        &spec,
        mix_seed(comp_seed, 1),
    )?;

    let mut vae_cfg = config.vae.clone();
    vae_cfg.seed = mix_seed(comp_seed, 2);
    let (vae, _) = train_vae(&dataset, &vae_cfg)?;

    let latents = encode_dataset(&vae, &dataset)?;
    let coms_cfg = config.surrogate.coms_config(mix_seed(comp_seed, 3))?;
    let (conservative, _) = train_surrogate(&latents, &coms_cfg)?;
    let (naive, _) = train_naive(&latents, &coms_cfg)?;

    let (_, e_global) = global_minimum(
        &composition,
        &spec,
        &space,
        config.benchmark.global_budget,
        mix_seed(comp_seed, 4),
    )?;

    Ok(CompositionArtifacts {
        composition,
        dataset,
        vae,
        conservative,
        naive,
        e_global,
        global_budget: config.benchmark.global_budget,
        build_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Oracle energy of a decoded structure; overlapping atoms evaluate to
/// positive infinity (the potential diverges there).
fn decoded_energy(crystal: &Crystal, spec: &crate::oracle::PotentialSpec) -> Result<f64, BenchError> {
    match total_energy(crystal, spec) {
        Ok(e) => Ok(e),
        Err(OracleError::OverlapSingularity { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e.into()),
    }
}

/// Runs all four methods from the identical initial structure for one
/// evaluation seed.
pub fn evaluate_methods(
    config: &RunConfig,
    artifacts: &CompositionArtifacts,
    comp_seed: u64,
    eval_seed: u64,
) -> Result<Vec<RunReport>, BenchError> {
    let spec = config.potential_spec()?;
    let space = config.sample_space(&artifacts.composition)?;
    let steps = config.optimizer.steps;
    let step_size = config.optimizer.step_size;
    let threshold = config.benchmark.threshold;

    let init_seed = mix_seed(comp_seed, 0x11 ^ eval_seed);
    let t_init = Instant::now();
    let init = random_stable_structure(&artifacts.composition, &spec, &space, init_seed)?;
    let init_seconds = t_init.elapsed().as_secs_f64();
    let e_init = total_energy(&init, &spec)?;

    let mut reports = Vec::with_capacity(4);
    let mut push = |method: Method,
                    e_final: f64,
                    seconds: f64,
                    phases: Option<PhaseTimings>|
     -> Result<(), BenchError> {
        reports.push(RunReport {
            method,
            composition: artifacts.composition.id().to_string(),
            seed: eval_seed,
            e_init,
            e_final,
            e_global: artifacts.e_global,
            global_budget: artifacts.global_budget,
            success: success(artifacts.e_global, e_final, threshold)?,
            improvement: improvement(e_init, e_final)?,
            seconds,
            phases,
        });
        Ok(())
    };

    // LCOM: conservative surrogate, T descent steps.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0xa1));
    let outcome = lcom_optimize(&artifacts.vae, &artifacts.conservative, &init, steps, step_size, &mut rng)?;
    let e_final = decoded_energy(&outcome.crystal, &spec)?;
    push(Method::Lcom, e_final, outcome.timings.total(), Some(outcome.timings))?;

    // SL: identical pipeline on the naive surrogate.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0xa2));
    let outcome = lcom_optimize(&artifacts.vae, &artifacts.naive, &init, steps, step_size, &mut rng)?;
    let e_final = decoded_energy(&outcome.crystal, &spec)?;
    push(Method::Sl, e_final, outcome.timings.total(), Some(outcome.timings))?;

    // Decode-only: encode then decode, no descent.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0xa3));
    let outcome = lcom_optimize(&artifacts.vae, &artifacts.conservative, &init, 0, step_size, &mut rng)?;
    let e_final = decoded_energy(&outcome.crystal, &spec)?;
    push(Method::DecodeOnly, e_final, outcome.timings.total(), Some(outcome.timings))?;

    // Random search, budget-matched to LCOM's single oracle relaxation:
    // its answer is the initial stable structure itself.
    push(Method::RandomSearch, e_init, init_seconds, None)?;

    Ok(reports)
}

/// Benchmark outcome: ordered rows plus per-composition failures (a failed
/// composition aborts its own rows, never the whole run).
pub struct BenchOutcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<(String, String)>,
}

pub fn run_benchmark(config: &RunConfig, single_thread: bool) -> BenchOutcome {
    let comp_jobs: Vec<(usize, String)> = config
        .compositions
        .iter()
        .cloned()
        .enumerate()
        .collect();

    let run_one = |(index, comp_id): &(usize, String)| -> (String, Result<Vec<RunReport>, String>) {
        let comp_seed = mix_seed(config.benchmark.master_seed, *index as u64);
        let result = build_artifacts(config, comp_id, comp_seed).and_then(|artifacts| {
            let mut rows = Vec::new();
            for &eval_seed in &config.benchmark.eval_seeds {
                rows.extend(evaluate_methods(config, &artifacts, comp_seed, eval_seed)?);
            }
            Ok(rows)
        });
        (comp_id.clone(), result.map_err(|e| e.to_string()))
    };

    let results: Vec<(String, Result<Vec<RunReport>, String>)> = if single_thread {
        comp_jobs.iter().map(run_one).collect()
    } else {
        comp_jobs.par_iter().map(run_one).collect()
    };

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (comp_id, result) in results {
        match result {
            Ok(rows) => reports.extend(rows),
            Err(message) => failures.push((comp_id, message)),
        }
    }
    BenchOutcome { reports, failures }
}

pub const REPORT_CSV_HEADER: &str =
    "method,composition,seed,E_init,E_final,E_global,success,improvement,seconds";

/// Renders the fixed-schema metrics table. With `zero_seconds` the timing
/// column is written as zero so reports are byte-identical across runs
/// (wall-clock is inherently non-reproducible; the `timing` command is the
/// timing source).
pub fn reports_to_csv(reports: &[RunReport], zero_seconds: bool) -> String {
    let mut out = String::new();
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let seconds = if zero_seconds { 0.0 } else { r.seconds };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.tag(),
            r.composition,
            r.seed,
            fmt_f64(r.e_init),
            fmt_f64(r.e_final),
            fmt_f64(r.e_global),
            r.success,
            fmt_f64(r.improvement),
            fmt_f64(seconds),
        ));
    }
    out
}

/// Re-derives every success flag from the stored energies; a mismatch
/// means the report was corrupted somewhere between run and persistence.
pub fn audit_reports(reports: &[RunReport], threshold: f64) -> Result<(), BenchError> {
    for (k, r) in reports.iter().enumerate() {
        let expect = success(r.e_global, r.e_final, threshold)?;
        if expect != r.success {
            return Err(BenchError::Audit(format!(
                "row {k} ({} {} seed {}): stored success {} but energies imply {}",
                r.method.tag(),
                r.composition,
                r.seed,
                r.success,
                expect
            )));
        }
    }
    Ok(())
}

/// Human-readable summary: success counts and mean improvement per method,
/// in the spirit of an accuracy table.
pub fn render_summary(outcome: &BenchOutcome) -> String {
    let mut out = String::new();
    out.push_str("method         successes  runs  mean_improvement\n");
    for method in METHODS {
        let rows: Vec<&RunReport> =
            outcome.reports.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let successes = rows.iter().filter(|r| r.success).count();
        let mean_improvement =
            rows.iter().map(|r| r.improvement).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!(
            "{:<14} {:>9}  {:>4}  {:>+.4}\n",
            method.tag(),
            successes,
            rows.len(),
            mean_improvement
        ));
    }
    if !outcome.failures.is_empty() {
        out.push_str("\nfailed compositions:\n");
        for (comp, msg) in &outcome.failures {
            out.push_str(&format!("  {comp}: {msg}\n"));
        }
    }
    out
}

/// One decoded point on an optimization trajectory. A missing energy is a
/// decode failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub method: Method,
    pub composition: String,
    pub seed: u64,
    pub step: usize,
    pub oracle_energy: Option<f64>,
}

/// Decodes every `stride`-th iterate of the LCOM and SL descent paths from
/// one seed and evaluates the oracle on each, producing the data behind
/// optimization-exploitation plots.
pub fn trajectory_probe(
    config: &RunConfig,
    artifacts: &CompositionArtifacts,
    comp_seed: u64,
    eval_seed: u64,
) -> Result<Vec<ProbePoint>, BenchError> {
    let spec = config.potential_spec()?;
    let space = config.sample_space(&artifacts.composition)?;
    let stride = config.benchmark.trajectory_stride.max(1);
    let steps = config.optimizer.steps;

    let init_seed = mix_seed(comp_seed, 0x11 ^ eval_seed);
    let init = random_stable_structure(&artifacts.composition, &spec, &space, init_seed)?;
    let (z0, _) = artifacts.vae.encode(&init)?;

    let mut points = Vec::new();
    for (method, model) in [
        (Method::Lcom, &artifacts.conservative),
        (Method::Sl, &artifacts.naive),
    ] {
        let trajectory = crate::optimize::descend(model, &z0, steps, config.optimizer.step_size)?;
        let mut ks: Vec<usize> = (0..=steps).step_by(stride).collect();
        if ks.last() != Some(&steps) {
            ks.push(steps);
        }
        for k in ks {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0xb0 + k as u64));
            let energy = match artifacts.vae.decode(&trajectory.zs[k], &mut rng) {
                Ok(crystal) => Some(decoded_energy(&crystal, &spec)?),
                Err(_) => None,
            };
            points.push(ProbePoint {
                method,
                composition: artifacts.composition.id().to_string(),
                seed: eval_seed,
                step: k,
                oracle_energy: energy,
            });
        }
    }
    Ok(points)
}

pub const TRAJECTORY_CSV_HEADER: &str = "method,composition,seed,step,oracle_energy";

pub fn probe_points_to_csv(points: &[ProbePoint]) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for p in points {
        let energy = match p.oracle_energy {
            Some(e) => fmt_f64(e),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.method.tag(),
            p.composition,
            p.seed,
            p.step,
            energy
        ));
    }
    out
}

/// Per-structure wall-clock means for each optimization phase, plus one
/// oracle relaxation measured on the same hardware for comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingReport {
    pub runs: usize,
    pub encode_s: f64,
    pub descend_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub relax_s: f64,
}

impl TimingReport {
    /// How many latent descents fit in one oracle relaxation.
    pub fn descend_speedup(&self) -> f64 {
        self.relax_s / self.descend_s
    }

    pub fn render(&self) -> String {
        format!(
            "phase            seconds/structure\n\
             encode           {:>12.6}\n\
             descend          {:>12.6}\n\
             decode           {:>12.6}\n\
             total            {:>12.6}\n\
             oracle relax     {:>12.6}\n\
             relax / descend  {:>12.1}x\n",
            self.encode_s,
            self.descend_s,
            self.decode_s,
            self.total_s,
            self.relax_s,
            self.descend_speedup()
        )
    }
}

/// Measures the optimization phases over the configured evaluation seeds
/// and one oracle relaxation per seed.
pub fn timing_report(
    config: &RunConfig,
    artifacts: &CompositionArtifacts,
    comp_seed: u64,
) -> Result<TimingReport, BenchError> {
    let spec = config.potential_spec()?;
    let space = config.sample_space(&artifacts.composition)?;
    let mut encode_s = 0.0;
    let mut descend_s = 0.0;
    let mut decode_s = 0.0;
    let mut relax_s = 0.0;
    let runs = config.benchmark.eval_seeds.len();
    for &eval_seed in &config.benchmark.eval_seeds {
        let init_seed = mix_seed(comp_seed, 0x11 ^ eval_seed);
        let t0 = Instant::now();
        let init = random_stable_structure(&artifacts.composition, &spec, &space, init_seed)?;
        relax_s += t0.elapsed().as_secs_f64();

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, 0xa1));
        let outcome = lcom_optimize(
            &artifacts.vae,
            &artifacts.conservative,
            &init,
            config.optimizer.steps,
            config.optimizer.step_size,
            &mut rng,
        )?;
        encode_s += outcome.timings.encode_s;
        descend_s += outcome.timings.descend_s;
        decode_s += outcome.timings.decode_s;
    }
    let n = runs as f64;
    Ok(TimingReport {
        runs,
        encode_s: encode_s / n,
        descend_s: descend_s / n,
        decode_s: decode_s / n,
        total_s: (encode_s + descend_s + decode_s) / n,
        relax_s: relax_s / n,
    })
}
