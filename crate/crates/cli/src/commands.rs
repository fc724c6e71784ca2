use std::path::{Path, PathBuf};
use std::time::Instant;

use kms_core::datagen::{generate, Dataset, DatasetSpec};
use kms_core::io::{format_f64, read_csv, write_csv};
use kms_core::kernels::{KernelSpec, PointCloud};
use kms_core::kms::{kms2, kms2_pipeline};
use kms_core::rng::child_seed;
use kms_core::stats::{
    rate_sweep, theorem_test, two_sample_test, CriticalValueParams, PermutationTestConfig,
    SweepConfig, SweepPath,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    Cli, Command, DistanceArgs, GenerateArgs, KernelKind, RankcheckArgs, SweepArgs, TestArgs,
    TestMode,
};
use crate::output::{emit_json, emit_text, CliError, DistanceRecord, TestRecord, Timings};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let timings = || {
        cli.timings.then(|| Timings {
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    match &cli.command {
        Command::Distance(a) => distance(a, timings),
        Command::Test(a) => test(a, timings),
        Command::Rankcheck(a) => rankcheck(a),
        Command::Sweep(a) => sweep(a),
        Command::Generate(a) => generate_files(a),
    }
}

fn read_pair(x: &Path, y: &Path) -> Result<(PointCloud, PointCloud), CliError> {
    let read = |p: &Path| read_csv(p).map_err(|e| CliError::parse(format!("{}: {e}", p.display())));
    Ok((read(x)?, read(y)?))
}

fn distance(a: &DistanceArgs, timings: impl Fn() -> Option<Timings>) -> Result<(), CliError> {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let kernel = a.kernel.spec(KernelKind::Gaussian).resolve(&x, &y)?;
    let result = kms2(&x, &y, &kernel, &a.solver.config(a.seed))?;
    emit_json(&DistanceRecord::new(&result, timings()), a.out.as_deref())
}

fn test(a: &TestArgs, timings: impl Fn() -> Option<Timings>) -> Result<(), CliError> {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let spec = a.kernel.spec(KernelKind::Gaussian);
    let kms_cfg = a.solver.config(a.seed);
    let record = match a.mode {
        TestMode::Bootstrap => {
            let cfg = PermutationTestConfig {
                alpha: a.alpha,
                permutations: a.permutations,
                p: a.p,
                kms: kms_cfg,
            };
            let out = two_sample_test(&x, &y, &spec, &cfg, a.seed)?;
            TestRecord {
                command: "test",
                mode: "bootstrap",
                seed: a.seed,
                n: x.n(),
                kernel: out.kernel,
                alpha: a.alpha,
                p: a.p,
                statistic: out.result.statistic,
                threshold: out.result.threshold,
                reject: out.result.reject,
                p_value: out.result.p_value,
                distance: out.fit.distance,
                rank: out.fit.rank,
                permutation_stats: out.result.permutation_stats,
                timings: timings(),
            }
        }
        TestMode::Theorem => {
            let kernel = spec.resolve(&x, &y)?;
            let params = CriticalValueParams {
                a: kernel.bound(&[&x, &y]),
                c_univ: a.c_univ,
                p: a.p,
                alpha: a.alpha,
            };
            let out = theorem_test(&x, &y, &kernel, &params, &kms_cfg)?;
            TestRecord {
                command: "test",
                mode: "theorem",
                seed: a.seed,
                n: x.n(),
                kernel,
                alpha: a.alpha,
                p: a.p,
                statistic: out.result.statistic,
                threshold: out.result.threshold,
                reject: out.result.reject,
                p_value: out.result.p_value,
                distance: out.fit.distance,
                rank: out.fit.rank,
                permutation_stats: out.result.permutation_stats,
                timings: timings(),
            }
        }
    };
    emit_json(&record, a.out.as_deref())
}

/// A dataset kind such as `circle`, or a JSON object with `kind` and
/// parameters. Missing parameters take their defaults.
fn parse_dataset(s: &str) -> Result<Dataset, CliError> {
    let text = if s.trim_start().starts_with('{') {
        s.to_string()
    } else {
        serde_json::json!({ "kind": s }).to_string()
    };
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid dataset {s:?}: {e}")))
}

struct RankRow {
    n: usize,
    trial: usize,
    seed: u64,
    rank_before: usize,
    rank_after: usize,
    bound: usize,
    loops: usize,
    pivots: usize,
    sdr_value: f64,
    reduced_value: f64,
}

fn rankcheck(a: &RankcheckArgs) -> Result<(), CliError> {
    let dataset = parse_dataset(&a.dataset)?;
    let spec = a.kernel.spec(KernelKind::Gaussian);
    let jobs: Vec<(usize, usize)> = a
        .n_list
        .iter()
        .flat_map(|&n| (0..a.trials).map(move |t| (n, t)))
        .collect();
    let rows = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(n, trial))| {
            let seed = child_seed(a.seed, idx as u64);
            let (x, y) = generate(&DatasetSpec::new(dataset.clone(), n, seed))?;
            let kernel = spec.resolve(&x, &y)?;
            let p = kms2_pipeline(&x, &y, &kernel, &a.solver.config(seed))?;
            Ok(RankRow {
                n,
                trial,
                seed,
                rank_before: p.reduced.rank_before,
                rank_after: p.reduced.rank,
                bound: p.reduced.k_bound,
                loops: p.reduced.loops,
                pivots: p.reduced.pivots,
                sdr_value: p.reduced.value_before,
                reduced_value: p.reduced.value,
            })
        })
        .collect::<kms_core::Result<Vec<_>>>()?;

    let mut csv = String::from(
        "n,trial,seed,rank_before,rank_after,bound,loops,pivots,sdr_value,reduced_value\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.n,
            r.trial,
            r.seed,
            r.rank_before,
            r.rank_after,
            r.bound,
            r.loops,
            r.pivots,
            format_f64(r.sdr_value),
            format_f64(r.reduced_value)
        ));
    }
    emit_text(&csv, a.out.as_deref())?;
    if let Some(r) = rows.iter().find(|r| r.rank_after > r.bound) {
        return Err(CliError::solver(format!(
            "rank after reduction {} exceeds the bound {} at n = {}, trial {}",
            r.rank_after, r.bound, r.n, r.trial
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRecord {
    command: &'static str,
    dataset: Dataset,
    kernel: KernelSpec,
    p: f64,
    trials: usize,
    seed: u64,
    path: SweepPath,
    sizes: Vec<usize>,
    means: Vec<f64>,
    slope: Option<f64>,
    intercept: Option<f64>,
    slope_se: Option<f64>,
    degenerate: bool,
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    if a.sizes.len() < 2 {
        return Err(CliError::usage(
            "--sizes needs at least two sizes to fit a slope",
        ));
    }
    let cfg = SweepConfig {
        dataset: parse_dataset(&a.dataset)?,
        kernel: a.kernel.spec(KernelKind::Dot),
        p: a.p,
        sizes: a.sizes.clone(),
        trials: a.trials,
        seed: a.seed,
        kms: a.solver.config(a.seed),
    };
    let res = rate_sweep(&cfg)?;
    if let Some(path) = &a.csv {
        let mut csv = String::from("n,trial,statistic\n");
        for r in &res.rows {
            csv.push_str(&format!(
                "{},{},{}\n",
                r.n,
                r.trial,
                format_f64(r.statistic)
            ));
        }
        emit_text(&csv, Some(path))?;
    }
    let record = SweepRecord {
        command: "sweep",
        dataset: cfg.dataset,
        kernel: cfg.kernel,
        p: cfg.p,
        trials: cfg.trials,
        seed: cfg.seed,
        path: res.path,
        sizes: res.sizes,
        means: res.means,
        slope: res.slope,
        intercept: res.intercept,
        slope_se: res.slope_se,
        degenerate: res.degenerate,
    };
    emit_json(&record, a.out.as_deref())
}

fn generate_files(a: &GenerateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.spec)
        .map_err(|e| CliError::parse(format!("{}: {e}", a.spec.display())))?;
    let spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| {
        let msg = format!("{}: {e}", a.spec.display());
        if e.is_data() {
            CliError::usage(msg)
        } else {
            CliError::parse(msg)
        }
    })?;
    let (x, y) = generate(&spec)?;
    let path = |suffix: &str| {
        let mut p = a.out_prefix.clone().into_os_string();
        p.push(suffix);
        PathBuf::from(p)
    };
    write_csv(&x, path("_x.csv"))?;
    write_csv(&y, path("_y.csv"))?;
    Ok(())
}
