use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dokt_core::manifest::read_label_rows;
use dokt_core::sampler::{
    self, labels_to_target_table, reports_from_jsonl, reports_to_jsonl, target_table_csv, RoundConfig,
    Run, Selection, Target,
};
use dokt_core::synthetic::write_synthetic;
use dokt_core::{Dataset, DoktError, PoolState, SampleId};
use dokt_service::Session;

use crate::args::{Cli, Command, GenSyntheticArgs, ReportArgs, SelectArgs, ServeArgs, SimulateArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<DoktError> for CliError {
    fn from(e: DoktError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: DoktError) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(runtime)?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Select(a) => select(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

/// File name of a run's report.
pub fn report_file_name(strategy: &str, seed: u64) -> String {
    format!("{strategy}_seed{seed}.jsonl")
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| runtime(DoktError::io(&tmp, e)))?;
    fs::rename(&tmp, path).map_err(|e| runtime(DoktError::io(path, e)))
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if a.strategy.is_empty() {
        return Err(CliError::Usage("--strategy needs at least one strategy".into()));
    }
    let mut strategies = a.strategy.clone();
    strategies.dedup();
    let runs: Vec<RoundConfig> = strategies
        .iter()
        .flat_map(|&s| (a.seed..a.seed + a.seeds).map(move |seed| (s, seed)))
        .map(|(s, seed)| a.round.config(s, seed))
        .collect();
    for cfg in &runs {
        cfg.validate().map_err(usage)?;
    }
    let dataset = Dataset::open(&a.manifest)?;

    let scores_dir = a.out.join("scores");
    fs::create_dir_all(if a.dump_scores { &scores_dir } else { &a.out }).map_err(|e| runtime(DoktError::io(&a.out, e)))?;
    for cfg in &runs {
        let name = cfg.strategy.name();
        let mut dumps = Vec::new();
        let reports = sampler::run_simulation_with(&dataset, cfg, |report, selection| {
            if a.dump_scores {
                if let Some(sel) = selection {
                    dumps.push((report.round, score_table(sel)));
                }
            }
        })?;
        for (round, table) in dumps {
            let path = scores_dir.join(format!("{name}_seed{}_round{round}.csv", cfg.seed));
            write_atomic(&path, table?.as_bytes())?;
        }
        let path = a.out.join(report_file_name(name, cfg.seed));
        write_atomic(&path, reports_to_jsonl(&reports).as_bytes())?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Every score computed during a selection, one row per scored id. DOKT
/// strategies list the whole diversity ranking; baselines list their picks.
fn score_table(sel: &Selection) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "diversity_rank",
        "s_trace",
        "iota",
        "mcosine",
        "s_learned",
        "d_kl",
        "d_domain",
        "entropy",
        "coreset_distance",
        "selected",
    ])
    .map_err(runtime)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let selected: std::collections::BTreeSet<SampleId> = sel.ids.iter().copied().collect();
    if sel.diversity.is_empty() && sel.uncertainty.is_empty() {
        for s in &sel.scores {
            w.write_record([
                s.id.to_string(),
                String::new(),
                opt(s.s_trace),
                s.iota.map(|i| i.to_string()).unwrap_or_default(),
                String::new(),
                opt(s.s_learned),
                opt(s.d_kl),
                opt(s.d_domain),
                opt(s.entropy),
                opt(s.coreset_distance),
                "1".into(),
            ])
            .map_err(runtime)?;
        }
    } else {
        let unc: BTreeMap<SampleId, _> = sel.uncertainty.iter().map(|(id, u)| (*id, u)).collect();
        let mut rows: Vec<(SampleId, Option<usize>)> =
            sel.diversity.iter().enumerate().map(|(i, (id, _))| (*id, Some(i))).collect();
        if rows.is_empty() {
            rows = sel.uncertainty.iter().map(|(id, _)| (*id, None)).collect();
        }
        let trace: BTreeMap<SampleId, _> = sel.diversity.iter().map(|(id, t)| (*id, t)).collect();
        for (id, rank) in rows {
            let t = trace.get(&id);
            let u = unc.get(&id);
            w.write_record([
                id.to_string(),
                rank.map(|r| r.to_string()).unwrap_or_default(),
                opt(t.map(|t| t.s_trace)),
                t.map(|t| t.iota.to_string()).unwrap_or_default(),
                opt(t.map(|t| t.mcos)),
                opt(u.map(|u| u.s_learned)),
                opt(u.map(|u| u.d_kl)),
                opt(u.map(|u| u.d_domain)),
                String::new(),
                String::new(),
                if selected.contains(&id) { "1" } else { "0" }.into(),
            ])
            .map_err(runtime)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)
}

/// Builds the pool described by a label file and selects one batch.
pub fn select_from_labels(dataset: &Dataset, labels: &Path, cfg: &RoundConfig, round: usize) -> Result<Selection, CliError> {
    let rows = read_label_rows(labels, dataset.n_classes())?;
    if let Some((id, _)) = rows.iter().find(|(id, _)| id.0 >= dataset.pool_size()) {
        return Err(CliError::Runtime(format!(
            "{}: sample {id} is in the held-out evaluation split (ids >= {})",
            labels.display(),
            dataset.pool_size()
        )));
    }
    let pool = PoolState::new(dataset.pool_size(), rows, cfg.m_per_round)?;
    if pool.labeled().is_empty() {
        return Err(DoktError::EmptyLabeledPool.into());
    }
    Ok(sampler::select_round(dataset, &pool, cfg, round, cfg.m_per_round)?)
}

fn select(a: SelectArgs) -> Result<(), CliError> {
    let cfg = RoundConfig {
        rounds: 1,
        budget: Some(a.round.m),
        ..a.round.config(a.strategy, a.seed)
    };
    cfg.validate().map_err(usage)?;
    let dataset = Dataset::open(&a.manifest)?;
    let selection = select_from_labels(&dataset, &a.labels, &cfg, a.round_index)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "s_trace", "d_domain"]).map_err(runtime)?;
    for s in &selection.scores {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([s.id.to_string(), opt(s.s_trace), opt(s.d_domain)])
            .map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(runtime)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(DoktError::io(dir, e)))?;
    }
    write_atomic(&a.out, &bytes)?;
    println!("{}", a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let cfg = a.round.config(a.strategy, a.seed);
    cfg.validate().map_err(usage)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let dataset = Arc::new(Dataset::open(&a.manifest)?);
    let session = Session::open(dataset, cfg, a.checkpoint_dir.as_deref()).map_err(runtime)?;
    let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
    runtime_.block_on(async move {
        eprintln!("serving on http://{addr}");
        dokt_service::serve(session, addr, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(runtime)
    })
}

/// Reads every `<strategy>_seed<N>.jsonl` file in `dir`.
pub fn load_runs(dir: &Path) -> Result<BTreeMap<String, Vec<Run>>, CliError> {
    let mut runs: BTreeMap<String, Vec<Run>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| runtime(DoktError::io(dir, e)))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((strategy, seed)) = stem
            .rsplit_once("_seed")
            .and_then(|(s, n)| n.parse::<u64>().ok().map(|n| (s.to_string(), n)))
        else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(|e| runtime(DoktError::io(&path, e)))?;
        let reports = reports_from_jsonl(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        runs.entry(strategy).or_default().push(Run { seed, reports });
    }
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("no report files in {}", dir.display())));
    }
    Ok(runs)
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let target = match a.target {
        Some(t) if !(0.0..=1.0).contains(&t) => {
            return Err(CliError::Usage("--target must lie in [0, 1]".into()));
        }
        Some(t) => Target::Fixed(t),
        None => Target::FinalAccuracyOf(a.target_strategy.clone()),
    };
    let runs = load_runs(&a.reports)?;
    let rows = labels_to_target_table(&runs, &target)?;
    let csv = target_table_csv(&rows);
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<(), CliError> {
    let cfg = a.config();
    cfg.validate().map_err(usage)?;
    let path = write_synthetic(&a.out, &cfg)?;
    println!("{}", path.display());
    Ok(())
}
