use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use tokenhorizon::efficiency::{
    arch_preset, calibrate_text_tokens, flops_estimate, write_cost_csv, CostReport, ARCH_PRESETS, LLAVA_BASELINE_FLOPS,
};
use tokenhorizon::engine::{ArchConfig, Model, ModelCheckpoint, MultimodalSequence, Precision};
use tokenhorizon::harness::{
    eval_accuracy, gen_task, profile_dataset, run_capacity, run_info_prune_curve, run_schedule_bench,
    run_strategy_eval, run_withdraw_sweep, write_loss, Dataset, ExperimentResult, Recipe, RunManifest, SweepConfig,
    TaskKind, TaskSpec,
};
use tokenhorizon::information::{detect_horizon, write_profile_csv, write_stats_csv};
use tokenhorizon::pruning::{preset, preset_names, PruneSchedule};
use tokenhorizon::tensor::Scalar;
use tokenhorizon::Error;

use crate::{Cli, CliError, Command, DataArgs, FlopsArgs, GenDataArgs, Global, ProfileArgs, SweepArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

/// Runs `body` on the checkpoint in its own precision.
macro_rules! with_model {
    ($ck:expr, |$m:ident| $body:expr) => {
        match $ck.arch.precision {
            Precision::Single => {
                let $m: Model<f32> = $ck.model::<f32>()?;
                $body
            }
            Precision::Double => {
                let $m: Model<f64> = $ck.model::<f64>()?;
                $body
            }
        }
    };
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    dispatch(cli, args)
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => train(g, a, args),
        Command::GenData(a) => gen_data(g, a, args),
        Command::Profile(a) => profile(g, a, args),
        Command::Sweep(a) => sweep(g, a, args),
        Command::Flops(a) => flops(g, a, args),
        Command::Replay(a) => {
            let m = RunManifest::load(&a.manifest)?;
            let recorded = Cli::try_parse_from(std::iter::once("tokenhorizon".to_string()).chain(m.args.clone()))
                .map_err(|e| CliError::Usage(format!("manifest arguments do not parse: {e}")))?;
            if matches!(recorded.command, Command::Replay(_)) {
                return Err(CliError::Usage("a manifest cannot replay another replay".into()));
            }
            let replayed = Cli {
                global: Global {
                    threads: g.threads,
                    out: g.out.clone(),
                    force: g.force,
                },
                command: recorded.command,
            };
            println!("replaying `{}` into {}", m.command, g.out.display());
            dispatch(replayed, m.args)
        }
    }
}

/// Refuses to clobber `paths` unless `--force`.
fn check_fresh(g: &Global, paths: &[PathBuf]) -> Result<()> {
    if g.force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Exists(p.clone())),
        None => Ok(()),
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn manifest(g: &Global, command: &str, args: &[String]) -> RunManifest {
    RunManifest::new(command, args.to_vec(), &g.out)
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Core(Error::File { path: path.into(), source: e }))
}

fn parse_task(s: &str) -> Result<Vec<TaskKind>> {
    match s {
        "mixed" => Ok(vec![TaskKind::Lookup, TaskKind::Majority]),
        other => Ok(vec![other.parse::<TaskKind>()?]),
    }
}

fn train(g: &Global, a: &TrainArgs, args: Vec<String>) -> Result<()> {
    let (mut recipe, config) = match &a.recipe {
        Some(path) => {
            let text = read_config(path)?;
            (Recipe::from_toml(&text)?, Some((path, text)))
        }
        None => (Recipe::preset(&a.preset)?, None),
    };
    if let Some(seed) = a.seed {
        recipe = recipe.with_seed(seed);
    }
    if let Some(t) = &a.task {
        recipe.tasks = parse_task(t)?;
    }
    if let Some(steps) = a.steps {
        recipe.train.steps = steps;
    }
    if let Some(p) = &a.precision {
        recipe.arch.precision = p.parse::<Precision>()?;
    }
    recipe.validate()?;
    if recipe.train.steps == 0 {
        return Err(Error::NoTraining.into());
    }
    let name = a.name.clone().unwrap_or_else(|| recipe.name.clone());
    let ck_path = g.out.join(format!("{name}.ckpt"));
    let loss_path = g.out.join(format!("{name}.loss.csv"));
    let acc_path = g.out.join(format!("{name}.accuracy.csv"));
    check_fresh(g, &[ck_path.clone(), loss_path.clone(), acc_path.clone()])?;

    let mut m = manifest(g, "train", &args);
    if let Some((p, text)) = config {
        m.config_path = Some(p.display().to_string());
        m.config = Some(text);
    } else {
        m.config = Some(recipe.to_toml());
    }
    m.seeds = vec![recipe.data_seed, recipe.init_seed, recipe.train.seed];
    m.write(&g.out, &name)?;

    eprintln!("training {} for {} steps", recipe.name, recipe.train.steps);
    let (ck, trace) = recipe.run()?;
    ck.save(&ck_path)?;
    write_loss(&loss_path, &trace)?;
    write(&g.out.join(format!("{name}.recipe.toml")), recipe.to_toml())?;
    let mut csv = String::from("task,accuracy,samples\n");
    for &kind in &recipe.tasks {
        let data = recipe.heldout(kind)?;
        let acc = with_model!(ck, |model| eval_accuracy(&model, &data)?);
        println!("held-out accuracy ({kind}): {acc}");
        csv.push_str(&format!("{kind},{acc},{}\n", data.len()));
    }
    write(&acc_path, csv)?;
    if let Some(last) = trace.last() {
        println!("final loss: {last}");
    }
    println!("checkpoint: {} ({})", ck_path.display(), ck.content_hash());
    Ok(())
}

fn gen_data(g: &Global, a: &GenDataArgs, args: Vec<String>) -> Result<()> {
    let kind: TaskKind = a.task.parse()?;
    let spec = TaskSpec::new(kind, a.grid_side, a.colors, a.samples, a.heldout, a.seed);
    let name = a.name.clone().unwrap_or_else(|| kind.to_string());
    let train_path = g.out.join(format!("{name}.train.data"));
    let held_path = g.out.join(format!("{name}.heldout.data"));
    check_fresh(g, &[train_path.clone(), held_path.clone()])?;
    let mut m = manifest(g, "gen-data", &args);
    m.seeds = vec![a.seed];
    m.write(&g.out, &name)?;
    let splits = gen_task(&spec)?;
    splits.train.save(&train_path)?;
    splits.heldout.save(&held_path)?;
    println!("wrote {} and {}", train_path.display(), held_path.display());
    Ok(())
}

fn load_data(d: &DataArgs, d_model: usize) -> Result<(String, Vec<MultimodalSequence>)> {
    match &d.dataset {
        Some(path) => {
            let ds = Dataset::load(path)?;
            Ok((ds.spec.kind.to_string(), ds.sequences(d_model)))
        }
        None => {
            let kind: TaskKind = d.task.parse()?;
            Ok((kind.to_string(), standard_heldout(kind, d.data_seed, d_model)?))
        }
    }
}

/// Held-out split the standard recipes evaluate on.
fn standard_heldout(kind: TaskKind, data_seed: u64, d_model: usize) -> Result<Vec<MultimodalSequence>> {
    let mut r = Recipe::preset("default")?;
    r.data_seed = data_seed;
    Ok(gen_task(&r.task_spec(kind))?.heldout.sequences(d_model))
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    Ok(ModelCheckpoint::load(path, None)?)
}

fn profile(g: &Global, a: &ProfileArgs, args: Vec<String>) -> Result<()> {
    if a.tau <= 0.0 || a.persistence == 0 {
        return Err(CliError::Usage("--tau must be positive and --persistence at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (label, data) = load_data(&a.data, ck.arch.d_model)?;
    let data = &data[..a.samples.min(data.len())];
    let profile_path = g.out.join("profile.csv");
    let stats_path = g.out.join("profile.stats.csv");
    check_fresh(g, &[profile_path.clone(), stats_path.clone()])?;
    let mut m = manifest(g, "profile", &args);
    m.checkpoint_hash = Some(ck.content_hash());
    m.seeds = vec![a.data.data_seed];
    m.write(&g.out, "profile")?;

    let (profiles, stats) = with_model!(ck, |model| profile_dataset(&model, data)?);
    let ids: Vec<String> = (0..profiles.len()).map(|i| format!("{label}-{i}")).collect();
    let named: Vec<(String, &_)> = ids.iter().cloned().zip(profiles.iter()).collect();
    let mut buf = Vec::new();
    write_profile_csv(&mut buf, &named)?;
    write(&profile_path, buf)?;
    let mut buf = Vec::new();
    write_stats_csv(&mut buf, &stats)?;
    write(&stats_path, buf)?;
    let horizon = detect_horizon(&stats, a.tau, a.persistence);
    match horizon {
        Some(h) => println!("detected horizon: {h} (tau={}, persistence={})", a.tau, a.persistence),
        None => println!("detected horizon: none (tau={}, persistence={})", a.tau, a.persistence),
    }
    Ok(())
}

fn resolve_schedule(name: &str) -> Result<PruneSchedule> {
    if let Some(s) = preset(name) {
        return Ok(s);
    }
    if name.ends_with(".toml") {
        return Ok(PruneSchedule::load(name)?);
    }
    Err(CliError::Usage(format!(
        "unknown schedule {name:?}; use a .toml file or one of: {}",
        preset_names().collect::<Vec<_>>().join(", ")
    )))
}

fn run_experiment<T: Scalar>(
    a: &SweepArgs,
    model: &Model<T>,
    hash: &str,
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let d = model.arch().d_model;
    let (label, data) = load_data(&a.data, d)?;
    Ok(match a.id.as_str() {
        "info-prune" => run_info_prune_curve(model, hash, &data, cfg)?,
        "strategy-eval" => run_strategy_eval(model, hash, &data, cfg)?,
        "withdraw" => {
            let mut sets = vec![(label, data)];
            if a.both_tasks && a.data.dataset.is_none() {
                sets = vec![
                    ("lookup".into(), standard_heldout(TaskKind::Lookup, a.data.data_seed, d)?),
                    ("majority".into(), standard_heldout(TaskKind::Majority, a.data.data_seed, d)?),
                ];
            }
            run_withdraw_sweep(model, hash, &sets, cfg)?
        }
        "schedule-bench" => {
            let schedules = cfg.schedules.iter().map(|s| resolve_schedule(s)).collect::<Result<Vec<_>>>()?;
            run_schedule_bench(model, hash, &data, &schedules, cfg)?
        }
        other => return Err(CliError::Usage(format!("experiment {other} needs several checkpoints"))),
    })
}

fn sweep(g: &Global, a: &SweepArgs, args: Vec<String>) -> Result<()> {
    let (cfg, config) = match &a.config {
        Some(p) => {
            let text = read_config(p)?;
            (SweepConfig::from_toml(&text)?, Some((p, text)))
        }
        None => (SweepConfig::default(), None),
    };
    let cks = a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    if a.id == "capacity" && cks.len() < 2 {
        return Err(CliError::Usage("capacity needs at least two --checkpoint files".into()));
    }
    if a.id != "capacity" && cks.len() != 1 {
        return Err(CliError::Usage(format!("{} takes exactly one --checkpoint", a.id)));
    }
    let outputs = [g.out.join(format!("{}.csv", a.id)), g.out.join(format!("{}.summary.csv", a.id))];
    check_fresh(g, &outputs)?;
    let hashes: Vec<String> = cks.iter().map(ModelCheckpoint::content_hash).collect();
    let mut m = manifest(g, "sweep", &args);
    if let Some((p, text)) = config {
        m.config_path = Some(p.display().to_string());
        m.config = Some(text);
    } else {
        m.config = Some(cfg.to_toml());
    }
    m.seeds = vec![cfg.seed, a.data.data_seed];
    m.checkpoint_hash = Some(hashes.join("+"));
    let name = m.write(&g.out, &a.id)?;

    let result = if a.id == "capacity" {
        // Mixed precisions are compared in single precision.
        let models = cks.iter().map(|c| c.model::<f32>()).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut entries = Vec::new();
        for ((path, model), hash) in a.checkpoint.iter().zip(&models).zip(&hashes) {
            let label = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
            let (_, data) = load_data(&a.data, model.arch().d_model)?;
            entries.push((label, model, hash.clone(), data));
        }
        run_capacity(&entries, &cfg)?
    } else {
        let ck = &cks[0];
        with_model!(ck, |model| run_experiment(a, &model, &hashes[0], &cfg)?)
    };
    for path in result.write_to(&g.out, Some(&name))? {
        println!("wrote {}", path.display());
    }
    for (k, v) in &result.summary {
        println!("{k}: {v}");
    }
    Ok(())
}

fn flops(g: &Global, a: &FlopsArgs, args: Vec<String>) -> Result<()> {
    let (arch, arch_name) = match &a.arch_file {
        Some(p) => {
            let text = read_config(p)?;
            let arch: ArchConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            arch.validate()?;
            (arch, p.display().to_string())
        }
        None => (
            arch_preset(&a.arch).ok_or_else(|| {
                CliError::Usage(format!("unknown arch {:?}; presets: {}", a.arch, ARCH_PRESETS.join(", ")))
            })?,
            a.arch.clone(),
        ),
    };
    let n_text = match a.n_text {
        Some(n) => n,
        None => calibrate_text_tokens(&arch, a.n_visual, LLAVA_BASELINE_FLOPS),
    };
    let mut schedules = a.schedule.iter().map(|s| resolve_schedule(s)).collect::<Result<Vec<_>>>()?;
    for f in &a.schedule_file {
        schedules.push(PruneSchedule::load(f)?);
    }
    let csv_path = g.out.join("flops.csv");
    check_fresh(g, &[csv_path.clone()])?;
    let mut m = manifest(g, "flops", &args);
    m.config = Some(format!("arch = {arch_name:?}\nn_text = {n_text}\n"));
    m.write(&g.out, "flops")?;

    let base = flops_estimate(&arch, &PruneSchedule::empty("none"), a.n_visual, n_text, a.bytes_per_element)?;
    println!(
        "{arch_name}: {} visual + {n_text} text tokens{}; unpruned {:.3} TFLOPs, KV {:.1} MiB",
        a.n_visual,
        if a.n_text.is_none() { " (text calibrated to 9.22 TFLOPs)" } else { "" },
        base.total_tflops(),
        base.kv_cache_mib()
    );
    let reports: Vec<(String, CostReport)> = schedules
        .iter()
        .map(|s| Ok((s.name.clone(), flops_estimate(&arch, s, a.n_visual, n_text, a.bytes_per_element)?)))
        .collect::<Result<_>>()?;
    let rows: Vec<(String, f64, &CostReport)> =
        reports.iter().map(|(n, r)| (n.clone(), r.mean_visual_tokens(n_text), r)).collect();
    let mut buf = Vec::new();
    write_cost_csv(&mut buf, &rows)?;
    write(&csv_path, buf)?;
    println!("{:<26} {:>8} {:>10} {:>12} {:>10}", "method", "tokens", "TFLOPs", "storage MiB", "reduction");
    let mut failures = Vec::new();
    for ((name, r), s) in reports.iter().zip(&schedules) {
        let red = r.reduction_vs(&base);
        println!(
            "{name:<26} {:>8.1} {:>10.3} {:>12.1} {:>9.1}%",
            r.mean_visual_tokens(n_text),
            r.total_tflops(),
            r.kv_cache_mib(),
            red
        );
        if let Some(expect) = a.expect_reduction {
            if !s.actions.is_empty() && (red - expect).abs() > a.tolerance {
                failures.push(format!("{name}: reduction {red:.1}% not within {expect} ± {}", a.tolerance));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(failures.join("; ")))
    }
}
