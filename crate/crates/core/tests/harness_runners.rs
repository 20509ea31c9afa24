use std::collections::HashMap;

use tokenhorizon::engine::{ArchConfig, ModelCheckpoint, MultimodalSequence};
use tokenhorizon::harness::{
    eval_accuracy, gen_task, read_loss, run_info_prune_curve, run_schedule_bench, run_strategy_eval,
    run_withdraw_sweep, window_means, write_loss, Dataset, Recipe, RunManifest, SweepConfig, TaskKind, TaskSpec,
    manifest_file,
};
use tokenhorizon::pruning::{preset, PruneAction, PruneSchedule, RatioBasis, Strategy};

fn spec(kind: TaskKind, n: usize, seed: u64) -> TaskSpec {
    TaskSpec::new(kind, 4, 4, n, 20, seed)
}

fn toy() -> (ModelCheckpoint, Vec<MultimodalSequence>) {
    let arch = ArchConfig::new(3, 16, 2, 32, 32, 24);
    let ck = ModelCheckpoint::init(arch, 5).unwrap();
    let data = gen_task(&spec(TaskKind::Lookup, 10, 3)).unwrap().heldout.sequences(16);
    (ck, data)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn majority_labels_match_a_counting_oracle() {
    let d = gen_task(&spec(TaskKind::Majority, 1000, 17)).unwrap();
    assert_eq!(d.train.len(), 1000);
    for s in &d.train.samples {
        let mut counts: HashMap<u8, usize> = HashMap::new();
        for &c in &s.grid {
            *counts.entry(c).or_default() += 1;
        }
        let top = *counts.values().max().unwrap();
        let winners: Vec<u8> = counts.iter().filter(|(_, &n)| n == top).map(|(&c, _)| c).collect();
        assert_eq!(winners.len(), 1, "generator produced a tie");
        assert_eq!(s.answer, winners[0]);
        assert!(top * 2 > s.grid.len());
    }
}

#[test]
fn lookup_answers_are_uniform_over_colours() {
    let d = gen_task(&spec(TaskKind::Lookup, 10_000, 23)).unwrap();
    let mut counts = [0f64; 4];
    for s in &d.train.samples {
        let (r, c) = s.query.unwrap();
        assert_eq!(s.answer, s.grid[r as usize * 4 + c as usize]);
        counts[s.answer as usize] += 1.0;
    }
    let expected = 10_000.0 / 4.0;
    let chi2: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
    // Upper 1% point of chi-squared with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn sequences_follow_the_task_layout() {
    let d = gen_task(&spec(TaskKind::Lookup, 5, 1)).unwrap();
    let seqs = d.train.sequences(16);
    assert!(seqs.iter().all(|s| s.n_visual() == 16 && s.question_ids.len() == 3));
    let m = gen_task(&spec(TaskKind::Majority, 5, 1)).unwrap();
    assert!(m.train.sequences(16).iter().all(|s| s.question_ids.len() == 1));
}

#[test]
fn dataset_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen_task(&spec(TaskKind::Majority, 50, 2)).unwrap().heldout;
    let path = dir.path().join("m.data");
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
    let bytes = std::fs::read(&path).unwrap();
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Dataset::from_bytes(b"NOTADATASET").is_err());
    assert!(Dataset::load(dir.path().join("absent.data")).is_err());
}

#[test]
fn info_prune_trivial_cells() {
    let (ck, data) = toy();
    let m = ck.model::<f64>().unwrap();
    let cfg = SweepConfig {
        info_samples: 10,
        prune_ratios: vec![0.0, 0.75],
        ..Default::default()
    };
    let r = run_info_prune_curve(&m, &ck.content_hash(), &data, &cfg).unwrap();
    let baseline: f64 = r.summary_value("baseline_accuracy").unwrap().parse().unwrap();
    assert_eq!(baseline, eval_accuracy(&m, &data).unwrap());
    for row in csv_rows(&r.csv) {
        let acc: f64 = row[3].parse().unwrap();
        if row[1] == "0" || row[0] == "3" {
            assert_eq!(acc, baseline, "{row:?}");
        }
    }
    assert_eq!(csv_rows(&r.csv).len(), 4 * 2 * 2);
    assert!(r.plots[0].1.starts_with("<svg"));
}

#[test]
fn strategy_eval_trivial_cells() {
    let (ck, data) = toy();
    let m = ck.model::<f64>().unwrap();
    let cfg = SweepConfig {
        info_samples: 6,
        retain_ratios: vec![1.0, 0.5],
        ..Default::default()
    };
    let r = run_strategy_eval(&m, &ck.content_hash(), &data, &cfg).unwrap();
    let rows = csv_rows(&r.csv);
    let all: HashMap<String, f64> = rows
        .iter()
        .filter(|r| r[0] == "all")
        .map(|r| (r[2].clone(), r[3].parse().unwrap()))
        .collect();
    assert_eq!(all.len(), 4);
    for row in &rows {
        let v: f64 = row[3].parse().unwrap();
        match (row[0].as_str(), row[1].as_str()) {
            ("withdraw", _) => assert_eq!(v, 0.0),
            ("all", _) => {}
            (_, "1") => assert!((v - all[&row[2]]).abs() < 1e-15, "{row:?}"),
            _ => {}
        }
        assert!(!(row[0] == "attention-topk" && row[2] == "0"));
    }
    assert_eq!(r.summary_value("aggregation"), Some("mean over samples"));
}

#[test]
fn withdraw_sweep_ends_at_baseline() {
    let (ck, data) = toy();
    let m = ck.model::<f64>().unwrap();
    let cfg = SweepConfig {
        samples: 10,
        info_samples: 4,
        ..Default::default()
    };
    let r = run_withdraw_sweep(&m, &ck.content_hash(), &[("lookup".into(), data)], &cfg).unwrap();
    let rows = csv_rows(&r.csv);
    assert_eq!(rows.len(), 4);
    let baseline: f64 = r.summary_value("lookup.baseline_accuracy").unwrap().parse().unwrap();
    assert_eq!(rows[3][2].parse::<f64>().unwrap(), baseline);
    assert_eq!(r.summary_value("lookup.empirical_horizon").map(|h| h != "none"), Some(true));
    assert_eq!(r.plots.len(), 2);
}

#[test]
fn schedule_bench_reports_full_relative_accuracy_unpruned() {
    let (ck, data) = toy();
    let m = ck.model::<f64>().unwrap();
    let cfg = SweepConfig {
        samples: 10,
        ..Default::default()
    };
    let half = PruneSchedule::new("half", RatioBasis::Original, vec![PruneAction::new(1, Strategy::Random, 0.5, 1)]).unwrap();
    let r = run_schedule_bench(&m, &ck.content_hash(), &data, &[PruneSchedule::empty("none"), half], &cfg).unwrap();
    let rows = csv_rows(&r.csv);
    let baseline: f64 = r.summary_value("baseline_accuracy").unwrap().parse().unwrap();
    assert_eq!(rows[0][0], "none");
    if baseline > 0.0 {
        assert_eq!(rows[0][2], "100");
    }
    assert_eq!(rows[0][4], "0");
    assert!(rows[1][4].parse::<f64>().unwrap() > 0.0);
    // Presets deeper than the toy model are refused rather than truncated.
    let deep = preset("dart-vtw-64").unwrap();
    assert!(run_schedule_bench(&m, "h", &data, &[deep], &cfg).is_err());
}

#[test]
fn runners_are_reproducible_across_thread_counts() {
    let (ck, data) = toy();
    let m = ck.model::<f32>().unwrap();
    let cfg = SweepConfig {
        samples: 10,
        info_samples: 5,
        ..Default::default()
    };
    let go = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let a = run_strategy_eval(&m, "h", &data, &cfg).unwrap();
            let b = run_info_prune_curve(&m, "h", &data, &cfg).unwrap();
            (a.csv, b.csv, a.plots, b.summary)
        })
    };
    assert_eq!(go(1), go(3));
}

#[test]
fn results_land_on_disk_with_their_manifest() {
    let (ck, data) = toy();
    let m = ck.model::<f64>().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = RunManifest::new("sweep", vec!["withdraw".into()], dir.path());
    manifest.seeds = vec![0];
    manifest.checkpoint_hash = Some(ck.content_hash());
    let name = manifest.write(dir.path(), "withdraw").unwrap();
    assert_eq!(name, manifest_file("withdraw"));
    assert_eq!(RunManifest::load(dir.path().join(&name)).unwrap(), manifest);
    let cfg = SweepConfig {
        samples: 4,
        info_samples: 2,
        ..Default::default()
    };
    let r = run_withdraw_sweep(&m, &ck.content_hash(), &[("lookup".into(), data)], &cfg).unwrap();
    let files = r.write_to(dir.path(), Some(&name)).unwrap();
    assert_eq!(files.len(), 4);
    let summary = std::fs::read_to_string(dir.path().join("withdraw.summary.csv")).unwrap();
    assert!(summary.contains("manifest,withdraw.manifest.toml"));
    assert!(summary.contains(&format!("checkpoint_hash,{}", ck.content_hash())));
}

#[test]
fn sweep_configs_accept_partial_files() {
    let cfg = SweepConfig::from_toml("samples = 12\nstrategies = [\"random\", \"withdraw\"]\n").unwrap();
    assert_eq!(cfg.samples, 12);
    assert_eq!(cfg.info_samples, 200);
    assert_eq!(cfg.strategies, vec![Strategy::Random, Strategy::Withdraw]);
    assert_eq!(SweepConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(SweepConfig::from_toml("samples = \"many\"").is_err());
}

#[test]
fn cached_recipes_reload_with_their_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Recipe::preset("small").unwrap();
    r.train.steps = 20;
    r.n_train = 200;
    r.n_heldout = 20;
    let (ck, trace) = r.run_cached(dir.path()).unwrap();
    assert_eq!(trace.len(), 20);
    assert!(r.cache_path(dir.path()).exists());
    let (again, trace2) = r.run_cached(dir.path()).unwrap();
    assert_eq!(again.to_bytes(), ck.to_bytes());
    assert_eq!(trace2, trace);
    let path = dir.path().join("t.csv");
    write_loss(&path, &[1.5, 0.25]).unwrap();
    assert_eq!(read_loss(&path).unwrap(), vec![1.5, 0.25]);
    assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
}
