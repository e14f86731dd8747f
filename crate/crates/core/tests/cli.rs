mod common;

use std::path::Path;

use common::{oracle, run_cli, write_all_fixtures, BRANCH_AFFINITY};
use mtl_lab::cli::config::{BalanceSection, ConfigFile, CropSection, DistillSection, PixelSection};
use mtl_lab::cli::{format_percent, run, Command, RunConfig};

fn fixture(dir: &Path, name: &str) -> std::path::PathBuf {
    write_all_fixtures(dir).into_iter().find(|(n, _)| *n == name).unwrap().1
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn run_in(dir: &Path, command: Command, config: &str, out: &str) -> mtl_lab::Result<mtl_lab::cli::RunReport> {
    let cfg = dir.join(format!("{out}.toml"));
    std::fs::write(&cfg, config).unwrap();
    run(&RunConfig {
        command,
        config: Some(cfg),
        seed: Some(3),
        threads: None,
        output: dir.join(out),
    })
}

#[test]
fn delta_on_identical_metrics_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "task,metric,lower_is_better\nseg,43.9,0\ndepth,0.585,1\n").unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[delta-mtl]\nmodel = \"m.csv\"\nbaseline = \"m.csv\"\n").unwrap();
    let out = dir.path().join("out");
    let (code, stdout, _) = run_cli(&["delta-mtl", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("0.00%"), "{stdout}");
    assert!(!stdout.contains("-0.00%"));
}

#[test]
fn percent_formatting_drops_negative_zero() {
    assert_eq!(format_percent(-0.0001), "0.00%");
    assert_eq!(format_percent(-3.344), "-3.34%");
    assert_eq!(format_percent(0.41), "0.41%");
}

#[test]
fn branch_search_winner_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "branch-search");
    let out = dir.path().join("out");
    let (code, _, stderr) = run_cli(&["branch-search", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let (tree, cost, resource) =
        oracle::best_tree(&BRANCH_AFFINITY, 3, 2, &[1.0, 1.0], &[0.5, 0.5, 0.5], 5.5).unwrap();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let rendered = tree.layers().iter().map(|p| p.render(&names)).collect::<Vec<_>>().join(" | ");
    let rows = data_lines(&out.join("ranked.csv"));
    let text = format!("rank,cost,resource,tree\n{}\n", rows[0]);
    let mut first = csv::Reader::from_reader(text.as_bytes());
    let rec = first.records().next().unwrap().unwrap();
    assert_eq!(&rec[3], rendered);
    assert!((rec[1].parse::<f64>().unwrap() - cost).abs() < 1e-12);
    assert_eq!(rec[2].parse::<f64>().unwrap(), resource);
    // Every feasible chain is listed with `top = 0`.
    let feasible = oracle::all_chains(3, 2)
        .iter()
        .filter(|c| oracle::chain_resource(c, &[1.0, 1.0], &[0.5; 3]) <= 5.5)
        .count();
    assert_eq!(rows.len(), feasible);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let (code, _, stderr) = run_cli(&["frobnicate"]);
    assert_ne!(code, 0);
    assert!(stderr.contains("frobnicate"));
}

#[test]
fn schema_violations_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[balance]\nstrategy = \"dwa\"\ntrace = \"t.csv\"\ntemprature = 2.0\n", "temprature"),
        ("[balance]\ntrace = \"t.csv\"\n", "balance.strategy"),
        ("[balance]\nstrategy = \"fixed\"\n", "balance.weights"),
        ("[balance]\nstrategy = \"sometimes\"\n", "balance"),
        ("[crop-stats]\nwidth = \"wide\"\nheight = 10\n", "crop-stats"),
        ("[nonsense]\n", "nonsense"),
        ("seed = -1\n[crop-stats]\nwidth = 10\nheight = 10\n", "seed"),
    ];
    for (i, (body, key)) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&cfg, body).unwrap();
        let cmd = if body.contains("crop-stats") || body.contains("nonsense") { "crop-stats" } else { "balance" };
        let (code, _, stderr) = run_cli(&[cmd, "--config", cfg.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(code, 2, "case {i}: {stderr}");
        assert!(stderr.contains("usage error") && stderr.contains(key), "case {i}: {stderr}");
    }
}

#[test]
fn module_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[crop-stats]\nwidth = 10\nheight = 10\nthreshold = 0.0\n").unwrap();
    let (code, _, stderr) = run_cli(&["crop-stats", "--config", cfg.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("geometry"));
}

#[test]
fn help_documents_every_key() {
    let keys: [(&str, &[&str]); 8] = [
        ("affinity", &["tasks", "locations", "feature_pattern", "images"]),
        ("branch-search", &["affinity", "tasks", "locations", "shared_costs", "decoder_costs", "budget", "top"]),
        (
            "balance",
            &[
                "strategy", "trace", "iteration", "weights", "temperature", "sigmas", "gradients", "learning_rate",
                "kpis", "focusing", "average_losses",
            ],
        ),
        ("delta-mtl", &["model", "baseline"]),
        ("pixel-affinity", &["radius", "dilations", "labels", "name", "path", "kind", "threshold"]),
        (
            "contrastive-check",
            &["dim", "backbone_dim", "positives", "negatives", "queue_size", "instances", "fd_step", "params", "temperature", "momentum", "neighbors", "nn_weight"],
        ),
        ("crop-stats", &["width", "height", "mode", "scale", "aspect", "samples", "threshold", "crops", "small_scale", "constraint"]),
        (
            "distill-check",
            &[
                "op", "features", "attention_weight", "attention_bias", "scales", "value_weight", "value_bias",
                "mix_weight", "mix_bias", "reduce_weight", "reduce_bias", "activation", "gates", "squeeze_weight",
                "squeeze_bias", "excite_weight", "excite_bias", "tolerance",
            ],
        ),
    ];
    for (cmd, ks) in keys {
        let (code, stdout, _) = run_cli(&[cmd, "--help"]);
        assert_eq!(code, 0);
        for k in ks {
            assert!(stdout.contains(k), "{cmd} --help lacks {k}");
        }
        for flag in ["--config", "--seed", "--threads", "--output"] {
            assert!(stdout.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn sections_round_trip_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    for (name, path) in write_all_fixtures(dir.path()) {
        let cfg = ConfigFile::load(&path).unwrap();
        match name {
            "balance" => round_trip::<BalanceSection>(&cfg, name),
            "pixel-affinity" => round_trip::<PixelSection>(&cfg, name),
            "crop-stats" => round_trip::<CropSection>(&cfg, name),
            "distill-check" => round_trip::<DistillSection>(&cfg, name),
            _ => {}
        }
    }
}

fn round_trip<T>(cfg: &ConfigFile, name: &str)
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let parsed: T = cfg.section(name).unwrap();
    let mut table = toml::Table::new();
    table.insert(name.to_string(), toml::Value::try_from(&parsed).unwrap());
    let again: T = ConfigFile::parse(&toml::to_string(&table).unwrap()).unwrap().section(name).unwrap();
    assert_eq!(parsed, again);
}

#[test]
fn outputs_carry_run_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "crop-stats");
    let out = dir.path().join("out");
    let (code, _, _) = run_cli(&["crop-stats", "--config", cfg.to_str().unwrap(), "--seed", "17", "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("# mtl-lab "));
    assert!(hist.contains("# seed: 17"));
    assert!(hist.contains("# config-sha256: "));
    let manifest: toml::Table = std::fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(17));
    assert_eq!(manifest["artifact"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_changes_random_outputs_and_threads_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = write_all_fixtures(dir.path());
    let go = |cmd: &str, seed: &str, threads: &str, tag: &str| {
        let cfg = &fixtures.iter().find(|(n, _)| *n == cmd).unwrap().1;
        let out = dir.path().join(tag);
        let (code, _, err) = run_cli(&[cmd, "--config", cfg.to_str().unwrap(), "--seed", seed, "--threads", threads, "--output", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        out
    };
    let a = go("crop-stats", "1", "1", "a");
    let b = go("crop-stats", "2", "1", "b");
    assert_ne!(std::fs::read(a.join("histogram.csv")).unwrap(), std::fs::read(b.join("histogram.csv")).unwrap());
    let one = go("affinity", "0", "1", "t1");
    let four = go("affinity", "0", "4", "t4");
    assert_eq!(common::snapshot(&one), common::snapshot(&four));
}

#[test]
fn every_strategy_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    write_all_fixtures(dir.path());
    common::write_tensor(dir.path(), "grads.mtkt", vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let cases = [
        ("fixed", "weights = [1.0, 2.0]\n"),
        ("uncertainty", ""),
        ("gradnorm", ""),
        ("dwa", ""),
        ("dtp", "kpis = [0.5, 0.9]\nfocusing = [1.0, 1.0]\n"),
        ("mgda", "gradients = \"grads.mtkt\"\n"),
        ("heuristic", ""),
    ];
    for (strategy, extra) in cases {
        let body = format!("[balance]\nstrategy = \"{strategy}\"\ntrace = \"trace.csv\"\n{extra}");
        let report = run_in(dir.path(), Command::Balance, &body, strategy).unwrap_or_else(|e| panic!("{strategy}: {e}"));
        let weights = data_lines(&dir.path().join(strategy).join("weights.csv"));
        assert_eq!(weights.len(), 2, "{strategy}");
        assert!(report.summary.starts_with(strategy), "{}", report.summary);
    }
    let mgda = data_lines(&dir.path().join("mgda").join("weights.csv"));
    assert_eq!(mgda, vec!["seg,0.5", "depth,0.5"]);
    let dwa = data_lines(&dir.path().join("dwa").join("weights.csv"));
    let total: f64 = dwa.iter().map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 2.0).abs() < 1e-12);
}

#[test]
fn distill_check_covers_every_operator() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let t = |name: &str, shape: Vec<usize>, data: Vec<f64>| common::write_tensor(p, name, shape, data);
    t("f0.mtkt", vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    t("f1.mtkt", vec![1, 2, 2], vec![0.0, 0.0, 0.0, 0.0]);
    t("aw.mtkt", vec![2, 2, 1, 1], vec![0.0, 0.3, -0.2, 0.0]);
    t("ab.mtkt", vec![2, 2, 1], vec![0.0, 0.1, 0.2, 0.0]);
    let report = run_in(
        p,
        Command::DistillCheck,
        "[distill-check]\nop = \"padnet\"\nfeatures = [\"f0.mtkt\", \"f1.mtkt\"]\nattention_weight = \"aw.mtkt\"\nattention_bias = \"ab.mtkt\"\n",
        "padnet",
    )
    .unwrap();
    assert!(report.summary.contains("match"));
    // Task 1 has zero features, so task 0 is unchanged.
    let out = mtl_lab::io::load_tensor(&p.join("padnet").join("task0.mtkt")).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);

    let body = "[distill-check]\nop = \"mtinet\"\n[[distill-check.scales]]\nfeatures = [\"f0.mtkt\", \"f1.mtkt\"]\nattention_weight = \"aw.mtkt\"\nattention_bias = \"ab.mtkt\"\nvalue_weight = \"aw.mtkt\"\nvalue_bias = \"ab.mtkt\"\n";
    let body = format!("{body}{}", &body[body.find("[[").unwrap()..]);
    run_in(p, Command::DistillCheck, &body, "mtinet").unwrap();
    assert!(p.join("mtinet").join("scale1_task1.mtkt").exists());

    let missing = run_in(p, Command::DistillCheck, "[distill-check]\nop = \"fpm\"\nfeatures = [\"f0.mtkt\"]\n", "fpm");
    match missing {
        Err(mtl_lab::Error::Config { key, .. }) => assert_eq!(key, "distill-check.mix_weight"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn pixel_affinity_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "pixel-affinity");
    let out = dir.path().join("out");
    let (code, _, err) = run_cli(&["pixel-affinity", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let rows = data_lines(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("1,seg,depth,"));
}
