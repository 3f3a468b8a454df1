use std::fs;

use imel::agent::IterationRecord;
use imel::harness::cli::cli_main;
use imel::harness::{
    aggregate_curves, parse_config, percentile, read_metrics, render_svg, write_metrics,
    CurvePoint, ExperimentConfig, Series,
};

fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn record(k: u64, eval_mean: f64) -> IterationRecord {
    IterationRecord {
        k,
        episode_return: eval_mean,
        episode_len: 1,
        eval_returns: vec![eval_mean],
        eval_mean,
        eval_p20: eval_mean,
        eval_p80: eval_mean,
        eta: None,
        mean_kl: 0.0,
        loss_trace: Vec::new(),
        sigma: vec![0.5],
        model_hash: 0,
        wall_clock: 0.0,
    }
}

#[test]
fn overrides_win_over_the_file() {
    let text = "[run]\niterations = 7\nenv = \"point_mass_1d\"\n";
    let cfg = parse_config(
        text,
        vars(&[
            ("IMEL__RUN__ITERATIONS", "12"),
            ("IMEL__IMPROVE__EPSILON", "0.05"),
            ("IMEL__EXPERIMENT__SEEDS", "[3, 1]"),
            ("PATH", "/usr/bin"),
        ]),
    )
    .unwrap();
    assert_eq!(cfg.run.iterations, 12);
    assert_eq!(cfg.improve.epsilon, 0.05);
    assert_eq!(cfg.experiment.seeds, vec![3, 1]);
    assert_eq!(cfg.run.env, "point_mass_1d");
}

#[test]
fn empty_document_gives_defaults() {
    let cfg = parse_config("", Vec::new()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let again = parse_config(&cfg.to_toml().unwrap(), Vec::new()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn unknown_keys_are_named() {
    let err = parse_config("[run]\nhorizn = 3\n", Vec::new()).unwrap_err();
    assert!(err.to_string().contains("horizn"), "{err}");
    let err = parse_config("[bogus]\nx = 1\n", Vec::new()).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    let err = parse_config("", vars(&[("IMEL__TRAIN__EPOCS", "2")])).unwrap_err();
    assert!(err.to_string().contains("epocs"), "{err}");
}

#[test]
fn malformed_override_is_rejected() {
    for name in ["IMEL__RUN", "IMEL__RUN__A__B", "IMEL____X"] {
        let err = parse_config("", vars(&[(name, "1")])).unwrap_err();
        assert!(err.to_string().contains(name), "{err}");
    }
}

#[test]
fn percentile_interpolates_between_order_statistics() {
    assert_eq!(percentile(&[4.0], 0.2), 4.0);
    assert_eq!(percentile(&[10.0, 0.0], 0.2), 2.0);
    assert_eq!(percentile(&[10.0, 0.0], 0.8), 8.0);
    assert_eq!(percentile(&[3.0, 1.0, 2.0, 5.0, 4.0], 0.5), 3.0);
    assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 0.2) - 1.6).abs() < 1e-15);
    assert!(percentile(&[], 0.5).is_nan());
}

#[test]
fn curves_aggregate_across_seeds() {
    let single = aggregate_curves(&[(4, vec![record(1, 2.5), record(2, 3.0)])]).unwrap();
    assert_eq!(single.len(), 2);
    assert_eq!(
        (single[0].mean, single[0].p20, single[0].p80),
        (2.5, 2.5, 2.5)
    );

    let two = vec![(1, vec![record(1, 10.0)]), (0, vec![record(1, 0.0)])];
    let c = aggregate_curves(&two).unwrap();
    assert_eq!((c[0].mean, c[0].p20, c[0].p80), (5.0, 2.0, 8.0));
    assert_eq!(c[0].returns, vec![(0, 0.0), (1, 10.0)]);

    let mut flipped = two.clone();
    flipped.reverse();
    assert_eq!(aggregate_curves(&flipped).unwrap(), c);
}

#[test]
fn ragged_grid_names_the_seed() {
    let per_seed = vec![
        (0, vec![record(1, 0.0), record(2, 0.0)]),
        (9, vec![record(1, 0.0)]),
    ];
    let err = aggregate_curves(&per_seed).unwrap_err();
    assert!(err.to_string().contains("seed 9"), "{err}");
}

fn curves() -> Vec<CurvePoint> {
    (1..=5)
        .map(|k| {
            let returns = vec![(0, -1.0 / k as f64), (2, 0.1 * k as f64), (5, 1e-17)];
            let values: Vec<f64> = returns.iter().map(|(_, v)| *v).collect();
            CurvePoint {
                k,
                mean: values.iter().sum::<f64>() / 3.0,
                p20: percentile(&values, 0.2),
                p80: percentile(&values, 0.8),
                returns,
            }
        })
        .collect()
}

#[test]
fn metrics_csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let c = curves();
    write_metrics(&path, &c).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), c);
    let header = fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("k,mean,p20,p80,seed_0,seed_2,seed_5\n"));
}

#[test]
fn svg_is_well_formed() {
    let series = vec![
        Series {
            label: "a <b>".into(),
            points: curves(),
        },
        Series {
            label: "c".into(),
            points: curves()[..3].to_vec(),
        },
    ];
    let svg = render_svg(&series, "t & u").unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let groups = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("series"))
        .count();
    assert_eq!(groups, 2);
    assert!(render_svg(&[], "empty").is_err());
}

#[test]
fn unknown_subcommand_fails() {
    assert_ne!(cli_main(["imel", "frobnicate"]), 0);
    assert_ne!(
        cli_main([
            "imel",
            "train",
            "--algo",
            "sarsa",
            "--out",
            "/nonexistent/x"
        ]),
        0
    );
}

#[test]
fn selftest_passes() {
    assert_eq!(cli_main(["imel", "selftest", "--cases", "20"]), 0);
}

#[test]
fn train_plot_and_eval_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        "[experiment]\nseeds = [1, 2]\nworkers = 1\ncheckpoint_interval = 2\n\
         [run]\niterations = 4\nhorizon = 15\neval_episodes = 2\n\
         [mki]\nhidden = [8]\n[train]\nvalue_hidden = [8]\nvalue_epochs = 2\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let code = cli_main([
        "imel",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_s,
        "--algo",
        "imel-mki",
    ]);
    assert_eq!(code, 0);

    let metrics = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.len(), 4);
    assert_eq!(metrics[0].returns.len(), 2);
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    let cfg = parse_config(&snapshot, Vec::new()).unwrap();
    assert_eq!(cfg.run.horizon, 15);
    assert!(out.join("seed_1/records.csv").exists());
    assert!(out.join("timing.csv").exists());

    let csv = out.join("metrics.csv");
    assert_eq!(cli_main(["imel", "plot", csv.to_str().unwrap()]), 0);
    let svg = fs::read_to_string(out.join("curve.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();

    let ckpt = out.join("seed_2/ckpt_00004");
    assert!(ckpt.join("memory.bin").exists());
    assert_eq!(
        cli_main(["imel", "eval", ckpt.to_str().unwrap(), "--episodes", "3"]),
        0
    );
    assert_ne!(cli_main(["imel", "eval", out_s]), 0);
}
