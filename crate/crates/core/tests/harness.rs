use std::fs;
use std::path::Path;

use ssvae_core::data::SynthSpec;
use ssvae_core::harness::{
    aggregate, dataset_stats, emit_report, emit_sweep, load_raw, run_matrix, run_ood,
    run_speed_bench, run_sweep, run_verify, DatasetSource, ExperimentConfig, MatrixRow,
    Precision, ResultsTable, RAW_HEADER,
};
use ssvae_core::stochastic::AnnealSchedule;
use ssvae_core::training::mean_std;

/// Smallest configuration that exercises the full protocol: two variants,
/// two rotations, a synthetic corpus just over the 50-row split minimum.
fn tiny_config(outdir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset_name = "toy".into();
    cfg.dataset = DatasetSource::Synthetic(
        SynthSpec::disjoint_dominant(2, 3, 0.9, 3, 6, 60, 40, 40, 11).unwrap(),
    );
    cfg.variants = vec!["SSVAE".into(), "SSVAE-{KL,z}".into()];
    cfg.alpha_grid = vec![1.0];
    cfg.fractions = vec![1.0];
    cfg.rotations = 2;
    cfg.seed = 7;
    cfg.outdir = outdir.to_path_buf();
    cfg.embed_dim = 4;
    cfg.enc_hidden = 4;
    cfg.z_dim = 2;
    cfg.dec_hidden = 4;
    cfg.max_len = 8;
    cfg.batch_size = 16;
    cfg.max_epochs = 2;
    cfg.anneal = AnnealSchedule { flat_steps: 2, ramp_steps: 2 };
    cfg.workers = Some(1);
    cfg.bench_iterations = 30;
    cfg
}

#[test]
fn defaults_cover_all_variants_and_validate() {
    let cfg = ExperimentConfig::load(None, &[]).unwrap();
    assert_eq!(cfg.variants.len(), 5);
    assert_eq!(cfg.fractions, vec![1.0]);
    assert_eq!(cfg.precision, Precision::F64);
    assert!(matches!(cfg.dataset, DatasetSource::Synthetic(_)));
}

#[test]
fn config_file_and_overrides_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    fs::write(
        &path,
        "# comment\r\n\r\nseed = 3\nvariants = supervised, ssvae\nalphas = 1.0, 0.1\n\
         synth_classes = 3\nmax_epochs = 4\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(
        Some(&path),
        &[("seed".into(), "9".into()), ("batch_size".into(), "8".into())],
    )
    .unwrap();
    assert_eq!(cfg.seed, 9, "override wins over the file");
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.max_epochs, 4);
    assert_eq!(cfg.variants, ["Supervised", "SSVAE"]);
    assert_eq!(cfg.alpha_grid, [1.0, 0.1]);
    let DatasetSource::Synthetic(spec) = &cfg.dataset else {
        panic!("synthetic expected")
    };
    assert_eq!(spec.classes, 3);

    // Unknown keys and malformed lines fail loudly with context.
    let err = ExperimentConfig::load(None, &[("typo_key".into(), "1".into())]).unwrap_err();
    assert!(err.to_string().contains("typo_key"), "{err}");
    fs::write(&path, "seed 3\n").unwrap();
    let err = ExperimentConfig::load(Some(&path), &[]).unwrap_err();
    assert!(err.to_string().contains(":1:"), "line number surfaces: {err}");
}

#[test]
fn config_rejects_bad_grids_and_missing_paths() {
    let bad = [
        ("fractions", "0.0"),
        ("fractions", "1.5"),
        ("alphas", "-1.0"),
        ("rotations", "0"),
        ("rotations", "6"),
        ("precision", "f16"),
        ("vectors", "/nonexistent/vectors.txt"),
    ];
    for (key, value) in bad {
        let err = ExperimentConfig::load(None, &[(key.into(), value.into())]);
        assert!(err.is_err(), "{key}={value} should be rejected");
    }
    // TSV sources must point at real files before any training starts.
    let err = ExperimentConfig::load(
        None,
        &[
            ("dataset".into(), "tsv".into()),
            ("labeled_path".into(), "/nonexistent/train.tsv".into()),
            ("test_path".into(), "/nonexistent/test.tsv".into()),
        ],
    )
    .unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn matrix_rows_round_trip_through_csv() {
    let rows = [
        MatrixRow {
            dataset: "toy".into(),
            variant: "SSVAE-{KL,z}".into(),
            fraction: 0.1,
            rotation: 3,
            alpha: 0.01,
            seed: 123456789,
            epochs: 17,
            best_epoch: 9,
            best_dev: 0.8725,
            test_accuracy: 0.8612345678901234,
            parameter_count: 48210,
            mean_step_ms: 1.25,
            std_step_ms: 0.5,
            skipped: 2,
            status: "ok".into(),
        },
        MatrixRow {
            dataset: "toy".into(),
            variant: "SSVAE".into(),
            fraction: 1.0,
            rotation: 0,
            alpha: 0.0,
            seed: 0,
            epochs: 0,
            best_epoch: 0,
            best_dev: 0.0,
            test_accuracy: 0.0,
            parameter_count: 0,
            mean_step_ms: 0.0,
            std_step_ms: 0.0,
            skipped: 0,
            status: "non-finite gradient in enc.mu_w; batch skipped".into(),
        },
    ];
    assert_eq!(RAW_HEADER.split(',').count(), 15);
    for row in rows {
        let parsed = MatrixRow::parse_line(&row.csv_line()).unwrap();
        assert_eq!(parsed, row);
    }
    assert!(MatrixRow::parse_line("a,b,c").is_err());
}

fn strip_timing(mut row: MatrixRow) -> MatrixRow {
    row.mean_step_ms = 0.0;
    row.std_step_ms = 0.0;
    row
}

#[test]
fn tiny_matrix_runs_resumes_and_emits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let table = run_matrix(&cfg).unwrap();
    assert_eq!(table.rows.len(), 4, "2 variants x 2 rotations x 1 fraction");
    assert!(table.rows.iter().all(MatrixRow::ok));

    let raw_path = dir.path().join("raw.csv");
    let md_path = dir.path().join("table.md");
    let raw_bytes = fs::read(&raw_path).unwrap();
    let md_bytes = fs::read(&md_path).unwrap();
    assert!(String::from_utf8_lossy(&raw_bytes).starts_with(RAW_HEADER));
    for row in &table.rows {
        let log = dir.path().join("logs").join(format!(
            "toy-{}-f1-r{}.csv",
            row.variant.to_ascii_lowercase().replace(['{', '}'], "").replace(',', "-"),
            row.rotation
        ));
        let text = fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("epoch,dev_accuracy\n"), "{}", log.display());
        assert_eq!(text.lines().count(), 1 + row.epochs);
    }

    // A completed matrix resumes as a no-op: raw untouched, report re-emitted
    // byte for byte.
    let again = run_matrix(&cfg).unwrap();
    assert_eq!(again.rows.len(), 4);
    assert_eq!(fs::read(&raw_path).unwrap(), raw_bytes);
    assert_eq!(fs::read(&md_path).unwrap(), md_bytes);

    // Dropping one raw row forces exactly that cell to rerun, and the rerun
    // reproduces the original values (timing aside).
    let rows = load_raw(&raw_path).unwrap();
    let text = String::from_utf8(raw_bytes).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dropped = MatrixRow::parse_line(lines.pop().unwrap()).unwrap();
    fs::write(&raw_path, format!("{}\n", lines.join("\n"))).unwrap();
    let resumed = run_matrix(&cfg).unwrap();
    assert_eq!(resumed.rows.len(), rows.len());
    let recomputed = load_raw(&raw_path)
        .unwrap()
        .into_iter()
        .find(|r| r.variant == dropped.variant && r.rotation == dropped.rotation)
        .unwrap();
    assert_eq!(strip_timing(recomputed), strip_timing(dropped));
}

#[test]
fn aggregate_matches_hand_statistics() {
    let mk = |variant: &str, rotation: usize, acc: f64, status: &str| MatrixRow {
        dataset: "toy".into(),
        variant: variant.into(),
        fraction: 1.0,
        rotation,
        alpha: 1.0,
        seed: 1,
        epochs: 3,
        best_epoch: 1,
        best_dev: acc,
        test_accuracy: acc,
        parameter_count: 10,
        mean_step_ms: 1.0,
        std_step_ms: 0.1,
        skipped: 0,
        status: status.into(),
    };
    let table = ResultsTable {
        rows: vec![
            mk("SSVAE", 0, 0.80, "ok"),
            mk("SSVAE", 1, 0.84, "ok"),
            mk("SSVAE", 2, 0.0, "boom"),
            mk("Supervised", 0, 0.70, "ok"),
            mk("Supervised", 1, 0.74, "ok"),
        ],
        variant_order: vec!["Supervised".into(), "SSVAE".into()],
    };
    let cells = aggregate(&table);
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0].variant, "Supervised");
    let ssvae = &cells[1];
    assert_eq!(ssvae.accuracies, vec![0.80, 0.84]);
    assert_eq!(ssvae.failed, 1);
    let (mean, std) = mean_std(&[0.80, 0.84]);
    assert_eq!((ssvae.mean, ssvae.std), (mean, std));
}

#[test]
fn emitted_markdown_bolds_the_best_and_stars_significance() {
    let mk = |variant: &str, rotation: usize, acc: f64| MatrixRow {
        dataset: "toy".into(),
        variant: variant.into(),
        fraction: 0.1,
        rotation,
        alpha: 1.0,
        seed: 1,
        epochs: 3,
        best_epoch: 1,
        best_dev: acc,
        test_accuracy: acc,
        parameter_count: 10,
        mean_step_ms: 1.0,
        std_step_ms: 0.1,
        skipped: 0,
        status: "ok".into(),
    };
    // Clearly separated samples: Welch p is far below 0.05.
    let mut rows = Vec::new();
    for r in 0..5 {
        rows.push(mk("SSVAE", r, 0.70 + 0.002 * r as f64));
        rows.push(mk("SSVAE-{KL,z}", r, 0.90 + 0.002 * r as f64));
    }
    let table = ResultsTable {
        rows,
        variant_order: vec!["SSVAE".into(), "SSVAE-{KL,z}".into()],
    };
    let dir = tempfile::tempdir().unwrap();
    emit_report(&table, dir.path()).unwrap();
    let md = fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(md.contains("| 10% |"), "{md}");
    assert!(md.contains("**90.40(0.32)***"), "best cell bold and starred: {md}");
    assert!(md.contains("| 70.40(0.32) |"), "baseline plain: {md}");

    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let p: f64 = csv
        .lines()
        .find(|l| l.contains("SSVAE-{KL"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(p < 0.001, "p = {p}");

    // Same table, same bytes.
    let md2_dir = tempfile::tempdir().unwrap();
    emit_report(&table, md2_dir.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join("table.md")).unwrap(),
        fs::read(md2_dir.path().join("table.md")).unwrap()
    );
}

#[test]
fn speed_bench_anchors_ratio_on_the_standard_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.variants = vec!["SSVAE".into(), "SSVAE-{KL,z}".into(), "Supervised".into()];
    let report = run_speed_bench(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3);
    let ssvae = report.rows.iter().find(|r| r.variant == "SSVAE").unwrap();
    assert_eq!(ssvae.ratio, 1.0);
    let reduced = report.rows.iter().find(|r| r.variant == "SSVAE-{KL,z}").unwrap();
    assert!(
        reduced.parameter_count < ssvae.parameter_count,
        "dropping z removes parameters: {} vs {}",
        reduced.parameter_count,
        ssvae.parameter_count
    );
    for row in &report.rows {
        assert!(row.mean_ms > 0.0 && row.ratio > 0.0);
    }
    report.emit(dir.path()).unwrap();
    let md = fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(md.contains("| SSVAE |"), "{md}");
    assert!(md.contains("0.742-0.867"), "reference band is stated: {md}");

    // The anchor variant cannot be dropped from the bench.
    cfg.variants = vec!["Supervised".into()];
    assert!(run_speed_bench(&cfg).is_err());
}

#[test]
fn ood_with_zero_blend_reproduces_in_domain_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.variants = vec!["Supervised".into()];
    cfg.rotations = 1;
    cfg.ood_blend = 0.0;
    let report = run_ood(&cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    // Blend 0 leaves the target distribution bitwise equal to the source,
    // so the same generator seed reproduces the source test set exactly.
    assert_eq!(row.out_domain, row.in_domain);
    report.emit(dir.path()).unwrap();
    assert!(dir.path().join("table.md").exists());
    assert!(dir.path().join("raw.csv").exists());
}

#[test]
fn ood_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("target.tsv");
    fs::write(&target, "a\tw0 w1\nb\tw2 w3\nc\tw4 w5\n").unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.variants = vec!["Supervised".into()];
    cfg.rotations = 1;
    cfg.ood_target = Some(target);
    let err = run_ood(&cfg).unwrap_err();
    assert!(err.to_string().contains("mismatch"), "{err}");
}

#[test]
fn sweep_reports_every_alpha_for_semisupervised_variants() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.variants = vec!["Supervised".into(), "SSVAE".into()];
    cfg.alpha_grid = vec![1.0, 0.1];
    cfg.rotations = 1;
    let rows = run_sweep(&cfg).unwrap();
    // Supervised ignores alpha and runs once; SSVAE sweeps the grid.
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].variant, "Supervised");
    assert_eq!(
        rows.iter().filter(|r| r.variant == "SSVAE").map(|r| r.alpha).collect::<Vec<_>>(),
        [1.0, 0.1]
    );
    emit_sweep(&rows, dir.path()).unwrap();
    assert!(dir.path().join("table.md").exists());
    assert!(dir.path().join("table.csv").exists());
}

#[test]
fn dataset_stats_cover_all_materialized_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let stats = dataset_stats(&cfg).unwrap();
    let names: Vec<&str> = stats.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["labeled", "unlabeled", "test"]);
    assert_eq!(stats[0].1.rows, 60);
    assert_eq!(stats[0].1.classes, 2);
    assert_eq!(stats[1].1.classes, 0, "unlabeled split has no classes");
}

#[test]
fn verify_entry_point_maps_names_to_suites() {
    let report = run_verify("gradcheck").unwrap();
    assert!(report.passed(), "{:?}", report.failures());
    assert!(report.checks.iter().all(|c| c.name.starts_with("gradcheck/")));
    assert!(run_verify("no-such-suite").is_err());
}
