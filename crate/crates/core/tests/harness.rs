use panelboot::harness::{
    emit_table, read_csv_rows, run_experiment, ExperimentConfig, ExperimentOutput, Method, TableFormat, Target,
};
use panelboot::oracle::{exact_coverage, Studentized};
use panelboot::ModelKind;

fn bytes(out: &ExperimentOutput, format: TableFormat) -> Vec<u8> {
    let mut buf = Vec::new();
    emit_table(&out.rows, format, &mut buf).unwrap();
    buf
}

fn with_threads(cfg: &ExperimentConfig, t: usize) -> ExperimentOutput {
    run_experiment(&ExperimentConfig {
        threads: Some(t),
        ..cfg.clone()
    })
    .unwrap()
}

#[test]
fn artifacts_are_identical_across_thread_budgets() {
    for cfg in [
        ExperimentConfig::table2(0.5, 40, 6, 12, 39, 5),
        ExperimentConfig::table3(20, 5, 12, 39, 5),
    ] {
        let one = with_threads(&cfg, 1);
        let eight = with_threads(&cfg, 8);
        for f in [TableFormat::Csv, TableFormat::Json] {
            assert_eq!(bytes(&one, f), bytes(&eight, f));
        }
        assert_eq!(format!("{:?}", one.records), format!("{:?}", eight.records));
        assert_eq!(bytes(&one, TableFormat::Csv), bytes(&with_threads(&cfg, 1), TableFormat::Csv));
    }
}

#[test]
fn coverage_is_the_recount_of_stored_indicators() {
    let out = run_experiment(&ExperimentConfig::table3(20, 5, 30, 39, 6)).unwrap();
    for row in &out.rows {
        let outcomes: Vec<_> = out
            .records
            .iter()
            .flat_map(|r| &r.outcomes)
            .filter(|o| o.method == row.method)
            .collect();
        let hits = outcomes.iter().filter(|o| o.covers).count();
        let limit_hits = outcomes.iter().filter(|o| o.covers_limit == Some(true)).count();
        assert_eq!(row.coverage, hits as f64 / outcomes.len() as f64);
        assert_eq!(row.coverage_limit, Some(limit_hits as f64 / outcomes.len() as f64));
        assert_eq!(row.failures, out.records.len() - outcomes.len());
    }
}

#[test]
fn normal_means_coverage_agrees_with_exact_theory() {
    let cfg = ExperimentConfig {
        model: ModelKind::NormalMeans,
        target: Target::Phi,
        phi0: 1.0,
        methods: vec![Method::SHat, Method::SStar],
        ..ExperimentConfig::table2(1.0, 10, 10, 1000, 199, 7)
    };
    let out = run_experiment(&cfg).unwrap();
    for row in &out.rows {
        let which = match row.method {
            Method::SHat => Studentized::Hat,
            _ => Studentized::Star,
        };
        let exact = exact_coverage(which, 10, 10, 0.95).unwrap();
        let se = (exact * (1.0 - exact) / cfg.reps as f64).sqrt();
        assert!((row.coverage - exact).abs() < 3.0 * se, "{:?}: {} vs {exact}", row.method, row.coverage);
    }
}

#[test]
fn csv_rows_read_back() {
    let out = run_experiment(&ExperimentConfig::table3(10, 4, 5, 39, 8)).unwrap();
    let back = read_csv_rows(&bytes(&out, TableFormat::Csv)[..]).unwrap();
    assert_eq!(back.len(), out.rows.len());
    for (a, b) in back.iter().zip(&out.rows) {
        assert_eq!((a.method, a.coverage, a.avg_length, &a.config_hash), (b.method, b.coverage, b.avg_length, &b.config_hash));
    }
}

#[test]
fn markdown_has_coverage_then_length_blocks() {
    let out = run_experiment(&ExperimentConfig::table3(10, 4, 5, 39, 9)).unwrap();
    let text = String::from_utf8(bytes(&out, TableFormat::Markdown)).unwrap();
    let header = text.lines().next().unwrap();
    let cov = header.find("coverage s-hat").unwrap();
    let len = header.find("length s-hat").unwrap();
    assert!(header.find("coverage s-star").unwrap() < len && cov < len);
    assert_eq!(text.lines().count(), 3);
}
