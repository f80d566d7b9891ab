use freqcache::freq_stats::{build_reorder, head_coverage, sample_frequencies, scan_frequencies, FrequencyTable};
use freqcache::ids::{RawId, RowIdx};
use freqcache::workload::{
    calibrate_exponent, gen_zipf, load_csv, write_csv, zipf_head_coverage, CsvOptions, IdRemap, OnMalformed, Trace,
    WorkloadError, AVAZU_LIKE, CRITEO_LIKE,
};
use std::io::Write;

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn sampled_ranks_track_full_scan_on_the_head() {
    let trace = gen_zipf(100_000, 1.05, 1_000_000, 26, 11).unwrap();
    let full = scan_frequencies(&trace, 100_000).unwrap();
    let sampled = sample_frequencies(&trace, 100_000, 0.05, 3).unwrap();
    let order = build_reorder(&full).unwrap();
    let top: Vec<RawId> = (0..1_000).map(|r| order.id_of(RowIdx(r))).collect();
    let a: Vec<f64> = top.iter().map(|&id| full.count(id) as f64).collect();
    let b: Vec<f64> = top.iter().map(|&id| sampled.count(id) as f64).collect();
    let rho = spearman(&a, &b);
    println!("spearman over top 1%: {rho:.4}");
    assert!(rho >= 0.95, "rho {rho}");
}

#[test]
fn sampling_is_deterministic() {
    let trace = gen_zipf(1_000, 1.1, 5_000, 3, 1).unwrap();
    let a = sample_frequencies(&trace, 1_000, 0.1, 42).unwrap();
    let b = sample_frequencies(&trace, 1_000, 0.1, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.total_accesses() < scan_frequencies(&trace, 1_000).unwrap().total_accesses());
}

#[test]
fn hottest_generated_id_gets_rank_zero() {
    let trace = gen_zipf(5_000, 1.2, 20_000, 4, 9).unwrap();
    let f = scan_frequencies(&trace, 5_000).unwrap();
    let m = build_reorder(&f).unwrap();
    let hottest = f.nonzero().max_by_key(|&(id, c)| (c, std::cmp::Reverse(id))).unwrap().0;
    assert_eq!(m.rank_of(hottest), RowIdx(0));
}

#[test]
fn frozen_preset_exponents_match_the_calibrator() {
    for p in [CRITEO_LIKE, AVAZU_LIKE] {
        let s = calibrate_exponent(p.reference_num_ids, p.head_fraction, p.target_coverage).unwrap();
        assert!((s - p.reference_exponent).abs() < 1e-9, "{}: {s} vs {}", p.name, p.reference_exponent);
        let cov = zipf_head_coverage(p.reference_num_ids, p.reference_exponent, p.head_fraction);
        assert!((cov - p.target_coverage).abs() < 1e-9);
    }
}

#[test]
fn generated_presets_hit_their_head_coverage() {
    for (p, samples) in [(CRITEO_LIKE, 200_000), (AVAZU_LIKE, 200_000)] {
        let trace = p.generate(1_000_000, samples, None, 5).unwrap();
        assert_eq!(trace.features(), p.features);
        let f = scan_frequencies(&trace, 1_000_000).unwrap();
        let cov = head_coverage(&f, p.head_fraction);
        println!("{}: head_coverage({}) = {cov:.4}", p.name, p.head_fraction);
        assert!((cov - p.target_coverage).abs() <= 0.02, "{}: {cov}", p.name);
    }
}

#[test]
fn criteo_calibration_at_full_scale() {
    let s = CRITEO_LIKE.exponent_for(1_000_000).unwrap();
    let trace = gen_zipf(1_000_000, s, 10_000_000, 1, 21).unwrap();
    let cov = head_coverage(&scan_frequencies(&trace, 1_000_000).unwrap(), 0.0014);
    assert!((0.88..=0.92).contains(&cov), "{cov}");
}

#[test]
fn huge_exponent_puts_everything_on_one_id() {
    let trace = gen_zipf(10_000, 40.0, 2_000, 1, 0).unwrap();
    let f = scan_frequencies(&trace, 10_000).unwrap();
    assert!(head_coverage(&f, 1.0 / 10_000.0) > 0.999);
}

#[test]
fn batches_cover_the_trace_in_order() {
    let ids: Vec<RawId> = (0..20).map(RawId).collect();
    let t = Trace::new(20, 2, ids).unwrap();
    let sizes: Vec<usize> = t.batches(4).map(|b| b.samples).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert_eq!(t.batches(100).count(), 1);
    let flat: Vec<RawId> = t.batches(3).flat_map(|b| b.ids.to_vec()).collect();
    assert_eq!(flat, t.ids());
    let g = gen_zipf(50, 0.9, 300, 3, 2).unwrap();
    for b in g.batches(16) {
        let mut u = b.ids.to_vec();
        u.sort_unstable();
        u.dedup();
        assert!(u.len() <= b.samples * 3);
    }
}

fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
    p
}

#[test]
fn csv_round_trip_preserves_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = gen_zipf(500, 1.0, 400, 5, 3).unwrap();
    let p = dir.path().join("t.csv");
    write_csv(&t, &p).unwrap();
    let opts = CsvOptions { num_ids: Some(500), ..CsvOptions::default() };
    let (back, skipped) = load_csv(&p, &opts).unwrap();
    assert_eq!(skipped, 0);
    assert_eq!(back.ids(), t.ids());
    assert_eq!((back.num_ids(), back.features()), (500, 5));
}

#[test]
fn categorical_columns_get_disjoint_consistent_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(&dir, "c.csv", "a,b\nx,y\nx,z\nw,y\n");
    let opts = CsvOptions { id_remap: IdRemap::Categorical, ..CsvOptions::default() };
    let (t, _) = load_csv(&p, &opts).unwrap();
    assert_eq!(t.num_ids(), 4);
    assert_eq!(t.table_offsets(), Some(&[0u32, 2][..]));
    let ids: Vec<u32> = t.ids().iter().map(|r| r.0).collect();
    assert_eq!(ids, vec![0, 2, 0, 3, 1, 2]);
    assert_eq!(t.tables(), vec![0..2, 2..4]);
    let (again, _) = load_csv(&p, &opts).unwrap();
    assert_eq!(again.ids(), t.ids());
}

#[test]
fn csv_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(&dir, "bad.csv", "f0,f1\n1,2\n3,oops\n4,5\n");
    match load_csv(&p, &CsvOptions::default()) {
        Err(WorkloadError::MalformedRow { line, reason }) => {
            assert_eq!(line, 3);
            assert!(reason.contains("oops"));
        }
        other => panic!("{other:?}"),
    }
    let skip = CsvOptions { on_malformed: OnMalformed::Skip, ..CsvOptions::default() };
    let (t, skipped) = load_csv(&p, &skip).unwrap();
    assert_eq!((t.num_samples(), skipped), (2, 1));

    let cols = CsvOptions { feature_columns: Some(vec!["f9".into()]), ..CsvOptions::default() };
    assert!(matches!(load_csv(&p, &cols), Err(WorkloadError::MissingColumn(c)) if c == "f9"));

    let missing = dir.path().join("nope.csv");
    let err = load_csv(&missing, &CsvOptions::default()).unwrap_err();
    assert!(err.to_string().contains("nope.csv"));

    let empty = write_file(&dir, "empty.csv", "");
    let (t, _) = load_csv(&empty, &CsvOptions::default()).unwrap();
    assert_eq!((t.num_ids(), t.num_samples()), (0, 0));
}

#[test]
fn statistics_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = FrequencyTable::from_pairs(100, [(3, 7), (99, 1), (0, 2)]).unwrap();
    let bin = dir.path().join("s.bin");
    f.write_binary(&bin).unwrap();
    assert_eq!(FrequencyTable::read_binary(&bin).unwrap(), f);
    let json = serde_json::to_string(&f.to_json()).unwrap();
    let back = FrequencyTable::from_json(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, f);
}
