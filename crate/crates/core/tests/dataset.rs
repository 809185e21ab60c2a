use chrono::{Days, NaiveDate};
use gpsc_core::dataset::{
    align_times, ingest_csv, pca_first_component, read_metadata, write_csv, write_metadata, DatasetMetadata, IngestReport,
    ThresholdRule,
};
use gpsc_core::synthetic::{simulate_panel, SyntheticConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn exported_panel_reingests_bit_identically() {
    let p = simulate_panel(&SyntheticConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, meta) = (dir.path().join("d.csv"), dir.path().join("d.json"));
    write_csv(&p.dataset, &csv).unwrap();
    write_metadata(&DatasetMetadata::new(&p.dataset, &IngestReport::default(), vec![]), &meta).unwrap();
    let schema = read_metadata(&meta).unwrap().schema();
    let (back, report) = ingest_csv(&csv, &schema).unwrap();
    assert_eq!(report.total_dropped(), 0);
    assert_eq!(back.series, p.dataset.series);
    let again = dir.path().join("again.csv");
    write_csv(&back, &again).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&again).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_ignores_calendar_shifts(
        starts in prop::collection::vec(0u64..60, 1..5),
        lens in prop::collection::vec(1usize..10, 5),
        shift in 0u64..2000,
    ) {
        let base = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
        let make = |offset: u64| -> Vec<(String, Vec<(NaiveDate, f64)>)> {
            starts
                .iter()
                .zip(&lens)
                .enumerate()
                .map(|(i, (s, n))| {
                    let pts = (0..*n as u64).map(|w| (base + Days::new(offset + 7 * (s + w)), 1.0 + w as f64)).collect();
                    (format!("s{i}"), pts)
                })
                .collect()
        };
        let a = align_times(&make(0), &ThresholdRule::FirstNonzero).unwrap();
        let b = align_times(&make(shift), &ThresholdRule::FirstNonzero).unwrap();
        prop_assert_eq!(a.series, b.series);
    }

    #[test]
    fn pca_scores_are_centred_and_sign_fixed(
        (n, p, v) in (3usize..30, 1usize..5).prop_flat_map(|(n, p)| (Just(n), Just(p), prop::collection::vec(-10.0f64..10.0, n * p)))
    ) {
        let x = DMatrix::from_row_slice(n, p, &v);
        let r = pca_first_component(&x).unwrap();
        let mean = r.scores.iter().sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-10);
        let first = r.loadings.iter().find(|l| l.abs() > 1e-12).unwrap();
        prop_assert!(*first > 0.0);
        prop_assert!(r.explained_variance_ratio > 0.0 && r.explained_variance_ratio <= 1.0 + 1e-12);
    }
}
