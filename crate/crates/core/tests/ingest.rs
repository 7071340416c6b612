use std::collections::HashSet;

use proptest::prelude::*;
use psrtr::ingest::{
    average_tr_ratio, load_recording, make_cv_splits, read_recordings, EcgSegment, PeakAnnotations, Recording,
    RecordingFormat,
};
use psrtr::Error;

fn recording(seconds: usize, r: Vec<usize>, t: Vec<usize>) -> Recording {
    Recording {
        sampling_rate_hz: 500.0,
        lead_id: "II".into(),
        samples: (0..seconds * 500).map(|i| (i as f64 * 0.01).sin()).collect(),
        r_peaks: r,
        t_peaks: t,
    }
}

#[test]
fn twenty_seconds_gives_two_windows() {
    let w = recording(20, vec![], vec![]).windows().unwrap();
    assert_eq!(w.len(), 2);
    assert!(w.iter().all(|(s, _)| s.len() == 5000));
    assert_eq!(w[1].0.start_time_s, 10.0);
}

#[test]
fn annotation_beyond_recording_is_a_validation_error() {
    let err = recording(10, vec![5200], vec![5300]).windows().unwrap_err();
    assert!(matches!(err, Error::Validation { .. }), "{err}");
    let ann = PeakAnnotations::new(vec![5200], vec![100]);
    let seg = EcgSegment::new(vec![0.0; 5000], 500.0, "II");
    assert!(ann.validate(&seg).is_err());
}

#[test]
fn native_json_fixture_with_three_beats() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rec.json");
    let samples: Vec<String> = (0..5000).map(|i| format!("{}", (i % 50) as f64 / 50.0)).collect();
    std::fs::write(
        &p,
        format!(
            r#"{{"sampling_rate_hz": 500, "lead_id": "II", "samples": [{}], "r_peaks": [100, 1100, 2100], "t_peaks": [300, 1300, 2300]}}"#,
            samples.join(",")
        ),
    )
    .unwrap();
    let w = load_recording(&p, RecordingFormat::NativeJson).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].1.count(), 3);
    assert_eq!(w[0].1.r_indices, vec![100, 1100, 2100]);
    assert_eq!(w[0].1.t_indices, vec![300, 1300, 2300]);
}

#[test]
fn annotated_csv_errors_name_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("lead.csv");
    std::fs::write(&p, "sample_index,amplitude_mv\n0,0.1\n1,abc\n").unwrap();
    let err = read_recordings(&p, RecordingFormat::AnnotatedCsv).unwrap_err();
    match err {
        Error::Parse { line, message, .. } => {
            assert_eq!(line, Some(3));
            assert!(message.contains("amplitude_mv"), "{message}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn ratio_closed_forms() {
    let mut x = vec![0.0; 100];
    let ann = PeakAnnotations::new(vec![10, 50], vec![20, 60]);
    x[10] = 1.0;
    x[50] = 1.0;
    x[20] = 0.2;
    x[60] = 0.2;
    let seg = EcgSegment::new(x.clone(), 500.0, "II");
    assert!((average_tr_ratio(&seg, &ann).unwrap() - 0.2).abs() < 1e-15);
    x[20] = 0.0;
    x[60] = 0.0;
    assert_eq!(average_tr_ratio(&seg.with_samples(x.clone()), &ann).unwrap(), 0.0);
    x[20] = -0.3;
    x[60] = -0.1;
    assert!((average_tr_ratio(&seg.with_samples(x.clone()), &ann).unwrap() + 0.2).abs() < 1e-15);
    x[10] = 0.0;
    x[50] = 0.0;
    assert!(matches!(average_tr_ratio(&seg.with_samples(x), &ann), Err(Error::DegenerateLabel(_))));
}

#[test]
fn splits_of_390_with_bolster_310() {
    let primary: Vec<usize> = (0..390).collect();
    let bolster: Vec<usize> = (1000..1310).collect();
    let splits = make_cv_splits(&primary, &bolster, 10, 42).unwrap();
    assert_eq!(splits.len(), 10);
    for s in &splits {
        assert_eq!(s.test.len(), 39);
        let train: HashSet<_> = s.train.iter().collect();
        assert!(bolster.iter().all(|b| train.contains(b)));
        assert!(s.validation.iter().chain(&s.test).all(|&v| v < 1000));
        let val: HashSet<_> = s.validation.iter().collect();
        assert!(s.test.iter().all(|t| !train.contains(t) && !val.contains(t)));
        assert!(s.validation.iter().all(|v| !train.contains(v)));
    }
    assert_eq!(splits, make_cv_splits(&primary, &bolster, 10, 42).unwrap());
    assert_ne!(splits, make_cv_splits(&primary, &bolster, 10, 43).unwrap());
}

#[test]
fn split_errors() {
    assert!(matches!(make_cv_splits(&[1, 2, 3], &[], 1, 0), Err(Error::Config(_))));
    assert!(make_cv_splits(&[1, 2, 3], &[], 4, 0).is_err());
}

proptest! {
    #[test]
    fn test_sets_partition_primary(n in 2usize..200, folds in 2usize..12, seed: u64) {
        prop_assume!(n >= folds);
        let primary: Vec<usize> = (0..n).collect();
        let splits = make_cv_splits(&primary, &[], folds, seed).unwrap();
        let mut seen: Vec<usize> = splits.iter().flat_map(|s| s.test.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, primary);
        for s in &splits {
            prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        }
    }

    #[test]
    fn ratio_is_scale_invariant(
        r in prop::collection::vec(0.1f64..2.0, 1..8),
        t in prop::collection::vec(-1.0f64..1.0, 8),
        c in 1e-3f64..1e3,
    ) {
        let k = r.len();
        let mut x = vec![0.0; 20 * k];
        for i in 0..k {
            x[20 * i] = r[i];
            x[20 * i + 10] = t[i];
        }
        let ann = PeakAnnotations::new((0..k).map(|i| 20 * i).collect(), (0..k).map(|i| 20 * i + 10).collect());
        let seg = EcgSegment::new(x.clone(), 500.0, "II");
        let a = average_tr_ratio(&seg, &ann).unwrap();
        let b = average_tr_ratio(&seg.with_samples(x.iter().map(|v| c * v).collect()), &ann).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let oracle = t[..k].iter().sum::<f64>() / r.iter().sum::<f64>();
        prop_assert!((a - oracle).abs() <= 1e-12);
    }
}
