use super::*;
use proptest::prelude::*;
use std::io::Write;

// Hand-evaluated kinematics for the XJTU-SY LDK UER204 geometry
// (n=8, d=7.92 mm, D=34.55 mm, contact angle 0) at 1 Hz shaft speed.
const UER204_BPFO_AT_1HZ: f64 = 3.083068;
const UER204_BPFI_AT_1HZ: f64 = 4.916932;
const KINEMATICS_TOL: f64 = 5e-7;

fn write_csv(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    path
}

fn xjtu_fixture(rows: usize) -> String {
    let mut s = String::from("Horizontal_vibration_signals,Vertical_vibration_signals\n");
    for i in 0..rows {
        s.push_str(&format!("{}.5,-{}.25\n", i % 7, i % 3));
    }
    s
}

#[test]
fn loads_full_xjtu_file_without_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "1.csv", &xjtu_fixture(32768));
    let loaded = load_xjtu_csv(&path, Channel::Horizontal, 25600.0).unwrap();
    assert_eq!(loaded.record.samples.len(), 32768);
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.record.sample_rate, 25600.0);
    assert_eq!(loaded.record.minute_index, 1);
    assert_eq!(loaded.record.samples[0], 0.5);
    assert_eq!(loaded.record.samples[8], 1.5);
}

#[test]
fn vertical_channel_reads_second_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "3.csv", &xjtu_fixture(16));
    let loaded = load_xjtu_csv(&path, Channel::Vertical, 25600.0).unwrap();
    assert_eq!(loaded.record.samples[0], -0.25);
    assert_eq!(loaded.record.samples[1], -1.25);
    assert_eq!(loaded.record.minute_index, 3);
}

#[test]
fn short_file_loads_with_length_warning() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "2.csv", &xjtu_fixture(1000));
    let loaded = load_xjtu_csv(&path, Channel::Horizontal, 25600.0).unwrap();
    assert_eq!(loaded.record.samples.len(), 1000);
    assert_eq!(loaded.warnings.len(), 1);
    assert!(loaded.warnings[0].contains("1000"));
}

#[test]
fn missing_column_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "x.csv", "time,amplitude\n0,1\n");
    match load_xjtu_csv(&path, Channel::Horizontal, 25600.0) {
        Err(DataError::MissingColumn { channel, .. }) => assert_eq!(channel, "horizontal"),
        other => panic!("expected MissingColumn, got {other:?}"),
    }
}

#[test]
fn non_numeric_cell_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(
        &dir,
        "bad.csv",
        "Horizontal_vibration_signals,Vertical_vibration_signals\n1.0,2.0\noops,3.0\n",
    );
    match load_xjtu_csv(&path, Channel::Horizontal, 25600.0) {
        Err(DataError::ParseError { row, detail, .. }) => {
            assert_eq!(row, 3);
            assert!(detail.contains("oops"));
        }
        other => panic!("expected ParseError, got {other:?}"),
    }
}

#[test]
fn empty_file_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&dir, "empty.csv", "");
    assert!(matches!(
        load_xjtu_csv(&path, Channel::Horizontal, 25600.0),
        Err(DataError::ParseError { .. })
    ));
}

#[test]
fn header_only_file_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(
        &dir,
        "h.csv",
        "Horizontal_vibration_signals,Vertical_vibration_signals\n",
    );
    assert!(matches!(
        load_xjtu_csv(&path, Channel::Horizontal, 25600.0),
        Err(DataError::ParseError { .. })
    ));
}

fn record_of(n: usize) -> RawRecord {
    RawRecord {
        samples: (0..n).map(|i| i as f64).collect(),
        channel: Channel::Horizontal,
        sample_rate: 25600.0,
        source_path: "test://rec".to_string(),
        minute_index: 0,
    }
}

#[test]
fn segmenting_a_minute_file_gives_32_windows() {
    let windows = segment_windows(&record_of(32768), 1024, 1024, 2, "outer_race").unwrap();
    assert_eq!(windows.len(), 32);
    assert!(windows.iter().all(|w| w.values.len() == 1024));
    assert!(windows.iter().all(|w| w.label == 2));
    assert_eq!(windows[5].record_ref.offset, 5 * 1024);
}

#[test]
fn exact_fit_gives_one_window() {
    let windows = segment_windows(&record_of(1024), 1024, 1024, 0, "healthy").unwrap();
    assert_eq!(windows.len(), 1);
    assert_eq!(windows[0].record_ref.offset, 0);
}

#[test]
fn window_longer_than_record_errors() {
    match segment_windows(&record_of(100), 1024, 1024, 0, "healthy") {
        Err(DataError::WindowTooLong {
            window_len,
            record_len,
        }) => {
            assert_eq!((window_len, record_len), (1024, 100));
        }
        other => panic!("expected WindowTooLong, got {other:?}"),
    }
}

#[test]
fn windows_reconstruct_the_covered_region() {
    let record = record_of(1000);
    let windows = segment_windows(&record, 128, 64, 0, "healthy").unwrap();
    let mut rebuilt = vec![f64::NAN; 1000];
    for w in &windows {
        for (i, &v) in w.values.iter().enumerate() {
            let dst = w.record_ref.offset + i;
            if !rebuilt[dst].is_nan() {
                assert_eq!(rebuilt[dst], v, "overlap disagreement at {dst}");
            }
            rebuilt[dst] = v;
        }
    }
    let covered = windows.last().unwrap().record_ref.offset + 128;
    for i in 0..covered {
        assert_eq!(rebuilt[i], record.samples[i]);
    }
}

fn labeled_windows(per_class: &[usize]) -> Vec<SignalWindow> {
    let mut out = Vec::new();
    for (label, &count) in per_class.iter().enumerate() {
        for k in 0..count {
            out.push(SignalWindow {
                values: vec![label as f64; 8],
                label,
                label_name: format!("class{label}"),
                record_ref: RecordRef {
                    source_path: format!("test://{label}"),
                    channel: Channel::Horizontal,
                    offset: k,
                },
            });
        }
    }
    out
}

fn default_split(seed: u64) -> SplitSpec {
    SplitSpec {
        train_fraction: 0.6,
        val_fraction: 0.2,
        test_fraction: 0.2,
        seed,
        stratified: true,
    }
}

#[test]
fn split_matches_exact_arithmetic() {
    let windows = labeled_windows(&[100, 100, 100, 100]);
    let (train, val, test) = stratified_split(&windows, &default_split(11)).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (240, 80, 80));
    for label in 0..4 {
        assert_eq!(train.iter().filter(|w| w.label == label).count(), 60);
        assert_eq!(val.iter().filter(|w| w.label == label).count(), 20);
        assert_eq!(test.iter().filter(|w| w.label == label).count(), 20);
    }
}

#[test]
fn split_is_deterministic() {
    let windows = labeled_windows(&[40, 40, 40]);
    let key = |ws: &[SignalWindow]| -> Vec<(usize, usize)> {
        ws.iter().map(|w| (w.label, w.record_ref.offset)).collect()
    };
    let a = stratified_split(&windows, &default_split(5)).unwrap();
    let b = stratified_split(&windows, &default_split(5)).unwrap();
    assert_eq!(key(&a.0), key(&b.0));
    assert_eq!(key(&a.1), key(&b.1));
    assert_eq!(key(&a.2), key(&b.2));
    // A different seed moves at least something.
    let c = stratified_split(&windows, &default_split(6)).unwrap();
    assert_ne!(key(&a.0), key(&c.0));
}

#[test]
fn tiny_class_is_rejected() {
    let windows = labeled_windows(&[10, 2]);
    match stratified_split(&windows, &default_split(0)) {
        Err(DataError::InsufficientClassSamples { label, count }) => {
            assert_eq!((label, count), (1, 2));
        }
        other => panic!("expected InsufficientClassSamples, got {other:?}"),
    }
}

#[test]
fn bad_fractions_are_rejected() {
    let windows = labeled_windows(&[10]);
    let spec = SplitSpec {
        train_fraction: 0.5,
        val_fraction: 0.2,
        test_fraction: 0.2,
        seed: 0,
        stratified: true,
    };
    assert!(matches!(
        stratified_split(&windows, &spec),
        Err(DataError::BadSplitFractions { .. })
    ));
}

proptest! {
    /// The split is a partition: disjoint, exhaustive, and per-class counts
    /// stay within one window of the exact proportions.
    #[test]
    fn split_is_a_partition(
        class_sizes in proptest::collection::vec(3usize..40, 1..5),
        seed in 0u64..1000,
    ) {
        let windows = labeled_windows(&class_sizes);
        let spec = default_split(seed);
        let (train, val, test) = stratified_split(&windows, &spec).unwrap();

        prop_assert_eq!(train.len() + val.len() + test.len(), windows.len());

        let mut seen: Vec<(usize, usize)> = train.iter()
            .chain(val.iter())
            .chain(test.iter())
            .map(|w| (w.label, w.record_ref.offset))
            .collect();
        seen.sort_unstable();
        let mut expected: Vec<(usize, usize)> = windows.iter()
            .map(|w| (w.label, w.record_ref.offset))
            .collect();
        expected.sort_unstable();
        prop_assert_eq!(seen, expected);

        for (label, &count) in class_sizes.iter().enumerate() {
            let n_train = train.iter().filter(|w| w.label == label).count() as f64;
            let n_val = val.iter().filter(|w| w.label == label).count() as f64;
            let n_test = test.iter().filter(|w| w.label == label).count() as f64;
            prop_assert!((n_train - spec.train_fraction * count as f64).abs() <= 1.0);
            prop_assert!((n_val - spec.val_fraction * count as f64).abs() <= 1.0);
            prop_assert!((n_test - spec.test_fraction * count as f64).abs() <= 1.0);
        }
    }

    /// BPFO + BPFI = n * f_r for any valid geometry.
    #[test]
    fn pass_frequencies_sum_to_ball_count(
        ball_count in 1u32..20,
        d in 1.0f64..30.0,
        extra in 0.5f64..30.0,
        theta in 0.0f64..89.0,
        shaft in 0.1f64..200.0,
    ) {
        let geometry = BearingGeometry {
            ball_count,
            ball_diameter_mm: d,
            pitch_diameter_mm: d + extra,
            contact_angle_deg: theta,
        };
        let f = compute_fault_frequencies(&geometry, shaft);
        let sum = f.bpfo + f.bpfi;
        let expected = ball_count as f64 * shaft;
        prop_assert!((sum - expected).abs() <= 1e-9 * expected.max(1.0));
        prop_assert!(f.bpfo > 0.0 && f.bpfi > 0.0 && f.ftf > 0.0);
    }
}

#[test]
fn table2_geometry_matches_hand_evaluation() {
    let f = compute_fault_frequencies(&BearingGeometry::xjtu_ldk_uer204(), 1.0);
    assert!((f.bpfo - UER204_BPFO_AT_1HZ).abs() < KINEMATICS_TOL, "{}", f.bpfo);
    assert!((f.bpfi - UER204_BPFI_AT_1HZ).abs() < KINEMATICS_TOL, "{}", f.bpfi);
    assert!((f.ftf - UER204_BPFO_AT_1HZ / 8.0).abs() < KINEMATICS_TOL, "{}", f.ftf);
}

#[test]
fn vanishing_ball_diameter_degenerates_symmetrically() {
    let geometry = BearingGeometry {
        ball_count: 8,
        ball_diameter_mm: 1e-9,
        pitch_diameter_mm: 34.55,
        contact_angle_deg: 0.0,
    };
    let f = compute_fault_frequencies(&geometry, 2.0);
    assert!((f.bpfo - 8.0).abs() < 1e-6);
    assert!((f.bpfi - 8.0).abs() < 1e-6);
}

fn outer_race_spec(snr_db: f64) -> SyntheticSpec {
    SyntheticSpec {
        geometry: BearingGeometry::xjtu_ldk_uer204(),
        shaft_hz: 35.0,
        fault_class: FaultClass::OuterRace,
        snr_db,
        resonance_hz: 3000.0,
        decay: 800.0,
        seed: 42,
        duration_s: 1.0,
        sample_rate: 25600.0,
    }
}

#[test]
fn synthesis_is_deterministic() {
    let spec = outer_race_spec(10.0);
    let a = synth_bearing_signal(&spec);
    let b = synth_bearing_signal(&spec);
    assert_eq!(a.samples, b.samples);
    let mut other = spec;
    other.seed = 43;
    assert_ne!(synth_bearing_signal(&other).samples, a.samples);
}

#[test]
fn noiseless_healthy_record_is_silent() {
    let spec = SyntheticSpec {
        fault_class: FaultClass::Healthy,
        snr_db: f64::INFINITY,
        ..outer_race_spec(f64::INFINITY)
    };
    let rec = synth_bearing_signal(&spec);
    assert!(rec.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn healthy_noise_has_unit_rms() {
    let spec = SyntheticSpec {
        fault_class: FaultClass::Healthy,
        ..outer_race_spec(10.0)
    };
    let rec = synth_bearing_signal(&spec);
    let rms = (rec.samples.iter().map(|v| v * v).sum::<f64>() / rec.samples.len() as f64).sqrt();
    assert!((rms - 1.0).abs() < 1e-9);
}

#[test]
fn impulse_count_tracks_bpfo() {
    let spec = outer_race_spec(f64::INFINITY);
    let rec = synth_bearing_signal(&spec);
    let bpfo = compute_fault_frequencies(&spec.geometry, spec.shaft_hz).bpfo;

    // Each impact produces exactly one upward crossing of half the peak
    // amplitude in the rectified signal's local envelope.
    let n = rec.samples.len();
    let mut envelope = vec![0.0f64; n];
    let half_window = (spec.sample_rate / spec.resonance_hz) as usize;
    for i in 0..n {
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window).min(n);
        envelope[i] = rec.samples[lo..hi].iter().fold(0.0, |m, &v| m.max(v.abs()));
    }
    let threshold = 0.5;
    let mut crossings = 0;
    for i in 1..n {
        if envelope[i - 1] < threshold && envelope[i] >= threshold {
            crossings += 1;
        }
    }
    let expected = spec.duration_s * bpfo;
    assert!(
        (crossings as f64 - expected).abs() <= 1.0 + 1.0,
        "{crossings} impulses vs BPFO {expected}"
    );
}

#[test]
fn envelope_spectrum_peaks_at_the_commanded_frequency() {
    // The separability oracle: for every faulted class, the dominant
    // envelope line sits within one spectral bin of the kinematic frequency,
    // even with noise present.
    for fault in [FaultClass::OuterRace, FaultClass::InnerRace, FaultClass::Cage] {
        let freqs = compute_fault_frequencies(&BearingGeometry::xjtu_ldk_uer204(), 35.0);
        let target = match fault {
            FaultClass::OuterRace => freqs.bpfo,
            FaultClass::InnerRace => freqs.bpfi,
            FaultClass::Cage => freqs.ftf,
            FaultClass::Healthy => unreachable!(),
        };
        // Ring time ~ a third of the fault period: a near-delta train has an
        // almost flat harmonic comb, which would make "dominant line" badly
        // conditioned; a finite duty cycle makes the fundamental dominate.
        let spec = SyntheticSpec {
            fault_class: fault,
            snr_db: 10.0,
            decay: 3.0 * target,
            ..outer_race_spec(10.0)
        };
        let rec = synth_bearing_signal(&spec);
        let (fs, mags) = envelope_spectrum(&rec.samples, spec.sample_rate);
        let bin_width = fs[1] - fs[0];
        let peak = dominant_envelope_peak(&fs, &mags, target * 0.5);
        assert!(
            (fs[peak] - target).abs() <= bin_width + 1e-9,
            "{fault:?}: peak at {} Hz, commanded {} Hz",
            fs[peak],
            target
        );
    }
}

#[test]
fn apportion_spreads_remainders() {
    assert_eq!(apportion(100, &[0.6, 0.2, 0.2]), (60, 20, 20));
    assert_eq!(apportion(7, &[0.6, 0.2, 0.2]), (4, 2, 1));
    assert_eq!(apportion(3, &[0.6, 0.2, 0.2]), (2, 1, 0));
    assert_eq!(apportion(0, &[0.6, 0.2, 0.2]), (0, 0, 0));
}
