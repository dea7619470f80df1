use super::*;
use crate::dataio::{Channel, RecordRef, SignalWindow};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max abs disagreement allowed between independently computed encodings
/// (double precision; see the oracle-equivalence contract).
const ORACLE_TOL: f64 = 1e-12;

fn mkwindow(values: Vec<f64>) -> SignalWindow {
    SignalWindow {
        values,
        label: 1,
        label_name: "outer_race".to_string(),
        record_ref: RecordRef {
            source_path: "test://w".to_string(),
            channel: Channel::Horizontal,
            offset: 2048,
        },
    }
}

fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect()
}

// ---------------------------------------------------------------------------
// rescale
// ---------------------------------------------------------------------------

#[test]
fn rescale_hits_the_anchors_exactly() {
    let s = minmax_rescale(&[0.0, 5.0, 10.0], "t").unwrap();
    assert_eq!(s.values, vec![-1.0, 0.0, 1.0]);
    assert_eq!((s.raw_min, s.raw_max), (0.0, 10.0));

    let id = minmax_rescale(&[-1.0, 0.0, 1.0], "t").unwrap();
    assert_eq!(id.values, vec![-1.0, 0.0, 1.0]);
}

#[test]
fn rescale_rejects_constant_input() {
    assert!(matches!(
        minmax_rescale(&[3.0, 3.0, 3.0], "t"),
        Err(GafError::DegenerateRange)
    ));
}

proptest! {
    /// Every output lies in [-1, 1] with the extrema mapped exactly.
    #[test]
    fn rescale_range_and_anchors(values in proptest::collection::vec(-1e6f64..1e6, 2..200)) {
        prop_assume!(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            > values.iter().cloned().fold(f64::INFINITY, f64::min));
        let s = minmax_rescale(&values, "t").unwrap();
        prop_assert!(s.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(s.values.iter().any(|&v| v == 1.0));
        prop_assert!(s.values.iter().any(|&v| v == -1.0));
    }
}

// ---------------------------------------------------------------------------
// PAA
// ---------------------------------------------------------------------------

#[test]
fn paa_takes_segment_means() {
    assert_eq!(paa_downsample(&[1.0, 1.0, 3.0, 3.0], 2).unwrap(), vec![1.0, 3.0]);

    let values = random_values(1024, 3);
    let got = paa_downsample(&values, 64).unwrap();
    assert_eq!(got.len(), 64);
    for (s, g) in got.iter().enumerate() {
        let naive: f64 = values[s * 16..(s + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!((g - naive).abs() < 1e-12);
    }
}

#[test]
fn paa_pads_the_last_segment_with_the_final_value() {
    // len 10, target 4 -> segment width 3, padded to 12 with two copies of
    // the last value.
    let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
    let got = paa_downsample(&v, 4).unwrap();
    assert_eq!(got, vec![2.0, 5.0, 8.0, (10.0 + 10.0 + 10.0) / 3.0]);
}

#[test]
fn paa_handles_segments_entirely_inside_the_padding() {
    // len 32, target 30 -> segment width 2, padded to 60: segments 16..30
    // lie wholly in the padding and take the final value.
    let v: Vec<f64> = (1..=32).map(|i| i as f64).collect();
    let got = paa_downsample(&v, 30).unwrap();
    assert_eq!(got.len(), 30);
    for (s, g) in got.iter().enumerate().take(16) {
        assert_eq!(*g, (2 * s + 1) as f64 + 0.5, "segment {s}");
    }
    for (s, g) in got.iter().enumerate().skip(16) {
        assert_eq!(*g, 32.0, "segment {s}");
    }
}

#[test]
fn paa_rejects_bad_targets() {
    assert!(matches!(
        paa_downsample(&[1.0, 2.0], 0),
        Err(GafError::BadTarget { .. })
    ));
    assert!(matches!(
        paa_downsample(&[1.0, 2.0], 1),
        Err(GafError::BadTarget { .. })
    ));
    assert!(matches!(
        paa_downsample(&[1.0, 2.0], 3),
        Err(GafError::BadTarget { .. })
    ));
}

// ---------------------------------------------------------------------------
// polar transform
// ---------------------------------------------------------------------------

fn series(values: Vec<f64>) -> NormalizedSeries {
    NormalizedSeries {
        values,
        source: "t".to_string(),
        raw_min: -1.0,
        raw_max: 1.0,
    }
}

#[test]
fn polar_anchors_are_exact() {
    let p = to_polar(&series(vec![1.0, 0.0, -1.0]), 3).unwrap();
    assert_eq!(p.angles[0], 0.0);
    assert!((p.angles[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    assert!((p.angles[2] - std::f64::consts::PI).abs() < 1e-15);
    assert_eq!(p.radii, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert!(p.radii.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn polar_clamps_within_tolerance_and_rejects_beyond() {
    let p = to_polar(&series(vec![1.0 + 1e-13, -(1.0 + 1e-13)]), 2).unwrap();
    assert_eq!(p.angles[0], 0.0);
    assert!((p.angles[1] - std::f64::consts::PI).abs() < 1e-15);

    match to_polar(&series(vec![0.0, 1.01]), 2) {
        Err(GafError::DomainError { index, value }) => {
            assert_eq!(index, 1);
            assert!((value - 1.01).abs() < 1e-15);
        }
        other => panic!("expected DomainError, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// difference field
// ---------------------------------------------------------------------------

#[test]
fn two_point_fields_match_hand_evaluation() {
    // values [1, 0]: phi = (0, pi/2) -> [[0, -1], [1, 0]]
    let img = gadf_encode(&to_polar(&series(vec![1.0, 0.0]), 2).unwrap());
    assert_eq!(img.pixels[(0, 0)], 0.0);
    assert_eq!(img.pixels[(1, 1)], 0.0);
    assert!((img.pixels[(0, 1)] + 1.0).abs() < 1e-15);
    assert!((img.pixels[(1, 0)] - 1.0).abs() < 1e-15);

    // values [1, -1]: phi = (0, pi) -> sin(±pi) = 0 to rounding
    let img = gadf_encode(&to_polar(&series(vec![1.0, -1.0]), 2).unwrap());
    for v in img.pixels.iter() {
        assert!(v.abs() < ORACLE_TOL);
    }
}

proptest! {
    /// Production encoder vs. the naive double loop, plus the hard
    /// invariants: exact antisymmetry, zero diagonal, range.
    #[test]
    fn field_matches_naive_oracle(seed in 0u64..500, n in 4usize..48) {
        let values = random_values(n, seed);
        let norm = minmax_rescale(&values, "t").unwrap();
        let polar = to_polar(&norm, n).unwrap();
        let img = gadf_encode(&polar);

        for i in 0..n {
            prop_assert_eq!(img.pixels[(i, i)], 0.0);
            for j in 0..n {
                let naive = (polar.angles[i] - polar.angles[j]).sin();
                prop_assert!((img.pixels[(i, j)] - naive).abs() < ORACLE_TOL);
                prop_assert!(img.pixels[(i, j)] + img.pixels[(j, i)] == 0.0);
                prop_assert!(img.pixels[(i, j)].abs() <= 1.0);
            }
        }
    }

    /// Trigonometric and algebraic forms of the field agree.
    #[test]
    fn algebraic_form_agrees(seed in 0u64..200, n in 4usize..32) {
        let values = random_values(n, seed + 9000);
        let norm = minmax_rescale(&values, "t").unwrap();
        let trig = gadf_encode(&to_polar(&norm, n).unwrap());
        let alg = gadf_encode_algebraic(&norm);
        for (a, b) in trig.pixels.iter().zip(alg.iter()) {
            prop_assert!((a - b).abs() < ORACLE_TOL);
        }
    }

    /// Normalization absorbs strictly increasing affine maps of the raw
    /// window. (Exact equality is a float-rounding question; agreement here
    /// is to 1e-8, dominated by arccos sensitivity near the extrema.)
    #[test]
    fn affine_maps_leave_the_image_unchanged(
        seed in 0u64..100,
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
    ) {
        let values = random_values(64, seed + 500);
        let mapped: Vec<f64> = values.iter().map(|&v| a * v + b).collect();
        let img1 = encode_window(&mkwindow(values), 16).unwrap();
        let img2 = encode_window(&mkwindow(mapped), 16).unwrap();
        for (x, y) in img1.pixels.iter().zip(img2.pixels.iter()) {
            prop_assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }
}

// ---------------------------------------------------------------------------
// gram matrix
// ---------------------------------------------------------------------------

/// Cyclic-Jacobi eigenvalues of a symmetric matrix; plenty for the PSD
/// check on matrices this small.
fn jacobi_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

#[test]
fn gram_of_standard_basis_is_identity() {
    let e = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let g = gram_matrix(&e).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g[(i, j)], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn gram_of_single_vector_is_squared_norm() {
    let g = gram_matrix(&[vec![3.0, 4.0]]).unwrap();
    assert_eq!(g[(0, 0)], 25.0);
}

#[test]
fn gram_rejects_mixed_lengths() {
    match gram_matrix(&[vec![1.0, 2.0], vec![1.0]]) {
        Err(GafError::LengthMismatch { index, got, expected }) => {
            assert_eq!((index, got, expected), (1, 1, 2));
        }
        other => panic!("expected LengthMismatch, got {other:?}"),
    }
}

proptest! {
    /// Symmetric, matches the double-loop oracle, and positive semidefinite
    /// (no eigenvalue below -1e-9).
    #[test]
    fn gram_is_symmetric_and_psd(seed in 0u64..100, n in 1usize..16, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let g = gram_matrix(&vectors).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                prop_assert_eq!(g[(i, j)], g[(j, i)]);
                prop_assert!((g[(i, j)] - dot).abs() < 1e-12);
            }
        }
        for ev in jacobi_eigenvalues(g) {
            prop_assert!(ev > -1e-9, "negative eigenvalue {ev}");
        }
    }
}

// ---------------------------------------------------------------------------
// whole-window encoding
// ---------------------------------------------------------------------------

#[test]
fn encode_window_shapes_and_provenance() {
    let img = encode_window(&mkwindow(random_values(1024, 77)), 64).unwrap();
    assert_eq!(img.pixels.dim(), (64, 64));
    assert_eq!(img.label, 1);
    assert_eq!(img.label_name, "outer_race");
    assert_eq!(img.meta.source_path, "test://w");
    assert_eq!(img.meta.channel, "horizontal");
    assert_eq!(img.meta.offset, 2048);
    assert_eq!(img.meta.paa_factor, 16);
    assert!(!img.meta.synthetic);
    assert!(img.meta.norm_min < img.meta.norm_max);
}

#[test]
fn encoding_is_bit_deterministic() {
    let w = mkwindow(random_values(512, 13));
    let a = encode_window(&w, 32).unwrap();
    let b = encode_window(&w, 32).unwrap();
    for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn constant_window_propagates_degenerate_range() {
    assert!(matches!(
        encode_window(&mkwindow(vec![2.5; 64]), 16),
        Err(GafError::DegenerateRange)
    ));
}

// ---------------------------------------------------------------------------
// container round trip
// ---------------------------------------------------------------------------

#[test]
fn image_set_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.fgc");
    let images: Vec<GafImage> = (0..5)
        .map(|k| encode_window(&mkwindow(random_values(256, k)), 16).unwrap())
        .collect();
    serialize_images(&images, &path).unwrap();
    let loaded = load_images(&path).unwrap();
    assert_eq!(loaded.len(), 5);

    for (a, b) in images.iter().zip(&loaded) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.label_name, b.label_name);
        assert_eq!(a.meta, b.meta);
        // One narrowing to the container dtype happened at save time...
        for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
            assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            assert!((x - y).abs() < 1e-6);
        }
    }

    // ...and from then on the cycle is exact: save the loaded set again and
    // every bit survives.
    let path2 = dir.path().join("set2.fgc");
    serialize_images(&loaded, &path2).unwrap();
    let again = load_images(&path2).unwrap();
    for (a, b) in loaded.iter().zip(&again) {
        for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn empty_image_set_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.fgc");
    serialize_images(&[], &path).unwrap();
    assert!(load_images(&path).unwrap().is_empty());
}

#[test]
fn wrong_magic_surfaces_as_format_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.fgc");
    std::fs::write(&path, b"JUNKJUNKJUNKJUNKJUNK").unwrap();
    match load_images(&path) {
        Err(GafError::Container(ContainerError::FormatVersionMismatch { .. })) => {}
        other => panic!("expected FormatVersionMismatch, got {other:?}"),
    }
}

#[test]
fn mixed_sizes_are_rejected() {
    let a = encode_window(&mkwindow(random_values(256, 1)), 16).unwrap();
    let b = encode_window(&mkwindow(random_values(256, 2)), 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match serialize_images(&[a, b], &dir.path().join("bad.fgc")) {
        Err(GafError::BadImageSet { .. }) => {}
        other => panic!("expected BadImageSet, got {other:?}"),
    }
}

#[test]
fn png_export_writes_a_decodable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    let img = encode_window(&mkwindow(random_values(256, 5)), 32).unwrap();
    write_png(&img, &path).unwrap();
    let decoded = image::open(&path).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (32, 32));
}
