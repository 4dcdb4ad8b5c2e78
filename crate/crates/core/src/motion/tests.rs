use super::*;

fn corpus(seed: u64, n: usize, frames: usize) -> Vec<InteractionSample> {
    generate_synthetic_corpus(seed, n, frames, &SkeletonTopology::toy()).unwrap()
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let a = corpus(5, 12, 32);
    let b = corpus(5, 12, 32);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.motion_a.to_bytes(), y.motion_a.to_bytes());
        assert_eq!(x.motion_b.to_bytes(), y.motion_b.to_bytes());
        assert_eq!(x.text, y.text);
    }
    let c = corpus(6, 12, 32);
    assert_ne!(a[0].motion_a, c[0].motion_a);
}

#[test]
fn samples_do_not_depend_on_corpus_size() {
    let small = corpus(9, 4, 16);
    let large = corpus(9, 10, 16);
    assert_eq!(&large[..4], &small[..]);
}

#[test]
fn mirror_dance_partner_is_a_reflection() {
    let f = mirror_matrix();
    let samples = corpus(21, 40, 32);
    let mut checked = 0;
    for s in samples.iter().filter(|s| s.family == Family::MirrorDance) {
        for t in 0..32 {
            for j in 0..9 {
                let pa = s.motion_a.pos(t, j);
                let v = f * nalgebra::Vector3::new(pa[0] as f64, pa[1] as f64, pa[2] as f64);
                let pb = s.motion_b.pos(t, j);
                for c in 0..3 {
                    assert!((v[c] - pb[c] as f64).abs() < 1e-5);
                }
            }
        }
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn approach_distance_strictly_decreases_in_first_half() {
    for frames in [8, 32, 64] {
        for s in corpus(33, 40, frames).iter().filter(|s| s.family == Family::Approach) {
            let d: Vec<f64> = (0..frames).map(|t| dist(s.motion_a.pos(t, 0), s.motion_b.pos(t, 0))).collect();
            for t in 1..frames / 2 {
                assert!(d[t] < d[t - 1], "frames {frames}, t {t}: {} !< {}", d[t], d[t - 1]);
            }
        }
    }
}

#[test]
fn push_retreat_separates_after_contact() {
    for s in corpus(2, 16, 32).iter().filter(|s| s.family == Family::PushRetreat) {
        let d = |t| dist(s.motion_a.pos(t, 0), s.motion_b.pos(t, 0));
        assert!(d(31) > d(16) + 0.1);
    }
}

#[test]
fn kinematic_consistency() {
    for frames in [8, 32, 64] {
        for s in corpus(77, 24, frames) {
            for m in [&s.motion_a, &s.motion_b] {
                for j in 0..9 {
                    assert_eq!(m.vel(0, j), [0.0; 3]);
                }
                for t in 1..frames {
                    for j in 0..9 {
                        let (p, q, v) = (m.pos(t, j), m.pos(t - 1, j), m.vel(t, j));
                        for c in 0..3 {
                            assert!((p[c] - q[c] - v[c]).abs() < 1e-4);
                        }
                        assert!(dist(p, q) < 0.2, "{:?} moved {}", s.family, dist(p, q));
                    }
                }
                for t in 0..frames {
                    for j in 0..9 {
                        let r = m.rot6(t, j);
                        let c0 = [r[0], r[1], r[2]];
                        let c1 = [r[3], r[4], r[5]];
                        let dot = |a: [f32; 3], b: [f32; 3]| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f32>();
                        assert!((dot(c0, c0) - 1.0).abs() < 1e-5);
                        assert!((dot(c1, c1) - 1.0).abs() < 1e-5);
                        assert!(dot(c0, c1).abs() < 1e-5);
                    }
                }
            }
        }
    }
}

#[test]
fn prompts_match_families() {
    for s in corpus(4, 20, 8) {
        assert!(s.family.templates().contains(&s.text.text.as_str()));
        assert_eq!(tokenize(&s.text.text).unwrap(), s.text.tokens);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let toy = SkeletonTopology::toy();
    assert!(generate_synthetic_corpus(0, 0, 32, &toy).is_err());
    assert!(generate_synthetic_corpus(0, 4, 32, &SkeletonTopology::chain(4).unwrap()).is_err());
    assert!(generate_synthetic_corpus(0, 4, 32, &SkeletonTopology::chain(25).unwrap()).is_err());
    assert!(generate_synthetic_corpus(0, 4, 16, &SkeletonTopology::chain(12).unwrap()).is_ok());
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = corpus(8, 6, 16);
    let norm = Normalizer::fit(&samples).unwrap();
    let written = write_corpus(dir.path(), 8, &SkeletonTopology::toy(), &samples, &norm).unwrap();
    let (manifest, loaded) = load_corpus(dir.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(loaded, samples);
    assert_eq!(manifest.topology.neighbors(1), &[0, 2, 3, 5]);
}

#[test]
fn normalizer_standardizes_channels() {
    let samples = corpus(8, 16, 16);
    let norm = Normalizer::fit(&samples).unwrap();
    assert_eq!(norm.width(), 108);
    let w = 108;
    let mut sum = vec![0.0f64; w];
    let mut n = 0;
    for s in &samples {
        for m in [&s.motion_a, &s.motion_b] {
            let z = norm.normalize(m);
            for row in z.chunks_exact(w) {
                for c in 0..w {
                    sum[c] += row[c] as f64;
                }
                n += 1;
            }
            let back = norm.denormalize(16, 9, &z).unwrap();
            for (x, y) in back.data().iter().zip(m.data()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }
    assert!(sum.iter().all(|s| (s / n as f64).abs() < 1e-3));
}
