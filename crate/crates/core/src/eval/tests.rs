use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::motion::{generate_synthetic_corpus, SkeletonTopology};
use crate::rng;

fn gaussian_set(n: usize, d: usize, offset: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| (0..d).map(|k| r.sample::<f64, _>(StandardNormal) + offset.get(k).copied().unwrap_or(0.0)).collect())
        .collect()
}

#[test]
fn fid_of_identical_sets_is_zero_and_symmetric() {
    let x = gaussian_set(500, 8, &[], 1);
    assert!(fid(&x, &x).unwrap() < 1e-6);
    let y = gaussian_set(400, 8, &[0.3, -0.2], 2);
    let (a, b) = (fid(&x, &y).unwrap(), fid(&y, &x).unwrap());
    assert!((a - b).abs() < 1e-6, "{a} {b}");
    assert!(a > 0.0);
}

#[test]
fn fid_of_offset_gaussians_approaches_squared_offset() {
    let v: Vec<f64> = (0..FEATURE_WIDTH).map(|k| if k % 4 == 0 { 0.5 } else { 0.0 }).collect();
    let expected: f64 = v.iter().map(|x| x * x).sum();
    let a = gaussian_set(100_000, FEATURE_WIDTH, &[], 3);
    let b = gaussian_set(100_000, FEATURE_WIDTH, &v, 4);
    let f = fid(&a, &b).unwrap();
    assert!((f - expected).abs() <= 0.05 * expected, "{f} vs {expected}");
}

#[test]
fn fid_rejects_bad_input() {
    let x = gaussian_set(10, 3, &[], 5);
    let mut bad = x.clone();
    bad[2][1] = f64::NAN;
    assert!(fid(&bad, &x).is_err());
    assert!(fid(&x[..1], &x).is_err());
    assert!(fid(&x, &gaussian_set(10, 4, &[], 6)).is_err());
}

#[test]
fn r_precision_of_aligned_features_is_perfect() {
    let m = gaussian_set(64, 6, &[], 7);
    let rp = r_precision(&m, &m, 32, 0).unwrap();
    assert_eq!((rp.top1, rp.top2, rp.top3), (1.0, 1.0, 1.0));
    assert!(r_precision(&m[..31], &m[..31], 32, 0).is_err());
    assert_eq!(r_precision(&m, &gaussian_set(64, 6, &[], 8), 32, 9).unwrap(), r_precision(&m, &gaussian_set(64, 6, &[], 8), 32, 9).unwrap());
}

#[test]
fn r_precision_of_independent_features_is_chance() {
    let n = 4000;
    let m = gaussian_set(n, 8, &[], 10);
    let t = gaussian_set(n, 8, &[], 11);
    let rp = r_precision(&m, &t, 32, 12).unwrap();
    for (k, got) in [(1.0, rp.top1), (2.0, rp.top2), (3.0, rp.top3)] {
        let p: f64 = k / 32.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((got - p).abs() <= 3.0 * sigma, "top{k}: {got} vs {p}");
    }
}

#[test]
fn trivial_distance_metrics() {
    let same = vec![vec![0.5, -1.0]; 40];
    assert_eq!(diversity(&same, 20, 1).unwrap(), 0.0);
    assert_eq!(multimodality(&[same.clone(), same.clone()], 10, 1).unwrap(), 0.0);
    let m = gaussian_set(30, 4, &[], 13);
    assert_eq!(mm_dist(&m, &m).unwrap(), 0.0);
    let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0]).collect();
    let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0], v[1] + 1.0]).collect();
    assert_eq!(paired_distance(&a, &b).unwrap(), 1.0);
    assert!(diversity(&m, 31, 0).is_err());
    assert!(multimodality(&[m.clone()], 31, 0).is_err());
    assert!(multimodality(&[], 1, 0).is_err());
}

#[test]
fn subset_metrics_ignore_input_order_and_match_formula() {
    use rand::seq::index::sample;
    let f = gaussian_set(50, 3, &[], 14);
    let mut shuffled = f.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    assert_eq!(diversity(&f, 20, 5).unwrap(), diversity(&shuffled, 20, 5).unwrap());
    let g = vec![f[..25].to_vec(), f[25..].to_vec()];
    let g_swapped = vec![g[0].iter().rev().cloned().collect(), g[1].clone()];
    assert_eq!(multimodality(&g, 10, 5).unwrap(), multimodality(&g_swapped, 10, 5).unwrap());

    // Brute force: same canonical order and index draws, explicit sum.
    let mut canon = f.clone();
    canon.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap());
    let mut r = rng::stream(5, 0xD1);
    let ia = sample(&mut r, 50, 20);
    let ib = sample(&mut r, 50, 20);
    let mut total = 0.0;
    for (i, j) in ia.iter().zip(ib.iter()) {
        total += canon[i].iter().zip(&canon[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    assert_eq!(diversity(&f, 20, 5).unwrap(), total / 20.0);
}

#[test]
fn summary_interval() {
    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    let sd = (5.0f64 / 3.0).sqrt();
    assert!((s.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
    assert_eq!(Summary::of(&[3.0]).ci95, 0.0);
}

fn corpus_pairs(n: usize, seed: u64) -> Vec<PairedMotion> {
    generate_synthetic_corpus(seed, n, 16, &SkeletonTopology::toy()).unwrap().iter().map(PairedMotion::from).collect()
}

#[test]
fn extractor_is_deterministic_and_discriminative() {
    let ex = FeatureExtractor::new(3, 9, FEATURE_WIDTH).unwrap();
    let pairs = corpus_pairs(8, 1);
    let f1 = ex.motion_features(&pairs[0].a, &pairs[0].b).unwrap();
    assert_eq!(f1.len(), FEATURE_WIDTH);
    assert_eq!(f1, FeatureExtractor::new(3, 9, FEATURE_WIDTH).unwrap().motion_features(&pairs[0].a, &pairs[0].b).unwrap());
    assert_ne!(f1, ex.motion_features(&pairs[1].a, &pairs[1].b).unwrap());
    assert_ne!(ex.text_features(&pairs[0].tokens).unwrap(), ex.text_features(&pairs[1].tokens).unwrap());
    assert!(ex.text_features(&[9999]).is_err());
    assert!(ex.motion_features(&pairs[0].a, &crate::motion::MotionSequence::zeros(16, 5)).is_err());
}

#[test]
fn evaluation_report_and_csv() {
    let ex = FeatureExtractor::new(3, 9, FEATURE_WIDTH).unwrap();
    let real = extract(&ex, &corpus_pairs(64, 2)).unwrap();
    let gen = extract(&ex, &corpus_pairs(48, 3)).unwrap();
    let cfg = EvalConfig { repeats: 5, ..EvalConfig::default() };
    let rep = evaluate(&cfg, &gen, &real, 4).unwrap();
    assert_eq!(rep, evaluate(&cfg, &gen, &real, 4).unwrap());
    assert_eq!(rep.sizes.diversity_subset, 48);
    assert!(rep.sizes.multimodality_subset >= 2);
    for m in METRICS {
        assert!(rep.get(m).mean.is_finite(), "{m}");
    }
    // Same distribution scores far better than an unrelated one.
    let noise = FeatureSet {
        motion: gaussian_set(48, FEATURE_WIDTH, &[], 5),
        text: gen.text.clone(),
        tokens: gen.tokens.clone(),
    };
    assert!(rep.get("fid").mean < evaluate(&cfg, &noise, &real, 4).unwrap().get("fid").mean);

    let rows = metric_rows("r0", "dts", &rep);
    assert_eq!(rows.len(), METRICS.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metric_rows(std::fs::File::create(&path).unwrap(), &rows).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("run_id,mode,metric,mean,ci95_low,ci95_high\n"));
    assert_eq!(read_metric_rows(&path).unwrap(), rows);
    let small = FeatureSet { motion: gen.motion[..10].to_vec(), text: gen.text[..10].to_vec(), tokens: gen.tokens[..10].to_vec() };
    assert!(evaluate(&cfg, &small, &real, 4).is_err());
}
