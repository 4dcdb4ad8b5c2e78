use crate::error::{invalid, Result};
use crate::motion::{MotionSequence, FEATURE_DIM, VOCAB_SIZE};
use crate::numerics::Tensor;
use crate::rng;

/// Default feature width.
pub const FEATURE_WIDTH: usize = 32;

const HIDDEN: usize = 64;

/// Frozen two-layer random projections for interactions and prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub joints: usize,
    pub width: usize,
    motion_w1: Vec<f64>,
    motion_w2: Vec<f64>,
    text_w1: Vec<f64>,
    text_w2: Vec<f64>,
}

fn gaussian(rows: usize, cols: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, stream);
    Tensor::<f64>::randn([rows, cols], 1.0 / (rows as f64).sqrt(), &mut r).into_data()
}

/// `tanh(x·W1)·W2`.
fn project(x: &[f64], w1: &[f64], w2: &[f64], width: usize) -> Vec<f64> {
    let n_in = x.len();
    let mut h = vec![0.0; HIDDEN];
    for (i, &xi) in x.iter().enumerate() {
        for (hj, &w) in h.iter_mut().zip(&w1[i * HIDDEN..(i + 1) * HIDDEN]) {
            *hj += xi * w;
        }
    }
    debug_assert_eq!(w1.len(), n_in * HIDDEN);
    let mut out = vec![0.0; width];
    for (j, hj) in h.iter().enumerate() {
        let a = hj.tanh();
        for (o, &w) in out.iter_mut().zip(&w2[j * width..(j + 1) * width]) {
            *o += a * w;
        }
    }
    out
}

impl FeatureExtractor {
    pub fn new(seed: u64, joints: usize, width: usize) -> Result<Self> {
        if joints == 0 || width == 0 {
            return Err(invalid("feature_extractor", "joints and width must be positive"));
        }
        let n_in = Self::summary_width(joints);
        Ok(Self {
            seed,
            joints,
            width,
            motion_w1: gaussian(n_in, HIDDEN, seed, 1),
            motion_w2: gaussian(HIDDEN, width, seed, 2),
            text_w1: gaussian(VOCAB_SIZE, HIDDEN, seed, 3),
            text_w2: gaussian(HIDDEN, width, seed, 4),
        })
    }

    fn summary_width(joints: usize) -> usize {
        2 * 2 * joints * FEATURE_DIM + 2
    }

    /// Temporal mean and standard deviation of every channel.
    fn person_summary(m: &MotionSequence, out: &mut Vec<f64>) {
        let c = m.joints() * FEATURE_DIM;
        let t = m.frames() as f64;
        for ch in 0..c {
            let vals = m.data().iter().skip(ch).step_by(c).map(|&v| v as f64);
            let mean = vals.clone().sum::<f64>() / t;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
            out.push(mean);
            out.push(var.sqrt());
        }
    }

    /// Feature of one interaction (both persons plus their root separation).
    pub fn motion_features(&self, a: &MotionSequence, b: &MotionSequence) -> Result<Vec<f64>> {
        if a.joints() != self.joints || b.joints() != self.joints || a.frames() != b.frames() || a.frames() == 0 {
            return Err(invalid(
                "motion_features",
                format!("expected two equal-length clips of {} joints", self.joints),
            ));
        }
        let mut x = Vec::with_capacity(Self::summary_width(self.joints));
        Self::person_summary(a, &mut x);
        Self::person_summary(b, &mut x);
        let dist: Vec<f64> = (0..a.frames())
            .map(|t| {
                let (pa, pb) = (a.pos(t, 0), b.pos(t, 0));
                (0..3).map(|k| ((pa[k] - pb[k]) as f64).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let mean = dist.iter().sum::<f64>() / dist.len() as f64;
        let var = dist.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / dist.len() as f64;
        x.push(mean);
        x.push(var.sqrt());
        let f = project(&x, &self.motion_w1, &self.motion_w2, self.width);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite { op: "motion_features" });
        }
        Ok(f)
    }

    /// Feature of a prompt from its normalized bag of words.
    pub fn text_features(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut bow = vec![0.0; VOCAB_SIZE];
        for &t in tokens {
            *bow.get_mut(t as usize).ok_or(crate::Error::UnknownToken(t))? += 1.0;
        }
        let n = tokens.len().max(1) as f64;
        bow.iter_mut().for_each(|v| *v /= n);
        Ok(project(&bow, &self.text_w1, &self.text_w2, self.width))
    }
}
