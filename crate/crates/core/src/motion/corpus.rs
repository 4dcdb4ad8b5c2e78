use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{read_motion_file, write_motion_file, MotionSequence, FEATURE_DIM};
use super::skeleton::SkeletonTopology;
use super::text::TextPrompt;
use crate::error::{invalid, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Approach,
    CircleAround,
    MirrorDance,
    PushRetreat,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Approach,
        Family::CircleAround,
        Family::MirrorDance,
        Family::PushRetreat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Approach => "approach",
            Family::CircleAround => "circle-around",
            Family::MirrorDance => "mirror-dance",
            Family::PushRetreat => "push-retreat",
        }
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Family::Approach => &[
                "one person walks toward the other",
                "a person slowly approaches another person",
                "the first person walks up to the second person and waves",
                "a person walks forward and stands close to a friend",
            ],
            Family::CircleAround => &[
                "one person walks around the other in a circle",
                "a person circles around another person",
                "the first person moves around the second person who turns to watch",
                "one person slowly spins around while the partner stands still",
            ],
            Family::MirrorDance => &[
                "two people dance and mirror each other",
                "the second person copies the dance of the first person",
                "two people perform a mirror dance together",
                "the partner follows the dance of a friend",
            ],
            Family::PushRetreat => &[
                "one person pushes the other who steps back",
                "a person shoves another person away",
                "the first person pushes and the second person retreats",
                "one person pushes the partner backward with both hands",
            ],
        }
    }
}

/// Two clips of equal length on one rig plus the describing prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSample {
    pub id: usize,
    pub family: Family,
    pub motion_a: MotionSequence,
    pub motion_b: MotionSequence,
    pub text: TextPrompt,
}

/// Reflection about the `x = 0` plane used by the mirror family.
pub fn mirror_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))
}

/// Per-frame animation controls for one person.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    root: [f64; 3],
    yaw: f64,
    bob: f64,
    phase: f64,
    swing: f64,
    /// 0..1, arms rotate to point forward.
    extend: f64,
    /// 0..1, arms lift sideways.
    raise: f64,
}

fn ry(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix()
}

fn rx(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix()
}

fn rz(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix()
}

/// First two columns of a rotation matrix.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Global positions and local rotations of every joint for one frame.
fn forward_kinematics(topo: &SkeletonTopology, pose: &Pose, scene: &Matrix3<f64>) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
    let j = topo.joint_count();
    let mut local = vec![Matrix3::identity(); j];
    let mut global = vec![Matrix3::identity(); j];
    let mut pos = vec![Vector3::zeros(); j];
    for joint in topo.topological_order() {
        let Some(parent) = topo.parent(joint) else {
            local[0] = scene * ry(pose.yaw) * rx(0.05 * pose.bob);
            global[0] = local[0];
            let rest = Vector3::from(topo.rest_offset(0));
            pos[0] = Vector3::from(pose.root) + Vector3::new(0.0, rest.y + 0.03 * pose.bob, 0.0);
            continue;
        };
        let off = Vector3::from(topo.rest_offset(joint));
        let side = if off.x < 0.0 { -1.0 } else { 1.0 };
        let vertical = off.y.abs() >= off.x.abs() && off.y.abs() >= off.z.abs();
        local[joint] = if vertical && off.y < 0.0 {
            // Legs swing in antiphase.
            let p = pose.phase + if side < 0.0 { PI } else { 0.0 };
            rx(pose.swing * p.sin())
        } else if vertical {
            rx(0.25 * pose.swing * (pose.phase * 2.0).sin())
        } else {
            let p = pose.phase + if side > 0.0 { PI } else { 0.0 };
            let fwd = -side * pose.extend * 0.75 + 0.6 * pose.swing * p.sin();
            ry(fwd) * rz(side * pose.raise * 0.6)
        };
        global[joint] = global[parent] * local[joint];
        pos[joint] = pos[parent] + global[parent] * off;
    }
    (pos, local)
}

fn render(topo: &SkeletonTopology, poses: &[Pose], scene: &Matrix3<f64>, offset: Vector3<f64>) -> MotionSequence {
    let j = topo.joint_count();
    let mut m = MotionSequence::zeros(poses.len(), j);
    let mut prev: Option<Vec<Vector3<f64>>> = None;
    for (t, pose) in poses.iter().enumerate() {
        let mut p = *pose;
        p.root = (scene * Vector3::from(pose.root)).into();
        let (pos, rot) = forward_kinematics(topo, &p, scene);
        let pos: Vec<_> = pos.into_iter().map(|v| v + offset).collect();
        for k in 0..j {
            let vel = prev.as_ref().map_or(Vector3::zeros(), |pp| pos[k] - pp[k]);
            let r6 = rotation_to_6d(&rot[k]);
            let f = m.feature_mut(t, k);
            for c in 0..3 {
                f[c] = pos[k][c] as f32;
                f[3 + c] = vel[c] as f32;
            }
            for c in 0..6 {
                f[6 + c] = r6[c] as f32;
            }
        }
        prev = Some(pos);
    }
    m
}

fn facing(from: [f64; 3], to: [f64; 3]) -> f64 {
    (to[0] - from[0]).atan2(to[2] - from[2])
}

/// Reflect every feature of `m` about `x = 0`.
pub fn reflect(m: &MotionSequence) -> MotionSequence {
    let f = mirror_matrix();
    let mut out = m.clone();
    for t in 0..m.frames() {
        for k in 0..m.joints() {
            let src = m.feature(t, k);
            let r = Matrix3::new(
                src[6] as f64, src[9] as f64, 0.0,
                src[7] as f64, src[10] as f64, 0.0,
                src[8] as f64, src[11] as f64, 0.0,
            );
            let r = f * r * f;
            let dst = out.feature_mut(t, k);
            dst[0] = -src[0];
            dst[3] = -src[3];
            dst[6] = r[(0, 0)] as f32;
            dst[7] = r[(1, 0)] as f32;
            dst[8] = r[(2, 0)] as f32;
            dst[9] = r[(0, 1)] as f32;
            dst[10] = r[(1, 1)] as f32;
            dst[11] = r[(2, 1)] as f32;
        }
    }
    out
}

fn generate_one<R: Rng>(id: usize, frames: usize, topo: &SkeletonTopology, rng: &mut R) -> InteractionSample {
    let family = Family::ALL[id % Family::ALL.len()];
    let templates = family.templates();
    let text = TextPrompt::parse(templates[rng.random_range(0..templates.len())]).expect("templates use the vocabulary");
    let period = rng.random_range(20.0..30.0);
    let omega = 2.0 * PI / period;
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let last = (frames.max(2) - 1) as f64;
    let mut a = vec![Pose::default(); frames];
    let mut b = vec![Pose::default(); frames];

    let scene_yaw = rng.random_range(0.0..2.0 * PI);
    let mut scene = ry(scene_yaw);
    let mut offset = Vector3::new(rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5));

    match family {
        Family::Approach => {
            let d0 = rng.random_range(1.8..2.6);
            let d_end = rng.random_range(0.6..0.9);
            let step = ((d0 - d_end) / last).min(0.06);
            let share = rng.random_range(0.0..0.3);
            let swing = rng.random_range(0.15..0.3);
            for t in 0..frames {
                let tf = t as f64;
                let u = tf / last;
                a[t].root = [-d0 / 2.0 + step * tf * (1.0 - share), 0.0, 0.0];
                b[t].root = [d0 / 2.0 - step * tf * share, 0.0, 0.0];
                a[t].swing = swing;
                b[t].swing = swing * share;
                b[t].raise = ((u - 0.5) * 2.0).clamp(0.0, 1.0);
            }
        }
        Family::CircleAround => {
            let radius = rng.random_range(1.0..1.5);
            let w = rng.random_range(0.03..0.05) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = rng.random_range(0.0..2.0 * PI);
            for t in 0..frames {
                let ang = start + w * t as f64;
                a[t].root = [radius * ang.sin(), 0.0, radius * ang.cos()];
                // Tangent heading.
                a[t].yaw = ang + w.signum() * FRAC_PI_2;
                a[t].swing = 0.25;
                b[t].swing = 0.05;
            }
        }
        Family::MirrorDance => {
            // The mirror plane must stay fixed; only slide along it.
            scene = Matrix3::identity();
            offset = Vector3::new(0.0, 0.0, rng.random_range(-0.5..0.5));
            let x0 = rng.random_range(0.6..1.0);
            let sway = rng.random_range(0.05..0.15);
            let amp = rng.random_range(0.25..0.35);
            let p2 = rng.random_range(0.0..2.0 * PI);
            for t in 0..frames {
                let ph = phase0 + omega * t as f64;
                a[t].root = [-x0 + sway * ph.sin(), 0.0, 0.2 * (0.5 * ph + p2).sin()];
                a[t].yaw = FRAC_PI_2 + 0.3 * (0.5 * ph).sin();
                a[t].swing = amp;
                a[t].raise = 0.5 + 0.5 * (ph + p2).sin();
            }
        }
        Family::PushRetreat => {
            let contact = (last * 0.5).round();
            let v = rng.random_range(0.03..0.06);
            let gap = 0.7;
            let d0 = gap + v * contact;
            let vb = rng.random_range(0.05..0.08);
            let mut xb = d0 / 2.0;
            for t in 0..frames {
                let tf = t as f64;
                let xa = -d0 / 2.0 + v * tf.min(contact);
                if tf > contact {
                    xb += vb * (-(tf - contact - 1.0) / 6.0).exp();
                }
                a[t].root = [xa, 0.0, 0.0];
                b[t].root = [xb, 0.0, 0.0];
                a[t].swing = if tf < contact { 0.25 } else { 0.05 };
                a[t].extend = ((tf - contact + 6.0) / 6.0).clamp(0.0, 1.0);
                b[t].swing = if tf > contact { 0.2 } else { 0.05 };
            }
        }
    }

    for t in 0..frames {
        let ph = phase0 + omega * t as f64;
        for p in [&mut a[t], &mut b[t]] {
            p.phase = ph;
            p.bob = (2.0 * ph).sin();
        }
        if family != Family::CircleAround && family != Family::MirrorDance {
            a[t].yaw = facing(a[t].root, b[t].root);
        }
        if family != Family::MirrorDance {
            b[t].yaw = facing(b[t].root, a[t].root);
        }
    }

    let motion_a = render(topo, &a, &scene, offset);
    let motion_b = if family == Family::MirrorDance {
        reflect(&motion_a)
    } else {
        render(topo, &b, &scene, offset)
    };
    InteractionSample {
        id,
        family,
        motion_a,
        motion_b,
        text,
    }
}

/// Deterministic corpus; sample `i` depends only on `(seed, i, frames, topology)`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_samples: usize,
    frames: usize,
    topology: &SkeletonTopology,
) -> Result<Vec<InteractionSample>> {
    if n_samples == 0 {
        return Err(invalid("corpus", "n_samples must be positive"));
    }
    if frames < 2 {
        return Err(invalid("corpus", "clips need at least two frames"));
    }
    let j = topology.joint_count();
    if !(5..=24).contains(&j) {
        return Err(invalid("corpus", format!("rig must have 5..=24 joints, got {j}")));
    }
    Ok((0..n_samples)
        .map(|i| generate_one(i, frames, topology, &mut rng::stream(seed, i as u64)))
        .collect())
}

/// Per-channel affine normalization over the flattened `J·12` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(samples: &[InteractionSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("normalizer", "empty corpus"))?;
        let width = first.motion_a.joints() * FEATURE_DIM;
        let mut sum = vec![0.0f64; width];
        let mut sq = vec![0.0f64; width];
        let mut n = 0usize;
        for s in samples {
            for m in [&s.motion_a, &s.motion_b] {
                for row in m.data().chunks_exact(width) {
                    for (c, &v) in row.iter().enumerate() {
                        sum[c] += v as f64;
                        sq[c] += (v as f64).powi(2);
                    }
                    n += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &MotionSequence) -> Vec<f32> {
        let w = self.width();
        m.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % w]) / self.std[i % w])
            .collect()
    }

    pub fn denormalize(&self, frames: usize, joints: usize, data: &[f32]) -> Result<MotionSequence> {
        let w = self.width();
        let raw = data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % w] + self.mean[i % w])
            .collect();
        MotionSequence::new(frames, joints, raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub family: Family,
    pub text: String,
    pub tokens: Vec<u32>,
    pub motion_a: PathBuf,
    pub motion_b: PathBuf,
}

/// On-disk index of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub frames: usize,
    pub vocabulary_size: usize,
    pub topology: SkeletonTopology,
    pub normalizer: Normalizer,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `.mot` files and `manifest.json` under `dir`; paths in the manifest are relative to it.
pub fn write_corpus(
    dir: &Path,
    seed: u64,
    topology: &SkeletonTopology,
    samples: &[InteractionSample],
    normalizer: &Normalizer,
) -> Result<CorpusManifest> {
    fs::create_dir_all(dir.join("motions"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let a = PathBuf::from(format!("motions/{:05}_a.mot", s.id));
        let b = PathBuf::from(format!("motions/{:05}_b.mot", s.id));
        write_motion_file(&s.motion_a, dir.join(&a))?;
        write_motion_file(&s.motion_b, dir.join(&b))?;
        entries.push(ManifestEntry {
            id: s.id,
            family: s.family,
            text: s.text.text.clone(),
            tokens: s.text.tokens.clone(),
            motion_a: a,
            motion_b: b,
        });
    }
    let manifest = CorpusManifest {
        seed,
        frames: samples.first().map_or(0, |s| s.motion_a.frames()),
        vocabulary_size: super::text::VOCAB_SIZE,
        topology: topology.clone(),
        normalizer: normalizer.clone(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<InteractionSample>)> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            Ok(InteractionSample {
                id: e.id,
                family: e.family,
                motion_a: read_motion_file(dir.join(&e.motion_a))?,
                motion_b: read_motion_file(dir.join(&e.motion_b))?,
                text: TextPrompt {
                    text: e.text.clone(),
                    tokens: e.tokens.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
