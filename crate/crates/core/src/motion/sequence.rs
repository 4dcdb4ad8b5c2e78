use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Per-joint feature width: position, velocity, 6D rotation.
pub const FEATURE_DIM: usize = 12;
pub const MOT_MAGIC: &[u8; 4] = b"MOT1";

/// A `T × J × 12` motion clip stored in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    joints: usize,
    data: Vec<f32>,
}

impl MotionSequence {
    pub fn new(frames: usize, joints: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * joints * FEATURE_DIM {
            return Err(invalid(
                "motion",
                format!(
                    "{frames}x{joints}x{FEATURE_DIM} clip needs {} values, got {}",
                    frames * joints * FEATURE_DIM,
                    data.len()
                ),
            ));
        }
        Ok(Self { frames, joints, data })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            data: vec![0.0; frames * joints * FEATURE_DIM],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn feature(&self, t: usize, j: usize) -> &[f32] {
        let o = (t * self.joints + j) * FEATURE_DIM;
        &self.data[o..o + FEATURE_DIM]
    }

    pub fn feature_mut(&mut self, t: usize, j: usize) -> &mut [f32] {
        let o = (t * self.joints + j) * FEATURE_DIM;
        &mut self.data[o..o + FEATURE_DIM]
    }

    pub fn pos(&self, t: usize, j: usize) -> [f32; 3] {
        let f = self.feature(t, j);
        [f[0], f[1], f[2]]
    }

    pub fn vel(&self, t: usize, j: usize) -> [f32; 3] {
        let f = self.feature(t, j);
        [f[3], f[4], f[5]]
    }

    pub fn rot6(&self, t: usize, j: usize) -> [f32; 6] {
        let f = self.feature(t, j);
        [f[6], f[7], f[8], f[9], f[10], f[11]]
    }

    /// `[T, J·12]`, row `t` holding the joints of frame `t` in order.
    pub fn flatten_joints(&self) -> Tensor<f32> {
        Tensor::new([self.frames, self.joints * FEATURE_DIM], self.data.clone())
            .expect("length checked at construction")
    }

    pub fn unflatten(t: &Tensor<f32>, joints: usize) -> Result<Self> {
        let (frames, width) = t.dims2()?;
        if width != joints * FEATURE_DIM {
            return Err(invalid(
                "unflatten",
                format!("width {width} is not {joints} joints x {FEATURE_DIM}"),
            ));
        }
        Self::new(frames, joints, t.data().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MOT_MAGIC);
        for v in [self.frames, self.joints, FEATURE_DIM] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MOT_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (frames, joints, d) = (word(0), word(1), word(2));
        if d != FEATURE_DIM {
            return Err(Error::HeaderMismatch(format!(
                "feature width {d}, expected {FEATURE_DIM}"
            )));
        }
        let expected = frames * joints * d * 4;
        let payload = &bytes[16..];
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::HeaderMismatch(format!(
                "header {frames}x{joints}x{d} implies {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, joints, data)
    }
}

pub fn write_motion_file(m: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, m.to_bytes())?;
    Ok(())
}

pub fn read_motion_file(path: impl AsRef<Path>) -> Result<MotionSequence> {
    MotionSequence::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(frames: usize, joints: usize) -> MotionSequence {
        let n = frames * joints * FEATURE_DIM;
        MotionSequence::new(frames, joints, (0..n).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap()
    }

    #[test]
    fn flatten_shapes() {
        assert_eq!(ramp(2, 3).flatten_joints().shape(), &[2, 36]);
        assert_eq!(ramp(1, 22).flatten_joints().shape(), &[1, 264]);
    }

    proptest! {
        #[test]
        fn flatten_round_trip_is_bitwise(frames in 1usize..6, joints in 1usize..10, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let data = (0..frames * joints * FEATURE_DIM).map(|_| rng.random::<f32>() * 8.0 - 4.0).collect();
            let m = MotionSequence::new(frames, joints, data).unwrap();
            let back = MotionSequence::unflatten(&m.flatten_joints(), joints).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mot");
        let mut m = ramp(4, 5);
        m.feature_mut(1, 2)[7] = f32::MIN_POSITIVE;
        write_motion_file(&m, &path).unwrap();
        let back = read_motion_file(&path).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = ramp(10, 2).to_bytes();
        let cut = &bytes[..bytes.len() - 2 * FEATURE_DIM * 4];
        assert!(matches!(MotionSequence::from_bytes(cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn wrong_magic_and_wrong_width_are_distinct_errors() {
        let mut bytes = ramp(2, 2).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(MotionSequence::from_bytes(&bytes), Err(Error::BadMagic(_))));
        let mut bytes = ramp(2, 2).to_bytes();
        bytes[12] = 11;
        assert!(matches!(MotionSequence::from_bytes(&bytes), Err(Error::HeaderMismatch(_))));
        let mut bytes = ramp(2, 2).to_bytes();
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(MotionSequence::from_bytes(&bytes), Err(Error::HeaderMismatch(_))));
    }
}
