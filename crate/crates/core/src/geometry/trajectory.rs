use super::interp::interpolate_pose;
use super::pose::Pose;
use crate::error::{Error, Result};

/// Timestamped camera-to-world poses, timestamps in seconds, strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid(format!(
                    "trajectory timestamps not strictly increasing at sample {}",
                    i + 1
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.samples.iter().map(|s| s.1).collect()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }

    /// Pose at `t`, interpolated between the bracketing samples.
    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        let (lo, hi) = self
            .span()
            .ok_or_else(|| Error::invalid("empty trajectory"))?;
        if t < lo || t > hi {
            return Err(Error::OutOfRange { value: t, lo, hi });
        }
        let k = self.samples.partition_point(|s| s.0 <= t);
        if k == 0 {
            return Ok(self.samples[0].1);
        }
        let (ta, pa) = self.samples[k - 1];
        if ta == t || k == self.samples.len() {
            return Ok(pa);
        }
        let (tb, pb) = self.samples[k];
        interpolate_pose(&pa, ta, &pb, tb, t)
    }
}
