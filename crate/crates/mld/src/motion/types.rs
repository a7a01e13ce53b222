use super::layout::PoseLayout;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// A motion clip: `L x F` frame-major features plus layout and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub layout: PoseLayout,
    pub fps: f32,
    pub data: Tensor,
}

impl MotionSequence {
    pub fn new(layout: PoseLayout, fps: f32, data: Tensor) -> Result<MotionSequence> {
        let seq = MotionSequence { layout, fps, data };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // L >= 1 is a construction invariant
    }

    pub fn feature_dim(&self) -> usize {
        self.data.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dims().len() != 2 || self.data.cols() != self.layout.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "motion_sequence",
                detail: format!(
                    "data {:?} vs layout width {}",
                    self.data.dims(),
                    self.layout.feature_dim()
                ),
            });
        }
        if !self.data.is_finite() {
            return Err(Error::InvalidArgument(
                "motion data contains NaN or Inf".into(),
            ));
        }
        let contacts = self.layout.contacts();
        for r in 0..self.len() {
            for c in contacts.clone() {
                let v = self.data.at(r, c);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "contact feature out of [0,1] at frame {r}: {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Clamp the contact columns into [0,1]. Model outputs are unconstrained,
    /// so decoded sequences pass through this before validation or saving.
    pub fn clamp_contacts(&mut self) {
        let f = self.layout.feature_dim();
        let contacts = self.layout.contacts();
        for r in 0..self.data.rows() {
            let row = &mut self.data.data_mut()[r * f..(r + 1) * f];
            for c in contacts.clone() {
                row[c] = row[c].clamp(0.0, 1.0);
            }
        }
    }

    /// Joint positions as an `L x 3P` matrix (the j^p block).
    pub fn joint_positions(&self) -> Tensor {
        let range = self.layout.joint_pos();
        let mut out = Tensor::zeros(&[self.len(), range.len()]);
        for r in 0..self.len() {
            let src = &self.data.row(r)[range.clone()];
            out.data_mut()[r * range.len()..(r + 1) * range.len()].copy_from_slice(src);
        }
        out
    }
}

/// SMPL-parameter motion: per-frame global translation and 72-float pose
/// (rotation vectors for 23 joints plus the root), one shared 10-float shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SmplMotion {
    /// L x 3 translations, frame major.
    pub trans: Vec<f32>,
    /// L x 72 axis-angle poses, frame major.
    pub pose: Vec<f32>,
    /// 10 shape coefficients shared across frames.
    pub shape: [f32; 10],
}

impl SmplMotion {
    pub fn new(trans: Vec<f32>, pose: Vec<f32>, shape: [f32; 10]) -> Result<SmplMotion> {
        if !trans.len().is_multiple_of(3) || !pose.len().is_multiple_of(72) || trans.len() / 3 != pose.len() / 72 {
            return Err(Error::ShapeMismatch {
                op: "smpl_motion",
                detail: format!("trans len {} vs pose len {}", trans.len(), pose.len()),
            });
        }
        if trans.is_empty() {
            return Err(Error::InvalidArgument("smpl motion needs frames".into()));
        }
        Ok(SmplMotion { trans, pose, shape })
    }

    pub fn len(&self) -> usize {
        self.trans.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-feature z-score statistics. Columns flagged as contacts can be fitted
/// with identity stats so binary features pass through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Identity stats (normalize becomes a no-op).
    pub fn identity(feature_dim: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; feature_dim],
            std: vec![1.0; feature_dim],
        }
    }

    /// Fit global per-column statistics over every frame of every sequence.
    /// Standard deviations are clamped at 1e-8. With `bypass_contacts`, the
    /// contact columns get identity stats instead of fitted ones.
    pub fn fit(seqs: &[MotionSequence], bypass_contacts: bool) -> Result<NormStats> {
        let first = seqs.first().ok_or_else(|| {
            Error::InvalidArgument("cannot fit normalization stats on an empty corpus".into())
        })?;
        let f = first.feature_dim();
        let mut sum = vec![0f64; f];
        let mut sumsq = vec![0f64; f];
        let mut count = 0usize;
        for seq in seqs {
            if seq.feature_dim() != f {
                return Err(Error::ShapeMismatch {
                    op: "norm_fit",
                    detail: format!("feature width {} vs {}", seq.feature_dim(), f),
                });
            }
            for r in 0..seq.len() {
                for (c, &v) in seq.data.row(r).iter().enumerate() {
                    sum[c] += v as f64;
                    sumsq[c] += (v as f64) * (v as f64);
                }
            }
            count += seq.len();
        }
        let n = count as f64;
        let mut mean = vec![0f32; f];
        let mut std = vec![0f32; f];
        for c in 0..f {
            let m = sum[c] / n;
            let var = (sumsq[c] / n - m * m).max(0.0);
            mean[c] = m as f32;
            std[c] = (var.sqrt() as f32).max(1e-8);
        }
        if bypass_contacts {
            for c in first.layout.contacts() {
                mean[c] = 0.0;
                std[c] = 1.0;
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    fn check_width(&self, seq: &MotionSequence) -> Result<()> {
        if seq.feature_dim() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                detail: format!(
                    "stats width {} vs sequence width {}",
                    self.feature_dim(),
                    seq.feature_dim()
                ),
            });
        }
        Ok(())
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check_width(seq)?;
        let f = self.feature_dim();
        let mut data = seq.data.clone();
        for r in 0..seq.len() {
            let row = &mut data.data_mut()[r * f..(r + 1) * f];
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(MotionSequence {
            layout: seq.layout,
            fps: seq.fps,
            data,
        })
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check_width(seq)?;
        let f = self.feature_dim();
        let mut data = seq.data.clone();
        for r in 0..seq.len() {
            let row = &mut data.data_mut()[r * f..(r + 1) * f];
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(MotionSequence {
            layout: seq.layout,
            fps: seq.fps,
            data,
        })
    }
}
