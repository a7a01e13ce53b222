use std::ops::Range;

use crate::{Error, Result};

/// Frame feature layout for redundant motion features: root angular velocity,
/// root planar linear velocity, root height, joint positions, joint
/// velocities, 6D joint rotations, and four foot-contact bits.
///
/// Positions and rotations cover `P` joints where `P` is either all joints or
/// all but the root, controlled by `include_root`; velocities always cover
/// every joint. With 22 joints this yields the classic 263-wide layout when
/// the root is excluded and 272 when included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoseLayout {
    pub n_joints: usize,
    pub include_root: bool,
}

impl PoseLayout {
    pub fn new(n_joints: usize, include_root: bool) -> Result<PoseLayout> {
        if n_joints < 2 {
            return Err(Error::InvalidArgument(format!(
                "pose layout needs at least 2 joints, got {n_joints}"
            )));
        }
        Ok(PoseLayout {
            n_joints,
            include_root,
        })
    }

    /// Joint count P covered by the position and rotation blocks.
    pub fn pos_joints(&self) -> usize {
        if self.include_root {
            self.n_joints
        } else {
            self.n_joints - 1
        }
    }

    /// Total feature width: 1 + 2 + 1 + 3P + 3N_j + 6P + 4.
    pub fn feature_dim(&self) -> usize {
        8 + 3 * self.pos_joints() + 3 * self.n_joints + 6 * self.pos_joints()
    }

    pub fn root_ang_vel(&self) -> Range<usize> {
        0..1
    }

    pub fn root_lin_vel(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn joint_pos(&self) -> Range<usize> {
        4..4 + 3 * self.pos_joints()
    }

    pub fn joint_vel(&self) -> Range<usize> {
        let s = self.joint_pos().end;
        s..s + 3 * self.n_joints
    }

    pub fn joint_rot(&self) -> Range<usize> {
        let s = self.joint_vel().end;
        s..s + 6 * self.pos_joints()
    }

    pub fn contacts(&self) -> Range<usize> {
        let f = self.feature_dim();
        f - 4..f
    }

    /// Recover the layout from a feature width. The two layout families
    /// occupy distinct residues mod 12 (8 with root, 11 without), so a width
    /// determines the layout when it matches either formula.
    pub fn infer(feature_dim: usize) -> Option<PoseLayout> {
        if feature_dim >= 32 && feature_dim % 12 == 8 {
            let n = (feature_dim - 8) / 12;
            return Some(PoseLayout {
                n_joints: n,
                include_root: true,
            });
        }
        if feature_dim >= 23 && feature_dim % 12 == 11 {
            let n = (feature_dim + 1) / 12;
            return Some(PoseLayout {
                n_joints: n,
                include_root: false,
            });
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_widths() {
        let l = PoseLayout::new(22, false).unwrap();
        assert_eq!(l.feature_dim(), 263);
        let l = PoseLayout::new(22, true).unwrap();
        assert_eq!(l.feature_dim(), 272);
        let l = PoseLayout::new(2, true).unwrap();
        assert_eq!(l.feature_dim(), 32);
    }

    #[test]
    fn offsets_partition_the_width() {
        for &(n, root) in &[(2, true), (5, true), (22, false), (22, true), (7, false)] {
            let l = PoseLayout::new(n, root).unwrap();
            assert_eq!(l.root_ang_vel().start, 0);
            assert_eq!(l.root_ang_vel().end, l.root_lin_vel().start);
            assert_eq!(l.root_lin_vel().end, l.root_height().start);
            assert_eq!(l.root_height().end, l.joint_pos().start);
            assert_eq!(l.joint_pos().end, l.joint_vel().start);
            assert_eq!(l.joint_vel().end, l.joint_rot().start);
            assert_eq!(l.joint_rot().end, l.contacts().start);
            assert_eq!(l.contacts().end, l.feature_dim());
        }
    }

    #[test]
    fn infer_round_trips() {
        for &(n, root) in &[(2, true), (5, true), (22, false), (22, true), (13, false)] {
            let l = PoseLayout::new(n, root).unwrap();
            assert_eq!(PoseLayout::infer(l.feature_dim()), Some(l));
        }
        assert_eq!(PoseLayout::infer(10), None);
    }

    #[test]
    fn rejects_single_joint() {
        assert!(PoseLayout::new(1, true).is_err());
    }
}
