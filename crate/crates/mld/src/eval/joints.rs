//! Joint-space reconstruction errors: global position error, position error
//! after per-frame similarity alignment, and acceleration error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::numerics::{sym_eigen, TensorG};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointErrorReport {
    pub mpjpe: f64,
    pub pampjpe: f64,
    pub accl: f64,
}

/// Per-frame joint positions pulled from the feature layout's position block.
pub fn joint_positions(seq: &MotionSequence) -> Vec<Vec<[f64; 3]>> {
    let range = seq.layout.joint_pos();
    let joints = (range.end - range.start) / 3;
    let mut frames = Vec::with_capacity(seq.len());
    for r in 0..seq.len() {
        let row = seq.data.row(r);
        let mut pts = Vec::with_capacity(joints);
        for j in 0..joints {
            let base = range.start + 3 * j;
            pts.push([
                row[base] as f64,
                row[base + 1] as f64,
                row[base + 2] as f64,
            ]);
        }
        frames.push(pts);
    }
    frames
}

fn centroid(pts: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0f64; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in c.iter_mut() {
        *v /= pts.len() as f64;
    }
    c
}

fn mean_norm(errs: impl Iterator<Item = [f64; 3]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in errs {
        total += (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        count += 1;
    }
    total / count as f64
}

/// Best proper rotation taking `p` onto `g` in the least-squares sense, by
/// the quaternion formulation: the top eigenvector of the 4x4 matrix built
/// from the cross-covariance is the optimal unit quaternion, which can never
/// encode a reflection.
fn best_rotation(p: &[[f64; 3]], g: &[[f64; 3]]) -> Result<[[f64; 3]; 3]> {
    let mut m = [[0.0f64; 3]; 3];
    for (pp, gg) in p.iter().zip(g) {
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += pp[a] * gg[b];
            }
        }
    }
    let (sxx, sxy, sxz) = (m[0][0], m[0][1], m[0][2]);
    let (syx, syy, syz) = (m[1][0], m[1][1], m[1][2]);
    let (szx, szy, szz) = (m[2][0], m[2][1], m[2][2]);
    let n = TensorG::<f64>::from_vec(
        vec![4, 4],
        vec![
            sxx + syy + szz,
            syz - szy,
            szx - sxz,
            sxy - syx,
            syz - szy,
            sxx - syy - szz,
            sxy + syx,
            szx + sxz,
            szx - sxz,
            sxy + syx,
            -sxx + syy - szz,
            syz + szy,
            sxy - syx,
            szx + sxz,
            syz + szy,
            -sxx - syy + szz,
        ],
    )?;
    let (vals, vecs) = sym_eigen(&n)?;
    let mut best = 0usize;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    let (w, x, y, z) = (
        vecs.at(0, best),
        vecs.at(1, best),
        vecs.at(2, best),
        vecs.at(3, best),
    );
    Ok([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Mean per-joint error of one frame after the best similarity transform
/// (rotation, translation, uniform scale) of the prediction onto the ground
/// truth. Falls back to the untransformed error if the least-squares
/// alignment does not improve the mean of per-joint norms, so the aligned
/// error never exceeds the raw one.
pub fn similarity_aligned_error(gt: &[[f64; 3]], pred: &[[f64; 3]]) -> Result<f64> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "procrustes",
            detail: format!("{} gt joints vs {} predicted", gt.len(), pred.len()),
        });
    }
    let raw = mean_norm(gt.iter().zip(pred).map(|(g, p)| {
        [g[0] - p[0], g[1] - p[1], g[2] - p[2]]
    }));
    let (cg, cp) = (centroid(gt), centroid(pred));
    let gc: Vec<[f64; 3]> = gt
        .iter()
        .map(|p| [p[0] - cg[0], p[1] - cg[1], p[2] - cg[2]])
        .collect();
    let pc: Vec<[f64; 3]> = pred
        .iter()
        .map(|p| [p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]])
        .collect();

    let p_energy: f64 = pc.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum();
    let aligned = if p_energy < 1e-18 {
        mean_norm(gc.iter().copied())
    } else {
        let r = best_rotation(&pc, &gc)?;
        let rotated: Vec<[f64; 3]> = pc.iter().map(|p| rotate(&r, *p)).collect();
        let dot: f64 = rotated
            .iter()
            .zip(&gc)
            .map(|(p, g)| p[0] * g[0] + p[1] * g[1] + p[2] * g[2])
            .sum();
        let s = dot / p_energy;
        mean_norm(gc.iter().zip(&rotated).map(|(g, p)| {
            [g[0] - s * p[0], g[1] - s * p[1], g[2] - s * p[2]]
        }))
    };
    Ok(aligned.min(raw))
}

/// Global, aligned, and acceleration errors between two motions over the
/// joints of the layout's position block.
pub fn joint_errors(gt: &MotionSequence, pred: &MotionSequence) -> Result<JointErrorReport> {
    if gt.layout != pred.layout {
        return Err(Error::ShapeMismatch {
            op: "joint_errors",
            detail: format!("layouts {:?} vs {:?}", gt.layout, pred.layout),
        });
    }
    if gt.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op: "joint_errors",
            detail: format!("lengths {} vs {}", gt.len(), pred.len()),
        });
    }
    if gt.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "acceleration error needs at least 3 frames, got {}",
            gt.len()
        )));
    }
    let g = joint_positions(gt);
    let p = joint_positions(pred);
    let frames = g.len();
    let joints = g[0].len();

    let mut mpjpe = 0.0f64;
    let mut pampjpe = 0.0f64;
    for t in 0..frames {
        mpjpe += mean_norm(g[t].iter().zip(&p[t]).map(|(a, b)| {
            [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
        }));
        pampjpe += similarity_aligned_error(&g[t], &p[t])?;
    }
    mpjpe /= frames as f64;
    pampjpe /= frames as f64;

    let accel = |x: &[Vec<[f64; 3]>], t: usize, j: usize| {
        let (a, b, c) = (x[t - 1][j], x[t][j], x[t + 1][j]);
        [
            c[0] - 2.0 * b[0] + a[0],
            c[1] - 2.0 * b[1] + a[1],
            c[2] - 2.0 * b[2] + a[2],
        ]
    };
    let mut accl = 0.0f64;
    for t in 1..frames - 1 {
        accl += mean_norm((0..joints).map(|j| {
            let ag = accel(&g, t, j);
            let ap = accel(&p, t, j);
            [ag[0] - ap[0], ag[1] - ap[1], ag[2] - ap[2]]
        }));
    }
    accl /= (frames - 2) as f64;

    Ok(JointErrorReport {
        mpjpe,
        pampjpe,
        accl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::PoseLayout;
    use crate::numerics::Tensor;
    use crate::rng::CounterRng;

    fn motion_with_positions(layout: PoseLayout, frames: &[Vec<[f64; 3]>]) -> MotionSequence {
        let f = layout.feature_dim();
        let mut data = Tensor::zeros(&[frames.len(), f]);
        let range = layout.joint_pos();
        for (t, pts) in frames.iter().enumerate() {
            for (j, p) in pts.iter().enumerate() {
                for (a, &coord) in p.iter().enumerate() {
                    data.data_mut()[t * f + range.start + 3 * j + a] = coord as f32;
                }
            }
        }
        MotionSequence::new(layout, 20.0, data).unwrap()
    }

    fn random_frames(rng: &mut CounterRng, frames: usize, joints: usize) -> Vec<Vec<[f64; 3]>> {
        (0..frames)
            .map(|_| {
                (0..joints)
                    .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                    .collect()
            })
            .collect()
    }

    fn rot_z_y(theta: f64, phi: f64) -> [[f64; 3]; 3] {
        let (ct, st) = (theta.cos(), theta.sin());
        let (cp, sp) = (phi.cos(), phi.sin());
        // Rz(theta) * Ry(phi)
        [
            [ct * cp, -st, ct * sp],
            [st * cp, ct, st * sp],
            [-sp, 0.0, cp],
        ]
    }

    #[test]
    fn identical_motions_have_zero_errors() {
        let layout = PoseLayout::new(5, true).unwrap();
        let mut rng = CounterRng::new(1).fork_str("same");
        let frames = random_frames(&mut rng, 6, 5);
        let a = motion_with_positions(layout, &frames);
        let b = motion_with_positions(layout, &frames);
        let rep = joint_errors(&a, &b).unwrap();
        assert!(rep.mpjpe < 1e-9);
        assert!(rep.pampjpe < 1e-9);
        assert!(rep.accl < 1e-9);
    }

    #[test]
    fn rigid_transform_vanishes_under_alignment() {
        let layout = PoseLayout::new(5, true).unwrap();
        let mut rng = CounterRng::new(2).fork_str("rigid");
        let frames = random_frames(&mut rng, 5, 5);
        let r = rot_z_y(0.7, -0.4);
        let shift = [1.5, -2.0, 0.75];
        let moved: Vec<Vec<[f64; 3]>> = frames
            .iter()
            .map(|pts| {
                pts.iter()
                    .map(|p| {
                        let q = rotate(&r, *p);
                        [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]]
                    })
                    .collect()
            })
            .collect();
        let gt = motion_with_positions(layout, &frames);
        let pred = motion_with_positions(layout, &moved);
        let rep = joint_errors(&gt, &pred).unwrap();
        assert!(rep.mpjpe > 0.5, "rigid move should show globally");
        assert!(rep.pampjpe < 1e-4, "alignment should absorb a rigid move");
    }

    #[test]
    fn scaled_prediction_aligns_exactly() {
        let layout = PoseLayout::new(4, true).unwrap();
        let mut rng = CounterRng::new(3).fork_str("scale");
        let frames = random_frames(&mut rng, 4, 4);
        let scaled: Vec<Vec<[f64; 3]>> = frames
            .iter()
            .map(|pts| {
                pts.iter()
                    .map(|p| [2.5 * p[0] + 1.0, 2.5 * p[1], 2.5 * p[2] - 3.0])
                    .collect()
            })
            .collect();
        let gt = motion_with_positions(layout, &frames);
        let pred = motion_with_positions(layout, &scaled);
        let rep = joint_errors(&gt, &pred).unwrap();
        assert!(rep.pampjpe < 1e-5);
        assert!(rep.mpjpe > 0.5);
    }

    #[test]
    fn alignment_never_exceeds_raw_error() {
        let layout = PoseLayout::new(5, true).unwrap();
        let mut rng = CounterRng::new(4).fork_str("leq");
        for _ in 0..10 {
            let a = random_frames(&mut rng, 5, 5);
            let b = random_frames(&mut rng, 5, 5);
            let rep = joint_errors(
                &motion_with_positions(layout, &a),
                &motion_with_positions(layout, &b),
            )
            .unwrap();
            assert!(rep.pampjpe <= rep.mpjpe + 1e-12);
        }
    }

    #[test]
    fn rejects_short_or_mismatched_inputs() {
        let layout = PoseLayout::new(4, true).unwrap();
        let other = PoseLayout::new(5, true).unwrap();
        let mut rng = CounterRng::new(5).fork_str("rej");
        let two = random_frames(&mut rng, 2, 4);
        let three = random_frames(&mut rng, 3, 4);
        let four = random_frames(&mut rng, 4, 4);
        let five_j = random_frames(&mut rng, 3, 5);

        let a = motion_with_positions(layout, &two);
        let b = motion_with_positions(layout, &two);
        assert!(joint_errors(&a, &b).is_err());

        let a = motion_with_positions(layout, &three);
        let b = motion_with_positions(layout, &four);
        assert!(joint_errors(&a, &b).is_err());

        let a = motion_with_positions(layout, &three);
        let b = motion_with_positions(other, &five_j);
        assert!(joint_errors(&a, &b).is_err());
    }

    // Independent alignment oracle: classic orthogonal-Procrustes solution
    // built from an SVD of the cross-covariance, where the singular pairs
    // come from power iteration with deflation rather than the production
    // eigensolver.
    fn oracle_aligned_error(gt: &[[f64; 3]], pred: &[[f64; 3]]) -> f64 {
        let n = gt.len() as f64;
        let mut cg = [0.0f64; 3];
        let mut cp = [0.0f64; 3];
        for (g, p) in gt.iter().zip(pred) {
            for a in 0..3 {
                cg[a] += g[a] / n;
                cp[a] += p[a] / n;
            }
        }
        let gc: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] - cg[0], p[1] - cg[1], p[2] - cg[2]]).collect();
        let pc: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]]).collect();

        // h = pc^T gc
        let mut h = [[0.0f64; 3]; 3];
        for (p, g) in pc.iter().zip(&gc) {
            for a in 0..3 {
                for b in 0..3 {
                    h[a][b] += p[a] * g[b];
                }
            }
        }
        // hth = h^T h, symmetric PSD
        let mut hth = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for hk in &h {
                    hth[i][j] += hk[i] * hk[j];
                }
            }
        }
        let matvec = |m: &[[f64; 3]; 3], v: [f64; 3]| {
            [
                m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
                m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
                m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
            ]
        };
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();

        // Top three eigenpairs of hth via power iteration + deflation.
        let mut work = hth;
        let mut vs: Vec<[f64; 3]> = Vec::new();
        let mut ls: Vec<f64> = Vec::new();
        let starts = [[1.0, 0.3, -0.2], [0.1, 1.0, 0.4], [-0.3, 0.2, 1.0]];
        for s in starts {
            let mut v = s;
            for _ in 0..2000 {
                let w = matvec(&work, v);
                let nw = norm(w);
                if nw < 1e-30 {
                    break;
                }
                v = [w[0] / nw, w[1] / nw, w[2] / nw];
            }
            let l = {
                let w = matvec(&work, v);
                v[0] * w[0] + v[1] * w[1] + v[2] * w[2]
            };
            for i in 0..3 {
                for j in 0..3 {
                    work[i][j] -= l * v[i] * v[j];
                }
            }
            vs.push(v);
            ls.push(l.max(0.0));
        }

        // u_i = h v_i / sigma_i
        let mut us: Vec<[f64; 3]> = Vec::new();
        for (v, l) in vs.iter().zip(&ls) {
            let sigma = l.sqrt();
            let hv = matvec(&h, *v);
            if sigma > 1e-12 {
                us.push([hv[0] / sigma, hv[1] / sigma, hv[2] / sigma]);
            } else {
                us.push([0.0, 0.0, 0.0]);
            }
        }
        // r = u * diag(1,1,det) * v^T with det chosen to keep it proper.
        let det3 = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let build_r = |flip: f64| {
            let mut r = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for (k, (u, v)) in us.iter().zip(&vs).enumerate() {
                        let d = if k == 2 { flip } else { 1.0 };
                        // r maps pc onto gc: r = sum_k d_k v_k u_k^T transposed
                        // into row-vector convention below.
                        r[i][j] += d * u[i] * v[j];
                    }
                }
            }
            r
        };
        let candidate = build_r(1.0);
        let r = if det3(&candidate) < 0.0 {
            build_r(-1.0)
        } else {
            candidate
        };

        // Transform as row vectors: aligned_p = p . r (x_a = sum_b p_b r[b][a]).
        let apply = |p: [f64; 3]| {
            [
                p[0] * r[0][0] + p[1] * r[1][0] + p[2] * r[2][0],
                p[0] * r[0][1] + p[1] * r[1][1] + p[2] * r[2][1],
                p[0] * r[0][2] + p[1] * r[1][2] + p[2] * r[2][2],
            ]
        };
        let rotated: Vec<[f64; 3]> = pc.iter().map(|p| apply(*p)).collect();
        let dot: f64 = rotated.iter().zip(&gc).map(|(p, g)| p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).sum();
        let energy: f64 = pc.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum();
        let s = dot / energy;
        let mut total = 0.0;
        for (g, p) in gc.iter().zip(&rotated) {
            let e = [g[0] - s * p[0], g[1] - s * p[1], g[2] - s * p[2]];
            total += (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        }
        total / gt.len() as f64
    }

    #[test]
    fn procrustes_matches_svd_oracle() {
        let mut rng = CounterRng::new(6).fork_str("oracle");
        for case in 0..8 {
            let frames = random_frames(&mut rng, 4, 5);
            let other = random_frames(&mut rng, 4, 5);
            for t in 0..4 {
                let ours = similarity_aligned_error(&frames[t], &other[t]).unwrap();
                let oracle = oracle_aligned_error(&frames[t], &other[t]);
                assert!(
                    (ours - oracle).abs() < 1e-5,
                    "case {case} frame {t}: {ours} vs {oracle}"
                );
            }
        }
    }
}
