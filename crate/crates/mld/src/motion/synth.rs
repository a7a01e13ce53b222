use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use super::io::{save_motion, write_manifest, CorpusEntry};
use super::layout::PoseLayout;
use super::types::MotionSequence;
use crate::numerics::Tensor;
use crate::rng::CounterRng;
use crate::{Error, Result};

/// Parameters of the synthetic labeled/texted motion corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_sequences: usize,
    pub n_actions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fps: f32,
    pub n_joints: usize,
    pub include_root: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_sequences: 200,
            n_actions: 4,
            min_len: 16,
            max_len: 48,
            fps: 20.0,
            n_joints: 5,
            include_root: true,
            seed: 0,
        }
    }
}

const MODIFIERS: [&str; 5] = ["slowly", "quickly", "smoothly", "vigorously", "steadily"];

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_actions < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 actions, got {}",
                self.n_actions
            )));
        }
        if self.n_sequences < self.n_actions {
            return Err(Error::InvalidArgument(format!(
                "need at least one sequence per action ({} < {})",
                self.n_sequences, self.n_actions
            )));
        }
        if self.min_len > self.max_len || self.min_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "empty or degenerate length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<PoseLayout> {
        PoseLayout::new(self.n_joints, self.include_root)
    }
}

/// Recompute the foot-contact bits from the stored joint-velocity block: the
/// q-th bit marks frame speeds of foot joint `N_j-1-(q mod N_j)` below 0.55
/// of that joint's mean speed. The generator uses this same rule, so stored
/// bits always agree with a recomputation from file contents.
pub fn contact_bits(data: &Tensor, layout: &PoseLayout) -> Tensor {
    let frames = data.rows();
    let vel = layout.joint_vel();
    let nj = layout.n_joints;
    let mut bits = Tensor::zeros(&[frames, 4]);
    for q in 0..4 {
        let foot = nj - 1 - (q % nj);
        let base = vel.start + 3 * foot;
        let mut speeds = Vec::with_capacity(frames);
        let mut sum = 0f64;
        for t in 0..frames {
            let row = data.row(t);
            let (vx, vy, vz) = (
                row[base] as f64,
                row[base + 1] as f64,
                row[base + 2] as f64,
            );
            let s = (vx * vx + vy * vy + vz * vz).sqrt();
            speeds.push(s);
            sum += s;
        }
        let threshold = 0.55 * sum / frames as f64;
        for (t, &s) in speeds.iter().enumerate() {
            if s < threshold {
                bits.data_mut()[t * 4 + q] = 1.0;
            }
        }
    }
    bits
}

/// Per-action oscillation family: frequency, axis emphasis, and a second
/// harmonic that switches on for the upper half of the action range.
struct ActionFamily {
    omega: f64,
    axis: [f64; 3],
    harmonic: f64,
}

impl ActionFamily {
    fn new(action: usize, tempo: f64) -> ActionFamily {
        let axis = match action % 3 {
            0 => [1.0, 0.3, 0.2],
            1 => [0.25, 1.0, 0.3],
            _ => [0.2, 0.35, 1.0],
        };
        ActionFamily {
            omega: TAU * (0.4 + 0.3 * action as f64) * tempo,
            axis,
            harmonic: if action >= 3 { 0.35 } else { 0.0 },
        }
    }
}

fn generate_one(spec: &SynthSpec, index: usize) -> Result<(CorpusEntry, MotionSequence)> {
    let layout = spec.layout()?;
    let mut rng = CounterRng::new(spec.seed).fork(index as u64);
    let action = index % spec.n_actions;
    let frames = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let modifier = MODIFIERS[rng.below(MODIFIERS.len())];
    let tempo = 0.75 + 0.5 * rng.uniform();
    let amp_scale = 0.8 + 0.4 * rng.uniform();
    let heading = TAU * rng.uniform();
    let walk_speed = 0.02 * (1.0 + action as f64) * (0.8 + 0.4 * rng.uniform());
    let family = ActionFamily::new(action, tempo);

    let nj = spec.n_joints;
    let fps = spec.fps as f64;
    let phases: Vec<f64> = (0..nj).map(|_| TAU * rng.uniform()).collect();
    let amps: Vec<f64> = (0..nj)
        .map(|j| amp_scale * (0.25 + 0.1 * ((j * 7 + action * 3) % 5) as f64))
        .collect();

    // World-space joint positions, frame major, f64 until the final store.
    let pos = |j: usize, t: usize| -> [f64; 3] {
        let time = t as f64 / fps;
        if j == 0 {
            let wobble = 0.02 * (family.omega * time + phases[0]).sin();
            [
                walk_speed * time * heading.cos() + wobble,
                0.9 + 0.05 * (family.omega * time + phases[0]).sin(),
                walk_speed * time * heading.sin() - wobble,
            ]
        } else {
            let base = [
                0.15 * j as f64 * if j.is_multiple_of(2) { 1.0 } else { -1.0 },
                0.85 - 0.12 * j as f64,
                0.1 * j as f64,
            ];
            let a = amps[j];
            let ph = phases[j];
            let arg = family.omega * time + ph;
            let h = family.harmonic * (2.0 * family.omega * time + 1.7 * ph).sin();
            [
                base[0] + a * family.axis[0] * (arg.sin() + h),
                base[1] + a * family.axis[1] * ((arg + 1.3).sin() + h),
                base[2] + a * family.axis[2] * ((arg + 0.7 * ph).cos() - h),
            ]
        }
    };
    let yaw = |t: usize| 0.15 * (0.5 * family.omega * t as f64 / fps + phases[0]).sin();

    let f = layout.feature_dim();
    let mut data = Tensor::zeros(&[frames, f]);
    let first_pose_joint = if spec.include_root { 0 } else { 1 };
    for t in 0..frames {
        // Finite differences use the previous frame; frame 0 copies frame 1's
        // forward difference so every row is populated.
        let (ta, tb) = if t == 0 { (1, 0) } else { (t, t - 1) };
        let row_base = t * f;
        let row = &mut data.data_mut()[row_base..row_base + f];

        row[layout.root_ang_vel().start] = ((yaw(ta) - yaw(tb)) * fps) as f32;
        let r_now = pos(0, ta);
        let r_prev = pos(0, tb);
        row[layout.root_lin_vel().start] = ((r_now[0] - r_prev[0]) * fps) as f32;
        row[layout.root_lin_vel().start + 1] = ((r_now[2] - r_prev[2]) * fps) as f32;
        row[layout.root_height().start] = pos(0, t)[1] as f32;

        let jp = layout.joint_pos().start;
        for (slot, j) in (first_pose_joint..nj).enumerate() {
            let p = pos(j, t);
            row[jp + 3 * slot] = p[0] as f32;
            row[jp + 3 * slot + 1] = p[1] as f32;
            row[jp + 3 * slot + 2] = p[2] as f32;
        }
        let jv = layout.joint_vel().start;
        for j in 0..nj {
            let pa = pos(j, ta);
            let pb = pos(j, tb);
            row[jv + 3 * j] = ((pa[0] - pb[0]) * fps) as f32;
            row[jv + 3 * j + 1] = ((pa[1] - pb[1]) * fps) as f32;
            row[jv + 3 * j + 2] = ((pa[2] - pb[2]) * fps) as f32;
        }
        let jr = layout.joint_rot().start;
        for (slot, j) in (first_pose_joint..nj).enumerate() {
            let theta = 0.3 * (family.omega * t as f64 / fps + 1.7 * phases[j]).sin();
            let (s, c) = theta.sin_cos();
            let six = [c, s, 0.0, -s, c, 0.0];
            for (k, v) in six.iter().enumerate() {
                row[jr + 6 * slot + k] = *v as f32;
            }
        }
    }

    // Contacts derive from the stored (already rounded) velocity features so
    // the thresholding rule is reproducible from file bytes alone.
    let bits = contact_bits(&data, &layout);
    let cf = layout.contacts().start;
    for t in 0..frames {
        for q in 0..4 {
            data.data_mut()[t * f + cf + q] = bits.at(t, q);
        }
    }

    let seq = MotionSequence::new(layout, spec.fps, data)?;
    let entry = CorpusEntry {
        path: format!("motions/seq_{index:05}.mot"),
        text: Some(format!("a person performs action {action} {modifier}")),
        action_id: Some(action),
        length: frames,
        fps: spec.fps,
    };
    Ok((entry, seq))
}

/// Generate the corpus in memory; deterministic per spec (seed included).
pub fn generate(spec: &SynthSpec) -> Result<(Vec<CorpusEntry>, Vec<MotionSequence>)> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.n_sequences);
    let mut motions = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let (e, m) = generate_one(spec, i)?;
        entries.push(e);
        motions.push(m);
    }
    Ok((entries, motions))
}

/// Generate and write the corpus: motion files under `<out>/motions/` and a
/// `manifest.jsonl` beside them.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<CorpusEntry>> {
    let (entries, motions) = generate(spec)?;
    let motion_dir = out_dir.join("motions");
    fs::create_dir_all(&motion_dir)
        .map_err(|e| Error::io(motion_dir.display().to_string(), e))?;
    for (entry, motion) in entries.iter().zip(&motions) {
        save_motion(&out_dir.join(&entry.path), motion)?;
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::io::Corpus;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_sequences: 12,
            n_actions: 3,
            min_len: 8,
            max_len: 20,
            seed: 42,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let spec = small_spec();
        let (e1, m1) = generate(&spec).unwrap();
        let (e2, m2) = generate(&spec).unwrap();
        assert_eq!(e1, e2);
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.data.data(), b.data.data());
        }
        // A different seed changes the data (possibly the shape too).
        let other = SynthSpec { seed: 43, ..spec };
        let (_, m3) = generate(&other).unwrap();
        let changed = m1[0].data.dims() != m3[0].data.dims()
            || m1[0].data.max_abs_diff(&m3[0].data) > 0.0;
        assert!(changed);
    }

    #[test]
    fn actions_are_balanced() {
        let spec = SynthSpec {
            n_sequences: 100,
            n_actions: 2,
            ..small_spec()
        };
        let (entries, _) = generate(&spec).unwrap();
        let count0 = entries
            .iter()
            .filter(|e| e.action_id == Some(0))
            .count();
        assert_eq!(count0, 50);
    }

    #[test]
    fn velocities_are_position_differences() {
        let (_, motions) = generate(&small_spec()).unwrap();
        for m in &motions {
            let layout = m.layout;
            let jp = layout.joint_pos();
            let jv = layout.joint_vel();
            // Pose-block joints also appear in the velocity block; when the
            // root is included the two blocks cover the same joints.
            assert!(layout.include_root);
            for t in 1..m.len() {
                for k in 0..jp.len() {
                    let dp = (m.data.at(t, jp.start + k) - m.data.at(t - 1, jp.start + k))
                        * m.fps;
                    let v = m.data.at(t, jv.start + k);
                    assert!(
                        (dp - v).abs() < 1e-5,
                        "frame {t} coord {k}: diff {dp} vs stored {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn contacts_match_velocity_threshold_rule() {
        let (_, motions) = generate(&small_spec()).unwrap();
        let mut ones = 0usize;
        let mut zeros = 0usize;
        for m in &motions {
            let bits = contact_bits(&m.data, &m.layout);
            let cf = m.layout.contacts().start;
            for t in 0..m.len() {
                for q in 0..4 {
                    let stored = m.data.at(t, cf + q);
                    assert_eq!(stored, bits.at(t, q));
                    if stored == 1.0 {
                        ones += 1;
                    } else {
                        zeros += 1;
                    }
                }
            }
        }
        // Both contact states occur somewhere in the corpus.
        assert!(ones > 0 && zeros > 0, "degenerate contacts: {ones} vs {zeros}");
    }

    #[test]
    fn every_entry_has_text_and_action() {
        let (entries, motions) = generate(&small_spec()).unwrap();
        for (e, m) in entries.iter().zip(&motions) {
            assert!(e.text.as_deref().unwrap().starts_with("a person performs action"));
            assert!(e.action_id.is_some());
            assert_eq!(e.length, m.len());
            assert!(e.length >= 8 && e.length <= 20);
        }
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let entries = synth_corpus(&spec, dir.path()).unwrap();
        let corpus = Corpus::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(corpus.entries, entries);
        assert_eq!(corpus.motions.len(), entries.len());
        let (_, fresh) = generate(&spec).unwrap();
        for (a, b) in corpus.motions.iter().zip(&fresh) {
            assert_eq!(a.data.data(), b.data.data());
            assert_eq!(a.layout, b.layout);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec { n_actions: 1, ..small_spec() };
        assert!(generate(&bad).is_err());
        let bad = SynthSpec { min_len: 30, max_len: 20, ..small_spec() };
        assert!(generate(&bad).is_err());
        let bad = SynthSpec { n_sequences: 2, n_actions: 3, ..small_spec() };
        assert!(generate(&bad).is_err());
    }
}
