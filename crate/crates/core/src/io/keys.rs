//! Key-pose files: a JSON list of `{frame, pose_file}` or `{frame, from_gt}`
//! entries. Paths are relative to the JSON file.
//!
//! `pose_file` is a tensor file holding 144 pose values, or a full 147-value
//! frame whose translation is dropped. `from_gt` names a motion file whose
//! pose at `frame` becomes the key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::read_motion;
use super::tensor_file::read_tensor;
use crate::error::{Error, Result};
use crate::motion::{KeyPose, KeyPoseSet, MotionSequence, PoseVector, FRAME_DIM, POSE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyEntry {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_gt: Option<String>,
}

fn pose_from_file(path: &Path) -> Result<PoseVector> {
    let t = read_tensor(path)?;
    match t.len() {
        POSE_DIM => PoseVector::new(t.data().to_vec()),
        FRAME_DIM => PoseVector::new(t.data()[..POSE_DIM].to_vec()),
        n => Err(Error::dim(format!(
            "{}: pose file holds {n} values, expected {POSE_DIM} or {FRAME_DIM}",
            path.display()
        ))),
    }
}

/// Parses a key file and loads every referenced pose.
pub fn read_key_file(path: impl AsRef<Path>) -> Result<KeyPoseSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut entries: Vec<KeyEntry> = serde_json::from_str(&text)?;
    entries.sort_by_key(|e| e.frame);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut motions: BTreeMap<PathBuf, MotionSequence> = BTreeMap::new();
    let mut keys = Vec::with_capacity(entries.len());
    for e in entries {
        let pose = match (&e.pose_file, &e.from_gt) {
            (Some(p), None) => pose_from_file(&base.join(p))?,
            (None, Some(g)) => {
                let p = base.join(g);
                if !motions.contains_key(&p) {
                    let m = read_motion(&p)?;
                    motions.insert(p.clone(), m);
                }
                let m = &motions[&p];
                if e.frame >= m.len() {
                    return Err(Error::invalid(format!(
                        "key frame {} outside {} ({} frames)",
                        e.frame,
                        g,
                        m.len()
                    )));
                }
                PoseVector::new(m.pose(e.frame).to_vec())?
            }
            _ => {
                return Err(Error::invalid(format!(
                    "key at frame {} needs exactly one of pose_file and from_gt",
                    e.frame
                )))
            }
        };
        keys.push(KeyPose {
            frame: e.frame,
            pose,
        });
    }
    KeyPoseSet::new(keys)
}

/// Writes a key file whose entries all point into one ground-truth motion.
pub fn write_gt_key_file(path: impl AsRef<Path>, frames: &[usize], gt_file: &str) -> Result<()> {
    let entries: Vec<KeyEntry> = frames
        .iter()
        .map(|&frame| KeyEntry {
            frame,
            pose_file: None,
            from_gt: Some(gt_file.to_string()),
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&entries)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_motion, write_tensor};
    use crate::numeric::Tensor;

    fn motion() -> MotionSequence {
        let data = (0..10 * FRAME_DIM)
            .map(|i| (i as f64 * 0.01).sin())
            .collect();
        MotionSequence::new(Tensor::new(&[10, FRAME_DIM], data).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn both_entry_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let m = motion();
        write_motion(dir.path().join("gt.mdrt"), &m, "gt").unwrap();
        let pose: Vec<f64> = (0..POSE_DIM).map(|i| i as f64 * 0.5).collect();
        write_tensor(
            dir.path().join("p.mdrt"),
            &Tensor::new(&[POSE_DIM], pose.clone()).unwrap(),
        )
        .unwrap();
        fs::write(
            dir.path().join("keys.json"),
            r#"[{"frame": 7, "pose_file": "p.mdrt"}, {"frame": 3, "from_gt": "gt.mdrt"}]"#,
        )
        .unwrap();
        let keys = read_key_file(dir.path().join("keys.json")).unwrap();
        assert_eq!(keys.frames(), vec![3, 7]);
        let k: Vec<&KeyPose> = keys.iter().collect();
        assert!(k[0]
            .pose
            .values()
            .iter()
            .zip(m.pose(3))
            .all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(k[1].pose.values(), &pose[..]);

        write_gt_key_file(dir.path().join("k2.json"), &[2, 5], "gt.mdrt").unwrap();
        assert_eq!(
            read_key_file(dir.path().join("k2.json")).unwrap().frames(),
            vec![2, 5]
        );
    }

    #[test]
    fn rejects_ambiguous_or_duplicate_entries() {
        let dir = tempfile::tempdir().unwrap();
        write_motion(dir.path().join("gt.mdrt"), &motion(), "gt").unwrap();
        let p = dir.path().join("k.json");
        fs::write(&p, r#"[{"frame": 1}]"#).unwrap();
        assert!(matches!(read_key_file(&p), Err(Error::Validation(_))));
        fs::write(
            &p,
            r#"[{"frame": 1, "from_gt": "gt.mdrt"}, {"frame": 1, "from_gt": "gt.mdrt"}]"#,
        )
        .unwrap();
        assert!(read_key_file(&p).is_err());
        fs::write(&p, r#"[{"frame": 40, "from_gt": "gt.mdrt"}]"#).unwrap();
        assert!(read_key_file(&p).is_err());
        fs::write(&p, r#"[{"frame": 1, "pose": 3}]"#).unwrap();
        assert!(matches!(read_key_file(&p), Err(Error::Json(_))));
    }
}
