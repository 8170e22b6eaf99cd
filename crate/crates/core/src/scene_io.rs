//! JSON Lines scene files: one scene object per line with keys `id`,
//! `points` (N×6: x, y, z, intensity, elongation, timestamp), `boxes`
//! (`center`, `dims`, `yaw`, `class`, `score`) and `keypoints` (per box,
//! `null` or `{positions: 14×3, states: [..], visibility?: [..]}`).
//!
//! Prediction files use the same layout; predicted keypoint sets carry the
//! optional `visibility` probabilities.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::Scene;

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    SceneReader::open(path)?.collect()
}

/// Streaming reader yielding one scene per non-empty line.
pub struct SceneReader {
    lines: std::io::Lines<BufReader<File>>,
    path: std::path::PathBuf,
    record: usize,
}

impl SceneReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(SceneReader {
            lines: BufReader::new(file).lines(),
            path,
            record: 0,
        })
    }
}

impl Iterator for SceneReader {
    type Item = Result<Scene>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let record = self.record;
            self.record += 1;
            return Some(parse_record(&line, record));
        }
    }
}

fn field<T: DeserializeOwned>(obj: &mut Map<String, Value>, name: &str, record: usize) -> Result<T> {
    let v = obj.remove(name).ok_or_else(|| Error::Record {
        record,
        field: name.into(),
        message: "missing".into(),
    })?;
    serde_json::from_value(v).map_err(|e| Error::Record {
        record,
        field: name.into(),
        message: e.to_string(),
    })
}

/// Parses one line; errors name the record index and the offending field.
pub fn parse_record(line: &str, record: usize) -> Result<Scene> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Record {
        record,
        field: "<record>".into(),
        message: format!("incomplete or malformed JSON: {e}"),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(Error::Record {
            record,
            field: "<record>".into(),
            message: "expected a JSON object".into(),
        });
    };
    let scene = Scene {
        id: field(&mut obj, "id", record)?,
        points: field(&mut obj, "points", record)?,
        boxes: field(&mut obj, "boxes", record)?,
        keypoints: field(&mut obj, "keypoints", record)?,
    };
    if scene.keypoints.len() != scene.boxes.len() {
        return Err(Error::Record {
            record,
            field: "keypoints".into(),
            message: format!("{} entries for {} boxes", scene.keypoints.len(), scene.boxes.len()),
        });
    }
    for (i, b) in scene.boxes.iter().enumerate() {
        b.validate().map_err(|e| Error::Record {
            record,
            field: format!("boxes[{i}]"),
            message: e.to_string(),
        })?;
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scenes, GenConfig, SkeletonTemplate};

    #[test]
    fn round_trip_is_lossless() {
        let scenes = generate_scenes(&GenConfig::default(), &SkeletonTemplate::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_scenes(&p, &scenes).unwrap();
        assert_eq!(read_scenes(&p).unwrap(), scenes);
        // Byte-level determinism.
        let first = std::fs::read(&p).unwrap();
        write_scenes(&p, &scenes).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn empty_list_gives_valid_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        write_scenes(&p, &[]).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
        assert!(read_scenes(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_fails_at_first_incomplete_record() {
        let scenes = generate_scenes(&GenConfig::default(), &SkeletonTemplate::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_scenes(&p, &scenes).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let second_end = bytes
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == b'\n')
            .nth(1)
            .unwrap()
            .0;
        std::fs::write(&p, &bytes[..second_end - 40]).unwrap();
        match read_scenes(&p) {
            Err(Error::Record { record, .. }) => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_field_is_named() {
        let line = r#"{"id":"x","points":[[0,0,0,0,0]],"boxes":[],"keypoints":[]}"#;
        match parse_record(line, 4) {
            Err(Error::Record { record, field, .. }) => {
                assert_eq!(record, 4);
                assert_eq!(field, "points");
            }
            other => panic!("unexpected {other:?}"),
        }
        let line = r#"{"id":"x","points":[],"boxes":[{"center":[0,0,0],"dims":[1,0,1],"yaw":0,"class":"pedestrian","score":1}],"keypoints":[null]}"#;
        assert!(matches!(parse_record(line, 0), Err(Error::Record { field, .. }) if field == "boxes[0]"));
    }
}
