//! JSON-lines dataset files: one scene per line, each tagged `"v": 1`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenegen::scene::Scene;

pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize)]
struct Line<'a> {
    v: u32,
    #[serde(flatten)]
    scene: &'a Scene,
}

pub fn scene_to_line(scene: &Scene) -> Result<String> {
    Ok(serde_json::to_string(&Line {
        v: DATASET_VERSION,
        scene,
    })?)
}

pub fn write_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for scene in scenes {
        out.write_all(scene_to_line(scene)?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses one line. The error string is reported with its line number by
/// [`read_dataset`].
pub fn scene_from_line(line: &str) -> std::result::Result<Scene, String> {
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| "expected a JSON object".to_string())?;
    match obj.remove("v").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => return Err(format!("unsupported schema version {v}")),
        None => return Err("missing schema version field \"v\"".into()),
    }
    let scene: Scene = serde_json::from_value(value).map_err(|e| e.to_string())?;
    scene.validate(None)?;
    Ok(scene)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = scene_from_line(&line).map_err(|reason| Error::Dataset {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
