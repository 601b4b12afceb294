use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::hex;
use crate::degrade::{DegradationSpec, SamplePair};
use crate::error::{Error, Result};
use crate::io::{read_camera, read_json, read_ply, read_ppm, write_json, write_ply, write_ppm};

pub const TARGET_FILE: &str = "target.ply";
pub const INPUT_FILE: &str = "input.ply";
pub const IMAGE_FILE: &str = "image.ppm";
pub const CAMERA_FILE: &str = "camera.json";
pub const SPEC_FILE: &str = "spec.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn write_scene(dir: &Path, pair: &SamplePair, spec: &DegradationSpec) -> Result<()> {
    write_ply(&dir.join(TARGET_FILE), &pair.target)?;
    write_ply(&dir.join(INPUT_FILE), &pair.input)?;
    write_ppm(&dir.join(IMAGE_FILE), &pair.image)?;
    write_json(&dir.join(CAMERA_FILE), &pair.camera)?;
    write_json(&dir.join(SPEC_FILE), spec)
}

pub fn read_scene(dir: &Path) -> Result<SamplePair> {
    Ok(SamplePair {
        input: read_ply(&dir.join(INPUT_FILE))?,
        image: read_ppm(&dir.join(IMAGE_FILE))?,
        camera: read_camera(&dir.join(CAMERA_FILE))?,
        target: read_ply(&dir.join(TARGET_FILE))?,
    })
}

pub fn read_spec(dir: &Path) -> Result<DegradationSpec> {
    read_json(&dir.join(SPEC_FILE))
}

/// `scene_*` subdirectories in name order; a directory that is itself a
/// scene yields just itself.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(INPUT_FILE).is_file() || root.join(TARGET_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut scenes = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        if entry.path().is_dir() && name.to_string_lossy().starts_with("scene_") {
            scenes.push(entry.path());
        }
    }
    scenes.sort();
    if scenes.is_empty() {
        return Err(Error::format(root, "no scene_* directories"));
    }
    Ok(scenes)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file (relative path and bytes) except manifests.
pub fn dir_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(root.join(&rel)).map_err(|e| Error::io(root.join(&rel), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
