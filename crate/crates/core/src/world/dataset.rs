use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Scene, WorldError};

fn io_err(path: &Path, e: std::io::Error) -> WorldError {
    WorldError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes one JSON object per line.
pub fn write_dataset<W: Write>(scenes: &[Scene], mut out: W) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(scenes: &[Scene], path: &Path) -> Result<(), WorldError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_dataset(scenes, std::io::BufWriter::new(file)).map_err(|e| io_err(path, e))
}

/// Parses JSON lines; blank lines are skipped and every scene is validated.
/// Errors carry the 1-based line number.
pub fn parse_dataset<R: BufRead>(input: R) -> Result<Vec<Scene>, WorldError> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| WorldError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        scene.validate().map_err(|e| WorldError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>, WorldError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_dataset(BufReader::new(file))
}
