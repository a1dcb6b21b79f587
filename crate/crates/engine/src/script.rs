//! Batch execution of newline-delimited command files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scene4d_core::formats::{encode_pfm, sha256_hex, PfmImage};
use scene4d_core::parser::PlanBackend;

use crate::error::{EngineError, Result};
use crate::pipeline::{CameraSpec, EngineConfig};
use crate::session::{frame_file_stem, write_render, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub line: usize,
    pub command: String,
    pub version: usize,
    pub scene_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptReport {
    pub session_dir: PathBuf,
    pub steps: Vec<ScriptStep>,
    pub final_scene_hash: String,
    /// Fixed-camera PFM renders of every frame of the final scene.
    pub renders: Vec<RenderDigest>,
}

/// Non-blank lines that are not `#` comments, with 1-based line numbers.
pub fn script_commands(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.to_string()))
        .collect()
}

/// Runs every command of `text` in a fresh session at `out`, stopping at
/// the first failure, then renders the final scene into `out/final`.
pub fn run_script(
    text: &str,
    out: &Path,
    config: EngineConfig,
    backend: Option<&dyn PlanBackend>,
) -> Result<ScriptReport> {
    let id = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "script".into());
    let mut session = Session::create(out, id, config)?;
    let mut steps = Vec::new();
    for (line, command) in script_commands(text) {
        let r = session.run_command(&command, backend).inspect_err(|_| {
            log::error!("line {line}: {command:?} failed");
        })?;
        log::info!("line {line}: {command:?} -> version {} ({})", r.version, r.scene_hash);
        steps.push(ScriptStep {
            line,
            command,
            version: r.version,
            scene_hash: r.scene_hash,
        });
    }
    let final_dir = out.join("final");
    fs::create_dir_all(&final_dir).map_err(|e| EngineError::io(&final_dir, e))?;
    let mut renders = Vec::new();
    for frame in 0..session.current().scene.frame_count() {
        let r = session.render(frame, CameraSpec::Fixed)?;
        let stem = frame_file_stem(frame);
        write_render(&final_dir, &stem, &r)?;
        renders.push(RenderDigest {
            file: format!("final/{stem}.pfm"),
            sha256: sha256_hex(&encode_pfm(&PfmImage::from_rgb(&r))?),
        });
    }
    Ok(ScriptReport {
        session_dir: out.to_path_buf(),
        steps,
        final_scene_hash: session.scene_hash().to_string(),
        renders,
    })
}
