//! Sessions persisted as directories:
//!
//! ```text
//! DIR/session.json            id, config, applied commands
//! DIR/versions/0000/          initial (empty) scene
//! DIR/versions/NNNN/          scene.json, decoder.json, encoder.json,
//!                             manifest.json and per-command logs
//! ```
//!
//! A command either commits a complete new version directory plus an
//! updated `session.json`, or leaves both the directory and the in-memory
//! session untouched.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use scene4d_core::distill::{FeatureDecoder, SyntheticEncoder};
use scene4d_core::editor::EditManifest;
use scene4d_core::formats::{
    decode_checkpoint, encode_checkpoint, encode_pfm, encode_png, write_guidance_csv, write_loss_csv, PfmImage,
};
use scene4d_core::guidance::GuidanceLog;
use scene4d_core::parser::{parse, parse_with_backend, ExecutionPlan, Module, PlanBackend, Provenance};
use scene4d_core::raster::RenderOutput;
use scene4d_core::scene::{GaussianScene, DEFAULT_FEATURE_DIM};

use crate::error::{EngineError, Result};
use crate::pipeline::{self, CameraSpec, EngineConfig};

pub const SESSION_FILE: &str = "session.json";
const VERSIONS_DIR: &str = "versions";

/// One applied command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Version this command produced.
    pub version: usize,
    pub command: String,
    pub plan: ExecutionPlan,
    pub provenance: Provenance,
    pub timestamp_ms: u64,
    pub scene_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionFile {
    id: String,
    config: EngineConfig,
    base_hash: String,
    history: Vec<HistoryEntry>,
}

/// Scene plus the feature decoder and encoder that interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Version {
    pub scene: GaussianScene,
    pub decoder: FeatureDecoder,
    pub encoder: SyntheticEncoder,
    pub hash: String,
}

impl Version {
    fn new(scene: GaussianScene, decoder: FeatureDecoder, encoder: SyntheticEncoder) -> Self {
        let hash = scene.content_hash();
        Self {
            scene,
            decoder,
            encoder,
            hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSummary {
    pub guided_steps: usize,
    pub final_in_box_mass: f64,
    pub baseline_final_in_box_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Outcome of a committed command; also written as the version manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResult {
    pub version: usize,
    pub module: Module,
    pub command: String,
    pub plan: ExecutionPlan,
    pub provenance: Provenance,
    pub scene_hash: String,
    pub gaussian_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditManifest>,
    /// Files written into the version directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub version: usize,
    pub scene_hash: String,
}

/// Serializable snapshot for the history endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub id: String,
    pub frame_count: usize,
    pub current_version: usize,
    pub versions: Vec<VersionInfo>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndoResult {
    pub version: usize,
    pub scene_hash: String,
}

pub struct Session {
    id: String,
    dir: PathBuf,
    config: EngineConfig,
    versions: Vec<Version>,
    history: Vec<HistoryEntry>,
}

/// Payload of a version directory, staged before the commit.
struct Staged {
    version: Version,
    result: CommandResult,
    guidance: Option<GuidanceLog>,
    loss_curve: Option<Vec<f64>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| EngineError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| EngineError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("engine records serialize")
}

fn version_dir(root: &Path, v: usize) -> PathBuf {
    root.join(VERSIONS_DIR).join(format!("{v:04}"))
}

/// Writes `session.json` through a temporary file and a rename.
fn write_session_file(dir: &Path, file: &SessionFile) -> Result<()> {
    let tmp = dir.join(".session.json.tmp");
    write(&tmp, to_json(file))?;
    let dst = dir.join(SESSION_FILE);
    fs::rename(&tmp, &dst).map_err(|e| EngineError::io(dst, e))
}

pub fn frame_file_stem(frame: usize) -> String {
    format!("frame_{frame:03}")
}

/// Writes `<stem>.pfm` and `<stem>.png` for a render; returns the file names.
pub fn write_render(dir: &Path, stem: &str, render: &RenderOutput) -> Result<Vec<String>> {
    let pfm = format!("{stem}.pfm");
    let png = format!("{stem}.png");
    write(&dir.join(&pfm), encode_pfm(&PfmImage::from_rgb(render))?)?;
    write(&dir.join(&png), encode_png(render)?)?;
    Ok(vec![pfm, png])
}

impl Session {
    /// Creates a session rooted at `dir` holding only the empty scene.
    pub fn create(dir: impl Into<PathBuf>, id: impl Into<String>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        if dir.join(SESSION_FILE).exists() {
            return Err(EngineError::BadRequest(format!(
                "{} already holds a session",
                dir.display()
            )));
        }
        fs::create_dir_all(dir.join(VERSIONS_DIR)).map_err(|e| EngineError::io(&dir, e))?;
        let scene = pipeline::empty_scene(config.frames)?;
        let encoder = pipeline::encoder_for(&scene, &config)?;
        let decoder = FeatureDecoder::mlp(DEFAULT_FEATURE_DIM, config.distill.hidden, encoder.dim, config.seed)?;
        let base = Version::new(scene, decoder, encoder);
        let session = Self {
            id: id.into(),
            dir,
            config,
            versions: vec![base],
            history: Vec::new(),
        };
        let vdir = version_dir(&session.dir, 0);
        fs::create_dir_all(&vdir).map_err(|e| EngineError::io(&vdir, e))?;
        session.write_version_files(&vdir, &session.versions[0])?;
        write_session_file(&session.dir, &session.file_record(&session.history))?;
        Ok(session)
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(SESSION_FILE);
        if !path.exists() {
            return Err(EngineError::SessionNotFound(dir.display().to_string()));
        }
        let file: SessionFile = serde_json::from_str(&read_text(&path)?)
            .map_err(|e| EngineError::Corrupt(format!("{}: {e}", path.display())))?;
        let mut versions = Vec::with_capacity(file.history.len() + 1);
        let expected = std::iter::once(&file.base_hash).chain(file.history.iter().map(|h| &h.scene_hash));
        for (v, hash) in expected.enumerate() {
            let version = load_version(&version_dir(&dir, v))?;
            if &version.hash != hash {
                return Err(EngineError::Corrupt(format!("version {v} does not match its recorded hash")));
            }
            versions.push(version);
        }
        Ok(Self {
            id: file.id,
            dir,
            config: file.config,
            versions,
            history: file.history,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn current(&self) -> &Version {
        self.versions.last().expect("version stack is never empty")
    }

    pub fn current_version(&self) -> usize {
        self.versions.len() - 1
    }

    pub fn scene_hash(&self) -> &str {
        &self.current().hash
    }

    pub fn history(&self) -> HistoryView {
        HistoryView {
            id: self.id.clone(),
            frame_count: self.current().scene.frame_count(),
            current_version: self.current_version(),
            versions: self
                .versions
                .iter()
                .enumerate()
                .map(|(version, v)| VersionInfo {
                    version,
                    scene_hash: v.hash.clone(),
                })
                .collect(),
            history: self.history.clone(),
        }
    }

    pub fn render(&self, frame: usize, camera: CameraSpec) -> Result<RenderOutput> {
        pipeline::render(&self.current().scene, &self.config, camera, frame)
    }

    /// Parses and executes `text`, committing a new version on success.
    pub fn run_command(&mut self, text: &str, backend: Option<&dyn PlanBackend>) -> Result<CommandResult> {
        let parsed = match backend {
            Some(b) => parse_with_backend(text, b)?,
            None => scene4d_core::parser::ParsedPlan {
                plan: parse(text)?,
                provenance: Provenance::Grammar,
            },
        };
        let staged = self.execute(text, parsed.plan, parsed.provenance)?;
        self.commit(staged)
    }

    fn execute(&self, text: &str, plan: ExecutionPlan, provenance: Provenance) -> Result<Staged> {
        let number = self.versions.len();
        let mut result = CommandResult {
            version: number,
            module: plan.module(),
            command: text.to_string(),
            plan: plan.clone(),
            provenance,
            scene_hash: String::new(),
            gaussian_count: 0,
            guidance: None,
            distill: None,
            edit: None,
            artifacts: Vec::new(),
        };
        let staged = match &plan {
            ExecutionPlan::Gen(q) => {
                let out = pipeline::run_gen(q, &self.config)?;
                result.guidance = out.guidance.as_ref().map(|g| GuidanceSummary {
                    guided_steps: g.guided_steps,
                    final_in_box_mass: g.final_in_box_mass,
                    baseline_final_in_box_mass: g.baseline_final_in_box_mass,
                });
                result.distill = Some(DistillSummary {
                    steps: out.loss_curve.len().saturating_sub(1),
                    initial_loss: out.loss_curve[0],
                    final_loss: *out.loss_curve.last().expect("nonempty loss curve"),
                });
                Staged {
                    version: Version::new(out.scene, out.decoder, out.encoder),
                    result,
                    guidance: out.guidance,
                    loss_curve: Some(out.loss_curve),
                }
            }
            ExecutionPlan::Edit(q) => {
                let cur = self.current();
                let (scene, manifest) = pipeline::run_edit(q, &cur.scene, &cur.decoder, &cur.encoder, &self.config)?;
                result.edit = Some(manifest);
                Staged {
                    version: Version::new(scene, cur.decoder.clone(), cur.encoder.clone()),
                    result,
                    guidance: None,
                    loss_curve: None,
                }
            }
        };
        Ok(Staged {
            result: CommandResult {
                scene_hash: staged.version.hash.clone(),
                gaussian_count: staged.version.scene.len(),
                ..staged.result
            },
            ..staged
        })
    }

    fn file_record(&self, history: &[HistoryEntry]) -> SessionFile {
        SessionFile {
            id: self.id.clone(),
            config: self.config.clone(),
            base_hash: self.versions[0].hash.clone(),
            history: history.to_vec(),
        }
    }

    fn write_version_files(&self, dir: &Path, v: &Version) -> Result<Vec<String>> {
        write(&dir.join("scene.json"), v.scene.to_json())?;
        write(&dir.join("decoder.json"), encode_checkpoint(&v.decoder))?;
        write(&dir.join("encoder.json"), to_json(&v.encoder))?;
        let mut files = vec!["scene.json".into(), "decoder.json".into(), "encoder.json".into()];
        if self.config.render_on_commit {
            for frame in 0..v.scene.frame_count() {
                let r = pipeline::render(&v.scene, &self.config, CameraSpec::Fixed, frame)?;
                files.extend(write_render(dir, &frame_file_stem(frame), &r)?);
            }
        }
        Ok(files)
    }

    fn commit(&mut self, mut staged: Staged) -> Result<CommandResult> {
        let number = staged.result.version;
        let versions = self.dir.join(VERSIONS_DIR);
        let tmp = versions.join(format!(".pending-{number:04}"));
        let dst = version_dir(&self.dir, number);
        let mut stage = || -> Result<()> {
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(|e| EngineError::io(&tmp, e))?;
            }
            fs::create_dir_all(&tmp).map_err(|e| EngineError::io(&tmp, e))?;
            let mut files = self.write_version_files(&tmp, &staged.version)?;
            if let Some(log) = &staged.guidance {
                let mut buf = Vec::new();
                write_guidance_csv(&mut buf, &log.entries)?;
                write(&tmp.join("guidance.csv"), buf)?;
                files.push("guidance.csv".into());
            }
            if let Some(curve) = &staged.loss_curve {
                let mut buf = Vec::new();
                write_loss_csv(&mut buf, curve)?;
                write(&tmp.join("loss.csv"), buf)?;
                files.push("loss.csv".into());
            }
            if let Some(m) = &staged.result.edit {
                write(&tmp.join("edit_manifest.json"), to_json(m))?;
                files.push("edit_manifest.json".into());
            }
            files.push("manifest.json".into());
            staged.result.artifacts = files;
            write(&tmp.join("manifest.json"), to_json(&staged.result))?;
            // A directory left over from an undone version is stale.
            if dst.exists() {
                fs::remove_dir_all(&dst).map_err(|e| EngineError::io(&dst, e))?;
            }
            fs::rename(&tmp, &dst).map_err(|e| EngineError::io(&dst, e))
        };
        if let Err(e) = stage() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let entry = HistoryEntry {
            version: number,
            command: staged.result.command.clone(),
            plan: staged.result.plan.clone(),
            provenance: staged.result.provenance.clone(),
            timestamp_ms: now_ms(),
            scene_hash: staged.version.hash.clone(),
        };
        let mut history = self.history.clone();
        history.push(entry);
        if let Err(e) = write_session_file(&self.dir, &self.file_record(&history)) {
            let _ = fs::remove_dir_all(&dst);
            return Err(e);
        }
        self.history = history;
        self.versions.push(staged.version);
        Ok(staged.result)
    }

    /// Drops the newest version.
    pub fn undo(&mut self) -> Result<UndoResult> {
        if self.versions.len() < 2 {
            return Err(EngineError::NothingToUndo);
        }
        let popped = self.versions.len() - 1;
        let history = &self.history[..self.history.len() - 1];
        write_session_file(&self.dir, &self.file_record(history))?;
        self.history.pop();
        self.versions.pop();
        let stale = version_dir(&self.dir, popped);
        if let Err(e) = fs::remove_dir_all(&stale) {
            log::warn!("could not remove {}: {e}", stale.display());
        }
        Ok(UndoResult {
            version: self.current_version(),
            scene_hash: self.scene_hash().to_string(),
        })
    }
}

fn load_version(dir: &Path) -> Result<Version> {
    let scene = GaussianScene::from_json(&read_text(&dir.join("scene.json"))?)?;
    let decoder = decode_checkpoint(&read_text(&dir.join("decoder.json"))?)?;
    let enc_path = dir.join("encoder.json");
    let encoder: SyntheticEncoder = serde_json::from_str(&read_text(&enc_path)?)
        .map_err(|e| EngineError::Corrupt(format!("{}: {e}", enc_path.display())))?;
    Ok(Version::new(scene, decoder, encoder))
}
