//! Command execution: GEN builds, guides and distills a scene; EDIT selects
//! and edits Gaussians of the current one.

use std::f64::consts::{FRAC_PI_4, PI};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use scene4d_core::distill::{train_distillation, DistillConfig, FeatureDecoder, SyntheticEncoder, View};
use scene4d_core::editor::{
    apply_edit, default_distractors, named_color, threshold_search, ColorSpec, EditManifest, EditParams,
    QuerySet, ThresholdConfig, BACKGROUND_PROMPT,
};
use scene4d_core::guidance::{plan_setup, GuidanceLog};
use scene4d_core::parser::{tokenize, Direction, EditQuery, GenQuery, Lexicons};
use scene4d_core::raster::{rasterize, RenderOutput};
use scene4d_core::scene::{
    build_demo_scene, Camera, GaussianScene, Intrinsics, MotionScaffold, ObjectKind, ObjectSpec, SceneSpec, Vec3,
    DEFAULT_FEATURE_DIM,
};
use scene4d_core::trajectory::speed_multiplier;

use crate::error::{EngineError, Result};

/// Point every engine camera looks at.
pub const LOOK_TARGET: Vec3 = [0.0, 0.5, 0.0];
pub const CAMERA_RADIUS: f64 = 4.5;
/// World units per frame at normal speed.
pub const BASE_SPEED: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub gaussians_per_object: usize,
    pub encoder_dim: usize,
    pub distill: DistillConfig,
    pub threshold: ThresholdConfig,
    /// Run the guided latent sampler on GEN (its log lands in the manifest).
    pub run_guidance: bool,
    /// Write PFM and PNG renders of every frame on each commit.
    pub render_on_commit: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 8,
            seed: 0,
            gaussians_per_object: 100,
            encoder_dim: 8,
            distill: DistillConfig {
                steps: 400,
                ..DistillConfig::default()
            },
            threshold: ThresholdConfig::default(),
            run_guidance: true,
            render_on_commit: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(EngineError::BadRequest("render size must be positive".into()));
        }
        if self.frames < 2 {
            return Err(EngineError::BadRequest(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.gaussians_per_object == 0 || self.encoder_dim == 0 {
            return Err(EngineError::BadRequest("gaussian count and encoder dim must be positive".into()));
        }
        Ok(())
    }
}

/// Viewpoint requested for a render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CameraSpec {
    /// The first training camera.
    Fixed,
    /// One full turn around the scene over the clip.
    Orbit,
    Custom { azimuth: f64, elevation: f64, radius: f64 },
}

impl FromStr for CameraSpec {
    type Err = EngineError;

    /// `fixed`, `orbit`, or `azimuth,elevation,radius` (radians, world units).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed" => Ok(CameraSpec::Fixed),
            "orbit" => Ok(CameraSpec::Orbit),
            other => {
                let parts: Vec<f64> = other
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad_camera(s))?;
                match parts[..] {
                    [azimuth, elevation, radius]
                        if parts.iter().all(|v| v.is_finite()) && radius > 0.0 =>
                    {
                        Ok(CameraSpec::Custom {
                            azimuth,
                            elevation,
                            radius,
                        })
                    }
                    _ => Err(bad_camera(s)),
                }
            }
        }
    }
}

fn bad_camera(s: &str) -> EngineError {
    EngineError::BadRequest(format!(
        "camera {s:?} is not `fixed`, `orbit` or `azimuth,elevation,radius` with radius > 0"
    ))
}

fn elevation() -> f64 {
    (1.0f64 / 2.0f64.sqrt()).atan()
}

fn intrinsics(cfg: &EngineConfig) -> Intrinsics {
    Intrinsics::centered(1.25 * cfg.width.max(cfg.height) as f64, cfg.width, cfg.height)
}

/// Training cameras: two antipodal views along the body diagonal.
pub fn training_cameras(cfg: &EngineConfig) -> Result<Vec<Camera>> {
    [(FRAC_PI_4, elevation()), (FRAC_PI_4 + PI, -elevation())]
        .iter()
        .map(|&(az, el)| Ok(Camera::orbit(intrinsics(cfg), LOOK_TARGET, CAMERA_RADIUS, az, el)?))
        .collect()
}

pub fn camera_for(cfg: &EngineConfig, spec: CameraSpec, frame: usize, frames: usize) -> Result<Camera> {
    let (az, el, r) = match spec {
        CameraSpec::Fixed => (FRAC_PI_4, elevation(), CAMERA_RADIUS),
        CameraSpec::Orbit => (
            FRAC_PI_4 + 2.0 * PI * frame as f64 / frames.max(1) as f64,
            elevation(),
            CAMERA_RADIUS,
        ),
        CameraSpec::Custom {
            azimuth,
            elevation,
            radius,
        } => (azimuth, elevation, radius),
    };
    Ok(Camera::orbit(intrinsics(cfg), LOOK_TARGET, r, az, el)?)
}

pub fn render(scene: &GaussianScene, cfg: &EngineConfig, spec: CameraSpec, frame: usize) -> Result<RenderOutput> {
    let frames = scene.frame_count();
    if frame >= frames {
        return Err(EngineError::BadRequest(format!(
            "frame {frame} is out of range for a {frames}-frame scene"
        )));
    }
    let cam = camera_for(cfg, spec, frame, frames)?;
    Ok(rasterize(scene, frame, &cam)?)
}

/// Scene with no Gaussians: the state of a fresh session.
pub fn empty_scene(frames: usize) -> Result<GaussianScene> {
    Ok(GaussianScene::new(
        Vec::new(),
        MotionScaffold::identity(0, frames),
        [0.0; 3],
        DEFAULT_FEATURE_DIM,
    )?)
}

/// Catalog kind named anywhere in `phrase`, with its canonical tag.
pub fn catalog_object(phrase: &str) -> Option<(ObjectKind, &'static str)> {
    let tokens = tokenize(phrase);
    let (_, _, canonical) = Lexicons::builtin().objects.find(&tokens)?;
    let kind = ObjectKind::from_str(canonical).ok()?;
    Some((kind, kind.default_tag()))
}

/// Label a phrase refers to: the catalog tag when the phrase names a catalog
/// object, else its last word.
pub fn target_label(phrase: &str) -> String {
    match catalog_object(phrase) {
        Some((_, tag)) => tag.to_string(),
        None => tokenize(phrase).pop().unwrap_or_default(),
    }
}

fn default_color(kind: ObjectKind) -> Vec3 {
    match kind {
        ObjectKind::Ball => [0.9, 0.2, 0.2],
        ObjectKind::Cube => [0.2, 0.4, 0.9],
        ObjectKind::CarBox => [0.9, 0.7, 0.1],
        ObjectKind::FishEllipsoid => [1.0, 0.55, 0.1],
        ObjectKind::GroundPlane => [0.35, 0.45, 0.3],
    }
}

/// World-space unit direction of a motion as seen from the fixed camera.
pub fn world_direction(cfg: &EngineConfig, direction: Direction) -> Result<Vec3> {
    let cam = camera_for(cfg, CameraSpec::Fixed, 0, 1)?;
    let r = cam.world_to_camera.rotation_matrix();
    // Camera x (right) in world coordinates, flattened onto the ground.
    let right = [r[(0, 0)], 0.0, r[(0, 2)]];
    let n = (right[0] * right[0] + right[2] * right[2]).sqrt();
    let right = [right[0] / n, 0.0, right[2] / n];
    // Horizontal direction from the target towards the fixed camera's eye.
    let toward = [FRAC_PI_4.sin(), 0.0, FRAC_PI_4.cos()];
    Ok(match direction {
        Direction::LeftToRight => right,
        Direction::RightToLeft => [-right[0], 0.0, -right[2]],
        Direction::Up => [0.0, 1.0, 0.0],
        Direction::Down => [0.0, -1.0, 0.0],
        Direction::TowardCamera => toward,
        Direction::Away => [-toward[0], 0.0, -toward[2]],
    })
}

/// Procedural scene for a GEN plan: the named object moving along the
/// requested direction, centred on the look target at mid-clip, plus a
/// static catalog object for a scene phrase that names one.
pub fn scene_spec_for(plan: &GenQuery, cfg: &EngineConfig) -> Result<SceneSpec> {
    let (kind, tag) = match catalog_object(&plan.object_phrase) {
        Some((k, t)) => (k, t.to_string()),
        None => (ObjectKind::Ball, target_label(&plan.object_phrase)),
    };
    if tag.is_empty() {
        return Err(EngineError::BadRequest("GEN plan names no object".into()));
    }
    let color = match &plan.color {
        Some(c) => named_color(c)?,
        None => default_color(kind),
    };
    let dir = world_direction(cfg, plan.direction)?;
    let v = BASE_SPEED * speed_multiplier(plan.speed);
    let velocity = [dir[0] * v, dir[1] * v, dir[2] * v];
    let half = (cfg.frames - 1) as f64 / 2.0;
    let start = [
        LOOK_TARGET[0] - velocity[0] * half,
        LOOK_TARGET[1] - velocity[1] * half,
        LOOK_TARGET[2] - velocity[2] * half,
    ];
    let mut objects = vec![ObjectSpec::new(kind, color, start, velocity).with_tag(tag.clone())];
    if let Some((extra, extra_tag)) = plan.scene_phrase.as_deref().and_then(catalog_object) {
        if extra_tag != tag {
            let at = if extra == ObjectKind::GroundPlane {
                [0.0, 0.0, 0.0]
            } else {
                [0.9, 0.5, 0.2]
            };
            objects.push(ObjectSpec::new(extra, default_color(extra), at, [0.0; 3]));
        }
    }
    Ok(SceneSpec {
        gaussians_per_object: cfg.gaussians_per_object,
        seed: cfg.seed,
        ..SceneSpec::new(objects, cfg.frames)
    })
}

/// Encoder covering the editor's default prompts and every scene label.
pub fn encoder_for(scene: &GaussianScene, cfg: &EngineConfig) -> Result<SyntheticEncoder> {
    let mut labels = default_distractors();
    labels.extend(scene.gaussians.iter().filter_map(|g| g.label.clone()));
    Ok(SyntheticEncoder::new(&labels, cfg.encoder_dim, cfg.seed)?)
}

/// Everything a GEN command produces.
#[derive(Debug, Clone)]
pub struct GenOutput {
    pub scene: GaussianScene,
    pub decoder: FeatureDecoder,
    pub encoder: SyntheticEncoder,
    pub guidance: Option<GuidanceLog>,
    pub loss_curve: Vec<f64>,
}

pub fn run_gen(plan: &GenQuery, cfg: &EngineConfig) -> Result<GenOutput> {
    let guidance = if cfg.run_guidance {
        let setup = plan_setup(plan.clone(), cfg.frames, cfg.seed)?;
        Some(setup.run()?.log)
    } else {
        None
    };
    let raw = build_demo_scene(&scene_spec_for(plan, cfg)?)?;
    let encoder = encoder_for(&raw, cfg)?;
    let views = View::grid(0..cfg.frames, &training_cameras(cfg)?);
    let distill_cfg = DistillConfig {
        seed: cfg.seed,
        ..cfg.distill.clone()
    };
    let result = train_distillation(&raw, &views, std::slice::from_ref(&encoder), &distill_cfg)?;
    let scene = result.apply_to(&raw);
    let decoder = result.decoders.into_iter().next().expect("one task, one decoder");
    Ok(GenOutput {
        scene,
        decoder,
        encoder,
        guidance,
        loss_curve: result.loss_curve,
    })
}

pub fn query_set(target: &str, encoder: &SyntheticEncoder) -> Result<QuerySet> {
    let mut distractors = default_distractors();
    distractors.extend(encoder.labels().map(str::to_string));
    if !distractors.iter().any(|d| d == BACKGROUND_PROMPT) {
        distractors.push(BACKGROUND_PROMPT.to_string());
    }
    Ok(QuerySet::from_prompts(target, &distractors, encoder)?)
}

pub fn run_edit(
    edit: &EditQuery,
    scene: &GaussianScene,
    decoder: &FeatureDecoder,
    encoder: &SyntheticEncoder,
    cfg: &EngineConfig,
) -> Result<(GaussianScene, EditManifest)> {
    let target = target_label(&edit.target_phrase);
    let queries = query_set(&target, encoder)?;
    let selection = threshold_search(scene, decoder, &queries, &target, &cfg.threshold)?;
    let params = EditParams {
        color: edit.new_color.clone().map(ColorSpec::Named),
    };
    let edited = apply_edit(scene, &selection.selected, edit.verb, &params)?;
    Ok((edited, EditManifest::new(edit.verb, &selection, params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use scene4d_core::parser::Speed;

    fn plan(object: &str, direction: Direction) -> GenQuery {
        GenQuery {
            object_phrase: object.into(),
            color: None,
            direction,
            speed: Speed::Normal,
            scene_phrase: None,
        }
    }

    #[test]
    fn camera_spec_parsing() {
        assert_eq!("fixed".parse::<CameraSpec>().unwrap(), CameraSpec::Fixed);
        assert_eq!("orbit".parse::<CameraSpec>().unwrap(), CameraSpec::Orbit);
        assert_eq!(
            "0.5, 0.2, 3".parse::<CameraSpec>().unwrap(),
            CameraSpec::Custom {
                azimuth: 0.5,
                elevation: 0.2,
                radius: 3.0
            }
        );
        for bad in ["", "1,2", "1,2,0", "a,b,c", "1,2,3,4", "nan,0,1"] {
            assert!(bad.parse::<CameraSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn left_to_right_moves_right_in_the_fixed_view() {
        let cfg = EngineConfig::default();
        let spec = scene_spec_for(&plan("car", Direction::LeftToRight), &cfg).unwrap();
        let obj = &spec.objects[0];
        assert_eq!(obj.tag, "car");
        let cam = camera_for(&cfg, CameraSpec::Fixed, 0, cfg.frames).unwrap();
        let screen_x = |p: Vec3| {
            let c = cam.world_to_camera.apply(p);
            cam.intrinsics.fx * c[0] / c[2] + cam.intrinsics.cx
        };
        let (a, b) = (obj.position(0.0), obj.position((cfg.frames - 1) as f64));
        assert!(screen_x(b) > screen_x(a) + 1.0);
        let mid = obj.position((cfg.frames - 1) as f64 / 2.0);
        for k in 0..3 {
            assert!((mid[k] - LOOK_TARGET[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn toward_camera_reduces_depth() {
        let cfg = EngineConfig::default();
        let spec = scene_spec_for(&plan("fish", Direction::TowardCamera), &cfg).unwrap();
        let cam = camera_for(&cfg, CameraSpec::Fixed, 0, cfg.frames).unwrap();
        let depth = |t: f64| cam.world_to_camera.apply(spec.objects[0].position(t))[2];
        assert!(depth(7.0) < depth(0.0));
    }

    #[test]
    fn unknown_nouns_become_ball_shaped_tags() {
        let cfg = EngineConfig::default();
        let spec = scene_spec_for(&plan("horse", Direction::Up), &cfg).unwrap();
        assert_eq!(spec.objects[0].kind, ObjectKind::Ball);
        assert_eq!(spec.objects[0].tag, "horse");
        assert_eq!(target_label("the red sphere"), "ball");
        assert_eq!(target_label("horse"), "horse");
    }

    #[test]
    fn scene_phrase_adds_a_static_object() {
        let cfg = EngineConfig::default();
        let mut p = plan("ball", Direction::LeftToRight);
        p.scene_phrase = Some("floor".into());
        let spec = scene_spec_for(&p, &cfg).unwrap();
        assert_eq!(spec.objects.len(), 2);
        assert_eq!(spec.objects[1].kind, ObjectKind::GroundPlane);
        assert_eq!(spec.objects[1].velocity, [0.0; 3]);
    }

    #[test]
    fn render_rejects_out_of_range_frames() {
        let cfg = EngineConfig::default();
        let s = empty_scene(4).unwrap();
        assert!(render(&s, &cfg, CameraSpec::Fixed, 3).is_ok());
        assert!(matches!(render(&s, &cfg, CameraSpec::Fixed, 4), Err(EngineError::BadRequest(_))));
    }
}
