//! Dynamic Gaussian scene representation.
//!
//! A [`GaussianScene`] is a set of anisotropic 3D Gaussians, each bound to one
//! or more nodes of a [`MotionScaffold`]. Every scaffold node carries a rigid
//! transform per frame; warping a Gaussian to a frame blends the transforms of
//! its bound nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, QUAT_IDENTITY};

pub use crate::math::{Quat, Vec3};

/// Current version tag written into scene files.
pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FEATURE_DIM: usize = 16;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("frame {frame} out of range (scaffold has {frame_count} frames)")]
    FrameRange { frame: usize, frame_count: usize },
    #[error("gaussian {index}: {reason}")]
    Binding { index: usize, reason: String },
    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("invalid scaffold: {0}")]
    InvalidScaffold(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("unknown object kind `{0}` (expected ball, cube, car-box, fish-ellipsoid, ground-plane)")]
    UnknownObjectKind(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported scene format version {0}")]
    Version(u32),
    #[error("malformed scene document: {0}")]
    Malformed(String),
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub q: Quat,
    pub t: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        q: QUAT_IDENTITY,
        t: [0.0; 3],
    };

    pub fn translation(t: Vec3) -> Self {
        Self {
            q: QUAT_IDENTITY,
            t,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        math::add(math::quat_rotate(self.q, p), self.t)
    }

    pub fn rotation_matrix(&self) -> nalgebra::Matrix3<f64> {
        math::rotation_matrix(self.q)
    }
}

/// `(scaffold node id, blend weight)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBinding(pub usize, pub f64);

impl NodeBinding {
    pub fn node(&self) -> usize {
        self.0
    }

    pub fn weight(&self) -> f64 {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: Vec3,
    /// Per-axis standard deviation in world units.
    pub scale: Vec3,
    #[serde(rename = "rot")]
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vec3,
    pub feature: Vec<f64>,
    /// Ground-truth object tag. Only tests and the synthetic encoder read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub bindings: Vec<NodeBinding>,
}

impl Gaussian3D {
    /// World-space covariance `R S^2 R^T`.
    pub fn covariance(&self) -> nalgebra::Matrix3<f64> {
        let r = math::rotation_matrix(self.rotation);
        let s = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
            self.scale[0] * self.scale[0],
            self.scale[1] * self.scale[1],
            self.scale[2] * self.scale[2],
        ));
        r * s * r.transpose()
    }

    fn check(&self, index: usize, feature_dim: usize, node_count: usize) -> Result<(), SceneError> {
        let bad = |reason: String| SceneError::InvalidGaussian { index, reason };
        let all_finite = self
            .mean
            .iter()
            .chain(&self.scale)
            .chain(&self.rotation)
            .chain(&self.color)
            .chain(&self.feature)
            .chain(std::iter::once(&self.opacity))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(bad("non-finite value".into()));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(bad(format!("scale components must be > 0, got {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if (math::quat_norm(self.rotation) - 1.0).abs() > UNIT_TOL {
            return Err(bad("rotation quaternion is not unit norm".into()));
        }
        if self.feature.len() != feature_dim {
            return Err(bad(format!(
                "feature length {} != feature_dim {}",
                self.feature.len(),
                feature_dim
            )));
        }
        if self.bindings.is_empty() {
            return Err(SceneError::Binding {
                index,
                reason: "no scaffold bindings".into(),
            });
        }
        let mut total = 0.0;
        for b in &self.bindings {
            if b.node() >= node_count {
                return Err(SceneError::Binding {
                    index,
                    reason: format!("binding references missing node {}", b.node()),
                });
            }
            if !(b.weight() >= 0.0) || !b.weight().is_finite() {
                return Err(SceneError::Binding {
                    index,
                    reason: format!("negative binding weight {}", b.weight()),
                });
            }
            total += b.weight();
        }
        if (total - 1.0).abs() > UNIT_TOL {
            return Err(SceneError::Binding {
                index,
                reason: format!("binding weights sum to {total}, expected 1"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScaffold {
    pub frame_count: usize,
    /// `nodes[node][frame]`.
    pub nodes: Vec<Vec<RigidTransform>>,
    pub edges: Vec<(usize, usize)>,
}

impl MotionScaffold {
    /// A scaffold whose nodes never move.
    pub fn identity(node_count: usize, frame_count: usize) -> Self {
        Self {
            frame_count,
            nodes: vec![vec![RigidTransform::IDENTITY; frame_count]; node_count],
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn transform(&self, node: usize, frame: usize) -> &RigidTransform {
        &self.nodes[node][frame]
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frame_count == 0 {
            return Err(SceneError::InvalidScaffold("frame_count must be >= 1".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.len() != self.frame_count {
                return Err(SceneError::InvalidScaffold(format!(
                    "node {i} has {} transforms, expected {}",
                    node.len(),
                    self.frame_count
                )));
            }
            for tr in node {
                if tr.q.iter().chain(&tr.t).any(|v| !v.is_finite())
                    || (math::quat_norm(tr.q) - 1.0).abs() > UNIT_TOL
                {
                    return Err(SceneError::InvalidScaffold(format!(
                        "node {i} carries a non-unit or non-finite transform"
                    )));
                }
            }
        }
        for &(a, b) in &self.edges {
            if a >= self.nodes.len() || b >= self.nodes.len() {
                return Err(SceneError::InvalidScaffold(format!(
                    "edge ({a}, {b}) references a missing node"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub version: u32,
    pub feature_dim: usize,
    pub background_color: Vec3,
    pub scaffold: MotionScaffold,
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianScene {
    pub fn new(
        gaussians: Vec<Gaussian3D>,
        scaffold: MotionScaffold,
        background_color: Vec3,
        feature_dim: usize,
    ) -> Result<Self, SceneError> {
        let scene = Self {
            version: SCENE_FORMAT_VERSION,
            feature_dim,
            background_color,
            scaffold,
            gaussians,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.scaffold.frame_count
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.version != SCENE_FORMAT_VERSION {
            return Err(SceneError::Version(self.version));
        }
        if self.background_color.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::Malformed("non-finite background color".into()));
        }
        self.scaffold.validate()?;
        let nodes = self.scaffold.node_count();
        for (i, g) in self.gaussians.iter().enumerate() {
            g.check(i, self.feature_dim, nodes)?;
        }
        Ok(())
    }

    /// Same scene with a different Gaussian list (scaffold and settings kept).
    pub fn with_gaussians(&self, gaussians: Vec<Gaussian3D>) -> Self {
        Self {
            version: self.version,
            feature_dim: self.feature_dim,
            background_color: self.background_color,
            scaffold: self.scaffold.clone(),
            gaussians,
        }
    }

    /// Canonical JSON encoding; field order is fixed by the type layout.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: GaussianScene =
            serde_json::from_str(text).map_err(|e| SceneError::Malformed(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        math::sha256_hex(self.to_json().as_bytes())
    }
}

/// Moves a Gaussian to its pose at `frame`.
///
/// The mean is the binding-weighted blend of each bound node's transform
/// applied to the rest mean. The rotation is composed with the frame rotation
/// of the highest-weight node (first one wins on ties).
pub fn warp_gaussian(
    g: &Gaussian3D,
    scaffold: &MotionScaffold,
    frame: usize,
) -> Result<Gaussian3D, SceneError> {
    if frame >= scaffold.frame_count {
        return Err(SceneError::FrameRange {
            frame,
            frame_count: scaffold.frame_count,
        });
    }
    if g.bindings.is_empty() {
        return Err(SceneError::Binding {
            index: 0,
            reason: "no scaffold bindings".into(),
        });
    }
    let mut displacement = [0.0; 3];
    let mut dominant = g.bindings[0];
    for b in &g.bindings {
        let node = scaffold.nodes.get(b.node()).ok_or_else(|| SceneError::Binding {
            index: 0,
            reason: format!("binding references missing node {}", b.node()),
        })?;
        let moved = node[frame].apply(g.mean);
        // Blend displacements so identity transforms leave the mean bit-exact.
        displacement = math::add(displacement, math::scale(math::sub(moved, g.mean), b.weight()));
        if b.weight() > dominant.weight() {
            dominant = *b;
        }
    }
    let node_q = scaffold.nodes[dominant.node()][frame].q;
    Ok(Gaussian3D {
        mean: math::add(g.mean, displacement),
        rotation: math::quat_mul(node_q, g.rotation),
        ..g.clone()
    })
}

/// Warps every Gaussian; the input scene is left untouched.
pub fn warp_scene(scene: &GaussianScene, frame: usize) -> Result<GaussianScene, SceneError> {
    let gaussians = scene
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            warp_gaussian(g, &scene.scaffold, frame).map_err(|e| match e {
                SceneError::Binding { reason, .. } => SceneError::Binding { index: i, reason },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scene.with_gaussians(gaussians))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Pinhole camera. Camera space is x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub world_to_camera: RigidTransform,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, world_to_camera: RigidTransform) -> Result<Self, SceneError> {
        let cam = Self {
            intrinsics,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(SceneError::InvalidCamera("focal lengths must be > 0".into()));
        }
        if k.width == 0 || k.height == 0 {
            return Err(SceneError::InvalidCamera("image must be at least 1x1".into()));
        }
        if (math::quat_norm(self.world_to_camera.q) - 1.0).abs() > UNIT_TOL {
            return Err(SceneError::InvalidCamera("extrinsic rotation is not unit norm".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, world up is +y.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3) -> Result<Self, SceneError> {
        let forward = math::sub(target, eye);
        let fnorm = math::norm(forward);
        if fnorm == 0.0 {
            return Err(SceneError::InvalidCamera("eye coincides with target".into()));
        }
        let f = math::scale(forward, 1.0 / fnorm);
        let mut right = math::cross(f, [0.0, 1.0, 0.0]);
        if math::norm(right) < 1e-9 {
            // Looking straight up or down.
            right = math::cross(f, [0.0, 0.0, 1.0]);
        }
        let r = math::scale(right, 1.0 / math::norm(right));
        let d = math::cross(f, r);
        let m = nalgebra::Matrix3::new(r[0], r[1], r[2], d[0], d[1], d[2], f[0], f[1], f[2]);
        let q = math::quat_from_matrix(&m);
        let t = math::scale(math::quat_rotate(q, eye), -1.0);
        Self::new(intrinsics, RigidTransform { q, t })
    }

    /// Camera on a sphere around `target`. Azimuth 0 looks down -z from +z.
    pub fn orbit(
        intrinsics: Intrinsics,
        target: Vec3,
        radius: f64,
        azimuth: f64,
        elevation: f64,
    ) -> Result<Self, SceneError> {
        if !(radius > 0.0) {
            return Err(SceneError::InvalidCamera("orbit radius must be > 0".into()));
        }
        let eye = [
            target[0] + radius * elevation.cos() * azimuth.sin(),
            target[1] + radius * elevation.sin(),
            target[2] + radius * elevation.cos() * azimuth.cos(),
        ];
        Self::look_at(intrinsics, eye, target)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Shapes available to the procedural scene builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    Ball,
    Cube,
    CarBox,
    FishEllipsoid,
    GroundPlane,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Ball,
        ObjectKind::Cube,
        ObjectKind::CarBox,
        ObjectKind::FishEllipsoid,
        ObjectKind::GroundPlane,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Ball => "ball",
            ObjectKind::Cube => "cube",
            ObjectKind::CarBox => "car-box",
            ObjectKind::FishEllipsoid => "fish-ellipsoid",
            ObjectKind::GroundPlane => "ground-plane",
        }
    }

    /// Tag used for the object when a spec does not name one.
    pub fn default_tag(self) -> &'static str {
        match self {
            ObjectKind::Ball => "ball",
            ObjectKind::Cube => "cube",
            ObjectKind::CarBox => "car",
            ObjectKind::FishEllipsoid => "fish",
            ObjectKind::GroundPlane => "ground",
        }
    }
}

impl std::str::FromStr for ObjectKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SceneError::UnknownObjectKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Linear,
    /// Ballistic vertical motion with elastic reflection at `floor`.
    Bounce { gravity: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub tag: String,
    pub color: Vec3,
    pub start: Vec3,
    /// World units per frame.
    pub velocity: Vec3,
    pub size: f64,
    pub motion: Motion,
}

impl ObjectSpec {
    pub fn new(kind: ObjectKind, color: Vec3, start: Vec3, velocity: Vec3) -> Self {
        Self {
            kind,
            tag: kind.default_tag().to_string(),
            color,
            start,
            velocity,
            size: 0.5,
            motion: Motion::Linear,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn with_size(mut self, size: f64) -> Self {
        self.size = size;
        self
    }

    pub fn with_motion(mut self, motion: Motion) -> Self {
        self.motion = motion;
        self
    }

    /// Object centre at (possibly fractional) frame `t`.
    pub fn position(&self, t: f64) -> Vec3 {
        let x = self.start[0] + self.velocity[0] * t;
        let z = self.start[2] + self.velocity[2] * t;
        let y = match self.motion {
            Motion::Linear => self.start[1] + self.velocity[1] * t,
            Motion::Bounce { gravity, floor } => {
                bounce_height(self.start[1], self.velocity[1], gravity, floor, t)
            }
        };
        [x, y, z]
    }
}

/// Closed-form height of a ball thrown from `y0` with vertical speed `v0`,
/// reflecting elastically off `floor`.
fn bounce_height(y0: f64, v0: f64, g: f64, floor: f64, t: f64) -> f64 {
    if g <= 0.0 {
        return y0 + v0 * t;
    }
    let impact_speed = (v0 * v0 + 2.0 * g * (y0 - floor)).sqrt();
    let first_impact = (v0 + impact_speed) / g;
    if t <= first_impact {
        return y0 + v0 * t - 0.5 * g * t * t;
    }
    let period = 2.0 * impact_speed / g;
    let tau = (t - first_impact).rem_euclid(period);
    floor + impact_speed * tau - 0.5 * g * tau * tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub frame_count: usize,
    pub gaussians_per_object: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub background_color: Vec3,
}

impl SceneSpec {
    pub fn new(objects: Vec<ObjectSpec>, frame_count: usize) -> Self {
        Self {
            objects,
            frame_count,
            gaussians_per_object: 100,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 0,
            background_color: [0.0; 3],
        }
    }
}

/// Reference two-object scene: a ball rolling along +x beside a static cube,
/// 100 Gaussians each.
pub fn desk_scene_spec(frame_count: usize, seed: u64) -> SceneSpec {
    let ball = ObjectSpec::new(ObjectKind::Ball, [0.9, 0.2, 0.2], [-0.9, 0.5, 0.0], [0.05, 0.0, 0.0]);
    let cube = ObjectSpec::new(ObjectKind::Cube, [0.2, 0.4, 0.9], [0.9, 0.5, 0.2], [0.0; 3]);
    SceneSpec {
        seed,
        ..SceneSpec::new(vec![ball, cube], frame_count)
    }
}

/// Two antipodal cameras on the desk scene's body diagonal; together they
/// see all six faces of an axis-aligned box.
pub fn desk_cameras(width: usize, height: usize) -> Vec<Camera> {
    let intr = Intrinsics::centered(1.25 * width.max(height) as f64, width, height);
    let target = [0.0, 0.5, 0.0];
    let el = (1.0f64 / 2.0f64.sqrt()).atan();
    let az = std::f64::consts::FRAC_PI_4;
    [(az, el), (az + std::f64::consts::PI, -el)]
        .iter()
        .map(|&(a, e)| Camera::orbit(intr, target, 4.5, a, e).expect("valid desk camera"))
        .collect()
}

/// Builds a seeded procedural scene: each object is a rigid cluster of
/// surface Gaussians bound to its own scaffold node.
pub fn build_demo_scene(spec: &SceneSpec) -> Result<GaussianScene, SceneError> {
    if spec.objects.is_empty() {
        return Err(SceneError::InvalidSpec("at least one object is required".into()));
    }
    if spec.frame_count < 2 {
        return Err(SceneError::InvalidSpec(format!(
            "frame_count must be >= 2, got {}",
            spec.frame_count
        )));
    }
    if spec.gaussians_per_object == 0 {
        return Err(SceneError::InvalidSpec("gaussians_per_object must be >= 1".into()));
    }
    if spec.feature_dim == 0 {
        return Err(SceneError::InvalidSpec("feature_dim must be >= 1".into()));
    }
    let mut rng = math::rng_from_seed(spec.seed);
    let mut nodes = Vec::with_capacity(spec.objects.len());
    let mut gaussians = Vec::with_capacity(spec.objects.len() * spec.gaussians_per_object);
    let feature_noise = Normal::new(0.0, 0.1).expect("valid normal");

    for (node_id, obj) in spec.objects.iter().enumerate() {
        if !(obj.size > 0.0) {
            return Err(SceneError::InvalidSpec(format!("object {node_id} has nonpositive size")));
        }
        if let Motion::Bounce { floor, .. } = obj.motion {
            if obj.start[1] < floor {
                return Err(SceneError::InvalidSpec(format!(
                    "bouncing object {node_id} starts below the floor"
                )));
            }
        }
        let track = (0..spec.frame_count)
            .map(|f| RigidTransform::translation(math::sub(obj.position(f as f64), obj.start)))
            .collect();
        nodes.push(track);

        let n = spec.gaussians_per_object;
        let (samples, area) = sample_surface(obj.kind, obj.size, n, &mut rng);
        let base_scale = 0.6 * (area / n as f64).sqrt();
        for local in samples {
            let mut scale = [0.0; 3];
            for s in &mut scale {
                *s = base_scale * rng.random_range(0.8..1.2);
            }
            let q: Quat = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let feature = (0..spec.feature_dim)
                .map(|_| feature_noise.sample(&mut rng))
                .collect();
            gaussians.push(Gaussian3D {
                mean: math::add(obj.start, local),
                scale,
                rotation: math::quat_normalize(q),
                opacity: rng.random_range(0.6..0.9),
                color: obj.color,
                feature,
                label: Some(obj.tag.clone()),
                bindings: vec![NodeBinding(node_id, 1.0)],
            });
        }
    }
    let edges = (1..spec.objects.len()).map(|i| (i - 1, i)).collect();
    let scaffold = MotionScaffold {
        frame_count: spec.frame_count,
        nodes,
        edges,
    };
    GaussianScene::new(gaussians, scaffold, spec.background_color, spec.feature_dim)
}

/// Surface samples in object-local coordinates plus the surface area.
fn sample_surface(kind: ObjectKind, size: f64, n: usize, rng: &mut impl Rng) -> (Vec<Vec3>, f64) {
    let sphere_dir = |rng: &mut dyn rand::RngCore| -> Vec3 {
        loop {
            let v: Vec3 = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let len = math::norm(v);
            if len > 1e-9 {
                return math::scale(v, 1.0 / len);
            }
        }
    };
    match kind {
        ObjectKind::Ball => {
            let pts = (0..n).map(|_| math::scale(sphere_dir(rng), size)).collect();
            (pts, 4.0 * std::f64::consts::PI * size * size)
        }
        ObjectKind::FishEllipsoid => {
            let axes = [size, 0.35 * size, 0.25 * size];
            let pts = (0..n)
                .map(|_| {
                    let d = sphere_dir(rng);
                    [d[0] * axes[0], d[1] * axes[1], d[2] * axes[2]]
                })
                .collect();
            // Knud Thomsen's approximation.
            let p = 1.6075;
            let (a, b, c) = (axes[0].powf(p), axes[1].powf(p), axes[2].powf(p));
            let area = 4.0 * std::f64::consts::PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p);
            (pts, area)
        }
        ObjectKind::Cube => box_surface([size, size, size], n, rng),
        ObjectKind::CarBox => box_surface([size, 0.4 * size, 0.5 * size], n, rng),
        ObjectKind::GroundPlane => {
            let half = 4.0 * size;
            let pts = (0..n)
                .map(|_| [rng.random_range(-half..half), 0.0, rng.random_range(-half..half)])
                .collect();
            (pts, 4.0 * half * half)
        }
    }
}

fn box_surface(half: Vec3, n: usize, rng: &mut impl Rng) -> (Vec<Vec3>, f64) {
    // Face pairs normal to x, y, z, weighted by area.
    let areas = [
        4.0 * half[1] * half[2],
        4.0 * half[0] * half[2],
        4.0 * half[0] * half[1],
    ];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let pts = (0..n)
        .map(|_| {
            let pick = rng.random_range(0.0..(areas[0] + areas[1] + areas[2]));
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis {
                    sign * half[k]
                } else {
                    rng.random_range(-half[k]..half[k])
                };
            }
            p
        })
        .collect();
    (pts, total)
}
