//! Compositional 3D layouts built from semantic primitives.
//!
//! Every instance lives in a canonical frame: a point `p` maps to
//! `Rᵀ (p − t) ⊘ s`, where the cuboid is `[-1/2, 1/2]³` and the ellipsoid is
//! the ball of radius `1/2` inscribed in it. Planes are cuboids whose vertical
//! extent is pinned to the layout's slab thickness.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    mat3_from_row_major, mat3_to_row_major, nearest_rotation, orthonormality_error, Aabb, Interval,
    Mat3, Ray, Vec3,
};

pub type ClassId = u8;
pub type InstanceId = u32;

/// Class id reserved for sky / empty space.
pub const SKY_CLASS: ClassId = 0;

pub const DEFAULT_PLANE_THICKNESS: f64 = 0.2;

/// Maximum tolerated deviation from orthonormality before a rotation is rejected.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub id: ClassId,
    pub name: String,
    pub color: [u8; 3],
}

/// Rigid placement plus full extents of a primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub size: Vec3,
}

impl Pose {
    /// Validates the pose, projecting slightly-off rotations onto SO(3).
    pub fn new(rotation: Mat3, translation: Vec3, size: Vec3) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("pose contains non-finite values"));
        }
        if !size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::validation(format!(
                "size components must be positive, got [{}, {}, {}]",
                size.x, size.y, size.z
            )));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE || rotation.determinant() < 0.0 {
            return Err(Error::validation(format!(
                "rotation is not a proper rotation (orthonormality error {err:.3e}, det {:.6})",
                rotation.determinant()
            )));
        }
        let rotation = if err > 0.0 {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::validation("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
            size,
        })
    }

    pub fn axis_aligned(translation: Vec3, size: Vec3) -> Result<Self> {
        Self::new(Mat3::identity(), translation, size)
    }

    /// Canonical coordinates of a world-space offset `p − t`.
    #[inline]
    pub fn offset_to_canonical(&self, offset: &Vec3) -> Vec3 {
        (self.rotation.transpose() * offset).component_div(&self.size)
    }

    #[inline]
    pub fn to_canonical(&self, p: &Vec3) -> Vec3 {
        self.offset_to_canonical(&(p - self.translation))
    }

    pub fn from_canonical(&self, c: &Vec3) -> Vec3 {
        self.rotation * c.component_mul(&self.size) + self.translation
    }

    /// The ray expressed in canonical coordinates. The parameterisation is
    /// preserved, so canonical `t` values equal world `t` values.
    pub fn canonical_ray(&self, ray: &Ray) -> (Vec3, Vec3) {
        let rt = self.rotation.transpose();
        let o = (rt * (ray.origin - self.translation)).component_div(&self.size);
        let d = (rt * ray.direction).component_div(&self.size);
        (o, d)
    }

    pub fn apply(&self, delta: &RigidDelta) -> Pose {
        Pose {
            rotation: delta.rotation * self.rotation,
            translation: self.translation + delta.translation,
            size: self.size,
        }
    }
}

/// Rigid edit: rotation about the instance center followed by a world translation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidDelta {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidDelta {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Maps a world point rigidly attached to an instance centered at `center`.
    pub fn apply_point(&self, center: &Vec3, p: &Vec3) -> Vec3 {
        self.rotation * (p - center) + center + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cuboid,
    Ellipsoid,
    Plane,
}

impl Shape {
    #[inline]
    pub fn contains_canonical(self, c: &Vec3) -> bool {
        match self {
            Shape::Cuboid | Shape::Plane => c.iter().all(|v| v.abs() <= 0.5),
            Shape::Ellipsoid => c.norm_squared() <= 0.25,
        }
    }

    /// Entry/exit parameters of a canonical-space ray, clipped to `t >= 0`.
    /// Tangent (zero-length) hits yield `None`.
    pub fn canonical_interval(self, o: &Vec3, d: &Vec3) -> Option<Interval> {
        let (near, far) = match self {
            Shape::Cuboid | Shape::Plane => slab_interval(o, d)?,
            Shape::Ellipsoid => ball_interval(o, d)?,
        };
        let near = near.max(0.0);
        (far > near).then_some(Interval::new(near, far))
    }
}

fn slab_interval(o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > 0.5 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let t0 = (-0.5 - o[i]) * inv;
        let t1 = (0.5 - o[i]) * inv;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        near = near.max(lo);
        far = far.min(hi);
    }
    (far > near).then_some((near, far))
}

fn ball_interval(o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let a = d.norm_squared();
    if a == 0.0 {
        return None;
    }
    let b = 2.0 * o.dot(d);
    let c = o.norm_squared() - 0.25;
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (t0, t1) = if q == 0.0 {
        let r = (-c / a).sqrt();
        (-r, r)
    } else {
        (q / a, c / q)
    };
    Some(if t0 < t1 { (t0, t1) } else { (t1, t0) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutInstance {
    pub id: InstanceId,
    pub class: ClassId,
    pub shape: Shape,
    pub pose: Pose,
    pub is_object: bool,
}

impl LayoutInstance {
    pub fn contains(&self, p: &Vec3) -> bool {
        point_in_instance(p, self)
    }

    /// Interval of `ray` inside this instance, if any.
    pub fn ray_interval(&self, ray: &Ray) -> Option<Interval> {
        let (o, d) = self.pose.canonical_ray(ray);
        self.shape.canonical_interval(&o, &d)
    }
}

/// Containment test in the instance's canonical frame.
pub fn point_in_instance(p: &Vec3, inst: &LayoutInstance) -> bool {
    inst.shape.contains_canonical(&inst.pose.to_canonical(p))
}

/// Parametric intervals of the ray interior to `inst`; empty on a miss.
pub fn ray_instance_intervals(origin: &Vec3, direction: &Vec3, inst: &LayoutInstance) -> Vec<Interval> {
    inst.ray_interval(&Ray::new(*origin, *direction))
        .into_iter()
        .collect()
}

/// Picks the owner among instances containing a point: objects win over
/// stuff, then the nearest center, then the lowest id.
pub fn resolve_owner<'a, I>(candidates: I, p: &Vec3) -> Option<&'a LayoutInstance>
where
    I: IntoIterator<Item = &'a LayoutInstance>,
{
    candidates.into_iter().min_by(|a, b| {
        b.is_object
            .cmp(&a.is_object)
            .then_with(|| {
                let da = (p - a.pose.translation).norm_squared();
                let db = (p - b.pose.translation).norm_squared();
                da.total_cmp(&db)
            })
            .then_with(|| a.id.cmp(&b.id))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub classes: Vec<SemanticClass>,
    pub instances: Vec<LayoutInstance>,
    pub bounds: Option<Aabb>,
    pub plane_thickness: f64,
}

impl SceneLayout {
    pub fn new(classes: Vec<SemanticClass>, instances: Vec<LayoutInstance>) -> Result<Self> {
        let layout = Self {
            classes,
            instances,
            bounds: None,
            plane_thickness: DEFAULT_PLANE_THICKNESS,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn empty(classes: Vec<SemanticClass>) -> Self {
        Self {
            classes,
            instances: Vec::new(),
            bounds: None,
            plane_thickness: DEFAULT_PLANE_THICKNESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut class_ids = BTreeSet::new();
        for c in &self.classes {
            if !class_ids.insert(c.id) {
                return Err(Error::validation(format!("duplicate class id {}", c.id)));
            }
        }
        if !(self.plane_thickness.is_finite() && self.plane_thickness > 0.0) {
            return Err(Error::validation("plane thickness must be positive"));
        }
        if let Some(b) = &self.bounds {
            if !b.is_valid() {
                return Err(Error::validation("world bounds are empty or non-finite"));
            }
        }
        let mut ids = BTreeSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id) {
                return Err(Error::DuplicateInstance(inst.id));
            }
            self.validate_instance(inst)?;
        }
        Ok(())
    }

    fn validate_instance(&self, inst: &LayoutInstance) -> Result<()> {
        if inst.class == SKY_CLASS {
            return Err(Error::validation(format!(
                "instance {} uses the reserved sky class 0",
                inst.id
            )));
        }
        if !self.classes.iter().any(|c| c.id == inst.class) {
            return Err(Error::validation(format!(
                "instance {} references unknown class {}",
                inst.id, inst.class
            )));
        }
        if !inst.pose.size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::validation(format!(
                "instance {} has a non-positive size",
                inst.id
            )));
        }
        if inst.shape == Shape::Plane && (inst.pose.size.z - self.plane_thickness).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "plane instance {} must have z-extent {} (got {})",
                inst.id, self.plane_thickness, inst.pose.size.z
            )));
        }
        Ok(())
    }

    /// Number of one-hot channels needed to encode every class id.
    pub fn class_count(&self) -> usize {
        self.classes
            .iter()
            .map(|c| c.id as usize + 1)
            .max()
            .unwrap_or(1)
            .max(1)
    }

    pub fn class(&self, id: ClassId) -> Option<&SemanticClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn instance(&self, id: InstanceId) -> Option<&LayoutInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &LayoutInstance> {
        self.instances.iter().filter(|i| i.is_object)
    }

    /// Owner of a world point under object precedence, if any instance contains it.
    pub fn owner_at(&self, p: &Vec3) -> Option<&LayoutInstance> {
        resolve_owner(self.instances.iter().filter(|i| i.contains(p)), p)
    }

    pub fn insert_instance(&self, inst: LayoutInstance) -> Result<SceneLayout> {
        if self.instance(inst.id).is_some() {
            return Err(Error::DuplicateInstance(inst.id));
        }
        self.validate_instance(&inst)?;
        let mut out = self.clone();
        out.instances.push(inst);
        Ok(out)
    }

    pub fn remove_instance(&self, id: InstanceId) -> Result<SceneLayout> {
        let idx = self
            .instances
            .iter()
            .position(|i| i.id == id)
            .ok_or(Error::UnknownInstance(id))?;
        let mut out = self.clone();
        out.instances.remove(idx);
        Ok(out)
    }

    pub fn transform_instance(&self, id: InstanceId, delta: &RigidDelta) -> Result<SceneLayout> {
        let idx = self
            .instances
            .iter()
            .position(|i| i.id == id)
            .ok_or(Error::UnknownInstance(id))?;
        if orthonormality_error(&delta.rotation) > ROTATION_TOLERANCE || delta.rotation.determinant() < 0.0 {
            return Err(Error::validation("edit rotation is not a proper rotation"));
        }
        let mut out = self.clone();
        out.instances[idx].pose = self.instances[idx].pose.apply(delta);
        Ok(out)
    }

    /// Same instance set regardless of order.
    pub fn equivalent(&self, other: &SceneLayout) -> bool {
        let mut a: Vec<_> = self.instances.iter().collect();
        let mut b: Vec<_> = other.instances.iter().collect();
        a.sort_by_key(|i| i.id);
        b.sort_by_key(|i| i.id);
        self.classes == other.classes
            && self.bounds == other.bounds
            && self.plane_thickness == other.plane_thickness
            && a == b
    }
}

/// The default urban class vocabulary.
pub fn urban_classes() -> Vec<SemanticClass> {
    let c = |id, name: &str, color| SemanticClass {
        id,
        name: name.to_string(),
        color,
    };
    vec![
        c(0, "sky", [70, 130, 180]),
        c(1, "road", [128, 64, 128]),
        c(2, "sidewalk", [244, 35, 232]),
        c(3, "car", [0, 0, 142]),
        c(4, "building", [70, 70, 70]),
        c(5, "vegetation", [107, 142, 35]),
    ]
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    version: u32,
    classes: Vec<SemanticClass>,
    instances: Vec<InstanceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plane_thickness: Option<f64>,
}

/// On-disk form of one instance; also used by edit scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub class: ClassId,
    pub shape: Shape,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub size: [f64; 3],
    pub object: bool,
}

impl InstanceRecord {
    pub fn from_instance(i: &LayoutInstance) -> Self {
        Self {
            id: i.id,
            class: i.class,
            shape: i.shape,
            rotation: mat3_to_row_major(&i.pose.rotation),
            translation: [i.pose.translation.x, i.pose.translation.y, i.pose.translation.z],
            size: [i.pose.size.x, i.pose.size.y, i.pose.size.z],
            object: i.is_object,
        }
    }

    pub fn to_instance(&self) -> Result<LayoutInstance> {
        let pose = Pose::new(mat3_from_row_major(&self.rotation), Vec3::from(self.translation), Vec3::from(self.size))
            .map_err(|e| Error::validation(format!("instance {}: {e}", self.id)))?;
        Ok(LayoutInstance {
            id: self.id,
            class: self.class,
            shape: self.shape,
            pose,
            is_object: self.object,
        })
    }
}

pub const LAYOUT_VERSION: u32 = 1;

pub fn parse_layout(text: &str) -> Result<SceneLayout> {
    let file: LayoutFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "layout".into(),
        message: e.to_string(),
    })?;
    if file.version != LAYOUT_VERSION {
        return Err(Error::Parse {
            what: "layout".into(),
            message: format!("unsupported version {}", file.version),
        });
    }
    let instances = file.instances.iter().map(InstanceRecord::to_instance).collect::<Result<Vec<_>>>()?;
    let layout = SceneLayout {
        classes: file.classes,
        instances,
        bounds: file.bounds,
        plane_thickness: file.plane_thickness.unwrap_or(DEFAULT_PLANE_THICKNESS),
    };
    layout.validate()?;
    Ok(layout)
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<SceneLayout> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_layout(&text)
}

pub fn layout_to_json(layout: &SceneLayout) -> String {
    let file = LayoutFile {
        version: LAYOUT_VERSION,
        classes: layout.classes.clone(),
        instances: layout.instances.iter().map(InstanceRecord::from_instance).collect(),
        bounds: layout.bounds,
        plane_thickness: (layout.plane_thickness != DEFAULT_PLANE_THICKNESS).then_some(layout.plane_thickness),
    };
    serde_json::to_string_pretty(&file).expect("layout serialises")
}

pub fn save_layout(layout: &SceneLayout, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, layout_to_json(layout)).map_err(|e| Error::io(path, e))
}
