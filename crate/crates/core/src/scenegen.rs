//! Procedural scenes of spheres, boxes and ground planes, a nearest-hit ray
//! caster producing images with exact point maps, orbit trajectories, and the
//! on-disk dataset layout:
//!
//! ```text
//! <root>/scenes/<id>/meta.cfg
//! <root>/scenes/<id>/view_XYZ.ten   f32 H×W×3 in [0, 1]
//! <root>/scenes/<id>/pmap_XYZ.ten   f32 H×W×3 world coordinates
//! <root>/scenes/<id>/valid_XYZ.ten  u8  H×W (1 = surface hit)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_atomic, write_container, Array};
use crate::error::{Error, Result};
use crate::geometry::{look_at, rotation_angle, Camera, Mat3, Vec3};
use crate::image::Image;
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Plane,
}

impl PrimitiveKind {
    fn index(self) -> usize {
        match self {
            PrimitiveKind::Sphere => 0,
            PrimitiveKind::Box => 1,
            PrimitiveKind::Plane => 2,
        }
    }
}

/// One primitive. `size` is `(r, r, r)` for spheres, half-extents for
/// axis-aligned boxes, and `(half_x, 0, half_z)` for horizontal planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub size: Vec3,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Object centers are drawn from `[-extent, extent]` horizontally.
    pub extent: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub classes: usize,
    /// Add a ground plane under the objects.
    pub ground: bool,
    pub albedo_min: f64,
    pub albedo_max: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Orbit radius as a multiple of `extent`.
    pub orbit_radius: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Total arc swept by a trajectory.
    pub arc_min_deg: f64,
    pub arc_max_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_primitives: 2,
            max_primitives: 4,
            extent: 1.0,
            min_size: 0.35,
            max_size: 0.7,
            classes: 10,
            ground: true,
            albedo_min: 0.15,
            albedo_max: 0.95,
            width: 56,
            height: 56,
            fov_deg: 60.0,
            orbit_radius: 3.2,
            elevation_min_deg: 15.0,
            elevation_max_deg: 35.0,
            arc_min_deg: 40.0,
            arc_max_deg: 70.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("scene config: {m}")));
        if self.min_primitives == 0 || self.min_primitives > self.max_primitives {
            return bad("primitive count range is empty");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("size range is empty");
        }
        if !(self.extent > 0.0) {
            return bad("extent must be positive");
        }
        if self.classes == 0 {
            return bad("class count must be positive");
        }
        if !(0.0 <= self.albedo_min && self.albedo_min <= self.albedo_max && self.albedo_max <= 1.0) {
            return bad("albedo range must lie in [0, 1]");
        }
        if self.width == 0 || self.height == 0 || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("invalid image size or field of view");
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg) || !(self.arc_min_deg <= self.arc_max_deg) {
            return bad("trajectory angle range is empty");
        }
        if !(self.orbit_radius > 1.5) {
            return bad("orbit radius must keep cameras outside the object region");
        }
        Ok(())
    }
}

/// Height of the ground plane (world up is -y).
pub const GROUND_Y: f64 = 0.5;

/// Fixed directional light, pointing from the surface towards the light.
pub fn light_dir() -> Vec3 {
    Vec3::new(0.4, -1.0, -0.3).normalize()
}

pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[stream::SCENE]);
    let n = rng.random_range(cfg.min_primitives..=cfg.max_primitives);
    let albedo = |rng: &mut rand_chacha::ChaCha8Rng| {
        [0; 3].map(|_| rng.random_range(cfg.albedo_min..=cfg.albedo_max))
    };
    let mut primitives = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let kind = if rng.random_bool(0.5) {
            PrimitiveKind::Sphere
        } else {
            PrimitiveKind::Box
        };
        let s = rng.random_range(cfg.min_size..=cfg.max_size);
        let size = match kind {
            PrimitiveKind::Sphere => Vec3::new(s, s, s),
            _ => Vec3::new(
                s * rng.random_range(0.6..=1.0),
                s * rng.random_range(0.6..=1.0),
                s * rng.random_range(0.6..=1.0),
            ),
        };
        let x = rng.random_range(-cfg.extent..=cfg.extent);
        let z = rng.random_range(-cfg.extent..=cfg.extent);
        // rest on the ground; floating objects when there is no ground
        let y = if cfg.ground {
            GROUND_Y - size.y
        } else {
            rng.random_range(-cfg.extent..=cfg.extent) * 0.5
        };
        primitives.push(Primitive {
            kind,
            center: Vec3::new(x, y, z),
            size,
            albedo: albedo(&mut rng),
        });
    }
    let background = albedo(&mut rng).map(|c| 0.5 * c + 0.25);
    if cfg.ground {
        let half = cfg.extent * 1.8;
        primitives.push(Primitive {
            kind: PrimitiveKind::Plane,
            center: Vec3::new(0.0, GROUND_Y, 0.0),
            size: Vec3::new(half, 0.0, half),
            albedo: albedo(&mut rng),
        });
    }
    let category = category_of(&primitives[..n], cfg.classes);
    Ok(SceneSpec {
        primitives,
        background,
        category,
    })
}

/// Label from the largest object: its kind and the dominant channel of its
/// albedo.
pub fn category_of(objects: &[Primitive], classes: usize) -> usize {
    let dominant = objects
        .iter()
        .max_by(|a, b| a.size.norm().total_cmp(&b.size.norm()))
        .expect("at least one object");
    let channel = (0..3)
        .max_by(|&a, &b| dominant.albedo[a].total_cmp(&dominant.albedo[b]))
        .unwrap_or(0);
    (dominant.kind.index() * 3 + channel) % classes
}

impl SceneSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::validation("scene has no primitives"));
        }
        let in_unit = |c: &[f64; 3]| c.iter().all(|&x| (0.0..=1.0).contains(&x));
        if !in_unit(&self.background) || !self.primitives.iter().all(|p| in_unit(&p.albedo)) {
            return Err(Error::validation("colors must lie in [0, 1]"));
        }
        if self.category >= classes {
            return Err(Error::validation(format!(
                "category {} out of range for {classes} classes",
                self.category
            )));
        }
        Ok(())
    }

    /// Mean of object centers (ground excluded).
    pub fn centroid(&self) -> Vec3 {
        let objs: Vec<&Primitive> = self
            .primitives
            .iter()
            .filter(|p| p.kind != PrimitiveKind::Plane)
            .collect();
        if objs.is_empty() {
            return Vec3::zeros();
        }
        objs.iter().fold(Vec3::zeros(), |a, p| a + p.center) / objs.len() as f64
    }

    /// Nearest intersection along a ray: distance, world point and unit normal
    /// facing the ray origin side, and the primitive index.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, Vec3, usize)> {
        let mut best: Option<(f64, Vec3, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = intersect_primitive(p, origin, dir) {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, n, i));
                }
            }
        }
        best.map(|(t, n, i)| (t, origin + dir * t, n, i))
    }

    pub fn shade(&self, prim: usize, normal: &Vec3) -> [f64; 3] {
        let lambert = normal.dot(&light_dir()).max(0.0);
        let k = 0.3 + 0.7 * lambert;
        self.primitives[prim].albedo.map(|a| a * k)
    }
}

const HIT_EPS: f64 = 1e-9;

fn intersect_primitive(p: &Primitive, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match p.kind {
        PrimitiveKind::Sphere => {
            let r = p.size.x;
            let oc = o - p.center;
            let b = oc.dot(d);
            let c = oc.norm_squared() - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
            (t > HIT_EPS).then(|| (t, ((o + d * t) - p.center) / r))
        }
        PrimitiveKind::Box => {
            let lo = p.center - p.size;
            let hi = p.center + p.size;
            let mut tmin = f64::NEG_INFINITY;
            let mut tmax = f64::INFINITY;
            let mut axis_in = 0;
            let mut sign_in = 0.0;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (lo[a] - o[a]) / d[a];
                let t2 = (hi[a] - o[a]) / d[a];
                let (tn, tf, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if tn > tmin {
                    tmin = tn;
                    axis_in = a;
                    sign_in = s;
                }
                tmax = tmax.min(tf);
            }
            if tmin > tmax || tmin <= HIT_EPS {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis_in] = sign_in;
            Some((tmin, n))
        }
        PrimitiveKind::Plane => {
            if d.y.abs() < 1e-15 {
                return None;
            }
            let t = (p.center.y - o.y) / d.y;
            if t <= HIT_EPS {
                return None;
            }
            let hit = o + d * t;
            if (hit.x - p.center.x).abs() > p.size.x || (hit.z - p.center.z).abs() > p.size.z {
                return None;
            }
            let n = if d.y > 0.0 { Vec3::new(0.0, -1.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
            Some((t, n))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    /// `H × W × 3` in [0, 1].
    pub image: Image,
    /// `H × W × 3` world coordinates; zero where `valid` is false.
    pub pointmap: Image,
    pub valid: Vec<bool>,
    pub camera: Camera,
}

pub fn render_view(scene: &SceneSpec, camera: &Camera) -> Result<RenderedView> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let bg = scene.background.map(|c| c as f32);
    let origin = camera.center();
    let rows: Vec<(Vec<f32>, Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut img = Vec::with_capacity(w * 3);
            let mut pts = Vec::with_capacity(w * 3);
            let mut ok = Vec::with_capacity(w);
            for u in 0..w {
                let d = camera.pixel_ray(u, v);
                match scene.intersect(&origin, &d) {
                    Some((_, p, n, i)) => {
                        let c = scene.shade(i, &n);
                        img.extend(c.iter().map(|&x| x as f32));
                        pts.extend([p.x as f32, p.y as f32, p.z as f32]);
                        ok.push(true);
                    }
                    None => {
                        img.extend_from_slice(&bg);
                        pts.extend([0.0; 3]);
                        ok.push(false);
                    }
                }
            }
            (img, pts, ok)
        })
        .collect();
    let mut image = Vec::with_capacity(w * h * 3);
    let mut pointmap = Vec::with_capacity(w * h * 3);
    let mut valid = Vec::with_capacity(w * h);
    for (i, p, o) in rows {
        image.extend(i);
        pointmap.extend(p);
        valid.extend(o);
    }
    Ok(RenderedView {
        image: Image::from_vec(h, w, 3, image)?,
        pointmap: Image::from_vec(h, w, 3, pointmap)?,
        valid,
        camera: camera.clone(),
    })
}

const TRAJECTORY_RETRIES: usize = 16;

/// Orbit arc around the scene centroid. With more than one view the first
/// and last camera differ by at least `motion_min_deg` of rotation.
pub fn sample_trajectory(
    scene: &SceneSpec,
    n_views: usize,
    motion_min_deg: f64,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::validation("trajectory needs at least one view"));
    }
    cfg.validate()?;
    let target = scene.centroid();
    let radius = cfg.orbit_radius * cfg.extent;
    let up = Vec3::new(0.0, -1.0, 0.0);
    let base = Camera::with_fov(cfg.width, cfg.height, cfg.fov_deg);
    for attempt in 0..TRAJECTORY_RETRIES {
        let mut rng = seed::rng(seed, &[stream::TRAJECTORY, attempt as u64]);
        let elev = rng
            .random_range(cfg.elevation_min_deg..=cfg.elevation_max_deg)
            .to_radians();
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let lo = cfg.arc_min_deg.max(motion_min_deg);
        let hi = cfg.arc_max_deg.max(lo);
        let arc = rng.random_range(lo..=hi).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let cams: Result<Vec<Camera>> = (0..n_views)
            .map(|i| {
                let frac = if n_views > 1 { i as f64 / (n_views - 1) as f64 } else { 0.0 };
                let az = start + arc * frac;
                let eye = target
                    + Vec3::new(
                        radius * elev.cos() * az.cos(),
                        -radius * elev.sin(),
                        radius * elev.cos() * az.sin(),
                    );
                let r = look_at(&eye, &target, &up)?;
                Ok(base.clone().with_pose(r, eye))
            })
            .collect();
        let cams = cams?;
        if n_views == 1 {
            return Ok(cams);
        }
        let motion = rotation_angle(&cams[0].rotation, &cams[n_views - 1].rotation).to_degrees();
        if motion >= motion_min_deg {
            return Ok(cams);
        }
    }
    Err(Error::Generation(format!(
        "could not satisfy {motion_min_deg} degrees of camera motion in {TRAJECTORY_RETRIES} attempts"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ViewMeta {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneMeta {
    category: usize,
    has_pointmaps: bool,
    views: Vec<ViewMeta>,
}

impl From<&Camera> for ViewMeta {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }
}

impl From<&ViewMeta> for Camera {
    fn from(m: &ViewMeta) -> Self {
        Camera::new(m.fx, m.fy, m.cx, m.cy, m.width, m.height).with_pose(
            Mat3::from_row_slice(&m.rotation),
            Vec3::from_row_slice(&m.translation),
        )
    }
}

/// One scene as stored on disk (world coordinates, unnormalized).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub category: usize,
    pub views: Vec<RenderedView>,
    /// False for sources without depth; point-map supervision is disabled.
    pub has_pointmaps: bool,
}

pub fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join("scenes").join(format!("{id:05}"))
}

pub fn write_scene(root: &Path, id: usize, rec: &SceneRecord) -> Result<()> {
    let dir = scene_dir(root, id);
    fs::create_dir_all(&dir)?;
    let meta = SceneMeta {
        category: rec.category,
        has_pointmaps: rec.has_pointmaps,
        views: rec.views.iter().map(|v| ViewMeta::from(&v.camera)).collect(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::config(e.to_string()))?;
    write_atomic(&dir.join("meta.cfg"), text.as_bytes())?;
    for (i, v) in rec.views.iter().enumerate() {
        write_container(&dir.join(format!("view_{i:03}.ten")), &v.image.to_array())?;
        write_container(&dir.join(format!("pmap_{i:03}.ten")), &v.pointmap.to_array())?;
        let valid = Array::U8 {
            shape: vec![v.camera.height, v.camera.width],
            data: v.valid.iter().map(|&b| b as u8).collect(),
        };
        write_container(&dir.join(format!("valid_{i:03}.ten")), &valid)?;
    }
    Ok(())
}

pub fn read_scene(root: &Path, id: usize) -> Result<SceneRecord> {
    read_scene_dir(&scene_dir(root, id))
}

pub fn read_scene_dir(dir: &Path) -> Result<SceneRecord> {
    let text = fs::read_to_string(dir.join("meta.cfg"))?;
    let meta: SceneMeta =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", dir.display())))?;
    let mut views = Vec::with_capacity(meta.views.len());
    for (i, vm) in meta.views.iter().enumerate() {
        let camera = Camera::from(vm);
        let image = Image::from_array(&read_container(&dir.join(format!("view_{i:03}.ten")))?)?;
        let (pointmap, valid) = if meta.has_pointmaps {
            let pm = Image::from_array(&read_container(&dir.join(format!("pmap_{i:03}.ten")))?)?;
            let valid = match read_container(&dir.join(format!("valid_{i:03}.ten")))? {
                Array::U8 { data, .. } => data.iter().map(|&b| b != 0).collect(),
                _ => return Err(Error::validation("valid mask must be u8")),
            };
            (pm, valid)
        } else {
            (Image::new(camera.height, camera.width, 3), vec![false; camera.height * camera.width])
        };
        if image.height != camera.height || image.width != camera.width {
            return Err(Error::validation(format!(
                "{}: view {i} is {}x{} but meta says {}x{}",
                dir.display(),
                image.height,
                image.width,
                camera.height,
                camera.width
            )));
        }
        views.push(RenderedView {
            image,
            pointmap,
            valid,
            camera,
        });
    }
    Ok(SceneRecord {
        category: meta.category,
        views,
        has_pointmaps: meta.has_pointmaps,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraList {
    views: Vec<ViewMeta>,
}

/// Cameras as a standalone text file (same fields as scene metadata).
pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let list = CameraList {
        views: cams.iter().map(ViewMeta::from).collect(),
    };
    let text = toml::to_string(&list).map_err(|e| Error::config(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path)?;
    let list: CameraList = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(list.views.iter().map(Camera::from).collect())
}

/// Scene ids present under `root/scenes`, sorted.
pub fn list_scenes(root: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root.join("scenes"))? {
        let entry = entry?;
        if let Some(id) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Sample, trajectory and render one scene.
pub fn generate_scene(
    seed: u64,
    id: usize,
    n_views: usize,
    motion_min_deg: f64,
    cfg: &SceneConfig,
) -> Result<SceneRecord> {
    let scene_seed = seed::derive(seed, &[id as u64]);
    let scene = sample_scene(scene_seed, cfg)?;
    let cams = sample_trajectory(&scene, n_views, motion_min_deg, scene_seed, cfg)?;
    let views = cams
        .iter()
        .map(|c| render_view(&scene, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecord {
        category: scene.category,
        views,
        has_pointmaps: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sphere(z: f64, r: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                kind: PrimitiveKind::Sphere,
                center: Vec3::new(0.0, 0.0, z),
                size: Vec3::new(r, r, r),
                albedo: [0.8, 0.2, 0.4],
            }],
            background: [0.1, 0.2, 0.3],
            category: 0,
        }
    }

    #[test]
    fn sample_scene_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        assert_eq!(sample_scene(7, &cfg).unwrap(), sample_scene(7, &cfg).unwrap());
        for s in 0..1000 {
            let sc = sample_scene(s, &cfg).unwrap();
            sc.validate(cfg.classes).unwrap();
            assert!(sc.category < 10);
        }
    }

    #[test]
    fn empty_ranges_are_config_errors() {
        let cfg = SceneConfig {
            min_primitives: 3,
            max_primitives: 2,
            ..SceneConfig::default()
        };
        assert!(matches!(sample_scene(0, &cfg), Err(Error::Config(_))));
        let cfg = SceneConfig {
            min_size: 1.0,
            max_size: 0.5,
            ..SceneConfig::default()
        };
        assert!(matches!(sample_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        // ray (0,0,1) from origin hits sphere (0,0,4) r=1 at z = 4 - 1 = 3
        let scene = one_sphere(4.0, 1.0);
        let cam = Camera::new(20.0, 20.0, 7.5, 7.5, 14, 14);
        let v = render_view(&scene, &cam).unwrap();
        let i = 7 * 14 + 7;
        assert!(v.valid[i]);
        assert!((v.pointmap.pixel(7, 7)[2] as f64 - 3.0).abs() < 1e-4);
        // corner ray misses the sphere
        assert!(!v.valid[0]);
        assert_eq!(v.image.pixel(0, 0), &[0.1, 0.2, 0.3]);
        assert_eq!(v.pointmap.pixel(0, 0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shading_formula() {
        let scene = one_sphere(4.0, 1.0);
        let n = -light_dir();
        assert_eq!(scene.shade(0, &n), [0.8 * 0.3, 0.2 * 0.3, 0.4 * 0.3]);
        let c = scene.shade(0, &light_dir());
        assert!((c[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pointmap_reprojects_and_round_trips() {
        let cfg = SceneConfig::default();
        let scene = sample_scene(3, &cfg).unwrap();
        let cams = sample_trajectory(&scene, 3, 20.0, 3, &cfg).unwrap();
        for cam in &cams {
            let v = render_view(&scene, cam).unwrap();
            assert!(v.valid.iter().any(|&b| b));
            for y in 0..cam.height {
                for x in 0..cam.width {
                    if !v.valid[y * cam.width + x] {
                        continue;
                    }
                    let p = v.pointmap.pixel(x, y);
                    let p = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                    let (pu, pv, z) = cam.project(&p).unwrap();
                    assert!((pu - (x as f64 + 0.5)).abs() < 0.5 && (pv - (y as f64 + 0.5)).abs() < 0.5);
                    let back = cam.unproject(x, y, z);
                    assert!((back - p).norm() < 1e-5 * (1.0 + p.norm()));
                }
            }
        }
    }

    #[test]
    fn cross_view_consistency() {
        let cfg = SceneConfig::default();
        let scene = sample_scene(11, &cfg).unwrap();
        let cams = sample_trajectory(&scene, 2, 20.0, 11, &cfg).unwrap();
        let a = render_view(&scene, &cams[0]).unwrap();
        let mut checked = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if !a.valid[y * cfg.width + x] {
                    continue;
                }
                let p = a.pointmap.pixel(x, y);
                let p = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                // the second camera's ray through this world point must hit it
                let dir = (p - cams[1].center()).normalize();
                if let Some((_, q, n, i)) = scene.intersect(&cams[1].center(), &dir) {
                    if (q - p).norm() < 1e-4 {
                        checked += 1;
                        let ca = a.image.pixel(x, y);
                        let cb = scene.shade(i, &n);
                        for c in 0..3 {
                            assert!((ca[c] as f64 - cb[c]).abs() < 1e-6);
                        }
                    }
                }
            }
        }
        assert!(checked > 100, "only {checked} co-visible points");
    }

    #[test]
    fn trajectory_constraints() {
        let cfg = SceneConfig::default();
        let scene = sample_scene(5, &cfg).unwrap();
        let one = sample_trajectory(&scene, 1, 1e9, 5, &cfg).unwrap();
        assert_eq!(one.len(), 1);
        let t = sample_trajectory(&scene, 16, 30.0, 5, &cfg).unwrap();
        assert_eq!(t.len(), 16);
        assert!(rotation_angle(&t[0].rotation, &t[15].rotation).to_degrees() >= 30.0);
        assert_eq!(t, sample_trajectory(&scene, 16, 30.0, 5, &cfg).unwrap());
        for c in &t {
            let fwd = c.rotation.column(2).into_owned();
            let to_target = (scene.centroid() - c.center()).normalize();
            assert!((fwd - to_target).norm() < 1e-9);
        }
        assert!(matches!(
            sample_trajectory(&scene, 4, 400.0, 5, &cfg),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            width: 28,
            height: 14,
            ..SceneConfig::default()
        };
        let rec = generate_scene(1, 0, 2, 10.0, &cfg).unwrap();
        write_scene(dir.path(), 0, &rec).unwrap();
        let back = read_scene(dir.path(), 0).unwrap();
        assert_eq!(back, rec);
        assert_eq!(list_scenes(dir.path()).unwrap(), vec![0]);
        let names: Vec<String> = fs::read_dir(scene_dir(dir.path(), 0))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        for n in ["meta.cfg", "view_000.ten", "pmap_001.ten", "valid_001.ten"] {
            assert!(names.contains(&n.to_string()), "missing {n}");
        }
        let cams: Vec<Camera> = rec.views.iter().map(|v| v.camera.clone()).collect();
        let path = dir.path().join("cams.cfg");
        write_cameras(&path, &cams).unwrap();
        assert_eq!(read_cameras(&path).unwrap(), cams);
    }
}
