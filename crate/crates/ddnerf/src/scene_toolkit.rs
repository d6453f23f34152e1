//! Synthetic scene generation: pinhole cameras, analytic ground-truth
//! rendering by dense quadrature, a registry of standard test scenes, and
//! dataset persistence (manifest + PPM/PGM files).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{DdError, Result};
use crate::radiance_field::{AnalyticField, Primitive, Ray};
use crate::ray_distribution::{normalize_to_pdf, RayIntervalSet};
use crate::volume_rendering::{
    composite_color_over, compositing_weights, expected_depth_discrete, opacity_from_density,
    GrayMap, Image, Rgb,
};

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// A pinhole camera with its image resolution and depth bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in radians, in (0, pi).
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(DdError::InvalidInput(format!("fov {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(DdError::InvalidInput("zero resolution".into()));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(DdError::InvalidInput("need 0 < near < far".into()));
        }
        Ok(())
    }

    /// Orthonormal camera basis (right, up, forward).
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let forward = normalize3(sub(self.look_at, self.position));
        let right = normalize3(cross(forward, self.up));
        let up = cross(right, forward);
        (right, up, forward)
    }

    /// Pinhole ray through the center of pixel (px, py); direction unit-norm.
    /// Fractional coordinates address sub-pixel positions.
    pub fn generate_ray(&self, px: f64, py: f64) -> Ray {
        let (right, up, forward) = self.basis();
        let tan_half = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        // NDC in [-1, 1], y pointing up in world space
        let x = ((px + 0.5) / self.width as f64 * 2.0 - 1.0) * tan_half * aspect;
        let y = (1.0 - (py + 0.5) / self.height as f64 * 2.0) * tan_half;
        let dir = normalize3([
            forward[0] + x * right[0] + y * up[0],
            forward[1] + x * right[1] + y * up[1],
            forward[2] + x * right[2] + y * up[2],
        ]);
        Ray { origin: self.position, direction: dir, near: self.near, far: self.far }
    }
}

/// A named analytic scene with its camera rig parameters.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub field: AnalyticField,
    pub background: Rgb,
    pub near: f64,
    pub far: f64,
    pub unbounded: bool,
    pub cameras: Vec<CameraModel>,
}

/// Ground-truth render of one camera by dense uniform ray marching.
/// Returns the image and the per-pixel expected depth in ray units
/// (rays that accumulate no opacity report `far`).
pub fn render_ground_truth(
    field: &AnalyticField,
    camera: &CameraModel,
    background: Rgb,
    n_quad: usize,
) -> Result<(Image, Vec<f64>)> {
    camera.validate()?;
    let mut img = Image::new(camera.width, camera.height);
    let mut depth = vec![camera.far; camera.width * camera.height];
    let intervals = RayIntervalSet::uniform(camera.near, camera.far, n_quad)?;
    let mut densities = vec![0.0; n_quad];
    let mut colors = vec![[0.0; 3]; n_quad];
    let mut alphas = vec![0.0; n_quad];
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = camera.generate_ray(px as f64, py as f64);
            for i in 0..n_quad {
                let p = ray.point_at(intervals.midpoint(i));
                let (d, c) = field.density_color(p);
                densities[i] = d;
                colors[i] = c;
                alphas[i] = opacity_from_density(d, intervals.delta(i))?;
            }
            let weights = compositing_weights(&alphas);
            let color = composite_color_over(&weights, &colors, background)?;
            img.set(px, py, color);
            let pdf = normalize_to_pdf(&weights, &intervals)?;
            if !pdf.degenerate() {
                depth[py * camera.width + px] = expected_depth_discrete(&pdf);
            }
        }
    }
    Ok((img, depth))
}

fn circle_rig(
    count: usize,
    radius: f64,
    height: f64,
    target: [f64; 3],
    fov_y: f64,
    res: (usize, usize),
    near: f64,
    far: f64,
) -> Vec<CameraModel> {
    (0..count)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            CameraModel {
                position: [radius * a.cos(), height, radius * a.sin()],
                look_at: target,
                up: [0.0, 1.0, 0.0],
                fov_y,
                width: res.0,
                height: res.1,
                near,
                far,
            }
        })
        .collect()
}

fn arc_rig(
    count: usize,
    target: [f64; 3],
    fov_y: f64,
    res: (usize, usize),
    near: f64,
    far: f64,
) -> Vec<CameraModel> {
    // forward-facing arc: cameras spread in x (and slightly in y) on the
    // z = 0 plane, all aimed at the target
    (0..count)
        .map(|i| {
            let s = if count > 1 { i as f64 / (count - 1) as f64 * 2.0 - 1.0 } else { 0.0 };
            CameraModel {
                position: [1.2 * s, 0.35 * (2.0 * s).sin(), 0.0],
                look_at: target,
                up: [0.0, 1.0, 0.0],
                fov_y,
                width: res.0,
                height: res.1,
                near,
                far,
            }
        })
        .collect()
}

/// The built-in scene registry. Resolutions come from the caller so datasets
/// can be generated at any size.
pub fn build_standard_scenes(res: (usize, usize)) -> Vec<SceneSpec> {
    let mut scenes = Vec::new();

    // "wall": a single opaque plane, the depth-resolution testbed
    // striped so that depth is pinned by parallax everywhere, not just at
    // silhouette edges
    let mut wall_prims = Vec::new();
    for i in 0..4 {
        let x0 = -0.8 + 0.4 * i as f64;
        wall_prims.push(Primitive::Box {
            min: [x0, -0.8, 2.0],
            max: [x0 + 0.4, 0.8, 2.15],
            density: 120.0,
            color: if i % 2 == 0 { [0.85, 0.55, 0.25] } else { [0.5, 0.28, 0.14] },
        });
    }
    // backdrop plane: every ray terminates on a learnable surface
    for i in 0..4 {
        let x0 = -4.0 + 2.0 * i as f64;
        wall_prims.push(Primitive::Box {
            min: [x0, -4.0, 4.0],
            max: [x0 + 2.0, 4.0, 4.2],
            density: 120.0,
            color: if i % 2 == 0 { [0.2, 0.5, 0.55] } else { [0.12, 0.3, 0.36] },
        });
    }
    let wall_field = AnalyticField::new(wall_prims);
    scenes.push(SceneSpec {
        name: "wall".into(),
        field: wall_field,
        background: [0.05, 0.08, 0.12],
        near: 0.5,
        far: 7.0,
        unbounded: false,
        cameras: arc_rig(20, [0.0, 0.0, 2.07], 0.9, res, 0.5, 7.0),
    });

    // "spheres": three colored spheres at staggered depths (occlusions)
    let spheres_field = AnalyticField::new(vec![
        Primitive::Sphere {
            center: [-0.55, 0.0, 0.25],
            radius: 0.5,
            density: 60.0,
            color: [0.9, 0.15, 0.1],
        },
        Primitive::Sphere {
            center: [0.4, 0.15, -0.35],
            radius: 0.42,
            density: 60.0,
            color: [0.1, 0.75, 0.2],
        },
        Primitive::Sphere {
            center: [0.1, -0.45, 0.55],
            radius: 0.35,
            density: 60.0,
            color: [0.15, 0.3, 0.9],
        },
    ]);
    scenes.push(SceneSpec {
        name: "spheres".into(),
        field: spheres_field,
        background: [0.04, 0.05, 0.09],
        near: 1.0,
        far: 8.0,
        unbounded: false,
        cameras: circle_rig(20, 3.4, 0.9, [0.0, 0.0, 0.0], 0.72, res, 1.0, 8.0),
    });

    // "cluttered": many small primitives, the fine-detail testbed
    let mut prims = Vec::new();
    let palette = [
        [0.9, 0.2, 0.2],
        [0.2, 0.85, 0.3],
        [0.25, 0.35, 0.95],
        [0.95, 0.8, 0.2],
        [0.8, 0.3, 0.85],
        [0.2, 0.8, 0.8],
    ];
    for i in 0..7 {
        let a = i as f64 * 2.399963; // golden angle spiral
        let r = 0.15 + 0.75 * (i as f64 / 7.0);
        prims.push(Primitive::Sphere {
            center: [r * a.cos(), 0.5 * (a * 1.7).sin(), r * a.sin()],
            radius: 0.12 + 0.05 * ((i % 3) as f64),
            density: 80.0,
            color: palette[i % palette.len()],
        });
    }
    for i in 0..3 {
        let a = 1.1 + i as f64 * 2.0;
        let c = [0.7 * a.cos(), -0.35 + 0.2 * i as f64, 0.7 * a.sin()];
        prims.push(Primitive::Box {
            min: [c[0] - 0.12, c[1] - 0.12, c[2] - 0.12],
            max: [c[0] + 0.12, c[1] + 0.12, c[2] + 0.12],
            density: 80.0,
            color: palette[(i + 3) % palette.len()],
        });
    }
    scenes.push(SceneSpec {
        name: "cluttered".into(),
        field: AnalyticField::new(prims),
        background: [0.06, 0.06, 0.08],
        near: 1.0,
        far: 6.5,
        unbounded: false,
        cameras: circle_rig(20, 3.4, 0.8, [0.0, 0.0, 0.0], 0.72, res, 1.0, 6.5),
    });

    // "unbounded": content inside the unit sphere plus distant primitives
    let unbounded_field = AnalyticField::new(vec![
        Primitive::Sphere {
            center: [0.0, -0.1, 0.0],
            radius: 0.35,
            density: 70.0,
            color: [0.9, 0.5, 0.15],
        },
        Primitive::Sphere {
            center: [0.55, 0.2, 0.45],
            radius: 0.2,
            density: 70.0,
            color: [0.25, 0.6, 0.9],
        },
        Primitive::Sphere {
            center: [6.0, 1.0, -4.0],
            radius: 2.2,
            density: 40.0,
            color: [0.3, 0.8, 0.35],
        },
        Primitive::Sphere {
            center: [-14.0, -2.0, 10.0],
            radius: 5.0,
            density: 40.0,
            color: [0.75, 0.25, 0.65],
        },
        Primitive::Sphere {
            center: [2.0, 0.5, 24.0],
            radius: 8.0,
            density: 40.0,
            color: [0.85, 0.8, 0.3],
        },
    ]);
    scenes.push(SceneSpec {
        name: "unbounded".into(),
        field: unbounded_field,
        background: [0.02, 0.02, 0.05],
        near: 0.35,
        far: 45.0,
        unbounded: true,
        cameras: circle_rig(20, 2.2, 0.4, [0.0, 0.0, 0.0], 0.8, res, 0.35, 45.0),
    });

    scenes
}

pub fn scene_by_name(name: &str, res: (usize, usize)) -> Result<SceneSpec> {
    build_standard_scenes(res)
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let names: Vec<String> =
                build_standard_scenes((8, 8)).into_iter().map(|s| s.name).collect();
            DdError::InvalidInput(format!(
                "unknown scene '{name}'; available scenes: {}",
                names.join(", ")
            ))
        })
}

/// A generated dataset: cameras, ground-truth images and depth maps, and a
/// train/validation split.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub scene_name: String,
    pub background: Rgb,
    pub near: f64,
    pub far: f64,
    pub unbounded: bool,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<Image>,
    /// Depth in ray units, dequantized from the stored 16-bit maps.
    pub depths: Vec<Vec<f64>>,
    pub val_indices: Vec<usize>,
    pub n_quad: usize,
}

impl SyntheticDataset {
    /// Renders a scene's ground truth. Every 10th camera (starting from the
    /// last) goes to the validation split.
    pub fn generate(scene: &SceneSpec, n_quad: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(scene.cameras.len());
        let mut depths = Vec::with_capacity(scene.cameras.len());
        for cam in &scene.cameras {
            let (img, dep) = render_ground_truth(&scene.field, cam, scene.background, n_quad)?;
            images.push(img);
            depths.push(dep);
        }
        let count = scene.cameras.len();
        let n_val = (count / 10).max(1);
        let val_indices: Vec<usize> = (0..n_val).map(|i| count - 1 - i * 10).collect();
        Ok(Self {
            scene_name: scene.name.clone(),
            background: scene.background,
            near: scene.near,
            far: scene.far,
            unbounded: scene.unbounded,
            cameras: scene.cameras.clone(),
            images,
            depths,
            val_indices,
            n_quad,
        })
    }

    /// Assembles a dataset from externally rendered images and depths (same
    /// camera order as the scene), applying the standard validation split.
    pub fn from_renders(
        scene: &SceneSpec,
        images: Vec<Image>,
        depths: Vec<Vec<f64>>,
        n_quad: usize,
    ) -> Result<Self> {
        if images.len() != scene.cameras.len() || depths.len() != scene.cameras.len() {
            return Err(DdError::DimensionMismatch(
                "render count does not match camera count".into(),
            ));
        }
        let count = scene.cameras.len();
        let n_val = (count / 10).max(1);
        let val_indices: Vec<usize> = (0..n_val).map(|i| count - 1 - i * 10).collect();
        Ok(Self {
            scene_name: scene.name.clone(),
            background: scene.background,
            near: scene.near,
            far: scene.far,
            unbounded: scene.unbounded,
            cameras: scene.cameras.clone(),
            images,
            depths,
            val_indices,
            n_quad,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|i| !self.val_indices.contains(i)).collect()
    }

    fn quantize_depth(&self, depth: &[f64], width: usize, height: usize) -> GrayMap {
        let mut g = GrayMap::new(width, height);
        for (v, &d) in g.values.iter_mut().zip(depth) {
            *v = ((d - self.near) / (self.far - self.near)).clamp(0.0, 1.0);
        }
        g
    }

    /// Writes the dataset directory: manifest.txt, cameras/cam_%03d.txt,
    /// images/img_%03d.ppm, depth/dep_%03d.pgm. Files are written to a
    /// temporary name and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("cameras"))?;
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("depth"))?;

        let mut manifest = String::new();
        let _ = writeln!(manifest, "scene={}", self.scene_name);
        let _ = writeln!(
            manifest,
            "background={},{},{}",
            self.background[0], self.background[1], self.background[2]
        );
        let _ = writeln!(manifest, "near={}", self.near);
        let _ = writeln!(manifest, "far={}", self.far);
        let _ = writeln!(manifest, "unbounded={}", self.unbounded);
        let _ = writeln!(manifest, "n_cameras={}", self.cameras.len());
        let _ = writeln!(manifest, "n_quad={}", self.n_quad);
        let val: Vec<String> = self.val_indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(manifest, "val_indices={}", val.join(","));
        write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;

        for (i, cam) in self.cameras.iter().enumerate() {
            let mut s = String::new();
            let v3 = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
            let _ = writeln!(s, "position={}", v3(cam.position));
            let _ = writeln!(s, "look_at={}", v3(cam.look_at));
            let _ = writeln!(s, "up={}", v3(cam.up));
            let _ = writeln!(s, "fov={}", cam.fov_y);
            let _ = writeln!(s, "width={}", cam.width);
            let _ = writeln!(s, "height={}", cam.height);
            let _ = writeln!(s, "near={}", cam.near);
            let _ = writeln!(s, "far={}", cam.far);
            write_atomic(&dir.join("cameras").join(format!("cam_{i:03}.txt")), s.as_bytes())?;

            let mut buf = Vec::new();
            self.images[i].write_ppm(&mut buf)?;
            write_atomic(&dir.join("images").join(format!("img_{i:03}.ppm")), &buf)?;

            let g = self.quantize_depth(&self.depths[i], cam.width, cam.height);
            let mut buf = Vec::new();
            g.write_pgm(&mut buf)?;
            write_atomic(&dir.join("depth").join(format!("dep_{i:03}.pgm")), &buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = parse_kv_file(&dir.join("manifest.txt"))?;
        let get = |k: &str| -> Result<&String> {
            manifest
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v)
                .ok_or_else(|| DdError::Format(format!("manifest missing key {k}")))
        };
        let scene_name = get("scene")?.clone();
        let background = parse_vec3(get("background")?)?;
        let near: f64 = parse_num(get("near")?)?;
        let far: f64 = parse_num(get("far")?)?;
        let unbounded = get("unbounded")? == "true";
        let n_cameras: usize = parse_num(get("n_cameras")?)?;
        let n_quad: usize = parse_num(get("n_quad")?)?;
        let val_indices: Vec<usize> = if get("val_indices")?.is_empty() {
            Vec::new()
        } else {
            get("val_indices")?
                .split(',')
                .map(parse_num)
                .collect::<Result<_>>()?
        };

        let mut cameras = Vec::with_capacity(n_cameras);
        let mut images = Vec::with_capacity(n_cameras);
        let mut depths = Vec::with_capacity(n_cameras);
        for i in 0..n_cameras {
            let kv = parse_kv_file(&dir.join("cameras").join(format!("cam_{i:03}.txt")))?;
            let find = |k: &str| -> Result<&String> {
                kv.iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v)
                    .ok_or_else(|| DdError::Format(format!("camera file missing key {k}")))
            };
            let cam = CameraModel {
                position: parse_vec3(find("position")?)?,
                look_at: parse_vec3(find("look_at")?)?,
                up: parse_vec3(find("up")?)?,
                fov_y: parse_num(find("fov")?)?,
                width: parse_num(find("width")?)?,
                height: parse_num(find("height")?)?,
                near: parse_num(find("near")?)?,
                far: parse_num(find("far")?)?,
            };
            let img = Image::load_ppm(&dir.join("images").join(format!("img_{i:03}.ppm")))?;
            let g = GrayMap::load_pgm(&dir.join("depth").join(format!("dep_{i:03}.pgm")))?;
            let depth = g.values.iter().map(|v| near + v * (far - near)).collect();
            cameras.push(cam);
            images.push(img);
            depths.push(depth);
        }
        Ok(Self {
            scene_name,
            background,
            near,
            far,
            unbounded,
            cameras,
            images,
            depths,
            val_indices,
            n_quad,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_kv_text(&text))
}

pub(crate) fn parse_kv_text(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(s: impl AsRef<str>) -> Result<T> {
    s.as_ref()
        .trim()
        .parse()
        .map_err(|_| DdError::Format(format!("cannot parse number '{}'", s.as_ref())))
}

fn parse_vec3(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(DdError::Format(format!("expected 3 components in '{s}'")));
    }
    Ok([parse_num(parts[0])?, parse_num(parts[1])?, parse_num(parts[2])?])
}
