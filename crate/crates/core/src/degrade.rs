//! Synthetic scenes and the defects applied to them: RGB-D back-projection,
//! patch removal, subsampling, Gaussian noise and color stripping.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::RngStreams;

use crate::error::{Error, Result};
use crate::geometry::{
    bounding_sphere_radius, project_points, splat_zbuffer, Camera, KnnIndex, Point, PointCloud,
};
use crate::io::RgbImage;

/// Back-projects every pixel with `0 < depth ≤ depth_max`; pixel `(x, y)`
/// maps to camera-frame `((x − cx)·d/fx, (y − cy)·d/fy, d)`.
pub fn rgbd_to_cloud(
    rgb: &RgbImage,
    depth: &[f32],
    camera: &Camera,
    depth_max: f64,
) -> Result<PointCloud> {
    let (w, h) = (rgb.width, rgb.height);
    if depth.len() != w * h {
        return Err(Error::invalid(
            "rgbd_to_cloud",
            format!("{} depths for a {w}×{h} image", depth.len()),
        ));
    }
    if depth.iter().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::invalid(
            "rgbd_to_cloud",
            "depth must be finite and nonnegative",
        ));
    }
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = depth[y * w + x] as f64;
            if d <= 0.0 || d > depth_max {
                continue;
            }
            let pc = [
                (x as f64 - camera.cx) * d / camera.fx,
                (y as f64 - camera.cy) * d / camera.fy,
                d,
            ];
            positions.push(camera.to_world_frame(pc));
            colors.extend(rgb.pixel(x, y));
        }
    }
    if positions.is_empty() {
        return Err(Error::invalid(
            "rgbd_to_cloud",
            "no pixel has a depth within range",
        ));
    }
    PointCloud::with_features(positions, 3, colors)
}

/// Removes the `count` surviving points nearest to `seed` (itself included).
fn remove_ball(cloud: &PointCloud, alive: &mut [bool], seed: usize, count: usize) -> Result<()> {
    let survivors: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    let pts: Vec<Point> = survivors.iter().map(|&i| cloud.positions()[i]).collect();
    let index = KnnIndex::build(&pts)?;
    let nb = index.knn(&[cloud.positions()[seed]], count.min(pts.len()))?;
    for &j in &nb.indices {
        alive[survivors[j as usize]] = false;
    }
    Ok(())
}

fn keep_alive(cloud: &PointCloud, alive: &[bool]) -> Result<PointCloud> {
    let idx: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    cloud.select(&idx)
}

fn patch_size(n: usize, fraction: f64, patch_count: usize) -> usize {
    (fraction * n as f64 / patch_count as f64).ceil() as usize
}

fn check_fraction(fraction: f64, patch_count: usize) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(
            "remove_patches",
            format!("fraction {fraction} must be in [0, 1)"),
        ));
    }
    if patch_count == 0 {
        return Err(Error::invalid(
            "remove_patches",
            "patch_count must be positive",
        ));
    }
    Ok(())
}

/// Deletes `patch_count` kNN balls around random surviving seeds, each of
/// `⌈fraction·N/patch_count⌉` points. At least one point always survives.
pub fn remove_patches(
    cloud: &PointCloud,
    fraction: f64,
    patch_count: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    check_fraction(fraction, patch_count)?;
    if fraction == 0.0 {
        return Ok(cloud.clone());
    }
    let n = cloud.len();
    let size = patch_size(n, fraction, patch_count);
    let mut alive = vec![true; n];
    for _ in 0..patch_count {
        let survivors: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
        if survivors.len() <= 1 {
            break;
        }
        let seed = survivors[rng.random_range(0..survivors.len())];
        remove_ball(cloud, &mut alive, seed, size.min(survivors.len() - 1))?;
    }
    keep_alive(cloud, &alive)
}

/// One patch around a chosen seed point.
pub fn remove_patch_at(cloud: &PointCloud, seed: usize, fraction: f64) -> Result<PointCloud> {
    check_fraction(fraction, 1)?;
    let n = cloud.len();
    let mut alive = vec![true; n];
    let size = patch_size(n, fraction, 1).min(n - 1);
    if size > 0 {
        remove_ball(cloud, &mut alive, seed, size)?;
    }
    keep_alive(cloud, &alive)
}

/// Uniform subset of `round(keep_ratio·N)` points in original order.
pub fn subsample(cloud: &PointCloud, keep_ratio: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(
            "subsample",
            format!("keep_ratio {keep_ratio} must be in (0, 1]"),
        ));
    }
    let m = (keep_ratio * cloud.len() as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid("subsample", "no point would survive"));
    }
    if m == cloud.len() {
        return Ok(cloud.clone());
    }
    let mut idx = sample(rng, cloud.len(), m).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Isotropic Gaussian displacement with standard deviation `sigma`.
pub fn add_noise_sigma(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(
            "add_noise",
            format!("sigma {sigma} must be nonnegative"),
        ));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let g: Vec<f64> = standard_normal(rng, cloud.len() * 3);
    let mut i = 0;
    cloud.map_positions(|p| {
        let out = std::array::from_fn(|a| (p[a] as f64 + sigma * g[i + a]) as f32);
        i += 3;
        out
    })
}

/// Noise with `σ = noise_level · bounding_sphere_radius(cloud)`.
pub fn add_noise(cloud: &PointCloud, noise_level: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(noise_level >= 0.0) {
        return Err(Error::invalid(
            "add_noise",
            format!("noise level {noise_level} must be nonnegative"),
        ));
    }
    add_noise_sigma(cloud, noise_level * bounding_sphere_radius(cloud), rng)
}

pub fn strip_color(cloud: &PointCloud) -> PointCloud {
    cloud.without_features()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub remove_fraction: f64,
    pub patch_count: usize,
    pub keep_ratio: f64,
    pub noise_level: f64,
    pub strip_color: bool,
    pub seed: u64,
}

impl Default for DegradationSpec {
    /// Identity: the input equals the target.
    fn default() -> Self {
        Self {
            remove_fraction: 0.0,
            patch_count: 3,
            keep_ratio: 1.0,
            noise_level: 0.0,
            strip_color: false,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn combination(seed: u64) -> Self {
        Self {
            remove_fraction: 0.3,
            patch_count: 3,
            keep_ratio: 0.25,
            noise_level: 0.02,
            strip_color: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.remove_fraction) {
            return bad(format!(
                "remove_fraction {} not in [0, 1)",
                self.remove_fraction
            ));
        }
        if self.patch_count == 0 {
            return bad("patch_count must be positive".into());
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio {} not in (0, 1]", self.keep_ratio));
        }
        if !(0.0..=0.05).contains(&self.noise_level) {
            return bad(format!("noise_level {} not in [0, 0.05]", self.noise_level));
        }
        Ok(())
    }

    /// Applies remove → subsample → noise → strip. Noise scale is the
    /// radius of `cloud` before any defect.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.validate()?;
        let streams = RngStreams::new(self.seed);
        let radius = bounding_sphere_radius(cloud);
        let mut out = remove_patches(
            cloud,
            self.remove_fraction,
            self.patch_count,
            &mut streams.stream("degrade.remove"),
        )?;
        out = subsample(
            &out,
            self.keep_ratio,
            &mut streams.stream("degrade.subsample"),
        )?;
        out = add_noise_sigma(
            &out,
            self.noise_level * radius,
            &mut streams.stream("degrade.noise"),
        )?;
        if self.strip_color {
            out = strip_color(&out);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: PointCloud,
    pub image: RgbImage,
    pub camera: Camera,
    pub target: PointCloud,
}

pub fn make_pair(
    gt: &PointCloud,
    image: &RgbImage,
    camera: &Camera,
    spec: &DegradationSpec,
) -> Result<SamplePair> {
    Ok(SamplePair {
        input: spec.apply(gt)?,
        image: image.clone(),
        camera: camera.clone(),
        target: gt.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Cube,
    SphereShell,
    TwoRoom,
    CheckerTerrain,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Cube,
        SceneKind::SphereShell,
        SceneKind::TwoRoom,
        SceneKind::CheckerTerrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Cube => "cube",
            SceneKind::SphereShell => "sphere-shell",
            SceneKind::TwoRoom => "two-room",
            SceneKind::CheckerTerrain => "checker-terrain",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene kind '{s}'")))
    }
}

pub const MIN_SCENE_POINTS: usize = 64;

/// Axis-aligned rectangle sampled by area: `origin + u·a + v·b`.
struct Quad {
    origin: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    color: fn([f64; 3]) -> [f32; 3],
}

impl Quad {
    fn area(&self) -> f64 {
        let n = [
            self.a[1] * self.b[2] - self.a[2] * self.b[1],
            self.a[2] * self.b[0] - self.a[0] * self.b[2],
            self.a[0] * self.b[1] - self.a[1] * self.b[0],
        ];
        (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }
}

fn sample_quads(quads: &[Quad], n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<f32>) {
    let areas: Vec<f64> = quads.iter().map(Quad::area).collect();
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut q = &quads[quads.len() - 1];
        for (quad, &a) in quads.iter().zip(&areas) {
            if pick < a {
                q = quad;
                break;
            }
            pick -= a;
        }
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let p: [f64; 3] = std::array::from_fn(|i| q.origin[i] + u * q.a[i] + v * q.b[i]);
        positions.push(p.map(|x| x as f32));
        colors.extend((q.color)(p));
    }
    (positions, colors)
}

fn cube_color(p: [f64; 3]) -> [f32; 3] {
    let c = |x: f64| (0.5 + 0.45 * x) as f32;
    [c(p[0]), c(p[1]), c(p[2])]
}

fn cube_quads() -> Vec<Quad> {
    let mut quads = Vec::new();
    for axis in 0..3 {
        for side in [-1.0, 1.0] {
            let mut origin = [-1.0; 3];
            origin[axis] = side;
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            a[(axis + 1) % 3] = 2.0;
            b[(axis + 2) % 3] = 2.0;
            quads.push(Quad {
                origin,
                a,
                b,
                color: cube_color,
            });
        }
    }
    quads
}

fn checker(p: [f64; 3], cell: f64) -> bool {
    ((p[0] / cell).floor() + (p[1] / cell).floor()) as i64 % 2 == 0
}

fn room_quads() -> Vec<Quad> {
    fn floor(p: [f64; 3]) -> [f32; 3] {
        if checker(p, 0.5) {
            [0.75, 0.7, 0.6]
        } else {
            [0.35, 0.3, 0.25]
        }
    }
    fn left_wall(p: [f64; 3]) -> [f32; 3] {
        [0.8, 0.3 + 0.2 * p[2] as f32, 0.25]
    }
    fn right_wall(p: [f64; 3]) -> [f32; 3] {
        [0.2, 0.45 + 0.2 * p[2] as f32, 0.8]
    }
    fn divider(_: [f64; 3]) -> [f32; 3] {
        [0.9, 0.9, 0.85]
    }
    let h = 1.0;
    vec![
        Quad {
            origin: [-2.0, -1.0, 0.0],
            a: [4.0, 0.0, 0.0],
            b: [0.0, 2.0, 0.0],
            color: floor,
        },
        Quad {
            origin: [-2.0, 1.0, 0.0],
            a: [2.0, 0.0, 0.0],
            b: [0.0, 0.0, h],
            color: left_wall,
        },
        Quad {
            origin: [0.0, 1.0, 0.0],
            a: [2.0, 0.0, 0.0],
            b: [0.0, 0.0, h],
            color: right_wall,
        },
        Quad {
            origin: [-2.0, -1.0, 0.0],
            a: [0.0, 2.0, 0.0],
            b: [0.0, 0.0, h],
            color: left_wall,
        },
        Quad {
            origin: [2.0, -1.0, 0.0],
            a: [0.0, 2.0, 0.0],
            b: [0.0, 0.0, h],
            color: right_wall,
        },
        // Divider with a doorway between y = −0.2 and y = 0.4.
        Quad {
            origin: [0.0, -1.0, 0.0],
            a: [0.0, 0.8, 0.0],
            b: [0.0, 0.0, h],
            color: divider,
        },
        Quad {
            origin: [0.0, 0.4, 0.0],
            a: [0.0, 0.6, 0.0],
            b: [0.0, 0.0, h],
            color: divider,
        },
    ]
}

fn sphere_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<f32>) {
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    while positions.len() < n {
        let g: Vec<f64> = standard_normal(rng, 3);
        let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if len < 1e-9 {
            continue;
        }
        let p = [g[0] / len, g[1] / len, g[2] / len];
        positions.push(p.map(|x| x as f32));
        let band = (0.5 + 0.5 * (3.0 * PI * p[2]).cos()) as f32;
        colors.extend([
            0.2 + 0.7 * band,
            0.3 + 0.3 * (p[0] as f32 + 1.0) / 2.0,
            0.9 - 0.6 * band,
        ]);
    }
    (positions, colors)
}

fn terrain_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<f32>) {
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.5..1.5);
        let y: f64 = rng.random_range(-1.5..1.5);
        let z = 0.3 * (1.7 * x).sin() * (1.3 * y).cos();
        positions.push([x as f32, y as f32, z as f32]);
        let shade = (0.8 + 0.5 * z) as f32;
        colors.extend(if checker([x, y, z], 0.5) {
            [0.3 * shade, 0.7 * shade, 0.3 * shade]
        } else {
            [0.8 * shade, 0.75 * shade, 0.5 * shade]
        });
    }
    (positions, colors)
}

/// Camera on a circle above the scene looking at its centroid.
fn scene_camera(cloud: &PointCloud, size: usize, rng: &mut ChaCha8Rng) -> Result<Camera> {
    let c = cloud.centroid();
    let r = bounding_sphere_radius(cloud).max(1e-6);
    let azimuth = rng.random_range(0.0..2.0 * PI);
    let dist = 2.6 * r;
    let elevation: f64 = 0.5;
    let eye = [
        c[0] + dist * elevation.cos() * azimuth.cos(),
        c[1] + dist * elevation.cos() * azimuth.sin(),
        c[2] + dist * elevation.sin(),
    ];
    // Half-angle subtended by the bounding sphere, with a small margin.
    let half = (1.0 / 2.6f64).asin() * 1.1;
    let f = (size as f64 / 2.0) / half.tan();
    let centre = size as f64 / 2.0;
    Camera::new(f, f, centre, centre, size, size)?.look_at(eye, c, [0.0, 0.0, 1.0])
}

/// Splat render with the nearest point winning each pixel; black background.
pub fn render(cloud: &PointCloud, camera: &Camera, radius_px: f64) -> Result<RgbImage> {
    let colors = cloud
        .colors()
        .ok_or_else(|| Error::invalid("render", "cloud has no colors"))?;
    let proj = project_points(camera, cloud.positions());
    let (_, owner) = splat_zbuffer(camera, &proj, radius_px);
    let mut img = RgbImage::filled(camera.width, camera.height, [0.0; 3]);
    for (cell, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            let i = *i as usize;
            img.set_pixel(
                cell % camera.width,
                cell / camera.width,
                [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
            );
        }
    }
    Ok(img)
}

pub const RENDER_RADIUS_PX: f64 = 1.0;

/// A colored ground-truth cloud, its splat render and the camera.
pub fn synth_scene(
    kind: SceneKind,
    n_gt: usize,
    seed: u64,
    image_size: usize,
) -> Result<(PointCloud, RgbImage, Camera)> {
    if n_gt < MIN_SCENE_POINTS {
        return Err(Error::invalid(
            "synth_scene",
            format!("n_gt = {n_gt} is below {MIN_SCENE_POINTS}"),
        ));
    }
    let streams = RngStreams::new(seed);
    let mut rng = streams.stream(&format!("scene.{}", kind.name()));
    let (positions, colors) = match kind {
        SceneKind::Cube => sample_quads(&cube_quads(), n_gt, &mut rng),
        SceneKind::TwoRoom => sample_quads(&room_quads(), n_gt, &mut rng),
        SceneKind::SphereShell => sphere_points(n_gt, &mut rng),
        SceneKind::CheckerTerrain => terrain_points(n_gt, &mut rng),
    };
    let cloud = PointCloud::with_features(positions, 3, colors)?;
    let camera = scene_camera(&cloud, image_size, &mut streams.stream("scene.camera"))?;
    let image = render(&cloud, &camera, RENDER_RADIUS_PX)?;
    Ok((cloud, image, camera))
}
