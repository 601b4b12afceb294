//! Point clouds, spatial queries, sampling and the pinhole camera.

use rand::Rng;

use crate::error::{Error, Result};

pub type Point = [f32; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Positions with optional per-point feature channels (colors in `[0, 1]`
/// when there are three).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point>,
    channels: usize,
    features: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid(
                "point cloud",
                "a cloud needs at least one point",
            ));
        }
        if !positions.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid("point cloud", "non-finite position"));
        }
        Ok(Self {
            positions,
            channels: 0,
            features: None,
        })
    }

    pub fn with_features(
        positions: Vec<Point>,
        channels: usize,
        features: Vec<f32>,
    ) -> Result<Self> {
        let mut cloud = Self::new(positions)?;
        if channels == 0 || features.len() != channels * cloud.len() {
            return Err(Error::invalid(
                "point cloud",
                format!(
                    "{} feature values for {} points × {channels} channels",
                    features.len(),
                    cloud.len()
                ),
            ));
        }
        cloud.channels = channels;
        cloud.features = Some(features);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> Option<&[f32]> {
        self.features.as_deref()
    }

    pub fn feature(&self, i: usize) -> Option<&[f32]> {
        self.features
            .as_ref()
            .map(|f| &f[i * self.channels..(i + 1) * self.channels])
    }

    /// Features when they are three color channels.
    pub fn colors(&self) -> Option<&[f32]> {
        (self.channels == 3)
            .then(|| self.features.as_deref())
            .flatten()
    }

    pub fn without_features(&self) -> Self {
        Self {
            positions: self.positions.clone(),
            channels: 0,
            features: None,
        }
    }

    /// Points at `idx`, in that order, carrying their features.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let positions = idx.iter().map(|&i| self.positions[i]).collect();
        match &self.features {
            Some(f) => {
                let c = self.channels;
                let feats = idx
                    .iter()
                    .flat_map(|&i| f[i * c..(i + 1) * c].iter().copied())
                    .collect();
                Self::with_features(positions, c, feats)
            }
            None => Self::new(positions),
        }
    }

    pub fn map_positions(&self, f: impl FnMut(&Point) -> Point) -> Result<Self> {
        let positions = self.positions.iter().map(f).collect();
        match &self.features {
            Some(feats) => Self::with_features(positions, self.channels, feats.clone()),
            None => Self::new(positions),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        c.map(|v| v / self.positions.len() as f64)
    }
}

/// Max distance from the centroid to any point.
pub fn bounding_sphere_radius(cloud: &PointCloud) -> f64 {
    let c = cloud.centroid();
    cloud
        .positions()
        .iter()
        .map(|p| {
            let d: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            d.sqrt()
        })
        .fold(0.0, f64::max)
}

/// Centering and isotropic scaling applied before diffusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    /// Centroid to origin, bounding-sphere radius to 1.
    pub fn fit(cloud: &PointCloud) -> Self {
        let r = bounding_sphere_radius(cloud);
        Self {
            center: cloud.centroid(),
            scale: if r > 1e-12 { r } else { 1.0 },
        }
    }

    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        std::array::from_fn(|a| ((p[a] as f64 - self.center[a]) / self.scale) as f32)
    }

    pub fn invert(&self, p: &Point) -> Point {
        std::array::from_fn(|a| (p[a] as f64 * self.scale + self.center[a]) as f32)
    }
}

/// k nearest neighbours for a batch of queries, row-major `queries × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn row(&self, q: usize) -> (&[u32], &[f64]) {
        (
            &self.indices[q * self.k..(q + 1) * self.k],
            &self.distances[q * self.k..(q + 1) * self.k],
        )
    }
}

/// Uniform grid over a point set with CSR cell storage.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    points: Vec<Point>,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    cell_start: Vec<u32>,
    order: Vec<u32>,
}

impl KnnIndex {
    /// Cell size is the bounding-sphere radius over ∛N.
    pub fn build(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("knn index", "no points"));
        }
        let cloud = PointCloud::new(points.to_vec())?;
        let r = bounding_sphere_radius(&cloud);
        let n = points.len() as f64;
        let cell = if r > 0.0 { r / n.cbrt() } else { 1.0 };
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        let dims: [usize; 3] =
            std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut index = Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cell_start: Vec::new(),
            order: Vec::new(),
        };
        let ncell = dims.iter().product::<usize>();
        let keys: Vec<usize> = points
            .iter()
            .map(|p| index.flat(index.cell_of(p)))
            .collect();
        let mut counts = vec![0u32; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        index.cell_start = counts;
        index.order = order;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Grid cell containing `p`, clamped to the grid.
    fn cell_of(&self, p: &Point) -> [usize; 3] {
        std::array::from_fn(|a| {
            let c = ((p[a] as f64 - self.origin[a]) / self.cell).floor();
            c.clamp(0.0, (self.dims[a] - 1) as f64) as usize
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn visit_cell(&self, c: [isize; 3], q: &Point, best: &mut Vec<(f64, u32)>, k: usize) {
        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as isize) {
            return;
        }
        let f = self.flat(c.map(|v| v as usize));
        for &i in &self.order[self.cell_start[f] as usize..self.cell_start[f + 1] as usize] {
            let d = dist2(q, &self.points[i as usize]);
            let cand = (d, i);
            if best.len() == k && cand >= best[k - 1] {
                continue;
            }
            let pos = best.partition_point(|b| *b < cand);
            best.insert(pos, cand);
            best.truncate(k);
        }
    }

    fn query_one(&self, q: &Point, k: usize, best: &mut Vec<(f64, u32)>) {
        best.clear();
        let c0 = self.cell_of(q).map(|v| v as isize);
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        for r in 0..=max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    let on_face = dx.abs() == r || dy.abs() == r;
                    if on_face {
                        for dz in -r..=r {
                            self.visit_cell([c0[0] + dx, c0[1] + dy, c0[2] + dz], q, best, k);
                        }
                    } else {
                        self.visit_cell([c0[0] + dx, c0[1] + dy, c0[2] - r], q, best, k);
                        if r > 0 {
                            self.visit_cell([c0[0] + dx, c0[1] + dy, c0[2] + r], q, best, k);
                        }
                    }
                }
            }
            // Cells beyond ring r are at least r·cell away from q.
            if best.len() == k {
                let bound = r as f64 * self.cell;
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
        }
    }

    /// Neighbours ascending by distance, ties by lower point index.
    pub fn knn(&self, queries: &[Point], k: usize) -> Result<Neighbors> {
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(
                "knn_query",
                format!("k = {k} must be in 1..={}", self.points.len()),
            ));
        }
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut distances = Vec::with_capacity(queries.len() * k);
        let mut best = Vec::with_capacity(k + 1);
        for q in queries {
            self.query_one(q, k, &mut best);
            for &(d, i) in &best {
                indices.push(i);
                distances.push(d.sqrt());
            }
        }
        Ok(Neighbors {
            k,
            indices,
            distances,
        })
    }
}

pub fn knn_query(index: &KnnIndex, queries: &[Point], k: usize) -> Result<Neighbors> {
    index.knn(queries, k)
}

/// Distances below this snap interpolation to the coincident source.
pub const COINCIDENT_EPS: f64 = 1e-8;

/// Row-major `targets × k` source indices and normalized `1/d²` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights {
    pub k: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

pub fn idw_weights(source: &KnnIndex, targets: &[Point], k: usize) -> Result<InterpWeights> {
    let nb = source.knn(targets, k)?;
    let mut weights = Vec::with_capacity(nb.distances.len());
    for q in 0..targets.len() {
        let (_, d) = nb.row(q);
        if d[0] < COINCIDENT_EPS {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let raw: Vec<f64> = d.iter().map(|d| 1.0 / (d * d)).collect();
        let total: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / total));
    }
    Ok(InterpWeights {
        k,
        indices: nb.indices,
        weights,
    })
}

/// Inverse-squared-distance average of the `k` nearest source features.
pub fn inverse_distance_interpolate(
    source: &PointCloud,
    targets: &[Point],
    k: usize,
) -> Result<Vec<f32>> {
    let feats = source
        .features()
        .ok_or_else(|| Error::invalid("inverse_distance_interpolate", "source has no features"))?;
    let c = source.channels();
    let index = KnnIndex::build(source.positions())?;
    let w = idw_weights(&index, targets, k)?;
    let mut out = vec![0.0f32; targets.len() * c];
    for q in 0..targets.len() {
        let mut acc = vec![0.0f64; c];
        for j in 0..k {
            let (i, wt) = (w.indices[q * k + j] as usize, w.weights[q * k + j]);
            for ch in 0..c {
                acc[ch] += wt * feats[i * c + ch] as f64;
            }
        }
        for ch in 0..c {
            out[q * c + ch] = acc[ch] as f32;
        }
    }
    Ok(out)
}

/// Greedy farthest-point order starting from `start`; ties by lower index.
pub fn farthest_point_order(points: &[Point], m: usize, start: usize) -> Result<Vec<u32>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(
            "fps_sample",
            format!("m = {m} must be in 1..={n}"),
        ));
    }
    if start >= n {
        return Err(Error::invalid(
            "fps_sample",
            format!("start {start} out of range"),
        ));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur as u32);
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &points[cur]);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > far {
                far = nearest[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(chosen)
}

/// Farthest-point sample whose first index is drawn from `rng`.
pub fn fps_sample(cloud: &PointCloud, m: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if m == 0 || m > cloud.len() {
        return Err(Error::invalid(
            "fps_sample",
            format!("m = {m} must be in 1..={}", cloud.len()),
        ));
    }
    let start = rng.random_range(0..cloud.len());
    farthest_point_order(cloud.positions(), m, start)
}

/// Index of the point farthest from the centroid. Used as a permutation
/// invariant FPS anchor.
pub fn canonical_start(points: &[Point]) -> usize {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a] as f64).sum::<f64>() / n);
    let cp = c.map(|v| v as f32);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &cp);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Pinhole camera. `rotation`/`translation` map world to camera frame:
/// `x_c = R·x_w + t`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub in_frustum: bool,
}

impl Projection {
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.floor() as usize, self.v.floor() as usize)
    }
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Pose looking from `eye` toward `target` with `up` roughly vertical;
    /// camera +z is the viewing direction, +y points down in the image.
    pub fn look_at(mut self, eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let norm = |a: [f64; 3]| {
            let l = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            [a[0] / l, a[1] / l, a[2] / l]
        };
        let z = norm(sub(target, eye));
        let x = norm(cross(z, up));
        let y = cross(z, x);
        self.rotation = [x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]];
        let r = &self.rotation;
        self.translation = std::array::from_fn(|i| {
            -(r[3 * i] * eye[0] + r[3 * i + 1] * eye[1] + r[3 * i + 2] * eye[2])
        });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("camera", msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return bad(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            ));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-5 {
                    return bad("rotation is not orthonormal".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: &Point) -> [f64; 3] {
        let r = &self.rotation;
        let p = p.map(|v| v as f64);
        std::array::from_fn(|i| {
            r[3 * i] * p[0] + r[3 * i + 1] * p[1] + r[3 * i + 2] * p[2] + self.translation[i]
        })
    }

    pub fn to_world_frame(&self, pc: [f64; 3]) -> Point {
        let r = &self.rotation;
        let d: [f64; 3] = std::array::from_fn(|i| pc[i] - self.translation[i]);
        std::array::from_fn(|j| (r[j] * d[0] + r[3 + j] * d[1] + r[6 + j] * d[2]) as f32)
    }

    pub fn project(&self, p: &Point) -> Projection {
        let [x, y, z] = self.to_camera_frame(p);
        if z <= 0.0 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: z,
                in_frustum: false,
            };
        }
        let u = self.fx * x / z + self.cx;
        let v = self.fy * y / z + self.cy;
        let in_frustum =
            (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        Projection {
            u,
            v,
            depth: z,
            in_frustum,
        }
    }
}

pub fn project_points(camera: &Camera, points: &[Point]) -> Vec<Projection> {
    points.iter().map(|p| camera.project(p)).collect()
}

/// Z-buffer from splatting every in-frustum point over a disc of
/// `radius_px` pixels (pixel centers at half-integers). Returns the
/// buffer and, per pixel, the index of the nearest splat.
pub fn splat_zbuffer(
    camera: &Camera,
    proj: &[Projection],
    radius_px: f64,
) -> (Vec<f64>, Vec<Option<u32>>) {
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![None; w * h];
    let r = radius_px.max(0.0);
    for (i, p) in proj.iter().enumerate() {
        if !p.in_frustum {
            continue;
        }
        let (pu, pv) = p.pixel();
        let x0 = (p.u - r).floor().max(0.0) as usize;
        let x1 = ((p.u + r).floor() as usize).min(w - 1);
        let y0 = (p.v - r).floor().max(0.0) as usize;
        let y1 = ((p.v + r).floor() as usize).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let du = px as f64 + 0.5 - p.u;
                let dv = py as f64 + 0.5 - p.v;
                let own = px == pu && py == pv;
                if !own && du * du + dv * dv > r * r {
                    continue;
                }
                let cell = py * w + px;
                if p.depth < depth[cell] {
                    depth[cell] = p.depth;
                    owner[cell] = Some(i as u32);
                }
            }
        }
    }
    (depth, owner)
}

/// A point is visible when its depth is within `depth_tol` of the z-buffer
/// at its own pixel.
pub fn visibility_mask(
    camera: &Camera,
    points: &[Point],
    radius_px: f64,
    depth_tol: f64,
) -> Vec<bool> {
    let proj = project_points(camera, points);
    let (zbuf, _) = splat_zbuffer(camera, &proj, radius_px);
    proj.iter()
        .map(|p| {
            if !p.in_frustum {
                return false;
            }
            let (pu, pv) = p.pixel();
            p.depth <= zbuf[pv * camera.width + pu] + depth_tol
        })
        .collect()
}

/// Bilinear taps at continuous pixel coordinate `(u, v)` on a `w × h` grid
/// whose samples sit at pixel centers. Returns `(flat index, weight)` × 4.
pub fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [(u32, f64); 4] {
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| (yy * w + xx) as u32;
    [
        (at(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (at(x1, y0), fx * (1.0 - fy)),
        (at(x0, y1), (1.0 - fx) * fy),
        (at(x1, y1), fx * fy),
    ]
}
