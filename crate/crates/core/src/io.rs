//! PLY point clouds, binary PPM images and camera JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, PointCloud};

/// Row-major `height × width × 3` RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(
                "image",
                format!("{} values for a {width}×{height} RGB image", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn to_byte(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ply(cloud: &PointCloud) -> String {
    let colors = cloud.colors();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.positions().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = colors {
            let _ = write!(
                s,
                " {} {} {}",
                to_byte(c[3 * i]),
                to_byte(c[3 * i + 1]),
                to_byte(c[3 * i + 2])
            );
        }
        s.push('\n');
    }
    s
}

pub fn decode_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let bad = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| bad("header not terminated".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => {
                return Err(bad(format!("unsupported format {fmt}")));
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|e| bad(format!("vertex count: {e}")))?,
                    );
                }
            }
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|(_, p)| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex lacks x/y/z".into())),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(if rgb.is_some() { 3 * n } else { 0 });
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("expected {n} vertices, found {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("vertex {i}: {e}")))?;
        if vals.len() < props.len() {
            return Err(bad(format!(
                "vertex {i}: {} of {} properties",
                vals.len(),
                props.len()
            )));
        }
        positions.push([vals[x] as f32, vals[y] as f32, vals[z] as f32]);
        if let Some(idx) = rgb {
            for c in idx {
                let v = vals[c];
                colors.push(if props[c].0 == "uchar" || props[c].0 == "uint8" {
                    (v / 255.0) as f32
                } else {
                    v as f32
                });
            }
        }
    }
    let cloud = match rgb {
        Some(_) => PointCloud::with_features(positions, 3, colors),
        None => PointCloud::new(positions),
    };
    cloud.map_err(|e| bad(e.to_string()))
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, encode_ply(cloud).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&text, path)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&c| to_byte(c)));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 image"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let payload = &bytes[(pos + 1).min(bytes.len())..];
    if payload.len() != w * h * 3 {
        return Err(bad("payload size does not match header"));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::new(w, h, data)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let cam: Camera = read_json(path)?;
    cam.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cam)
}

/// Quantizes colors the way a PLY round trip would.
pub fn quantize_colors(cloud: &PointCloud) -> Result<PointCloud> {
    match cloud.features() {
        Some(f) if cloud.channels() == 3 => {
            let q = f.iter().map(|&c| to_byte(c) as f32 / 255.0).collect();
            PointCloud::with_features(cloud.positions().to_vec(), 3, q)
        }
        _ => Ok(cloud.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_is_exact_for_positions() {
        let cloud = PointCloud::with_features(
            vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 7.25, -0.0001]],
            3,
            vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6],
        )
        .unwrap();
        let back = decode_ply(&encode_ply(&cloud), Path::new("mem")).unwrap();
        assert_eq!(back.positions(), cloud.positions());
        for (a, b) in back.colors().unwrap().iter().zip(cloud.colors().unwrap()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn ply_without_colors() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let text = encode_ply(&cloud);
        assert!(!text.contains("red"));
        let back = decode_ply(&text, Path::new("mem")).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn truncated_ply_is_a_format_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        let err = decode_ply(text, Path::new("t.ply")).unwrap_err();
        assert!(err.to_string().contains("t.ply"), "{err}");
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(2, 1, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        let back = decode_ppm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.width, 2);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }
}
