//! Synthetic sprite dataset with known generative factors.
//!
//! Each image shows one colored shape on a constant background. Pose
//! (x, y, rotation) is the dominant factor group with shared support across
//! the dataset; identity (shape, color) is per-image. Pose can be drawn
//! from a truncated normal centered on the canonical pose or uniformly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DismoError, Result};
use crate::nn::sample_standard_normal;

pub const PALETTE: [[u8; 3]; 6] = [
    [228, 64, 64],
    [72, 200, 96],
    [72, 112, 228],
    [228, 200, 64],
    [200, 72, 200],
    [72, 200, 200],
];

pub const BACKGROUND: [u8; 3] = [24, 24, 24];

/// Fraction of the image size used as the sprite's bounding radius.
const SPRITE_RADIUS_FRAC: f32 = 0.18;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Square,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| DismoError::Invalid(format!("shape id {id} out of range")))
    }

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Normal,
    Uniform,
}

/// Ground-truth generative factors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    /// Horizontal position in [-1, 1].
    pub x: f32,
    /// Vertical position in [-1, 1].
    pub y: f32,
    /// Rotation in [0, 2*pi).
    pub rot: f32,
    pub shape_id: usize,
    pub color_id: usize,
    pub sampling_mode: SamplingMode,
    /// 1 for filled sprites, 2 for the outline domain.
    pub domain: u8,
}

impl FactorRecord {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.x) || !(-1.0..=1.0).contains(&self.y) {
            return Err(DismoError::Invalid(format!(
                "position ({}, {}) outside [-1, 1]",
                self.x, self.y
            )));
        }
        if !self.rot.is_finite() || self.rot < 0.0 || self.rot >= std::f32::consts::TAU {
            return Err(DismoError::Invalid(format!(
                "rotation {} outside [0, 2*pi)",
                self.rot
            )));
        }
        ShapeKind::from_id(self.shape_id)?;
        if self.color_id >= PALETTE.len() {
            return Err(DismoError::Invalid(format!(
                "color id {} out of range",
                self.color_id
            )));
        }
        if self.domain != 1 && self.domain != 2 {
            return Err(DismoError::Invalid(format!("domain {}", self.domain)));
        }
        Ok(())
    }

    /// Content factors only; style taken from `style`.
    pub fn with_style_of(&self, style: &FactorRecord) -> FactorRecord {
        FactorRecord {
            shape_id: style.shape_id,
            color_id: style.color_id,
            domain: style.domain,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub content_sampling: SamplingMode,
    pub n_domains: u8,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 1000,
            image_size: 64,
            content_sampling: SamplingMode::Normal,
            n_domains: 1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 2 {
            return Err(DismoError::config("n_images", "need at least 2 images"));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(DismoError::config(
                "image_size",
                "must be a power of two >= 32",
            ));
        }
        if self.n_domains != 1 && self.n_domains != 2 {
            return Err(DismoError::config("n_domains", "must be 1 or 2"));
        }
        if self.n_domains == 2 && self.n_images % 2 != 0 {
            return Err(DismoError::config(
                "n_images",
                "two-domain mode needs an even count",
            ));
        }
        Ok(())
    }
}

/// Sprite radius in pixels for a given image size.
pub fn sprite_radius(image_size: usize) -> f32 {
    SPRITE_RADIUS_FRAC * image_size as f32
}

/// Map a normalized coordinate in [-1, 1] to the pixel position of the
/// sprite centroid. The range is inset by the sprite radius so the shape
/// is never clipped and its centroid lands exactly on the mapped point.
pub fn factor_to_pixel(v: f32, image_size: usize) -> f32 {
    let margin = sprite_radius(image_size) + 1.0;
    margin + (v + 1.0) * 0.5 * (image_size as f32 - 1.0 - 2.0 * margin)
}

fn point_in_polygon(u: f32, v: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > v) != (yj > v)) && (u < (xj - xi) * (v - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn shape_polygon(shape: ShapeKind, r: f32) -> Vec<(f32, f32)> {
    match shape {
        ShapeKind::Triangle => (0..3)
            .map(|i| {
                let a = std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::TAU / 3.0;
                (r * a.cos(), -r * a.sin())
            })
            .collect(),
        ShapeKind::Star => (0..10)
            .map(|i| {
                let a = std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::PI / 5.0;
                let rr = if i % 2 == 0 { r } else { 0.45 * r };
                (rr * a.cos(), -rr * a.sin())
            })
            .collect(),
        _ => unreachable!(),
    }
}

fn inside_shape(shape: ShapeKind, u: f32, v: f32, r: f32, scale: f32) -> bool {
    let (u, v) = (u / scale, v / scale);
    match shape {
        ShapeKind::Ellipse => {
            let a = r;
            let b = 0.6 * r;
            (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
        }
        ShapeKind::Square => {
            let half = 0.78 * r;
            u.abs() <= half && v.abs() <= half
        }
        ShapeKind::Triangle | ShapeKind::Star => {
            point_in_polygon(u, v, &shape_polygon(shape, r))
        }
    }
}

/// Deterministic rendering of one sprite. Domain 2 draws an outline ring
/// instead of a filled shape.
pub fn render_sprite(factors: &FactorRecord, image_size: usize) -> Result<RgbImage> {
    factors.validate()?;
    let shape = ShapeKind::from_id(factors.shape_id)?;
    let color = PALETTE[factors.color_id];
    let r = sprite_radius(image_size);
    let cx = factor_to_pixel(factors.x, image_size);
    let cy = factor_to_pixel(factors.y, image_size);
    let (sin, cos) = factors.rot.sin_cos();

    let mut img = RgbImage::new(image_size as u32, image_size as u32);
    let ss = SUPERSAMPLE as f32;
    for py in 0..image_size {
        for px in 0..image_size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = px as f32 + (sx as f32 + 0.5) / ss - 0.5;
                    let fy = py as f32 + (sy as f32 + 0.5) / ss - 0.5;
                    let dx = fx - cx;
                    let dy = fy - cy;
                    // rotate into the shape frame
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    let inside = if factors.domain == 2 {
                        inside_shape(shape, u, v, r, 1.0) && !inside_shape(shape, u, v, r, 0.62)
                    } else {
                        inside_shape(shape, u, v, r, 1.0)
                    };
                    if inside {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f32 / (ss * ss);
            let mut px_col = [0u8; 3];
            for c in 0..3 {
                let v = BACKGROUND[c] as f32 * (1.0 - alpha) + color[c] as f32 * alpha;
                px_col[c] = v.round() as u8;
            }
            img.put_pixel(px as u32, py as u32, image::Rgb(px_col));
        }
    }
    Ok(img)
}

/// Coverage-weighted centroid of the non-background pixels, in pixel
/// coordinates. `None` when the foreground is empty.
pub fn foreground_centroid(img: &RgbImage) -> Option<(f32, f32)> {
    let mut wsum = 0.0f64;
    let (mut cx, mut cy) = (0.0f64, 0.0f64);
    for (x, y, p) in img.enumerate_pixels() {
        let w: f64 = (0..3)
            .map(|c| (p.0[c] as f64 - BACKGROUND[c] as f64).abs())
            .sum();
        if w > 10.0 {
            wsum += w;
            cx += w * x as f64;
            cy += w * y as f64;
        }
    }
    if wsum == 0.0 {
        None
    } else {
        Some(((cx / wsum) as f32, (cy / wsum) as f32))
    }
}

/// Draw from a normal(0, std) truncated to [-1, 1] by rejection.
pub fn truncated_normal(rng: &mut ChaCha20Rng, std: f32) -> f32 {
    loop {
        let v = sample_standard_normal(rng) * std;
        if (-1.0..=1.0).contains(&v) {
            return v;
        }
    }
}

fn wrap_rot(v: f32) -> f32 {
    let tau = std::f32::consts::TAU;
    let mut r = v % tau;
    if r < 0.0 {
        r += tau;
    }
    if r >= tau {
        r = 0.0;
    }
    r
}

/// Seed for the per-image RNG stream, so rendering order never matters.
fn image_rng(seed: u64, index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn sample_factors(spec: &DatasetSpec, index: usize) -> FactorRecord {
    let mut rng = image_rng(spec.seed, index);
    let (x, y, rot) = match spec.content_sampling {
        SamplingMode::Normal => {
            let x = truncated_normal(&mut rng, 0.4);
            let y = truncated_normal(&mut rng, 0.4);
            let rot = wrap_rot(truncated_normal(&mut rng, 0.4) * std::f32::consts::PI);
            (x, y, rot)
        }
        SamplingMode::Uniform => {
            let x = rng.random_range(-1.0f32..=1.0);
            let y = rng.random_range(-1.0f32..=1.0);
            let rot = rng.random_range(0.0f32..std::f32::consts::TAU);
            (x, y, wrap_rot(rot))
        }
    };
    let shape_id = rng.random_range(0..ShapeKind::ALL.len());
    let color_id = rng.random_range(0..PALETTE.len());
    let domain = if spec.n_domains == 2 && index % 2 == 1 {
        2
    } else {
        1
    };
    FactorRecord {
        x,
        y,
        rot,
        shape_id,
        color_id,
        sampling_mode: spec.content_sampling,
        domain,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub file: String,
    #[serde(flatten)]
    pub factors: FactorRecord,
}

/// Render the full dataset to `out_dir` as PNG files plus a line-delimited
/// manifest. Byte-identical across runs with the same spec.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DismoError::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let factors = sample_factors(spec, i);
        let img = render_sprite(&factors, spec.image_size)?;
        let file = format!("img_{i:05}.png");
        img.save(out_dir.join(&file))?;
        rows.push(ManifestRow {
            index: i,
            file,
            factors,
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest_path).map_err(|e| DismoError::io(&manifest_path, e))?;
    for row in &rows {
        let line = serde_json::to_string(row)
            .map_err(|e| DismoError::Dataset(format!("manifest encode: {e}")))?;
        writeln!(f, "{line}").map_err(|e| DismoError::io(&manifest_path, e))?;
    }
    Ok(rows)
}

/// In-memory dataset: images as CHW float arrays in [-1, 1].
pub struct Dataset {
    pub images: Vec<Array3<f32>>,
    pub factors: Option<Vec<FactorRecord>>,
    pub image_size: usize,
    pub root: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn factors_required(&self) -> Result<&[FactorRecord]> {
        self.factors
            .as_deref()
            .ok_or_else(|| DismoError::Dataset("ground-truth factors unavailable".into()))
    }
}

pub fn image_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut a = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            a[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    a
}

pub fn array_to_image(a: &Array3<f32>) -> RgbImage {
    let (_, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = ((a[[c, y, x]] + 1.0) * 0.5 * 255.0).clamp(0.0, 255.0);
                px[c] = v.round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Load a generated dataset, or a plain folder of PNGs without factors.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.jsonl");
    if manifest_path.exists() {
        let f = fs::File::open(&manifest_path).map_err(|e| DismoError::io(&manifest_path, e))?;
        let mut rows = Vec::new();
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| DismoError::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|e| DismoError::Corrupt {
                path: manifest_path.clone(),
                message: format!("line {}: {e}", ln + 1),
            })?;
            rows.push(row);
        }
        let n_files = fs::read_dir(path)
            .map_err(|e| DismoError::io(path, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count();
        if n_files != rows.len() {
            return Err(DismoError::Dataset(format!(
                "manifest lists {} images but directory holds {n_files}",
                rows.len()
            )));
        }
        let mut images = Vec::with_capacity(rows.len());
        let mut factors = Vec::with_capacity(rows.len());
        for row in &rows {
            let p = path.join(&row.file);
            let img = image::open(&p)?.to_rgb8();
            images.push(image_to_array(&img));
            factors.push(row.factors);
        }
        let image_size = images
            .first()
            .map(|a| a.shape()[1])
            .ok_or_else(|| DismoError::Dataset("empty dataset".into()))?;
        Ok(Dataset {
            images,
            factors: Some(factors),
            image_size,
            root: path.to_path_buf(),
        })
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| DismoError::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DismoError::Dataset(format!(
                "no PNG images under {}",
                path.display()
            )));
        }
        let mut images = Vec::with_capacity(files.len());
        for p in &files {
            let img = image::open(p)?.to_rgb8();
            images.push(image_to_array(&img));
        }
        let image_size = images[0].shape()[1];
        Ok(Dataset {
            images,
            factors: None,
            image_size,
            root: path.to_path_buf(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: f32, y: f32, rot: f32, shape: usize, color: usize) -> FactorRecord {
        FactorRecord {
            x,
            y,
            rot,
            shape_id: shape,
            color_id: color,
            sampling_mode: SamplingMode::Normal,
            domain: 1,
        }
    }

    #[test]
    fn centered_square_lands_at_image_center() {
        let img = render_sprite(&rec(0.0, 0.0, 0.0, 1, 0), 64).unwrap();
        let (cx, cy) = foreground_centroid(&img).unwrap();
        assert!((cx - 31.5).abs() <= 1.0, "cx = {cx}");
        assert!((cy - 31.5).abs() <= 1.0, "cy = {cy}");
    }

    #[test]
    fn right_edge_ellipse_centroid_at_mapped_column() {
        let img = render_sprite(&rec(1.0, 0.0, 0.0, 0, 1), 64).unwrap();
        let (cx, _) = foreground_centroid(&img).unwrap();
        let expect = factor_to_pixel(1.0, 64);
        assert!((cx - expect).abs() <= 1.0, "cx = {cx}, expect {expect}");
    }

    #[test]
    fn rotated_triangle_centroid_matches_oracle() {
        let f = rec(0.5, -0.5, std::f32::consts::FRAC_PI_4, 2, 2);
        let img = render_sprite(&f, 64).unwrap();
        let (cx, cy) = foreground_centroid(&img).unwrap();
        let (ex, ey) = (factor_to_pixel(0.5, 64), factor_to_pixel(-0.5, 64));
        assert!((cx - ex).abs() <= 1.0, "cx = {cx}, expect {ex}");
        assert!((cy - ey).abs() <= 1.0, "cy = {cy}, expect {ey}");
    }

    #[test]
    fn out_of_range_factors_rejected() {
        assert!(render_sprite(&rec(1.5, 0.0, 0.0, 0, 0), 64).is_err());
        assert!(render_sprite(&rec(0.0, 0.0, 7.0, 0, 0), 64).is_err());
        assert!(render_sprite(&rec(0.0, 0.0, 0.0, 9, 0), 64).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_order_free() {
        let spec = DatasetSpec {
            n_images: 10,
            seed: 7,
            ..Default::default()
        };
        let a = sample_factors(&spec, 3);
        let _ = sample_factors(&spec, 2);
        let b = sample_factors(&spec, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_normal_mean_near_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 10_000;
        let mean: f32 = (0..n).map(|_| truncated_normal(&mut rng, 0.4)).sum::<f32>() / n as f32;
        assert!(mean.abs() < 0.02, "mean = {mean}");
    }

    #[test]
    fn two_domain_split_is_even() {
        let spec = DatasetSpec {
            n_images: 20,
            n_domains: 2,
            seed: 1,
            ..Default::default()
        };
        let n2 = (0..20)
            .filter(|&i| sample_factors(&spec, i).domain == 2)
            .count();
        assert_eq!(n2, 10);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = DatasetSpec {
            n_images: 1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        spec.n_images = 10;
        spec.image_size = 48;
        assert!(spec.validate().is_err());
        spec.image_size = 64;
        spec.n_domains = 2;
        spec.n_images = 11;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn image_array_round_trip() {
        let img = render_sprite(&rec(0.2, -0.3, 1.0, 3, 4), 32).unwrap();
        let back = array_to_image(&image_to_array(&img));
        assert_eq!(img, back);
    }
}
