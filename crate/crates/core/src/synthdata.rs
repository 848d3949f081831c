//! Deterministic procedural multi-view "portrait" scenes.
//!
//! A head is an ellipse on screen whose surface is parameterized by
//! longitude (around the vertical axis) and normalized height. Facial
//! features live at fixed object-space longitudes, so yawing the head moves
//! them along a sine arc and hides the ones that rotate past the limb.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

pub const GENERATOR_VERSION: &str = "procedural-heads/1";
pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];
pub const MAX_VIEWS: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Indices into [`IdentityParams::geometry`].
pub mod geom {
    pub const HEAD_WIDTH: usize = 0;
    pub const HEAD_HEIGHT: usize = 1;
    pub const EYE_SPACING: usize = 2;
    pub const NOSE_LENGTH: usize = 3;
    pub const HAIR_EXTENT: usize = 4;
    pub const MOUTH_WIDTH: usize = 5;
    pub const EYE_SIZE: usize = 6;
    pub const FEATURE_DROP: usize = 7;
    pub const COUNT: usize = 8;
}

/// Offsets of the RGB triples in [`IdentityParams::palette`].
pub mod palette {
    pub const SKIN: usize = 0;
    pub const HAIR: usize = 3;
    pub const EYE: usize = 6;
    pub const BACKGROUND: usize = 9;
    pub const COUNT: usize = 12;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub seed: u64,
    /// Unitless shape controls in `[0, 1]`, see [`geom`].
    pub geometry: [f32; geom::COUNT],
    /// Skin, hair, eye and background colors, see [`palette`].
    pub palette: [f32; palette::COUNT],
    /// Skin, hair-strand and skin-detail frequencies in cycles per image width.
    pub texture_freqs: [f32; 3],
}

impl IdentityParams {
    fn rgb(&self, offset: usize) -> [f32; 3] {
        [
            self.palette[offset],
            self.palette[offset + 1],
            self.palette[offset + 2],
        ]
    }
}

/// Distribution identities are drawn from. The broad regime covers the full
/// geometry range; the narrow regime models a shifted target domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRegime {
    pub geometry_min: f32,
    pub geometry_max: f32,
    pub texture_scale: f32,
}

impl IdentityRegime {
    pub const BROAD: IdentityRegime = IdentityRegime {
        geometry_min: 0.0,
        geometry_max: 1.0,
        texture_scale: 1.0,
    };
    pub const NARROW_DETAILED: IdentityRegime = IdentityRegime {
        geometry_min: 0.25,
        geometry_max: 0.75,
        texture_scale: 2.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.geometry_min)
            && (0.0..=1.0).contains(&self.geometry_max)
            && self.geometry_min <= self.geometry_max
            && self.texture_scale.is_finite()
            && self.texture_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid identity regime {self:?}"
            )))
        }
    }
}

impl Default for IdentityRegime {
    fn default() -> Self {
        Self::BROAD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees, positive turns the face toward +x.
    pub yaw: f32,
    /// Degrees, positive moves features up.
    pub pitch: f32,
    /// Scale factor; larger values shrink the head.
    pub distance: f32,
}

impl CameraPose {
    pub const FRONTAL: CameraPose = CameraPose {
        yaw: 0.0,
        pitch: 0.0,
        distance: 1.0,
    };

    pub fn yaw(yaw: f32) -> Self {
        CameraPose {
            yaw,
            ..Self::FRONTAL
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.yaw) {
            return Err(Error::validation(format!(
                "yaw {} outside [-90, 90]",
                self.yaw
            )));
        }
        if !(-20.0..=20.0).contains(&self.pitch) {
            return Err(Error::validation(format!(
                "pitch {} outside [-20, 20]",
                self.pitch
            )));
        }
        if !(self.distance.is_finite() && self.distance > 0.0) {
            return Err(Error::validation(format!(
                "distance {} must be positive",
                self.distance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    pub image: Image,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub identity: IdentityParams,
    pub reference: Image,
    pub targets: Vec<TargetView>,
}

impl SceneBundle {
    pub fn view_count(&self) -> usize {
        self.targets.len()
    }
}

pub fn sample_identity(seed: u64) -> IdentityParams {
    sample_identity_in(seed, &IdentityRegime::BROAD)
}

pub fn sample_identity_in(seed: u64, regime: &IdentityRegime) -> IdentityParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = regime.geometry_max - regime.geometry_min;
    let mut geometry = [0.0; geom::COUNT];
    for g in &mut geometry {
        *g = (regime.geometry_min + span * rng.random::<f32>()).clamp(0.0, 1.0);
    }
    let mut pal = [0.0; palette::COUNT];
    let tone: f32 = rng.random();
    let light = [0.96, 0.82, 0.71];
    let dark = [0.38, 0.24, 0.16];
    for c in 0..3 {
        let jitter = rng.random_range(-0.04..0.04);
        pal[palette::SKIN + c] = (light[c] + (dark[c] - light[c]) * tone + jitter).clamp(0.0, 1.0);
    }
    let hair_brightness = rng.random_range(0.15..0.9);
    for c in 0..3 {
        pal[palette::HAIR + c] = (hair_brightness * rng.random_range(0.35..1.0f32)).clamp(0.0, 1.0);
    }
    for c in 0..3 {
        pal[palette::EYE + c] = rng.random_range(0.05..0.7);
    }
    for c in 0..3 {
        pal[palette::BACKGROUND + c] = rng.random_range(0.25..0.95);
    }
    let s = regime.texture_scale;
    let texture_freqs = [
        s * rng.random_range(2.0..5.0),
        s * rng.random_range(6.0..12.0),
        s * rng.random_range(3.0..6.0),
    ];
    IdentityParams {
        seed,
        geometry,
        palette: pal,
        texture_freqs,
    }
}

/// Texture phase `k` of an identity, derived from its seed.
fn phase(seed: u64, k: u64) -> f32 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32 * 2.0 * PI
}

/// Screen-space geometry of one head shared by the renderer and the layout oracle.
struct HeadFrame {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    yaw: f32,
    pitch_shift: f32,
}

impl HeadFrame {
    fn new(id: &IdentityParams, pose: &CameraPose) -> Self {
        let g = &id.geometry;
        HeadFrame {
            cx: 0.0,
            cy: 0.08,
            a: 0.40 + 0.14 * g[geom::HEAD_WIDTH],
            b: 0.50 + 0.14 * g[geom::HEAD_HEIGHT],
            yaw: pose.yaw.to_radians(),
            pitch_shift: 0.5 * pose.pitch.to_radians().sin(),
        }
    }

    /// Object-space (longitude, height) and view longitude of a screen point on the head.
    fn surface(&self, u: f32, v: f32) -> Option<(f32, f32, f32, f32)> {
        let xn = (u - self.cx) / self.a;
        let yn = (v - self.cy) / self.b;
        if xn * xn + yn * yn >= 1.0 {
            return None;
        }
        let radius = (1.0 - yn * yn).sqrt();
        let view_lon = (xn / radius).clamp(-1.0, 1.0).asin();
        Some((view_lon - self.yaw, yn - self.pitch_shift, view_lon, radius))
    }

    /// Screen point of object-space (longitude, height), if facing the camera.
    fn project(&self, lon: f32, height: f32) -> Option<(f32, f32)> {
        let view_lon = lon + self.yaw;
        if view_lon.abs() >= PI / 2.0 {
            return None;
        }
        let yn = height + self.pitch_shift;
        if yn.abs() >= 1.0 {
            return None;
        }
        let radius = (1.0 - yn * yn).sqrt();
        Some((
            self.cx + self.a * radius * view_lon.sin(),
            self.cy + self.b * yn,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::LeftEye,
        Feature::RightEye,
        Feature::Nose,
        Feature::Mouth,
    ];
}

/// Object-space placement of the facial features.
struct FeatureSet {
    eye_lon: f32,
    eye_height: f32,
    eye_rx: f32,
    eye_ry: f32,
    nose_height: f32,
    nose_len: f32,
    nose_rx: f32,
    mouth_height: f32,
    mouth_half_width: f32,
    hair_line: f32,
    hair_side_lon: f32,
}

impl FeatureSet {
    fn new(id: &IdentityParams) -> Self {
        let g = &id.geometry;
        let drop = 0.08 * g[geom::FEATURE_DROP];
        FeatureSet {
            eye_lon: 0.24 + 0.18 * g[geom::EYE_SPACING],
            eye_height: -0.14 + drop,
            eye_rx: 0.11 + 0.05 * g[geom::EYE_SIZE],
            eye_ry: 0.06 + 0.03 * g[geom::EYE_SIZE],
            nose_height: 0.10 + drop + 0.04 * g[geom::NOSE_LENGTH],
            nose_len: 0.09 + 0.08 * g[geom::NOSE_LENGTH],
            nose_rx: 0.08,
            mouth_height: 0.38 + drop,
            mouth_half_width: 0.16 + 0.16 * g[geom::MOUTH_WIDTH],
            hair_line: -0.62 + 0.22 * g[geom::HAIR_EXTENT],
            hair_side_lon: (100.0 - 28.0 * g[geom::HAIR_EXTENT]).to_radians(),
        }
    }

    fn center(&self, f: Feature) -> (f32, f32) {
        match f {
            Feature::LeftEye => (-self.eye_lon, self.eye_height),
            Feature::RightEye => (self.eye_lon, self.eye_height),
            Feature::Nose => (0.0, self.nose_height),
            Feature::Mouth => (0.0, self.mouth_height),
        }
    }

    /// Normalized squared distance to a feature center; `< 1` is inside.
    fn eye_dist(&self, lon: f32, h: f32, side: f32) -> f32 {
        let dl = (lon - side * self.eye_lon) / self.eye_rx;
        let dh = (h - self.eye_height) / self.eye_ry;
        dl * dl + dh * dh
    }

    fn hit(&self, f: Feature, lon: f32, h: f32) -> bool {
        match f {
            Feature::LeftEye => self.eye_dist(lon, h, -1.0) < 1.0,
            Feature::RightEye => self.eye_dist(lon, h, 1.0) < 1.0,
            Feature::Nose => {
                let dl = lon / self.nose_rx;
                let dh = (h - self.nose_height) / self.nose_len;
                dl * dl + dh * dh < 1.0
            }
            Feature::Mouth => {
                (h - self.mouth_height).abs() < 0.03 && lon.abs() < self.mouth_half_width
            }
        }
    }

    fn is_hair(&self, lon: f32, h: f32) -> bool {
        h < self.hair_line + 0.05 * (3.0 * lon).cos() || lon.abs() > self.hair_side_lon
    }
}

/// Pixel-space feature centers for one pose (`None` when rotated out of view).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    pub centers: Vec<(Feature, Option<(f32, f32)>)>,
}

impl FeatureLayout {
    pub fn get(&self, f: Feature) -> Option<(f32, f32)> {
        self.centers
            .iter()
            .find(|(g, _)| *g == f)
            .and_then(|(_, c)| *c)
    }
}

fn to_pixel(coord: f32, distance: f32, resolution: usize) -> f32 {
    (coord / distance + 1.0) * 0.5 * resolution as f32 - 0.5
}

fn to_screen(pixel: f32, distance: f32, resolution: usize) -> f32 {
    ((pixel + 0.5) / resolution as f32 * 2.0 - 1.0) * distance
}

/// Analytic projection of each feature center.
pub fn feature_layout(
    identity: &IdentityParams,
    pose: &CameraPose,
    resolution: usize,
) -> FeatureLayout {
    let frame = HeadFrame::new(identity, pose);
    let feats = FeatureSet::new(identity);
    let centers = Feature::ALL
        .iter()
        .map(|&f| {
            let (lon, h) = feats.center(f);
            let px = frame.project(lon, h).map(|(u, v)| {
                (
                    to_pixel(u, pose.distance, resolution),
                    to_pixel(v, pose.distance, resolution),
                )
            });
            (f, px)
        })
        .collect();
    FeatureLayout { centers }
}

fn hair_texture(id: &IdentityParams, lon: f32, h: f32) -> f32 {
    let f = id.texture_freqs[1];
    0.78 + 0.22
        * (f * lon + 2.5 * h + phase(id.seed, 1)).sin()
        * (0.6 + 0.4 * (0.5 * f * h + phase(id.seed, 2)).sin())
}

fn skin_texture(id: &IdentityParams, lon: f32, h: f32) -> f32 {
    let f = id.texture_freqs[0];
    let d = id.texture_freqs[2];
    1.0 + 0.05 * (f * lon + phase(id.seed, 3)).sin() * (f * h + phase(id.seed, 4)).sin()
        + 0.04 * (d * 2.0 * (lon + h) + phase(id.seed, 5)).sin()
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale(a: [f32; 3], s: f32) -> [f32; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Color of one screen point.
fn shade_point(
    id: &IdentityParams,
    frame: &HeadFrame,
    feats: &FeatureSet,
    u: f32,
    v: f32,
) -> [f32; 3] {
    let skin = id.rgb(palette::SKIN);
    let hair = id.rgb(palette::HAIR);
    let bg = id.rgb(palette::BACKGROUND);
    if let Some((lon, h, view_lon, radius)) = frame.surface(u, v) {
        let light = 0.68 + 0.32 * view_lon.cos() * radius.sqrt();
        if feats.is_hair(lon, h) {
            return scale(hair, light * hair_texture(id, lon, h));
        }
        let base = scale(skin, light * skin_texture(id, lon, h));
        for side in [-1.0f32, 1.0] {
            let e = feats.eye_dist(lon, h, side);
            if e < 1.0 {
                return if e < 0.08 {
                    [0.04, 0.04, 0.05]
                } else if e < 0.4 {
                    scale(id.rgb(palette::EYE), light)
                } else {
                    scale([0.93, 0.92, 0.9], light)
                };
            }
            let brow = (lon - side * feats.eye_lon).abs() < feats.eye_rx * 1.1
                && h > feats.eye_height - feats.eye_ry * 2.6
                && h < feats.eye_height - feats.eye_ry * 1.7;
            if brow {
                return scale(hair, 0.85 * light);
            }
        }
        if feats.hit(Feature::Nose, lon, h) {
            // darker on the side turned away from the light
            return scale(base, 0.8 + 0.1 * (lon / feats.nose_rx));
        }
        if feats.hit(Feature::Mouth, lon, h) {
            return mix(base, [0.72, 0.2, 0.24], 0.65);
        }
        return base;
    }
    // hair mass behind the head
    let hx = (u - frame.cx) / (frame.a * (1.12 + 0.1 * id.geometry[geom::HAIR_EXTENT]));
    let hy = (v - frame.cy + 0.06) / (frame.b * 1.06);
    let hair_bottom = frame.cy + frame.b * (0.15 + 0.6 * id.geometry[geom::HAIR_EXTENT]);
    if hx * hx + hy * hy < 1.0 && v < hair_bottom {
        return scale(hair, 0.7 * hair_texture(id, 3.0 * u, v));
    }
    scale(bg, 0.92 + 0.08 * v)
}

fn validate_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "resolution {resolution} not in {SUPPORTED_RESOLUTIONS:?}"
        )))
    }
}

/// Renders one view with 2x2 supersampling; values are snapped to the 8-bit grid.
pub fn render_view(
    identity: &IdentityParams,
    pose: &CameraPose,
    resolution: usize,
) -> Result<Image> {
    validate_resolution(resolution)?;
    pose.validate()?;
    let frame = HeadFrame::new(identity, pose);
    let feats = FeatureSet::new(identity);
    let mut img = Image::zeros(3, resolution, resolution);
    const OFFSETS: [f32; 2] = [-0.25, 0.25];
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = [0.0f32; 3];
            for dy in OFFSETS {
                for dx in OFFSETS {
                    let u = to_screen(px as f32 + dx, pose.distance, resolution);
                    let v = to_screen(py as f32 + dy, pose.distance, resolution);
                    let c = shade_point(identity, &frame, &feats, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for (k, a) in acc.iter().enumerate() {
                img.set(k, py, px, a / 4.0);
            }
        }
    }
    img.quantize_u8();
    Ok(img)
}

/// Binary mask of pixels whose center lands inside a visible feature.
pub fn feature_mask(
    identity: &IdentityParams,
    pose: &CameraPose,
    resolution: usize,
    feature: Feature,
) -> Vec<bool> {
    let frame = HeadFrame::new(identity, pose);
    let feats = FeatureSet::new(identity);
    let mut mask = vec![false; resolution * resolution];
    for py in 0..resolution {
        for px in 0..resolution {
            let u = to_screen(px as f32, pose.distance, resolution);
            let v = to_screen(py as f32, pose.distance, resolution);
            if let Some((lon, h, _, _)) = frame.surface(u, v) {
                mask[py * resolution + px] = !feats.is_hair(lon, h) && feats.hit(feature, lon, h);
            }
        }
    }
    mask
}

pub fn make_bundle(
    identity: &IdentityParams,
    target_poses: &[CameraPose],
    resolution: usize,
) -> Result<SceneBundle> {
    if target_poses.is_empty() || target_poses.len() > MAX_VIEWS {
        return Err(Error::validation(format!(
            "bundle needs between 1 and {MAX_VIEWS} target poses, got {}",
            target_poses.len()
        )));
    }
    let reference = render_view(identity, &CameraPose::FRONTAL, resolution)?;
    let targets = target_poses
        .iter()
        .map(|p| {
            Ok(TargetView {
                image: render_view(identity, p, resolution)?,
                pose: *p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle {
        identity: identity.clone(),
        reference,
        targets,
    })
}

/// Uniform training poses: yaw in `[-max_yaw, max_yaw]`, small pitch, unit distance.
pub fn sample_pose(rng: &mut impl Rng, max_yaw: f32) -> CameraPose {
    CameraPose {
        yaw: rng.random_range(-max_yaw..=max_yaw),
        pitch: rng.random_range(-8.0..=8.0),
        distance: 1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecord {
    pub identity_seed: u64,
    pub poses: Vec<CameraPose>,
    /// File names, reference first.
    pub files: Vec<String>,
    /// Hex SHA-256 of each file.
    pub sha256: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator_version: String,
    pub resolution: usize,
    pub split: String,
    pub regime: IdentityRegime,
    pub bundles: Vec<BundleRecord>,
}

impl Manifest {
    pub fn seeds(&self) -> Vec<u64> {
        self.bundles.iter().map(|b| b.identity_seed).collect()
    }

    /// Fails if any identity appears in both manifests.
    pub fn ensure_disjoint(&self, other: &Manifest) -> Result<()> {
        let mine: std::collections::HashSet<u64> = self.seeds().into_iter().collect();
        if let Some(s) = other.seeds().into_iter().find(|s| mine.contains(s)) {
            return Err(Error::validation(format!(
                "identity {s} appears in both the `{}` and `{}` splits",
                self.split, other.split
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("manifest serializes"),
        ))
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("corrupt manifest {}: {e}", path.display())))
    }
}

pub fn view_file_name(seed: u64, view: usize) -> String {
    format!("{seed}_{view}.png")
}

pub fn write_dataset(
    bundles: &[SceneBundle],
    directory: &Path,
    split: &str,
    regime: &IdentityRegime,
) -> Result<Manifest> {
    std::fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let resolution = bundles.first().map(|b| b.reference.height()).unwrap_or(0);
    let mut records = Vec::with_capacity(bundles.len());
    for b in bundles {
        if b.reference.height() != resolution {
            return Err(Error::validation(
                "bundles in one dataset must share a resolution",
            ));
        }
        let seed = b.identity.seed;
        let mut files = Vec::new();
        let mut hashes = Vec::new();
        let images = std::iter::once(&b.reference).chain(b.targets.iter().map(|t| &t.image));
        for (view, img) in images.enumerate() {
            let name = view_file_name(seed, view);
            let path = directory.join(&name);
            img.save_png(&path)?;
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hashes.push(hex::encode(Sha256::digest(&bytes)));
            files.push(name);
        }
        records.push(BundleRecord {
            identity_seed: seed,
            poses: b.targets.iter().map(|t| t.pose).collect(),
            files,
            sha256: hashes,
        });
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        resolution,
        split: split.to_string(),
        regime: *regime,
        bundles: records,
    };
    let path = directory.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(directory: &Path) -> Result<(Manifest, Vec<SceneBundle>)> {
    let manifest = Manifest::load(directory)?;
    let mut bundles = Vec::with_capacity(manifest.bundles.len());
    for (i, rec) in manifest.bundles.iter().enumerate() {
        if rec.files.len() != rec.poses.len() + 1 || rec.sha256.len() != rec.files.len() {
            return Err(Error::integrity(format!(
                "manifest record {i} (identity {}) lists {} files for {} poses",
                rec.identity_seed,
                rec.files.len(),
                rec.poses.len()
            )));
        }
        let mut images = Vec::with_capacity(rec.files.len());
        for (name, expected) in rec.files.iter().zip(&rec.sha256) {
            let path: PathBuf = directory.join(name);
            let bytes = std::fs::read(&path)
                .map_err(|_| Error::integrity(format!("record {i}: missing image file {name}")))?;
            if hex::encode(Sha256::digest(&bytes)) != *expected {
                return Err(Error::integrity(format!(
                    "record {i}: image file {name} fails its hash check"
                )));
            }
            images.push(Image::load_png(&path)?);
        }
        let identity = sample_identity_in(rec.identity_seed, &manifest.regime);
        let mut it = images.into_iter();
        let reference = it.next().expect("reference present");
        let targets = it
            .zip(&rec.poses)
            .map(|(image, &pose)| TargetView { image, pose })
            .collect();
        bundles.push(SceneBundle {
            identity,
            reference,
            targets,
        });
    }
    Ok((manifest, bundles))
}

/// Re-renders every bundle from the manifest's seeds and poses alone.
pub fn regenerate(manifest: &Manifest) -> Result<Vec<SceneBundle>> {
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(Error::integrity(format!(
            "manifest generator `{}` differs from `{GENERATOR_VERSION}`",
            manifest.generator_version
        )));
    }
    manifest
        .bundles
        .iter()
        .map(|r| {
            make_bundle(
                &sample_identity_in(r.identity_seed, &manifest.regime),
                &r.poses,
                manifest.resolution,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(mask: &[bool], res: usize) -> Option<(f32, f32)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                sx += (i % res) as f32;
                sy += (i / res) as f32;
                n += 1.0;
            }
        }
        (n > 0.0).then(|| (sx / n, sy / n))
    }

    #[test]
    fn identity_is_pure_function_of_seed() {
        assert_eq!(sample_identity(7), sample_identity(7));
        assert_ne!(sample_identity(7).geometry, sample_identity(8).geometry);
    }

    #[test]
    fn identity_fields_in_unit_range() {
        for seed in 0..50 {
            let id = sample_identity(seed);
            assert!(id
                .geometry
                .iter()
                .chain(&id.palette)
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_geometry() {
        let all: Vec<_> = (0..300).map(|s| sample_identity(s).geometry).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn layout_mirrors_under_yaw_flip() {
        let res = 64;
        for seed in 0..20 {
            let id = sample_identity(seed);
            let l = feature_layout(&id, &CameraPose::yaw(30.0), res);
            let r = feature_layout(&id, &CameraPose::yaw(-30.0), res);
            let mirror = |x: f32| res as f32 - 1.0 - x;
            for (a, b) in [
                (Feature::Nose, Feature::Nose),
                (Feature::Mouth, Feature::Mouth),
                (Feature::LeftEye, Feature::RightEye),
                (Feature::RightEye, Feature::LeftEye),
            ] {
                let (pa, pb) = (l.get(a).unwrap(), r.get(b).unwrap());
                assert!((mirror(pa.0) - pb.0).abs() < 1.0 && (pa.1 - pb.1).abs() < 1.0);
            }
        }
    }

    #[test]
    fn rendered_centroids_mirror_and_match_layout() {
        let res = 64;
        let id = sample_identity(3);
        for f in [Feature::Nose, Feature::LeftEye, Feature::RightEye] {
            let plus = centroid(&feature_mask(&id, &CameraPose::yaw(30.0), res, f), res).unwrap();
            let mirrored_feature = match f {
                Feature::LeftEye => Feature::RightEye,
                Feature::RightEye => Feature::LeftEye,
                other => other,
            };
            let minus = centroid(
                &feature_mask(&id, &CameraPose::yaw(-30.0), res, mirrored_feature),
                res,
            )
            .unwrap();
            assert!(
                (res as f32 - 1.0 - plus.0 - minus.0).abs() < 1.0,
                "{f:?}: {plus:?} vs {minus:?}"
            );
            assert!((plus.1 - minus.1).abs() < 1.0);
        }
        let layout = feature_layout(&id, &CameraPose::yaw(0.0), res)
            .get(Feature::Nose)
            .unwrap();
        let rendered = centroid(
            &feature_mask(&id, &CameraPose::yaw(0.0), res, Feature::Nose),
            res,
        )
        .unwrap();
        assert!((layout.0 - rendered.0).abs() < 1.0 && (layout.1 - rendered.1).abs() < 1.5);
    }

    #[test]
    fn nose_moves_monotonically_with_yaw() {
        let id = sample_identity(11);
        let mut prev = f32::NEG_INFINITY;
        for yaw in -60..=60 {
            let x = feature_layout(&id, &CameraPose::yaw(yaw as f32), 64)
                .get(Feature::Nose)
                .unwrap()
                .0;
            assert!(x > prev, "nose x not increasing at yaw {yaw}");
            prev = x;
        }
    }

    #[test]
    fn far_eye_occluded_at_full_profile() {
        let id = sample_identity(5);
        let l = feature_layout(&id, &CameraPose::yaw(90.0), 64);
        assert!(l.get(Feature::RightEye).is_none());
        assert!(l.get(Feature::LeftEye).is_some());
    }

    #[test]
    fn render_rejects_bad_inputs() {
        let id = sample_identity(0);
        assert!(render_view(&id, &CameraPose::FRONTAL, 48).is_err());
        assert!(render_view(&id, &CameraPose::yaw(91.0), 64).is_err());
        let bad_pitch = CameraPose {
            pitch: 25.0,
            ..CameraPose::FRONTAL
        };
        assert!(render_view(&id, &bad_pitch, 64).is_err());
        let bad_dist = CameraPose {
            distance: 0.0,
            ..CameraPose::FRONTAL
        };
        assert!(render_view(&id, &bad_dist, 64).is_err());
    }

    #[test]
    fn renders_are_deterministic_and_in_range() {
        let id = sample_identity(2);
        let a = render_view(&id, &CameraPose::yaw(0.0), 64).unwrap();
        let b = render_view(&id, &CameraPose::yaw(0.0), 64).unwrap();
        assert_eq!(a, b);
        for yaw in [-90.0, -45.0, 0.0, 60.0, 90.0] {
            let (lo, hi) = render_view(&id, &CameraPose::yaw(yaw), 32)
                .unwrap()
                .min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn bundle_view_count_limits() {
        let id = sample_identity(4);
        let b = make_bundle(&id, &[CameraPose::yaw(30.0), CameraPose::yaw(-30.0)], 32).unwrap();
        assert_eq!(b.view_count(), 2);
        let same = make_bundle(&id, &[CameraPose::FRONTAL], 32).unwrap();
        assert_eq!(same.targets[0].image, same.reference);
        assert!(make_bundle(&id, &[CameraPose::FRONTAL; 16], 32).is_ok());
        assert!(make_bundle(&id, &[CameraPose::FRONTAL; 17], 32).is_err());
        assert!(make_bundle(&id, &[], 32).is_err());
    }
}
