//! Procedural ultrasound-like images: a speckled scan sector with one
//! class-specific anatomical motif under random pose jitter.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, LIVER_PLANES};
use super::raster::{sample_seed, Gray};
use crate::error::{Result, SemcError};

pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Scales how strongly motifs stand out from the background.
    pub contrast: f32,
    /// Maximum motif rotation in degrees.
    pub jitter_deg: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 7,
            per_class: 20,
            size: 128,
            seed: 0,
            contrast: 1.0,
            jitter_deg: 20.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SemcError::Config(format!(
                "synthetic data needs at least two classes, got {}",
                self.classes
            )));
        }
        if self.per_class == 0 || self.size < 8 {
            return Err(SemcError::Config(
                "per_class must be positive and size at least 8".into(),
            ));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(SemcError::Config(format!(
                "contrast must be in (0,1], got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// Liver plane names for seven classes, `class{i}` otherwise.
pub fn class_names(classes: usize) -> Vec<String> {
    if classes == LIVER_PLANES.len() {
        LIVER_PLANES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Gray,
    /// Pixels altered by the class motif.
    pub motif_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
enum Effect {
    Darken,
    Brighten,
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
}

impl Pose {
    /// Maps image coordinates into the motif frame.
    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        let (du, dv) = (u - self.tx, v - self.ty);
        (
            (self.cos * du + self.sin * dv) / self.scale,
            (-self.sin * du + self.cos * dv) / self.scale,
        )
    }
}

fn in_ellipse(p: f64, q: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    ((p - cx) / a).powi(2) + ((q - cy) / b).powi(2) <= 1.0
}

fn near_segment(p: f64, q: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64), w: f64) -> bool {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((p - x0) * dx + (q - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (ex, ey) = (x0 + t * dx - p, y0 + t * dy - q);
    ex * ex + ey * ey <= w * w
}

/// Motif of `kind` at local coordinates `(p, q)`.
fn motif(kind: usize, p: f64, q: f64, blobs: &[(f64, f64)]) -> Option<Effect> {
    use Effect::*;
    let hit = |b: bool, e: Effect| if b { Some(e) } else { None };
    match kind {
        // Bifurcating vessel.
        0 => hit(
            near_segment(p, q, (0.0, 0.3), (0.0, 0.0), 0.06)
                || near_segment(p, q, (0.0, 0.0), (-0.3, -0.25), 0.06)
                || near_segment(p, q, (0.0, 0.0), (0.3, -0.25), 0.06),
            Darken,
        ),
        // Long horizontal vessel with a side lumen.
        1 => hit(
            in_ellipse(p, q, 0.0, 0.0, 0.5, 0.07) || in_ellipse(p, q, 0.25, 0.2, 0.1, 0.1),
            Darken,
        ),
        // Bright lobe.
        2 => hit(in_ellipse(p, q, 0.0, 0.0, 0.38, 0.22), Brighten),
        // Bright arc.
        3 => {
            let r = (p * p + (q - 0.45).powi(2)).sqrt();
            hit((r - 0.45).abs() < 0.035 && q < 0.45, Brighten)
        }
        // Vertical vessel ending in a round lumen.
        4 => hit(
            near_segment(p, q, (0.0, -0.35), (0.0, 0.2), 0.05)
                || in_ellipse(p, q, 0.0, 0.28, 0.12, 0.12),
            Darken,
        ),
        // Bright ring with a dark core.
        5 => {
            if in_ellipse(p, q, 0.0, 0.0, 0.22, 0.11) {
                Some(Darken)
            } else {
                hit(in_ellipse(p, q, 0.0, 0.0, 0.3, 0.18), Brighten)
            }
        }
        // Scattered small cysts at random places.
        _ => hit(
            blobs
                .iter()
                .any(|&(x, y)| in_ellipse(p, q, x, y, 0.07, 0.07)),
            Darken,
        ),
    }
}

const KINDS: usize = 7;

/// Renders image `index` of class `class`. The background and pose depend
/// only on `(spec.seed, index)`, so two classes rendered at the same index
/// differ only where their motifs fall.
pub fn render(spec: &SynthSpec, class: usize, index: u64) -> SynthSample {
    let n = spec.size;
    let mut bg_rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 0, index));
    let mut pose_rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 1, index));
    let mut speckle_rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 2, index));

    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                bg_rng.random_range(1.0..4.0),
                bg_rng.random_range(0.0..2.0 * PI),
                bg_rng.random_range(0.0..2.0 * PI),
                bg_rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let base = bg_rng.random_range(0.28..0.38);
    let half_angle = bg_rng.random_range(35.0f64..45.0).to_radians();

    let kind = class % KINDS;
    let orientation = (class / KINDS) as f64 * PI / 4.0;
    let theta = orientation + pose_rng.random_range(-1.0..=1.0) * spec.jitter_deg.to_radians();
    let pose = Pose {
        cos: theta.cos(),
        sin: theta.sin(),
        scale: pose_rng.random_range(0.85..1.15),
        tx: pose_rng.random_range(-0.15..0.15),
        ty: 0.1 + pose_rng.random_range(-0.15..0.15),
    };
    let blobs: Vec<(f64, f64)> = (0..4)
        .map(|_| {
            (
                pose_rng.random_range(-0.5..0.5),
                pose_rng.random_range(-0.5..0.5),
            )
        })
        .collect();

    let contrast = spec.contrast;
    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
            let (ax, ay) = (u, v + 1.1);
            let r = (ax * ax + ay * ay).sqrt();
            let inside = ax.atan2(ay).abs() < half_angle && r > 0.3 && r < 2.1;
            let mut value = 0.0f32;
            let mut touched = false;
            if inside {
                let tissue: f64 = waves
                    .iter()
                    .map(|&(f, p1, p2, amp)| amp * (f * u + p1).sin() * (f * v + p2).cos())
                    .sum();
                let depth = 1.0 - 0.25 * (r - 0.3) / 1.8;
                value = ((base + tissue) * depth) as f32;
                let (p, q) = pose.local(u, v);
                match motif(kind, p, q, &blobs) {
                    Some(Effect::Darken) => {
                        value *= 1.0 - 0.7 * contrast;
                        touched = true;
                    }
                    Some(Effect::Brighten) => {
                        value += 0.3 * contrast;
                        touched = true;
                    }
                    None => {}
                }
            }
            let u1: f64 = speckle_rng.random_range(f64::MIN_POSITIVE..1.0);
            let rayleigh = (-2.0 * u1.ln()).sqrt() / (PI / 2.0).sqrt();
            value *= (0.5 + 0.5 * rayleigh) as f32;
            pixels.push(value.clamp(0.0, 1.0));
            mask.push(touched);
        }
    }
    SynthSample {
        image: Gray {
            width: n,
            height: n,
            pixels,
        },
        motif_mask: mask,
    }
}

/// Writes `images/`, `manifest.csv` and `classes.txt` under `out_dir` and
/// returns the manifest.
pub fn gen_synth(out_dir: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| SemcError::io(&images, e))?;
    let names = class_names(spec.classes);
    let mut entries = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, name) in names.iter().enumerate() {
        for i in 0..spec.per_class {
            let index = (class * spec.per_class + i) as u64;
            let rel = PathBuf::from(IMAGES_DIR).join(format!("{name}_{i:04}.png"));
            render(spec, class, index)
                .image
                .save_png(&out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                label: class,
            });
        }
    }
    let manifest = DatasetManifest::new(out_dir, names, entries)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
