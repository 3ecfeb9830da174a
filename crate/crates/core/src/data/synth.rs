//! Procedural two-class face sprites.
//!
//! The class is carried by the hair length; everything else is nuisance. The
//! smile is deliberately correlated with the class so that a classifier can
//! pick up a spurious cue that counterfactuals should expose.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};

use super::load::write_labels;

/// Per-class and nuisance attribute ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpec {
    pub image_size: usize,
    /// Hair length range per class, as a fraction of the head height.
    pub hair_length: Vec<(f64, f64)>,
    /// Smile curvature range per class, in `[-1, 1]`.
    pub smile: Vec<(f64, f64)>,
    /// Head centre jitter as a fraction of the image side.
    pub jitter: f64,
    pub background: (f64, f64),
    pub head_scale: (f64, f64),
}

impl Default for AttributeSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            hair_length: vec![(0.15, 0.40), (0.70, 1.05)],
            smile: vec![(-0.8, 0.5), (-0.3, 1.0)],
            jitter: 0.06,
            background: (0.15, 0.85),
            head_scale: (0.9, 1.1),
        }
    }
}

impl AttributeSpec {
    pub fn class_count(&self) -> usize {
        self.hair_length.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_count();
        if c < 2 || self.smile.len() != c {
            return Err(contract("attribute spec needs matching per-class ranges for at least two classes"));
        }
        if self.image_size < 8 {
            return Err(contract("sprites need at least 8×8 pixels"));
        }
        let mut ranges = self.hair_length.clone();
        ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
        if ranges.iter().any(|r| r.0 > r.1) || ranges.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(contract("class-controlling ranges must be disjoint"));
        }
        Ok(())
    }
}

/// The drawn parameters of one sprite.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteAttributes {
    pub label: usize,
    pub hair_length: f64,
    pub smile: f64,
    pub center: (f64, f64),
    pub head_scale: f64,
    pub background: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub brow_tilt: f64,
}

impl SpriteAttributes {
    pub fn sample(spec: &AttributeSpec, label: usize, rng: &mut impl Rng) -> Self {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
        let j = spec.jitter;
        let tone = rng.gen::<f64>();
        let skin = [0.55 + 0.4 * tone, 0.40 + 0.35 * tone, 0.30 + 0.30 * tone];
        let shade = rng.gen::<f64>();
        let hue = rng.gen::<f64>();
        let hair = [0.08 + 0.45 * shade * hue, 0.06 + 0.30 * shade, 0.04 + 0.18 * shade * (1.0 - hue)];
        Self {
            label,
            hair_length: u(rng, spec.hair_length[label]),
            smile: u(rng, spec.smile[label]),
            center: (0.5 + u(rng, (-j, j)), 0.5 + u(rng, (-j, j))),
            head_scale: u(rng, spec.head_scale),
            background: u(rng, spec.background),
            skin,
            hair,
            brow_tilt: u(rng, (-0.3, 0.3)),
        }
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

/// Color at a point in unit coordinates (y grows downward).
fn shade(a: &SpriteAttributes, x: f64, y: f64) -> [f64; 3] {
    let (cx, cy) = a.center;
    let (rx, ry) = (0.26 * a.head_scale, 0.32 * a.head_scale);
    let bg = a.background * (0.9 + 0.2 * y);
    let mut c = [bg, bg, bg * 0.95 + 0.05];

    // hair mass behind the head, reaching down by hair_length of the head height
    let hair_bottom = cy - ry + a.hair_length * 2.0 * ry;
    if in_ellipse(x, y, cx, cy - 0.04, 1.25 * rx, 1.12 * ry) && y <= hair_bottom {
        c = a.hair;
    } else if y <= hair_bottom && y > cy && (x - cx).abs() <= 1.25 * rx && (x - cx).abs() >= 0.6 * rx {
        c = a.hair;
    }
    if in_ellipse(x, y, cx, cy, rx, ry) {
        c = a.skin;
        // fringe
        if y < cy - 0.55 * ry {
            c = a.hair;
        }
        let eye_y = cy - 0.12 * ry;
        for side in [-1.0, 1.0] {
            let ex = cx + side * 0.42 * rx;
            if in_ellipse(x, y, ex, eye_y, 0.13 * rx, 0.09 * ry) {
                c = [0.05, 0.05, 0.08];
            }
            // brow: short thick segment, tilted symmetrically
            let u = (x - ex) / (0.22 * rx);
            let brow_y = eye_y - 0.2 * ry + side * a.brow_tilt * u * 0.06;
            if u.abs() <= 1.0 && (y - brow_y).abs() <= 0.035 {
                c = [a.hair[0] * 0.8, a.hair[1] * 0.8, a.hair[2] * 0.8];
            }
        }
        // mouth arc; positive smile lifts the corners
        let u = (x - cx) / (0.45 * rx);
        let mouth_y = cy + 0.5 * ry - a.smile * 0.14 * ry * (u * u - 0.5);
        if u.abs() <= 1.0 && (y - mouth_y).abs() <= 0.03 + 0.01 * a.smile.abs() {
            c = [0.55, 0.12, 0.15];
        }
    }
    c
}

/// 8-bit RGB pixels (row-major, interleaved), anti-aliased by 4×4
/// supersampling.
pub fn render_sprite(a: &SpriteAttributes, size: usize) -> Vec<u8> {
    const SS: usize = 4;
    let mut out = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64;
                    let c = shade(a, x, y);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for v in acc {
                out.push(((v / (SS * SS) as f64).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// What the generator drew, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<(String, SpriteAttributes)>,
}

impl DatasetManifest {
    pub const HEADER: &'static str = "id\tlabel\thair_length\tsmile\tcenter_x\tcenter_y\thead_scale\tbackground";

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, a)| a.label).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("#vaex-manifest v1 seed={}\n{}\n", self.seed, Self::HEADER);
        for (id, a) in &self.entries {
            s.push_str(&format!(
                "{id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                a.label, a.hair_length, a.smile, a.center.0, a.center.1, a.head_scale, a.background
            ));
        }
        s
    }
}

/// Sample ids `s0000, s0001, …`, widened when `n` needs more digits.
pub fn sample_id(i: usize, n: usize) -> String {
    let digits = n.saturating_sub(1).max(1).to_string().len().max(4);
    format!("s{i:0digits$}")
}

/// Writes `images/<id>.png`, `labels.tsv` and `manifest.tsv` under `out`.
/// Labels alternate so the classes are balanced within one.
pub fn generate_synthetic_dataset(n: usize, seed: u64, spec: &AttributeSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let classes = spec.class_count();
    if n < classes {
        return Err(contract(format!("need at least {classes} samples to represent every class")));
    }
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let attrs = SpriteAttributes::sample(spec, i % classes, &mut rng);
        let id = sample_id(i, n);
        let pixels = render_sprite(&attrs, spec.image_size);
        let img = RgbImage::from_raw(spec.image_size as u32, spec.image_size as u32, pixels).expect("buffer size");
        img.save_with_format(img_dir.join(format!("{id}.png")), ImageFormat::Png)?;
        entries.push((id, attrs));
    }
    let manifest = DatasetManifest { seed, entries };
    let labels: Vec<(String, usize)> = manifest.entries.iter().map(|(id, a)| (id.clone(), a.label)).collect();
    write_labels(&out.join("labels.tsv"), &labels)?;
    let mut f = fs::File::create(out.join("manifest.tsv"))?;
    f.write_all(manifest.to_tsv().as_bytes())?;
    Ok(manifest)
}
