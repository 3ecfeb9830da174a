use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use log::warn;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

use super::ImageSet;

pub const LABELS_HEADER: &str = "#vaex-labels v1";

pub fn write_labels(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let mut s = String::from(LABELS_HEADER);
    s.push('\n');
    for (id, l) in labels {
        s.push_str(&format!("{id}\t{l}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads `id<TAB>label` lines after the header.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("labels file {} not found", path.display())),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LABELS_HEADER) {
        return Err(Error::Format(format!("{} lacks the `{LABELS_HEADER}` header", path.display())));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("labels line {}: expected `id<TAB>label`", i + 2)))?;
        let label = label.trim().parse().map_err(|_| Error::Format(format!("labels line {}: bad label", i + 2)))?;
        out.push((id.to_string(), label));
    }
    Ok(out)
}

/// Crop to the largest centred square, resize to `size`, scale to `[0, 1]`;
/// returns `(3, size, size)`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    Ok(preprocess(&img, size))
}

pub(crate) fn preprocess(img: &RgbImage, size: usize) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let cropped = image::imageops::crop_imm(img, x0, y0, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("image shape")
}

/// 8-bit image of a `(3, H, W)` or `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn to_rgb_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(contract(format!("expected a single RGB image, got shape {s:?}"))),
    };
    let plane = h * w;
    let d = t.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Outcome of reading an image folder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Ids whose image was missing or unreadable.
    pub skipped: Vec<String>,
}

/// Reads `labels.tsv` and `images/<id>.png` under `dir`, ordered by id.
pub fn load_dataset(dir: &Path, size: usize) -> Result<(ImageSet, LoadReport)> {
    let mut labels = read_labels(&dir.join("labels.tsv"))?;
    if labels.is_empty() {
        return Err(Error::Format(format!("{} lists no samples", dir.display())));
    }
    labels.sort_by(|a, b| a.0.cmp(&b.0));
    let mut ids = Vec::with_capacity(labels.len());
    let mut classes = Vec::with_capacity(labels.len());
    let mut images = Vec::with_capacity(labels.len());
    let mut report = LoadReport::default();
    for (id, label) in labels {
        match load_image(&dir.join("images").join(format!("{id}.png")), size) {
            Ok(t) => {
                ids.push(id);
                classes.push(label);
                images.push(t.reshape(&[1, 3, size, size])?);
            }
            Err(e) => {
                warn!("skipping {id}: {e}");
                report.skipped.push(id);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Format(format!("no readable images under {}", dir.display())));
    }
    report.loaded = images.len();
    let batch = Tensor::stack_batch(&images)?;
    Ok((ImageSet::new(ids, batch, classes)?, report))
}
