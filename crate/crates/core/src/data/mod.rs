//! Image input/output, augmentation, quality control, dataset splits and a
//! synthetic texture generator.

pub mod augment;
pub mod qc;
pub mod split;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A loaded image: `[3, H, W]` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Tensor,
    pub label: Option<usize>,
    pub path: PathBuf,
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pgm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Format(format!(
            "{}: unsupported image format (expected PNG or PPM)",
            path.display()
        ))),
    }
}

/// Converts a decoded 8-bit image to a `[3, H, W]` tensor; grayscale is
/// replicated over the three channels and alpha is dropped.
pub fn image_to_tensor(img: &DynamicImage) -> Result<Tensor> {
    let rgb: RgbImage = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        _ => {
            return Err(Error::Format(format!(
                "only 8-bit images are supported, got {:?}",
                img.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    image_to_tensor(&img)
}

/// Loads an 8-bit PNG or PPM/PGM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let bytes = fs::read(path)?;
    let pixels = decode_image(&bytes, format).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(ImageRecord {
        id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        pixels,
        label: None,
        path: path.to_path_buf(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor as an 8-bit RGB PNG (values clamped to `[0, 1]`).
pub fn save_rgb_png(path: impl AsRef<Path>, pixels: &Tensor) -> Result<()> {
    let (c, h, w) = dims3(pixels)?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = pixels.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(d[(ch * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes an `[H, W]` map with values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let (h, w) = map.dims2()?;
    let d = map.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(d[y as usize * w + x as usize])])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Dimension(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of a `[3, H, W]` image, as `[H, W]`.
pub fn luminance(pixels: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(pixels)?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = pixels.data();
    let p = h * w;
    Tensor::new(
        vec![h, w],
        (0..p)
            .map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i])
            .collect(),
    )
}

/// Bilinear resize of a `[C, H, W]` tensor with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, w, out_w)).collect();
    let d = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// One manifest line: `path<TAB>label`, label optional.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
}

/// Parses a manifest; relative paths resolve against `base`. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let path = parts.next().unwrap_or_default().trim();
        if path.is_empty() {
            return Err(Error::Format(format!("manifest line {}: empty path", n + 1)));
        }
        let label = match parts.next().map(str::trim) {
            None | Some("") => None,
            Some(l) => Some(l.parse::<usize>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad label {l:?}", n + 1))
            })?),
        };
        if parts.next().is_some() {
            return Err(Error::Format(format!("manifest line {}: too many fields", n + 1)));
        }
        let p = Path::new(path);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads every manifest entry, attaching labels.
pub fn load_manifest_images(entries: &[ManifestEntry]) -> Result<Vec<ImageRecord>> {
    entries
        .iter()
        .map(|e| {
            let mut r = load_image(&e.path)?;
            r.label = e.label;
            Ok(r)
        })
        .collect()
}
