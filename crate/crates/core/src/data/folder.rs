use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::hex;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// The files an image set was built from, with their content hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads every PNG or JPEG in `dir`, sorted by file name, resized so the
/// short side is `size` and centre-cropped to `size x size`.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<(Tensor, Manifest)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no images found in {}", dir.display())));
    }
    let mut out = Tensor::zeros(&[files.len(), 3, size, size]);
    let mut entries = Vec::with_capacity(files.len());
    let s = size as u32;
    for (i, path) in files.iter().enumerate() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| image_err(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let scale = s as f64 / w.min(h) as f64;
        let (nw, nh) = (
            ((w as f64 * scale).round() as u32).max(s),
            ((h as f64 * scale).round() as u32).max(s),
        );
        let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
        let cropped = image::imageops::crop_imm(&resized, (nw - s) / 2, (nh - s) / 2, s, s).to_image();
        let hw = size * size;
        let dst = out.sample_mut(i);
        for (x, y, px) in cropped.enumerate_pixels() {
            let p = y as usize * size + x as usize;
            for k in 0..3 {
                dst[k * hw + p] = px.0[k] as f64 / 127.5 - 1.0;
            }
        }
        entries.push(ManifestEntry {
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    Ok((out, Manifest { size, entries }))
}

/// Writes a batch of `[-1, 1]` images as one PNG grid with `cols` columns.
pub fn save_image_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let (n, c, h, w) = images.dims4();
    if c != 3 && c != 1 {
        return Err(Error::config(format!("image grid needs 1 or 3 channels, got {c}")));
    }
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let mut grid = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    let to_u8 = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    for i in 0..n {
        let img = images.sample(i);
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for y in 0..h {
            for x in 0..w {
                let px = |k: usize| to_u8(img[(k % c) * h * w + y * w + x]);
                grid.put_pixel((c0 + x) as u32, (r0 + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    grid.save(path).map_err(|e| image_err(path, e))
}
