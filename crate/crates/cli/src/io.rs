//! Raw arrays, PNG previews, JSON documents and file hashes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use jointdiff::{Error, Result};
use ndarray::{s, Array4};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn write_npy(path: &Path, a: &Array4<f32>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    a.write_npy(w)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Reads an `(N, C, H, W)` float32 array.
pub fn read_npy(path: &Path) -> Result<Array4<f32>> {
    let f = File::open(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Array4::<f32>::read_npy(f).map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

/// Grayscale preview of channel 0 with the fixed mapping `[0, 1] → [0, 255]`.
pub fn write_png(path: &Path, a: &Array4<f32>, index: usize) -> Result<()> {
    let img = a.slice(s![index, 0, .., ..]);
    let (h, w) = img.dim();
    let bytes: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("sized buffer")
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_array(a: &Array4<f32>) -> String {
    let mut h = Sha256::new();
    for v in a.iter() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
