//! A tiny synthetic dataset: one image for each of the ten ImageNet10 classes.

use std::io;
use std::path::{Path, PathBuf};

use crate::hashing::stable_hash;
use crate::isolation::SuperclassTable;
use crate::orchestrator::{DatasetEntry, DatasetManifest};
use crate::raster::{encode_png, ImageBuffer};

pub const DEMO_SIZE: u32 = 96;
pub const DEMO_DATASET_FILE: &str = "dataset.json";

/// Smooth two-tone texture with a darker blob in the middle, seeded by `key`.
pub fn demo_image(key: &str, width: u32, height: u32) -> ImageBuffer {
    let h = stable_hash(&[b"demo", key.as_bytes()]).to_le_bytes();
    let base = [h[0] / 2 + 64, h[1] / 2 + 64, h[2] / 2 + 64];
    let (fx, fy) = (1.0 + f64::from(h[3] % 4), 1.0 + f64::from(h[4] % 4));
    let (w, hgt) = (f64::from(width), f64::from(height));
    ImageBuffer::from_fn(width, height, |x, y| {
        let (u, v) = ((f64::from(x) + 0.5) / w, (f64::from(y) + 0.5) / hgt);
        let wave = ((u * fx * std::f64::consts::TAU).sin()
            + (v * fy * std::f64::consts::TAU).cos())
            * 20.0;
        let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
        let blob = if r2 < 0.06 { -40.0 } else { 0.0 };
        base.map(|c| (f64::from(c) + wave + blob).clamp(0.0, 255.0) as u8)
    })
    .expect("demo dimensions are non-zero")
}

/// Writes `<root>/<class>/<id>.png` for every ImageNet10 class plus
/// `<root>/dataset.json`, and returns the path of the latter.
pub fn write_demo_dataset(root: &Path) -> io::Result<PathBuf> {
    let table = SuperclassTable::imagenet10();
    let mut entries = Vec::new();
    for (fine, _) in table.iter() {
        let image_id = format!("{}_000", fine.replace(' ', "_"));
        let path = root.join(fine).join(format!("{image_id}.png"));
        std::fs::create_dir_all(path.parent().expect("file has a parent"))?;
        let png = encode_png(&demo_image(fine, DEMO_SIZE, DEMO_SIZE)).map_err(io::Error::other)?;
        std::fs::write(&path, png)?;
        entries.push(DatasetEntry {
            image_id,
            image_path: path,
            label: table.resolve(fine).map_err(io::Error::other)?,
        });
    }
    let listing = root.join(DEMO_DATASET_FILE);
    std::fs::write(&listing, DatasetManifest { entries }.to_json(root))?;
    Ok(listing)
}
