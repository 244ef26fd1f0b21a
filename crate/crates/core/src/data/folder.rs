use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use super::{Dataset, Split};
use crate::error::{invalid, CoreError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io { path: path.to_path_buf(), source }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Read `root/<class>/<image>` into RGB images resized (bilinear) to
/// `size × size`. Classes are labelled in lexicographic order of their
/// directory names; the domain tag is the root's name.
pub fn ingest_folder(root: &Path, size: usize, split: Split) -> Result<Dataset> {
    if size == 0 {
        return Err(invalid("ingest_folder", "image size must be positive"));
    }
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.len() < 2 {
        return Err(invalid("ingest_folder", format!("{} has {} class directories, need 2", root.display(), dirs.len())));
    }
    let names: Vec<String> = dirs.iter().map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let domain = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ds = Dataset::new([3, size, size], names.clone(), split);
    let s = size as u32;
    let mut buf = vec![0.0f32; 3 * size * size];
    for (label, dir) in dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(CoreError::EmptyClass(names[label].clone()));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| CoreError::Image { path: f.clone(), detail: e.to_string() })?;
            let rgb = image::imageops::resize(&img.to_rgb8(), s, s, FilterType::Triangle);
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    buf[(c * size + y as usize) * size + x as usize] = px[c] as f32 / 255.0;
                }
            }
            ds.push(&buf, label, &domain)?;
        }
    }
    Ok(ds)
}

/// Write a dataset as `root/<class>/<index>.png`, 8 bits per channel.
/// Inverse of [`ingest_folder`] up to quantization.
pub fn write_folder(d: &Dataset, root: &Path) -> Result<()> {
    let [c, h, w] = d.shape();
    if c != 3 {
        return Err(invalid("write_folder", format!("{c}-channel images cannot be written as RGB")));
    }
    for (label, name) in d.class_names.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (j, &i) in d.class_indices()[label].iter().enumerate() {
            let img = d.image(i);
            let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let at = |ch: usize| (img[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([at(0), at(1), at(2)])
            });
            let path = dir.join(format!("{j:05}.png"));
            buf.save(&path).map_err(|e| CoreError::Image { path: path.clone(), detail: e.to_string() })?;
        }
    }
    Ok(())
}
