//! On-disk dataset layout and loading with validation.
//!
//! ```text
//! <dir>/
//!   manifest.json    count, image size, seed, per-sample flood attribute
//!   taxonomy.json    class names, bases, flood states, display colors
//!   prompts.jsonl    one record per chain node: image_id, level, question,
//!                    answer, target_class
//!   images/<id>.png  8-bit RGB
//!   masks/<id>.pgm   P5, pixel value = class id
//! ```
//!
//! Images are quantized to u8 at generation time, so write -> load
//! round-trips every field bit-exactly.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ClassTaxonomy, SegSample};
use crate::error::{CpSegError, Result};
use crate::prompt::{verify_relevance, PromptNode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub scene_flooded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptRecordLine {
    image_id: String,
    #[serde(flatten)]
    node: PromptNode,
}

#[derive(Debug)]
pub struct DatasetBundle {
    pub samples: Vec<SegSample>,
    pub taxonomy: ClassTaxonomy,
    pub seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CpSegError + '_ {
    move |e| CpSegError::io(path, e)
}

// ── PGM (P5) ────────────────────────────────────────────────────────

pub fn write_pgm(path: &Path, data: &[u8], width: usize, height: usize) -> Result<()> {
    if data.len() != width * height {
        return Err(CpSegError::Shape(format!(
            "pgm data length {} does not match {width}x{height}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("in-memory write");
    out.extend_from_slice(data);
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional '#' comments.
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            CpSegError::Validation(format!("{}: malformed pgm header", path.display()))
        })?.to_string());
    }
    if fields.len() < 4 || fields[0] != "P5" {
        return Err(CpSegError::Validation(format!(
            "{}: not a P5 pgm file",
            path.display()
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| {
            CpSegError::Validation(format!("{}: bad pgm header field {s}", path.display()))
        })
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let maxval = parse(&fields[3])?;
    if maxval != 255 {
        return Err(CpSegError::Validation(format!(
            "{}: unsupported pgm maxval {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height;
    if bytes.len() < pos + expected {
        return Err(CpSegError::Validation(format!(
            "{}: truncated pgm payload ({} of {expected} bytes)",
            path.display(),
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((bytes[pos..pos + expected].to_vec(), width, height))
}

// ── PNG images ──────────────────────────────────────────────────────

fn image_to_u8(image: &[f64]) -> Vec<u8> {
    image.iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn u8_to_image(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

pub fn write_png_rgb(path: &Path, image: &[f64], width: usize, height: usize) -> Result<()> {
    let buf = image_to_u8(image);
    image::save_buffer(
        path,
        &buf,
        width as u32,
        height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| CpSegError::Validation(format!("{}: {e}", path.display())))
}

pub fn read_png_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| CpSegError::Validation(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((u8_to_image(img.as_raw()), w, h))
}

/// Grayscale PNG from values in [lo, hi], used for thought-map dumps.
pub fn write_png_gray(path: &Path, values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<()> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let buf: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| CpSegError::Validation(format!("{}: {e}", path.display())))
}

// ── dataset ─────────────────────────────────────────────────────────

pub fn write_dataset(samples: &[SegSample], taxonomy: &ClassTaxonomy, seed: u64, dir: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(CpSegError::Config("refusing to write an empty dataset".into()));
    }
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;

    let manifest = Manifest {
        version: 1,
        seed,
        count: samples.len(),
        width: samples[0].width,
        height: samples[0].height,
        samples: samples
            .iter()
            .map(|s| ManifestSample {
                id: s.image_id.clone(),
                scene_flooded: s.scene_flooded,
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| CpSegError::Serde(e.to_string()))?,
    )
    .map_err(io_err(&manifest_path))?;

    let tax_path = dir.join("taxonomy.json");
    fs::write(
        &tax_path,
        serde_json::to_string_pretty(taxonomy).map_err(|e| CpSegError::Serde(e.to_string()))?,
    )
    .map_err(io_err(&tax_path))?;

    let prompts_path = dir.join("prompts.jsonl");
    let mut lines = String::new();
    for s in samples {
        for node in &s.prompt_records {
            let line = PromptRecordLine {
                image_id: s.image_id.clone(),
                node: node.clone(),
            };
            lines.push_str(&serde_json::to_string(&line).map_err(|e| CpSegError::Serde(e.to_string()))?);
            lines.push('\n');
        }
    }
    fs::write(&prompts_path, lines).map_err(io_err(&prompts_path))?;

    for s in samples {
        write_png_rgb(&images.join(format!("{}.png", s.image_id)), &s.image, s.width, s.height)?;
        write_pgm(&masks.join(format!("{}.pgm", s.image_id)), &s.mask, s.width, s.height)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?,
    )
    .map_err(|e| CpSegError::Serde(format!("{}: {e}", manifest_path.display())))?;

    let tax_path = dir.join("taxonomy.json");
    let taxonomy: ClassTaxonomy = serde_json::from_str(
        &fs::read_to_string(&tax_path).map_err(io_err(&tax_path))?,
    )
    .map_err(|e| CpSegError::Serde(format!("{}: {e}", tax_path.display())))?;
    taxonomy.validate()?;

    // Image files must agree with the manifest count.
    let images_dir = dir.join("images");
    let image_files = fs::read_dir(&images_dir)
        .map_err(io_err(&images_dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
        .count();
    if image_files != manifest.count {
        return Err(CpSegError::Validation(format!(
            "manifest lists {} samples but {} image files exist",
            manifest.count, image_files
        )));
    }
    if manifest.samples.len() != manifest.count {
        return Err(CpSegError::Validation(
            "manifest sample list does not match its own count".into(),
        ));
    }

    let prompts_path = dir.join("prompts.jsonl");
    let mut records: HashMap<String, Vec<PromptNode>> = HashMap::new();
    let prompt_text = fs::read_to_string(&prompts_path).map_err(io_err(&prompts_path))?;
    for line in prompt_text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: PromptRecordLine = serde_json::from_str(line)
            .map_err(|e| CpSegError::Serde(format!("{}: {e}", prompts_path.display())))?;
        records.entry(rec.image_id).or_default().push(rec.node);
    }

    let k = taxonomy.len();
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let image_path = images_dir.join(format!("{}.png", entry.id));
        let (image, w, h) = read_png_rgb(&image_path)?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(CpSegError::Validation(format!(
                "{}: image is {w}x{h}, manifest says {}x{}",
                image_path.display(),
                manifest.width,
                manifest.height
            )));
        }
        let mask_path = dir.join("masks").join(format!("{}.pgm", entry.id));
        let (mask, mw, mh) = read_pgm(&mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(CpSegError::Validation(format!(
                "{}: mask is {mw}x{mh}, image is {w}x{h}",
                mask_path.display()
            )));
        }
        if let Some(bad) = mask.iter().find(|&&m| m as usize >= k) {
            return Err(CpSegError::Validation(format!(
                "{}: mask value {bad} outside taxonomy of {k} classes",
                mask_path.display()
            )));
        }
        let sample = SegSample {
            image_id: entry.id.clone(),
            width: w,
            height: h,
            image,
            mask,
            scene_flooded: entry.scene_flooded,
            prompt_records: records.remove(&entry.id).unwrap_or_default(),
        };
        for node in &sample.prompt_records {
            if !verify_relevance(node, &sample, &taxonomy) {
                return Err(CpSegError::Validation(format!(
                    "{}: prompt record does not verify against the mask: {node:?}",
                    entry.id
                )));
            }
        }
        samples.push(sample);
    }
    Ok(DatasetBundle {
        samples,
        taxonomy,
        seed: manifest.seed,
    })
}

/// Palette sidecar mapping class id to name and display color.
pub fn write_palette(path: &Path, taxonomy: &ClassTaxonomy) -> Result<()> {
    #[derive(Serialize)]
    struct PaletteEntry<'a> {
        id: usize,
        name: &'a str,
        color: [u8; 3],
    }
    let entries: Vec<PaletteEntry> = taxonomy
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| PaletteEntry {
            id: i,
            name: &c.name,
            color: [
                (c.color[0] * 255.0).round() as u8,
                (c.color[1] * 255.0).round() as u8,
                (c.color[2] * 255.0).round() as u8,
            ],
        })
        .collect();
    fs::write(
        path,
        serde_json::to_string_pretty(&entries).map_err(|e| CpSegError::Serde(e.to_string()))?,
    )
    .map_err(io_err(path))
}

/// Where a sample's files live inside a dataset directory.
pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{id}.png")),
        dir.join("masks").join(format!("{id}.pgm")),
    )
}
