//! On-disk formats: 16-bit binary PGM images, the Kaggle-style mask CSV
//! (`id,class,segmentation`), the dataset manifest, and PNG renders.

use super::phantom::PhantomConfig;
use super::rle::{rle_decode, rle_encode};
use super::{DataError, Dataset, Sample, CLASS_NAMES};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// One mask CSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleRecord {
    /// `{scan_id}_slice_{index}`.
    pub id: String,
    pub class_name: String,
    pub rle: String,
}

/// Split a sample id back into scan id and slice index.
pub fn parse_sample_id(id: &str) -> Result<(String, usize), DataError> {
    let (scan, idx) = id.rsplit_once("_slice_").ok_or_else(|| DataError::Format {
        path: id.into(),
        message: "sample id must look like {scan_id}_slice_{index}".into(),
    })?;
    let index = idx.parse().map_err(|_| DataError::Format {
        path: id.into(),
        message: format!("bad slice index {idx:?}"),
    })?;
    Ok((scan.to_string(), index))
}

// ── PGM ─────────────────────────────────────────────────────────────

/// Write a `[H, W]` or `[1, H, W]` image in `[0, 1]` as binary P5 PGM with
/// maxval 65535 (sample bytes big-endian, per the Netpbm convention).
pub fn write_pgm16(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (h, w, data) = plane_of(image, path)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a binary P5 PGM (maxval 255 or 65535) into a `[H, W]` tensor
/// scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path)?;
    let err = |message: String| DataError::Format { path: path.display().to_string(), message };

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(err("not a binary P5 PGM".into()));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| err("bad width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| err("bad height".into()))?;
    let maxval: u32 = token(&bytes)?.parse().map_err(|_| err("bad maxval".into()))?;
    pos += 1; // single whitespace byte after maxval
    if w == 0 || h == 0 {
        return Err(err("zero-sized image".into()));
    }

    let data: Vec<f64> = match maxval {
        255 => {
            let raster = bytes.get(pos..pos + w * h).ok_or_else(|| err("truncated raster".into()))?;
            raster.iter().map(|&b| f64::from(b) / 255.0).collect()
        }
        65535 => {
            let raster =
                bytes.get(pos..pos + 2 * w * h).ok_or_else(|| err("truncated raster".into()))?;
            raster
                .chunks_exact(2)
                .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
                .collect()
        }
        other => return Err(err(format!("unsupported maxval {other}"))),
    };
    Ok(Tensor::new(vec![h, w], data)?)
}

// ── PNG renders ─────────────────────────────────────────────────────

/// 8-bit grayscale PNG for human viewing (the PGM stays the lossless copy).
pub fn write_png_gray(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (h, w, data) = plane_of(image, path)?;
    let pixels: Vec<u8> =
        data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, w as u32, h as u32, png::ColorType::Grayscale, &pixels)
}

/// RGB PNG from raw bytes (row-major, 3 bytes per pixel).
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    if rgb.len() != 3 * width * height {
        return Err(DataError::Format {
            path: path.display().to_string(),
            message: format!("rgb buffer length {} != 3*{width}*{height}", rgb.len()),
        });
    }
    write_png(path, width as u32, height as u32, png::ColorType::Rgb, rgb)
}

fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    data: &[u8],
) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err(path))?;
    writer.write_image_data(data).map_err(png_err(path))?;
    Ok(())
}

fn png_err(path: &Path) -> impl Fn(png::EncodingError) -> DataError + '_ {
    move |e| DataError::Format { path: path.display().to_string(), message: e.to_string() }
}

fn plane_of<'t>(image: &'t Tensor, path: &Path) -> Result<(usize, usize, &'t [f64]), DataError> {
    match image.shape() {
        &[h, w] => Ok((h, w, image.data())),
        &[1, h, w] => Ok((h, w, image.data())),
        other => Err(DataError::Format {
            path: path.display().to_string(),
            message: format!("expected [H, W] or [1, H, W], got {other:?}"),
        }),
    }
}

// ── Mask CSV ────────────────────────────────────────────────────────

/// Write the Kaggle-layout mask CSV: header `id,class,segmentation`, three
/// rows per sample in fixed class order.
pub fn write_mask_csv(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,class,segmentation")?;
    for sample in dataset.samples() {
        let (c, h, w) = (
            sample.mask.shape()[0],
            sample.mask.shape()[1],
            sample.mask.shape()[2],
        );
        for (ci, class) in CLASS_NAMES.iter().enumerate().take(c) {
            let channel = Tensor::new(
                vec![h, w],
                sample.mask.data()[ci * h * w..(ci + 1) * h * w].to_vec(),
            )?;
            writeln!(out, "{},{},{}", sample.id(), class, rle_encode(&channel)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_mask_csv(path: &Path) -> Result<Vec<RleRecord>, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let err = |message: String| DataError::Format { path: path.display().to_string(), message };
    let mut lines = text.lines();
    match lines.next() {
        Some("id,class,segmentation") => {}
        other => return Err(err(format!("bad header {other:?}"))),
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (id, class_name, rle) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(err(format!("line {}: expected 3 fields", lineno + 2))),
        };
        if !CLASS_NAMES.contains(&class_name) {
            return Err(err(format!("line {}: unknown class {class_name:?}", lineno + 2)));
        }
        records.push(RleRecord {
            id: id.to_string(),
            class_name: class_name.to_string(),
            rle: rle.to_string(),
        });
    }
    Ok(records)
}

// ── Dataset directory layout ────────────────────────────────────────

/// Write `dir/{name}/{id}.pgm` images plus `dir/{name}.csv` masks.
pub fn save_dataset(dir: &Path, name: &str, dataset: &Dataset) -> Result<(), DataError> {
    let img_dir = dir.join(name);
    std::fs::create_dir_all(&img_dir)?;
    for sample in dataset.samples() {
        write_pgm16(&img_dir.join(format!("{}.pgm", sample.id())), &sample.image)?;
    }
    write_mask_csv(&dir.join(format!("{name}.csv")), dataset)?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]; sample order follows the CSV.
pub fn load_dataset(dir: &Path, name: &str) -> Result<Dataset, DataError> {
    let csv = dir.join(format!("{name}.csv"));
    let records = read_mask_csv(&csv)?;
    let mut by_id: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !by_id.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        by_id.entry(r.id).or_default().insert(r.class_name, r.rle);
    }
    let mut samples = Vec::with_capacity(order.len());
    for id in order {
        let image = read_pgm(&dir.join(name).join(format!("{id}.pgm")))?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let rles = &by_id[&id];
        let mut mask = Vec::with_capacity(3 * h * w);
        for class in CLASS_NAMES {
            let rle = rles.get(class).map(String::as_str).unwrap_or("");
            mask.extend_from_slice(rle_decode(rle, h, w)?.data());
        }
        let (scan_id, slice_index) = parse_sample_id(&id)?;
        samples.push(Sample {
            scan_id,
            slice_index,
            image: Tensor::new(vec![1, h, w], image.into_data())?,
            mask: Tensor::new(vec![3, h, w], mask)?,
        });
    }
    Ok(Dataset::new(samples))
}

/// Manifest: generator config echo plus per-scan and per-class counts.
/// Slice counts are reported both as distinct images and as class-positive
/// slices, since the two notions differ.
pub fn write_manifest(
    path: &Path,
    cfg: &PhantomConfig,
    test_fraction: f64,
    split_seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "segattack phantom manifest v1")?;
    writeln!(
        out,
        "generator: n_scans={} slices_per_scan={} image_size={} noise_level={} edge_softness={} seed={}",
        cfg.n_scans, cfg.slices_per_scan, cfg.image_size, cfg.noise_level, cfg.edge_softness, cfg.seed
    )?;
    for (name, class) in CLASS_NAMES.iter().zip(&cfg.classes) {
        writeln!(
            out,
            "class {name}: blobs={}..{} radius={}..{} intensity={}..{} presence={}",
            class.blob_count.0,
            class.blob_count.1,
            class.radius.0,
            class.radius.1,
            class.intensity.0,
            class.intensity.1,
            class.presence
        )?;
    }
    writeln!(out, "split: test_fraction={test_fraction} seed={split_seed}")?;
    for (split, ds) in [("train", train), ("test", test)] {
        for scan in ds.scan_ids() {
            let slices = ds.samples().iter().filter(|s| s.scan_id == scan).count();
            writeln!(out, "scan {scan} slices={slices} split={split}")?;
        }
    }
    for (split, ds) in [("train", train), ("test", test)] {
        let with_any = ds.with_masks().len();
        let mut per_class = [0usize; 3];
        for s in ds.samples() {
            let plane = s.mask.shape()[1] * s.mask.shape()[2];
            for (ci, count) in per_class.iter_mut().enumerate() {
                if s.mask.data()[ci * plane..(ci + 1) * plane].iter().any(|&v| v != 0.0) {
                    *count += 1;
                }
            }
        }
        writeln!(
            out,
            "{split}: images={} images_with_any_mask={with_any} positive_slices large_bowel={} small_bowel={} stomach={}",
            ds.len(),
            per_class[0],
            per_class[1],
            per_class[2]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Best-effort loader for the real Kaggle competition layout. Untested
/// against the actual archive (it is competition-gated); documented here so
/// real data can slot in where phantoms are used.
///
/// Expected layout under `root`:
///   train.csv                      with columns id,class,segmentation
///   images/{id}.pgm                one 16-bit PGM per slice, pre-extracted
///
/// The original archive ships 16-bit PNGs nested per case/day; convert them
/// to PGM named by slice id to use this loader.
pub fn load_kaggle_layout(root: &Path) -> Result<Dataset, DataError> {
    let csv = root.join("train.csv");
    let records = read_mask_csv(&csv)?;
    let mut ids: Vec<String> = Vec::new();
    for r in &records {
        if ids.last() != Some(&r.id) {
            ids.push(r.id.clone());
        }
    }
    ids.dedup();
    let mut by_id: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    for r in &records {
        by_id.entry(&r.id).or_default().insert(&r.class_name, &r.rle);
    }
    let mut samples = Vec::new();
    for id in &ids {
        let image = read_pgm(&root.join("images").join(format!("{id}.pgm")))?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut mask = Vec::with_capacity(3 * h * w);
        for class in CLASS_NAMES {
            let rle = by_id[id.as_str()].get(class).copied().unwrap_or("");
            mask.extend_from_slice(rle_decode(rle, h, w)?.data());
        }
        let (scan_id, slice_index) = parse_sample_id(id)?;
        samples.push(Sample {
            scan_id,
            slice_index,
            image: Tensor::new(vec![1, h, w], image.into_data())?,
            mask: Tensor::new(vec![3, h, w], mask)?,
        });
    }
    Ok(Dataset::new(samples))
}
