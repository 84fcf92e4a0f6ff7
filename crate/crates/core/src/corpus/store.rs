use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaptionRecord, Dataset, ImageRecord, Split, SyntheticSceneSpec, DEFAULT_IMAGE_SIZE};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
struct ManifestLine {
    image: String,
    #[serde(default)]
    captions: Vec<String>,
}

/// Reads a JSON Lines manifest of `{"image": path, "captions": [...]}`.
/// Relative image paths resolve against the manifest's directory. Images are
/// center-cropped and resized to `DEFAULT_IMAGE_SIZE`.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    load_manifest_sized(path, DEFAULT_IMAGE_SIZE)
}

pub fn load_manifest_sized(path: &Path, image_size: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ds = Dataset { image_size, ..Dataset::default() };
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine =
            serde_json::from_str(&line).map_err(|source| Error::Parse { path: path.into(), line: lineno, source })?;
        let img_path = {
            let p = PathBuf::from(&entry.image);
            if p.is_absolute() { p } else { base.join(p) }
        };
        if !img_path.is_file() {
            return Err(Error::Ingest {
                path: path.into(),
                line: lineno,
                msg: format!("image file not found: {}", img_path.display()),
            });
        }
        let image_id = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::Ingest { path: path.into(), line: lineno, msg: format!("duplicate image id `{image_id}`") });
        }
        let decoded = image::open(&img_path)
            .map_err(|e| Error::Ingest { path: path.into(), line: lineno, msg: format!("{}: {e}", img_path.display()) })?
            .to_rgb8();
        let pixels = center_crop_resize(&decoded, image_size).into_raw();
        ds.images.push(ImageRecord::new(&image_id, image_size, pixels, img_path.to_string_lossy()));
        for (j, text) in entry.captions.into_iter().enumerate() {
            ds.captions.push(CaptionRecord { caption_id: format!("{image_id}_c{j}"), image_id: image_id.clone(), text });
        }
    }
    ds.sort();
    Ok(ds)
}

fn center_crop_resize(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    }
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    image_id: String,
    source_path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    split: Split,
    image_size: usize,
    n_images: usize,
    n_captions: usize,
    images: Vec<ImageMeta>,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    image_id: String,
    scene: SyntheticSceneSpec,
}

/// Writes `meta.json`, `images/<id>.png`, `captions.jsonl` and, for
/// synthetic data, `scenes.jsonl`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut metas = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let file = img_dir.join(format!("{}.png", im.image_id));
        let buf = RgbImage::from_raw(im.size as u32, im.size as u32, im.pixels.clone())
            .ok_or_else(|| Error::Contract(format!("image {} has a bad pixel buffer", im.image_id)))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::Decode { file: file.clone(), msg: e.to_string() })?;
        fs::write(&file, &bytes).map_err(|e| Error::io(&file, e))?;
        metas.push(ImageMeta {
            image_id: im.image_id.clone(),
            source_path: im.source_path.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    write_jsonl(&dir.join("captions.jsonl"), &ds.captions)?;
    if !ds.scenes.is_empty() {
        let lines: Vec<SceneLine> =
            ds.scenes.iter().map(|(k, v)| SceneLine { image_id: k.clone(), scene: v.clone() }).collect();
        write_jsonl(&dir.join("scenes.jsonl"), &lines)?;
    }
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        split: ds.split,
        image_size: ds.image_size,
        n_images: ds.images.len(),
        n_captions: ds.captions.len(),
        images: metas,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("dataset meta serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::NotADataset(dir.into()));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| Error::Parse { path: meta_path.clone(), line: 1, source })?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_FORMAT_VERSION {
        return Err(Error::Incompatible { what: "dataset", found, expected: DATASET_FORMAT_VERSION });
    }
    let meta: DatasetMeta =
        serde_json::from_value(raw).map_err(|source| Error::Parse { path: meta_path.clone(), line: 1, source })?;

    let mut images = Vec::with_capacity(meta.images.len());
    for m in &meta.images {
        let file = dir.join("images").join(format!("{}.png", m.image_id));
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if hex::encode(Sha256::digest(&bytes)) != m.sha256 {
            return Err(Error::Checksum { file });
        }
        let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map_err(|e| Error::Decode { file: file.clone(), msg: e.to_string() })?
            .to_rgb8();
        if decoded.width() as usize != meta.image_size || decoded.height() as usize != meta.image_size {
            return Err(Error::Decode { file, msg: "unexpected image size".into() });
        }
        images.push(ImageRecord::new(&m.image_id, meta.image_size, decoded.into_raw(), &m.source_path));
    }
    let captions: Vec<CaptionRecord> = read_jsonl(&dir.join("captions.jsonl"))?;
    let scenes_path = dir.join("scenes.jsonl");
    let scenes: BTreeMap<String, SyntheticSceneSpec> = if scenes_path.is_file() {
        read_jsonl::<SceneLine>(&scenes_path)?.into_iter().map(|l| (l.image_id, l.scene)).collect()
    } else {
        BTreeMap::new()
    };
    if captions.len() != meta.n_captions || images.len() != meta.n_images {
        return Err(Error::Contract(format!("{}: record counts disagree with meta.json", dir.display())));
    }
    let mut ds = Dataset { images, captions, split: meta.split, image_size: meta.image_size, scenes };
    ds.sort();
    ds.check_integrity()?;
    Ok(ds)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Parse { path: path.into(), line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;

    fn write_png(path: &Path, w: u32, h: u32) {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 7]));
        img.save(path).unwrap();
    }

    #[test]
    fn manifest_with_two_images_and_two_captions_each() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("b.png"), 80, 64);
        write_png(&dir.path().join("a.png"), 64, 64);
        let manifest = dir.path().join("m.jsonl");
        fs::write(
            &manifest,
            "{\"image\": \"b.png\", \"captions\": [\"a dog\", \"a brown dog\"]}\n{\"image\": \"a.png\", \"captions\": [\"x y z\", \"u v w\"]}\n",
        )
        .unwrap();
        let ds = load_manifest(&manifest).unwrap();
        assert_eq!(ds.images.len(), 2);
        assert_eq!(ds.captions.len(), 4);
        assert_eq!(ds.images[0].image_id, "a");
        assert_eq!(ds.images[1].pixels.len(), 64 * 64 * 3);
        ds.check_integrity().unwrap();
    }

    #[test]
    fn empty_manifest_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        fs::write(&manifest, "").unwrap();
        let ds = load_manifest(&manifest).unwrap();
        assert!(ds.images.is_empty() && ds.captions.is_empty());
    }

    #[test]
    fn missing_image_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 64, 64);
        let manifest = dir.path().join("m.jsonl");
        fs::write(&manifest, "{\"image\": \"a.png\", \"captions\": []}\n{\"image\": \"nope.png\", \"captions\": [\"a b c\"]}\n")
            .unwrap();
        let err = load_manifest(&manifest).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        fs::write(&manifest, "\n{not json}\n").unwrap();
        let err = load_manifest(&manifest).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = generate_synthetic(10, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn empty_dir_is_not_a_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NotADataset(_))));
    }

    #[test]
    fn corrupted_image_is_reported_by_name() {
        let ds = generate_synthetic(3, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("images").join(format!("{}.png", ds.images[1].image_id));
        let mut bytes = fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Checksum { file }) => assert_eq!(file, victim),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let ds = generate_synthetic(2, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Incompatible { found: 99, .. })));
    }
}
