use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Annotation, DatasetBundle, Domain, Image, LabelMap, Sample, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const META_FILE: &str = "dataset.json";

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u64,
    pub domain: Domain,
    pub split: Split,
    pub image: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    classes: usize,
    height: usize,
    width: usize,
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| img.data()[(ch * h + y) * w + x]))
    });
    rgb.save(path)?;
    Ok(())
}

fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0u8; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch];
        }
    }
    Image::new(h, w, data)
}

fn write_label(label: &LabelMap, path: &Path) -> Result<()> {
    let gray = GrayImage::from_raw(label.width() as u32, label.height() as u32, label.data().to_vec())
        .ok_or_else(|| Error::Dataset("label buffer size mismatch".into()))?;
    gray.save(path)?;
    Ok(())
}

fn read_label(path: &Path) -> Result<LabelMap> {
    let gray = image::open(path)?.to_luma8();
    LabelMap::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

/// Writes PNG images and label maps plus a line-delimited JSON manifest.
///
/// Sealed annotations are revealed (and counted) to be written out; an
/// imported bundle starts with a fresh read counter.
pub fn export_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let meta = DatasetMeta { classes: bundle.classes, height: bundle.resolution.0, width: bundle.resolution.1 };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for split in [Split::SourceTrain, Split::TargetLabeled, Split::TargetUnlabeled, Split::TargetVal] {
        for s in bundle.split(split) {
            let record = ManifestRecord {
                id: s.id,
                domain: s.domain,
                split,
                image: format!("images/{:012x}.png", s.id),
                label: format!("labels/{:012x}.png", s.id),
            };
            write_image(&s.image, &dir.join(&record.image))?;
            let label = match &s.annotation {
                Annotation::Visible(l) => l,
                Annotation::Sealed(sealed) => sealed.reveal(),
            };
            write_label(label, &dir.join(&record.label))?;
            serde_json::to_writer(&mut manifest, &record)?;
            manifest.write_all(b"\n")?;
        }
    }
    manifest.flush()?;
    Ok(())
}

/// Reads a directory written by [`export_bundle`].
pub fn import_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE)).map_err(|e| {
        Error::Dataset(format!("{}: {e}", dir.join(META_FILE).display()))
    })?)?;
    let file = fs::File::open(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let mut sets: [Vec<Sample>; 4] = Default::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("manifest line {}: {e}", lineno + 1)))?;
        let image = read_image(&dir.join(&rec.image))?;
        let label = read_label(&dir.join(&rec.label))?;
        if (image.height(), image.width()) != (meta.height, meta.width)
            || (label.height(), label.width()) != (meta.height, meta.width)
        {
            return Err(Error::Dataset(format!("sample {:#x} does not match the dataset resolution", rec.id)));
        }
        label.validate(meta.classes)?;
        let slot = match rec.split {
            Split::SourceTrain => 0,
            Split::TargetLabeled => 1,
            Split::TargetUnlabeled => 2,
            Split::TargetVal => 3,
        };
        sets[slot].push(Sample {
            id: rec.id,
            domain: rec.domain,
            image,
            annotation: Annotation::Visible(label),
            slot_classes: Vec::new(),
        });
    }
    let [source, labeled, unlabeled, val] = sets;
    DatasetBundle::assemble(meta.classes, (meta.height, meta.width), source, labeled, unlabeled, val)
}
