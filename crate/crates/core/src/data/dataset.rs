//! In-memory image-caption datasets, their manifests and on-disk layout.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::image_io::{images_to_tensor, Image};
use super::shapes::ShapeSpec;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { seed: u64, count: usize },
    Folder { path: PathBuf, caption_file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub image_size: usize,
    /// Leading fraction of records used for training; the rest is validation.
    pub train_fraction: f64,
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub codec: LatentCodec,
}

impl DatasetManifest {
    pub fn synthetic(seed: u64, count: usize, image_size: usize) -> Self {
        Self {
            source: DataSource::Synthetic { seed, count },
            image_size,
            train_fraction: 0.9,
            vocabulary: Vocabulary::synthetic(),
            codec: LatentCodec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size < 4 {
            problems.push(format!("image_size {} is too small", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            problems.push(format!("train_fraction {} outside [0, 1]", self.train_fraction));
        }
        if self.codec.factor == 0 || self.image_size % self.codec.factor.max(1) != 0 {
            problems.push(format!("latent factor {} does not divide image_size {}", self.codec.factor, self.image_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub caption: String,
    pub tokens: Vec<u32>,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<Record>,
}

fn record_name(i: usize) -> String {
    format!("{i:06}.ppm")
}

fn synthetic_record(seed: u64, index: usize, size: usize, vocab: &Vocabulary) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let spec = ShapeSpec::random(&mut rng);
    let jitter = if size >= 12 { (rng.random_range(-1..=1), rng.random_range(-1..=1)) } else { (0, 0) };
    let image = Image { width: size, height: size, data: spec.render(size, jitter) };
    let caption = spec.caption();
    Record { name: record_name(index), tokens: vocab.tokenize(&caption), caption, image }
}

/// Renders the synthetic dataset described by `manifest`. Each index has its
/// own RNG stream, so the result does not depend on the thread count.
pub fn generate_synthetic(manifest: &DatasetManifest) -> Result<Dataset> {
    let DataSource::Synthetic { seed, count } = manifest.source else {
        return Err(Error::config("generate_synthetic needs a synthetic source"));
    };
    manifest.validate()?;
    let size = manifest.image_size;
    let vocab = &manifest.vocabulary;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let records = std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(count)).map(|i| synthetic_record(seed, i, size, vocab)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    });
    Ok(Dataset { manifest: manifest.clone(), records })
}

fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data { path: path.into(), message: e.to_string() })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (name, caption) = line.split_once('\t').ok_or_else(|| Error::Data {
            path: path.into(),
            message: format!("line {} has no tab separator", n + 1),
        })?;
        out.push((name.trim().to_string(), caption.trim().to_string()));
    }
    Ok(out)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "ppm", "pnm"];

/// Loads a folder of images with a `filename<TAB>caption` file. Images are
/// resized on the shorter edge and centre-cropped to `image_size`. Images
/// without a caption are skipped with a warning; unreadable images fail the
/// whole ingestion, listing every such file.
pub fn ingest_folder(path: impl AsRef<Path>, caption_file: impl AsRef<Path>, image_size: usize) -> Result<Dataset> {
    let dir = path.as_ref();
    let caption_file = caption_file.as_ref();
    let captions: HashMap<String, String> = read_captions(caption_file)?.into_iter().collect();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data { path: dir.into(), message: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_lowercase().as_str()))
        })
        .collect();
    files.sort();

    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for file in files {
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(caption) = captions.get(&name) else {
            log::warn!("{}: no caption, skipping", file.display());
            continue;
        };
        match Image::read(&file).and_then(|img| img.resize_center_crop(image_size)) {
            Ok(image) => kept.push((name, caption.clone(), image)),
            Err(e) => failures.push(format!("{} ({e})", file.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Data { path: dir.into(), message: format!("unreadable images: {}", failures.join(", ")) });
    }
    let vocabulary = Vocabulary::from_captions(kept.iter().map(|(_, c, _)| c.as_str()));
    let records = kept
        .into_iter()
        .map(|(name, caption, image)| Record { name, tokens: vocabulary.tokenize(&caption), caption, image })
        .collect();
    let manifest = DatasetManifest {
        source: DataSource::Folder { path: dir.into(), caption_file: caption_file.into() },
        image_size,
        train_fraction: 0.9,
        vocabulary,
        codec: LatentCodec::default(),
    };
    Ok(Dataset { manifest, records })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rebuilds a dataset from its manifest alone.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        match &manifest.source {
            DataSource::Synthetic { .. } => generate_synthetic(manifest),
            DataSource::Folder { path, caption_file } => {
                let mut ds = ingest_folder(path, caption_file, manifest.image_size)?;
                ds.manifest.train_fraction = manifest.train_fraction;
                ds.manifest.codec = manifest.codec;
                Ok(ds)
            }
        }
    }

    pub fn with_train_fraction(mut self, fraction: f64) -> Self {
        self.manifest.train_fraction = fraction;
        self
    }

    fn split_point(&self) -> usize {
        ((self.len() as f64 * self.manifest.train_fraction).round() as usize).min(self.len())
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.split_point()
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.split_point()..self.len()
    }

    /// Latent batch `[B, 3, h, w]` in `[-1, 1]` after the manifest codec.
    /// `flips[i]` mirrors record `indices[i]` horizontally.
    pub fn batch(&self, indices: &[usize], flips: &[bool], device: &Device, dtype: DType) -> Result<Tensor> {
        let flipped: Vec<Image> = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let rec = self.records.get(i).ok_or_else(|| Error::Domain(format!("record {i} out of range")))?;
                Ok(if flips.get(k).copied().unwrap_or(false) { rec.image.flip_horizontal() } else { rec.image.clone() })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = flipped.iter().collect();
        self.manifest.codec.encode(&images_to_tensor(&refs, device, dtype)?)
    }

    /// Writes `images/NNNNNN.ppm`, `captions.tsv` and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("images"))?;
        let mut tsv = BufWriter::new(std::fs::File::create(dir.join("captions.tsv"))?);
        for (i, rec) in self.records.iter().enumerate() {
            let name = record_name(i);
            rec.image.write_ppm(dir.join("images").join(&name))?;
            writeln!(tsv, "{name}\t{}", rec.caption)?;
        }
        tsv.flush()?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Data { path: manifest_path.clone(), message: e.to_string() })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut records = Vec::new();
        for (name, caption) in read_captions(&dir.join("captions.tsv"))? {
            let image = Image::read(dir.join("images").join(&name))?;
            if (image.width, image.height) != (manifest.image_size, manifest.image_size) {
                return Err(Error::Data {
                    path: dir.join("images").join(&name),
                    message: format!("{}x{} image, manifest says {}", image.width, image.height, manifest.image_size),
                });
            }
            records.push(Record { tokens: manifest.vocabulary.tokenize(&caption), name, caption, image });
        }
        Ok(Self { manifest, records })
    }
}
