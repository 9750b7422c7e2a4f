//! On-disk tile dataset layout.
//!
//! ```text
//! <root>/
//!   manifest.json            tile ids, class vocabulary, tile dimensions
//!   tiles/<tile_id>/
//!     image.png              8-bit RGB
//!     instance.png           16-bit grayscale, pixel value = instance id
//!     class.png              8-bit grayscale, pixel value = class id
//! ```
//!
//! Tile ids iterate in sorted order everywhere, so every consumer sees one
//! deterministic ordering.

use crate::label_space::{ClassVocabulary, LabelSpaceError, SemanticLabelMap};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest missing at {0}")]
    ManifestMissing(PathBuf),
    #[error("malformed manifest: {0}")]
    ManifestMalformed(String),
    #[error("tile {tile_id} corrupt: {reason}")]
    TileCorrupt { tile_id: String, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Label(#[from] LabelSpaceError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Dataset-level manifest, serialized as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tiles: Vec<String>,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<[u8; 3]>>,
    pub width: u32,
    pub height: u32,
}

impl Manifest {
    pub fn vocabulary(&self) -> Result<ClassVocabulary, LabelSpaceError> {
        match &self.colors {
            Some(colors) => ClassVocabulary::with_colors(self.classes.clone(), colors.clone()),
            None => ClassVocabulary::new(self.classes.clone()),
        }
    }
}

/// Handle to a tile dataset rooted at `root`. Construction only reads the
/// manifest; tiles load lazily.
#[derive(Debug, Clone)]
pub struct TileDataset {
    root: PathBuf,
    manifest: Manifest,
    vocab: ClassVocabulary,
}

/// One loaded tile: RGB image plus its semantic label map.
#[derive(Debug, Clone)]
pub struct Tile {
    pub id: String,
    pub image: RgbImage,
    pub labels: SemanticLabelMap,
}

impl TileDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(DatasetError::ManifestMissing(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| DatasetError::ManifestMalformed(e.to_string()))?;
        manifest.tiles.sort();
        let vocab = manifest.vocabulary()?;
        Ok(TileDataset { root, manifest, vocab })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    /// Tile ids in sorted order.
    pub fn tile_ids(&self) -> &[String] {
        &self.manifest.tiles
    }

    pub fn len(&self) -> usize {
        self.manifest.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.tiles.is_empty()
    }

    pub fn tile_dir(&self, tile_id: &str) -> PathBuf {
        self.root.join("tiles").join(tile_id)
    }

    pub fn load_tile(&self, tile_id: &str) -> Result<Tile, DatasetError> {
        let dir = self.tile_dir(tile_id);
        let corrupt = |reason: String| DatasetError::TileCorrupt {
            tile_id: tile_id.to_string(),
            reason,
        };

        let image = image::open(dir.join("image.png"))
            .map_err(|e| corrupt(format!("image.png: {e}")))?
            .into_rgb8();
        let instance = image::open(dir.join("instance.png"))
            .map_err(|e| corrupt(format!("instance.png: {e}")))?
            .into_luma16();
        let class = image::open(dir.join("class.png"))
            .map_err(|e| corrupt(format!("class.png: {e}")))?
            .into_luma8();

        let (w, h) = (self.manifest.width, self.manifest.height);
        for (name, iw, ih) in [
            ("image.png", image.width(), image.height()),
            ("instance.png", instance.width(), instance.height()),
            ("class.png", class.width(), class.height()),
        ] {
            if (iw, ih) != (w, h) {
                return Err(corrupt(format!(
                    "{name} is {iw}x{ih}, manifest says {w}x{h}"
                )));
            }
        }

        let (h, w) = (h as usize, w as usize);
        let mut instance_ids = Array2::<u32>::zeros((h, w));
        let mut class_ids = Array2::<u8>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                instance_ids[(r, c)] = instance.get_pixel(c as u32, r as u32).0[0] as u32;
                class_ids[(r, c)] = class.get_pixel(c as u32, r as u32).0[0];
            }
        }
        let labels = SemanticLabelMap::new(instance_ids, class_ids, self.vocab.clone())
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(Tile { id: tile_id.to_string(), image, labels })
    }

    /// Loads every tile in sorted-id order.
    pub fn load_all(&self) -> Result<Vec<Tile>, DatasetError> {
        self.tile_ids().iter().map(|id| self.load_tile(id)).collect()
    }
}

/// Writes a complete dataset. Tile ids are sorted into the manifest; PNG
/// encoding is deterministic, so identical inputs produce identical bytes.
pub struct DatasetWriter {
    root: PathBuf,
    vocab: ClassVocabulary,
    width: u32,
    height: u32,
    tile_ids: Vec<String>,
}

impl DatasetWriter {
    pub fn create(
        root: impl AsRef<Path>,
        vocab: ClassVocabulary,
        width: u32,
        height: u32,
    ) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let tiles_dir = root.join("tiles");
        fs::create_dir_all(&tiles_dir).map_err(io_err(&tiles_dir))?;
        Ok(DatasetWriter { root, vocab, width, height, tile_ids: Vec::new() })
    }

    pub fn write_tile(
        &mut self,
        tile_id: &str,
        image: &RgbImage,
        labels: &SemanticLabelMap,
    ) -> Result<(), DatasetError> {
        let corrupt = |reason: String| DatasetError::TileCorrupt {
            tile_id: tile_id.to_string(),
            reason,
        };
        if image.width() != self.width || image.height() != self.height {
            return Err(corrupt(format!(
                "image is {}x{}, dataset is {}x{}",
                image.width(),
                image.height(),
                self.width,
                self.height
            )));
        }
        if labels.width() != self.width as usize || labels.height() != self.height as usize {
            return Err(corrupt("label map dimensions differ from dataset".into()));
        }
        if let Some(&max_id) = labels.instance_ids().iter().max() {
            if max_id > u16::MAX as u32 {
                return Err(corrupt(format!(
                    "instance id {max_id} exceeds 16-bit png range"
                )));
            }
        }

        let dir = self.root.join("tiles").join(tile_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let (h, w) = (self.height, self.width);
        let mut inst_img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w, h);
        let mut class_img: GrayImage = ImageBuffer::new(w, h);
        for r in 0..h as usize {
            for c in 0..w as usize {
                inst_img.put_pixel(
                    c as u32,
                    r as u32,
                    Luma([labels.instance_ids()[(r, c)] as u16]),
                );
                class_img.put_pixel(c as u32, r as u32, Luma([labels.class_ids()[(r, c)]]));
            }
        }
        save_png(&dir.join("image.png"), image)?;
        save_png16(&dir.join("instance.png"), &inst_img)?;
        save_png8(&dir.join("class.png"), &class_img)?;
        self.tile_ids.push(tile_id.to_string());
        Ok(())
    }

    /// Writes `manifest.json` and returns a handle to the finished dataset.
    pub fn finish(mut self) -> Result<TileDataset, DatasetError> {
        self.tile_ids.sort();
        let manifest = Manifest {
            tiles: self.tile_ids.clone(),
            classes: self.vocab.names().to_vec(),
            colors: self.vocab.colors().map(|c| c.to_vec()),
            width: self.width,
            height: self.height,
        };
        let path = self.root.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| DatasetError::ManifestMalformed(e.to_string()))?;
        fs::write(&path, json).map_err(io_err(&path))?;
        TileDataset::open(&self.root)
    }
}

fn png_io_err(path: &Path) -> impl FnOnce(image::ImageError) -> DatasetError + '_ {
    move |e| DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn save_png(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(png_io_err(path))
}

fn save_png8(path: &Path, img: &GrayImage) -> Result<(), DatasetError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(png_io_err(path))
}

fn save_png16(
    path: &Path,
    img: &ImageBuffer<Luma<u16>, Vec<u16>>,
) -> Result<(), DatasetError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(png_io_err(path))
}

/// Maps 8-bit RGB to a (3, H, W) tensor in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = px.0[ch] as f64 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`image_to_tensor`]: clamps to [-1, 1] and quantizes to u8.
pub fn tensor_to_image(t: &Array3<f64>) -> RgbImage {
    let (c, h, w) = t.dim();
    assert_eq!(c, 3, "expected a 3-channel tensor");
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = (t[(ch, r, col)].clamp(-1.0, 1.0) + 1.0) * 127.5;
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(col as u32, r as u32, Rgb(px));
        }
    }
    img
}
