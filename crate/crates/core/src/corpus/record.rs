use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::masks::{resolve_overlaps, OverlapWarning, TokenMaskPair};
use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, FeatureGrid};

/// Largest pixel value a 16-bit mask plane can carry.
pub const MAX_TOKENS_PER_RECORD: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub text: String,
    #[serde(rename = "id")]
    pub token_id: usize,
    pub pixel_value: u16,
    pub index_in_text: usize,
}

impl TokenEntry {
    pub fn is_whitespace(&self) -> bool {
        !self.text.is_empty() && self.text.chars().all(char::is_whitespace)
    }
}

/// Single-channel 16-bit token mask plane; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlane {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl MaskPlane {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height) as usize],
        }
    }

    /// Binary mask of the pixels carrying `value`.
    pub fn select(&self, value: u16) -> BinaryMask {
        BinaryMask {
            height: self.height as usize,
            width: self.width as usize,
            bits: self.data.iter().map(|&v| v == value).collect(),
        }
    }

    /// Pixels carrying any token value.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height as usize,
            width: self.width as usize,
            bits: self.data.iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .expect("plane length matches dims");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image {
            path: PathBuf::from("<mask>"),
            detail: e.to_string(),
        })?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8], path: &Path) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        })?;
        let (width, height) = (img.width(), img.height());
        let data = match img {
            DynamicImage::ImageLuma16(b) => b.into_raw(),
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    detail: format!("mask must be single-channel, got {:?}", other.color()),
                })
            }
        };
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// One corpus sample: image, token mask plane, QA pair and the token entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub image: RgbImage,
    pub mask: MaskPlane,
    pub question: String,
    pub answer: String,
    pub entries: Vec<TokenEntry>,
    pub image_type: Option<String>,
    pub bbox: Option<[u32; 4]>,
}

impl TokenRecord {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn token_mask(&self, entry: &TokenEntry) -> BinaryMask {
        self.mask.select(entry.pixel_value)
    }

    /// The image as an `H x W x 3` grid with values in `[0, 1]`.
    pub fn image_grid(&self) -> FeatureGrid {
        rgb_to_grid(&self.image)
    }
}

pub fn rgb_to_grid(image: &RgbImage) -> FeatureGrid {
    let data = image.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    FeatureGrid {
        height: image.height() as usize,
        width: image.width() as usize,
        dim: 3,
        data,
    }
}

pub fn grid_to_rgb(grid: &FeatureGrid) -> RgbImage {
    assert_eq!(grid.dim, 3);
    let raw = grid
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(grid.width as u32, grid.height as u32, raw).expect("dims match")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub text: String,
    pub id: usize,
    pub pixel_value: u16,
    pub index_in_text: usize,
}

/// Per-record JSON metadata document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub image: String,
    pub mask: String,
    pub width: u32,
    pub height: u32,
    pub question: String,
    pub answer: String,
    pub tokens: Vec<TokenMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
}

impl RecordMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Inputs for [`assemble_record`]: token masks in answer order plus the image.
#[derive(Debug, Clone)]
pub struct RecordParts {
    pub image: RgbImage,
    pub question: String,
    pub answer: String,
    pub pairs: Vec<TokenMaskPair>,
    pub image_type: Option<String>,
    pub bbox: Option<[u32; 4]>,
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub record: TokenRecord,
    pub warnings: Vec<OverlapWarning>,
}

/// Paints token masks into a 16-bit plane with pixel values `1..=n` in entry order.
pub fn assemble_record(parts: RecordParts) -> Result<Assembled> {
    let RecordParts {
        image,
        question,
        answer,
        mut pairs,
        image_type,
        bbox,
    } = parts;
    if pairs.len() > MAX_TOKENS_PER_RECORD {
        return Err(Error::PixelValueOverflow { count: pairs.len() });
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    for p in &pairs {
        if p.mask.width != w || p.mask.height != h {
            return Err(Error::dims(
                format!("{h}x{w}"),
                format!("{}x{}", p.mask.height, p.mask.width),
            ));
        }
    }
    let warnings = resolve_overlaps(&mut pairs);
    let mut plane = MaskPlane::zeros(w as u32, h as u32);
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let value = (i + 1) as u16;
        for (dst, &on) in plane.data.iter_mut().zip(&p.mask.bits) {
            if on {
                *dst = value;
            }
        }
        entries.push(TokenEntry {
            text: p.text.clone(),
            token_id: p.token_id,
            pixel_value: value,
            index_in_text: p.index_in_text,
        });
    }
    Ok(Assembled {
        record: TokenRecord {
            image,
            mask: plane,
            question,
            answer,
            entries,
            image_type,
            bbox,
        },
        warnings,
    })
}

/// Serialized form of one record: image PNG, mask PNG and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub image_png: Vec<u8>,
    pub mask_png: Vec<u8>,
    pub meta: RecordMeta,
}

impl EncodedRecord {
    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata serializes")
    }
}

pub fn encode_record(record: &TokenRecord, name: &str) -> Result<EncodedRecord> {
    if record.entries.len() > MAX_TOKENS_PER_RECORD {
        return Err(Error::PixelValueOverflow {
            count: record.entries.len(),
        });
    }
    let mut image_png = Cursor::new(Vec::new());
    record
        .image
        .write_to(&mut image_png, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: PathBuf::from(format!("{name}.png")),
            detail: e.to_string(),
        })?;
    let meta = RecordMeta {
        image: format!("{name}.png"),
        mask: format!("{name}_mask.png"),
        width: record.width(),
        height: record.height(),
        question: record.question.clone(),
        answer: record.answer.clone(),
        tokens: record
            .entries
            .iter()
            .map(|e| TokenMeta {
                text: e.text.clone(),
                id: e.token_id,
                pixel_value: e.pixel_value,
                index_in_text: e.index_in_text,
            })
            .collect(),
        image_type: record.image_type.clone(),
        bbox: record.bbox,
    };
    Ok(EncodedRecord {
        image_png: image_png.into_inner(),
        mask_png: record.mask.to_png()?,
        meta,
    })
}

pub fn decode_record(encoded: &EncodedRecord) -> Result<TokenRecord> {
    let image = decode_rgb(&encoded.image_png, Path::new(&encoded.meta.image))?;
    let mask = MaskPlane::from_png(&encoded.mask_png, Path::new(&encoded.meta.mask))?;
    let m = &encoded.meta;
    Ok(TokenRecord {
        image,
        mask,
        question: m.question.clone(),
        answer: m.answer.clone(),
        entries: m
            .tokens
            .iter()
            .map(|t| TokenEntry {
                text: t.text.clone(),
                token_id: t.id,
                pixel_value: t.pixel_value,
                index_in_text: t.index_in_text,
            })
            .collect(),
        image_type: m.image_type.clone(),
        bbox: m.bbox,
    })
}

pub fn decode_rgb(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Writes `<name>.png`, `<name>_mask.png` and `<name>.json` into `dir`.
pub fn write_record(dir: &Path, name: &str, record: &TokenRecord) -> Result<PathBuf> {
    let enc = encode_record(record, name)?;
    let write = |file: &str, bytes: &[u8]| {
        let p = dir.join(file);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(&enc.meta.image, &enc.image_png)?;
    write(&enc.meta.mask, &enc.mask_png)?;
    let json = dir.join(format!("{name}.json"));
    std::fs::write(&json, enc.meta_json()).map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

/// Loads the files referenced by a metadata document (paths relative to it).
pub fn read_encoded(json_path: &Path) -> Result<EncodedRecord> {
    let meta = RecordMeta::load(json_path)?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let read = |rel: &str| {
        let p = dir.join(rel);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    Ok(EncodedRecord {
        image_png: read(&meta.image)?,
        mask_png: read(&meta.mask)?,
        meta,
    })
}

pub fn read_record(json_path: &Path) -> Result<TokenRecord> {
    decode_record(&read_encoded(json_path)?)
}

/// Metadata documents in `dir`, sorted by file name.
pub fn list_records(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_json = path.extension().is_some_and(|e| e == "json");
        let is_vocab = path.file_name().is_some_and(|n| n == "vocab.json");
        if is_json && !is_vocab {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
