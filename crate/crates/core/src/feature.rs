//! Binary descriptors, keypoints and the JSON Lines features file.
//!
//! Descriptors are opaque `D`-bit codes compared under Hamming distance.
//! Features are never extracted here; they are ingested from a features
//! file or produced by the synthetic generator in [`crate::eval::synth`].

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// ORB descriptor width.
pub const DEFAULT_DESCRIPTOR_BITS: u32 = 256;

/// Per-image feature cap used when loading features files.
pub const DEFAULT_FEATURE_CAP: usize = 2000;

type Words = SmallVec<[u64; 4]>;

/// A fixed-width binary descriptor.
///
/// Byte `k` of the external (hex / file) representation holds bits
/// `8k..8k+8`; bytes are packed little-endian into 64-bit words. Padding
/// bits beyond `width` are always zero.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Descriptor {
    width: u32,
    words: Words,
}

impl Descriptor {
    pub fn zeros(width: u32) -> Self {
        assert!(width > 0 && width % 8 == 0, "descriptor width must be a positive multiple of 8");
        Descriptor {
            width,
            words: SmallVec::from_elem(0, words_for(width)),
        }
    }

    pub fn ones(width: u32) -> Self {
        let mut d = Self::zeros(width);
        for w in d.words.iter_mut() {
            *w = u64::MAX;
        }
        d.mask_tail();
        d
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, width: u32) -> Self {
        let mut d = Self::zeros(width);
        for w in d.words.iter_mut() {
            *w = rng.gen();
        }
        d.mask_tail();
        d
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::MalformedInput("empty descriptor".into()));
        }
        let width = (bytes.len() * 8) as u32;
        let mut d = Self::zeros(width);
        for (i, b) in bytes.iter().enumerate() {
            d.words[i / 8] |= (*b as u64) << ((i % 8) * 8);
        }
        Ok(d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.width as usize / 8)
            .map(|i| (self.words[i / 8] >> ((i % 8) * 8)) as u8)
            .collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::MalformedInput(format!("bad descriptor hex: {e}")))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: u32) -> bool {
        assert!(i < self.width);
        (self.words[(i / 64) as usize] >> (i % 64)) & 1 == 1
    }

    pub fn flip_bit(&mut self, i: u32) {
        assert!(i < self.width);
        self.words[(i / 64) as usize] ^= 1u64 << (i % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Hamming distance; errors when widths differ.
    pub fn hamming(&self, other: &Descriptor) -> Result<u32> {
        if self.width != other.width {
            return Err(Error::MalformedInput(format!(
                "descriptor width mismatch: {} vs {}",
                self.width, other.width
            )));
        }
        Ok(self.distance(other))
    }

    /// Hamming distance for descriptors already known to share a width.
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> u32 {
        debug_assert_eq!(self.width, other.width);
        hamming_words(&self.words, &other.words)
    }

    /// `popcount(self AND other)`: the inner product of the 0/1 coordinate vectors.
    #[inline]
    pub fn dot(&self, other: &Descriptor) -> u32 {
        debug_assert_eq!(self.width, other.width);
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    fn mask_tail(&mut self) {
        let rem = self.width % 64;
        if rem != 0 {
            let last = self.words.len() - 1;
            self.words[last] &= (1u64 << rem) - 1;
        }
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Descriptor({})", self.to_hex())
    }
}

pub(crate) fn words_for(width: u32) -> usize {
    (width as usize + 63) / 64
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Free-function form of [`Descriptor::hamming`].
pub fn hamming(a: &Descriptor, b: &Descriptor) -> Result<u32> {
    a.hamming(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y }
    }
}

/// Keypoints and descriptors of one image, paired by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl ImageFeatures {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
    ) -> Result<Self> {
        let f = ImageFeatures {
            image_id: image_id.into(),
            width,
            height,
            keypoints,
            descriptors,
        };
        f.validate(usize::MAX)?;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_width(&self) -> Option<u32> {
        self.descriptors.first().map(Descriptor::width)
    }

    fn validate(&self, cap: usize) -> Result<()> {
        let rec = || format!("image {}", self.image_id);
        if self.width == 0 || self.height == 0 {
            return Err(Error::parse(rec(), "image dimensions must be positive"));
        }
        if self.keypoints.len() != self.descriptors.len() {
            return Err(Error::parse(
                rec(),
                format!(
                    "{} keypoints but {} descriptors",
                    self.keypoints.len(),
                    self.descriptors.len()
                ),
            ));
        }
        if self.keypoints.len() > cap {
            return Err(Error::parse(
                rec(),
                format!("{} features exceed the per-image cap {cap}", self.keypoints.len()),
            ));
        }
        for (i, kp) in self.keypoints.iter().enumerate() {
            let inside = kp.x >= 0.0
                && kp.y >= 0.0
                && kp.x < self.width as f64
                && kp.y < self.height as f64;
            if !inside {
                return Err(Error::parse(
                    rec(),
                    format!("keypoint {i} at ({}, {}) lies outside {}x{}", kp.x, kp.y, self.width, self.height),
                ));
            }
        }
        if let Some(w) = self.descriptor_width() {
            if let Some(i) = self.descriptors.iter().position(|d| d.width() != w) {
                return Err(Error::parse(rec(), format!("descriptor {i} width differs from descriptor 0")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    image_id: String,
    width: u32,
    height: u32,
    keypoints: Vec<[f64; 2]>,
    descriptors: Vec<String>,
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<ImageFeatures>> {
    load_features_capped(path, DEFAULT_FEATURE_CAP)
}

pub fn load_features_capped(path: impl AsRef<Path>, cap: usize) -> Result<Vec<ImageFeatures>> {
    read_features(File::open(path)?, cap)
}

/// Parses a features stream: one JSON object per line, blank lines ignored.
pub fn read_features<R: Read>(reader: R, cap: usize) -> Result<Vec<ImageFeatures>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut width: Option<u32> = None;
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("line {}", lineno + 1);
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(where_.clone(), e.to_string()))?;
        let where_ = format!("line {} (image {})", lineno + 1, rec.image_id);
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::parse(where_, "duplicate image_id"));
        }
        let mut descriptors = Vec::with_capacity(rec.descriptors.len());
        for (i, h) in rec.descriptors.iter().enumerate() {
            let d = Descriptor::from_hex(h)
                .map_err(|e| Error::parse(where_.clone(), format!("descriptor {i}: {e}")))?;
            let w = *width.get_or_insert(d.width());
            if d.width() != w {
                return Err(Error::parse(
                    where_.clone(),
                    format!("descriptor {i} has {} bits, dataset uses {w}", d.width()),
                ));
            }
            descriptors.push(d);
        }
        let f = ImageFeatures {
            image_id: rec.image_id,
            width: rec.width,
            height: rec.height,
            keypoints: rec.keypoints.iter().map(|p| Keypoint::new(p[0], p[1])).collect(),
            descriptors,
        };
        f.validate(cap).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(where_.clone(), message),
            other => other,
        })?;
        out.push(f);
    }
    Ok(out)
}

pub fn save_features(path: impl AsRef<Path>, images: &[ImageFeatures]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, images)?;
    w.flush()?;
    Ok(())
}

pub fn write_features<W: Write>(mut w: W, images: &[ImageFeatures]) -> Result<()> {
    for img in images {
        let rec = FeatureRecord {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            keypoints: img.keypoints.iter().map(|k| [k.x, k.y]).collect(),
            descriptors: img.descriptors.iter().map(Descriptor::to_hex).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
