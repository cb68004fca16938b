//! Binary map file.
//!
//! ```text
//! header   "CCMMAP01" | vocab hash [32] | D u32 | B u32 | L u32 | places u32
//!          | c_reg f64 | tol f64 | sigma_d f64
//! place    images u32 | image*
//! image    id_len u16 | id utf8 | width u32 | height u32 | clusters u32 | cluster*
//! cluster  flags u8 | kind u8 | kernel u8 | gamma f64 | coef0 f64 | degree f64 | seed u64
//!          | regions u32 | (x0 y0 x1 y1 u32, words u32)* | positives u32 | payload
//! payload  per region: words x (B-bit appearance, B'-bit pose), sorted
//!          then positives x B-bit appearance; MSB-first, zero-padded to a byte
//! ```
//!
//! Integers are little-endian. `flags` bit 0 marks the background
//! cluster, bit 1 the NN fallback (no positives).

use std::path::Path;

use crate::bitpack::{BitReader, BitWriter};
use crate::classifier::{ClassifierConfig, ClassifierKind, KernelKind, KernelParams};
use crate::error::{Error, Result};
use crate::proposals::BoundingBox;

use super::{CompressedCluster, CompressedImage, CompressedPlace, CompressedRegion, VisualWord};

pub const MAP_MAGIC: &[u8; 8] = b"CCMMAP01";

const FLAG_BACKGROUND: u8 = 1;
const FLAG_NN_FALLBACK: u8 = 2;

/// Map-wide parameters shared by every cluster record.
#[derive(Clone, Debug, PartialEq)]
pub struct MapHeader {
    pub vocab_hash: [u8; 32],
    pub descriptor_bits: u32,
    pub vocab_bits: u32,
    pub place_len: u32,
    pub c_reg: f64,
    pub tol: f64,
    pub sigma_d: f64,
}

impl MapHeader {
    pub const ENCODED_LEN: usize = 8 + 32 + 4 * 4 + 3 * 8;

    pub fn new(vocab: &crate::vocabulary::Vocabulary, place_len: usize, cfg: &ClassifierConfig) -> Self {
        MapHeader {
            vocab_hash: vocab.hash(),
            descriptor_bits: vocab.width(),
            vocab_bits: vocab.bits(),
            place_len: place_len as u32,
            c_reg: cfg.c_reg,
            tol: cfg.tol,
            sigma_d: cfg.sigma_d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMap {
    pub header: MapHeader,
    pub places: Vec<CompressedPlace>,
}

/// Just the bit-packed example stream of one cluster.
pub fn encode_payload(c: &CompressedCluster, vocab_bits: u32) -> Result<Vec<u8>> {
    let mut w = BitWriter::new();
    let limit = 1u64 << vocab_bits;
    for r in &c.regions {
        let pb = r.pose_bits();
        for vw in &r.words {
            if vw.appearance as u64 >= limit {
                return Err(Error::Format(format!("word {} does not fit in {vocab_bits} bits", vw.appearance)));
            }
            if vw.pose >= r.bbox.area() {
                return Err(Error::Format(format!("pose word {} outside its region", vw.pose)));
            }
            w.write(vw.appearance as u64, vocab_bits);
            w.write(vw.pose, pb);
        }
    }
    for &p in &c.positives {
        if p as u64 >= limit {
            return Err(Error::Format(format!("word {p} does not fit in {vocab_bits} bits")));
        }
        w.write(p as u64, vocab_bits);
    }
    Ok(w.finish())
}

/// Bit length of [`encode_payload`] before padding.
pub fn payload_bits(c: &CompressedCluster, vocab_bits: u32) -> u64 {
    let neg: u64 = c
        .regions
        .iter()
        .map(|r| r.words.len() as u64 * (vocab_bits + r.pose_bits()) as u64)
        .sum();
    neg + c.positives.len() as u64 * vocab_bits as u64
}

/// Full cluster record, header fields included.
pub fn encode_cluster(out: &mut Vec<u8>, c: &CompressedCluster, header: &MapHeader) -> Result<()> {
    let cfg = &c.config;
    if cfg.c_reg != header.c_reg || cfg.tol != header.tol || cfg.sigma_d != header.sigma_d {
        return Err(Error::Config("cluster C_reg/tol/sigma_d differ from the map header".into()));
    }
    if c.regions.is_empty() || c.negative_count() == 0 {
        return Err(Error::Format("cluster without negatives".into()));
    }
    let mut flags = 0;
    if c.is_background {
        flags |= FLAG_BACKGROUND;
    }
    if c.uses_nn_fallback() {
        flags |= FLAG_NN_FALLBACK;
    }
    out.push(flags);
    out.push(cfg.kind.code());
    out.push(cfg.kernel.code());
    out.extend_from_slice(&cfg.params.gamma.to_le_bytes());
    out.extend_from_slice(&cfg.params.coef0.to_le_bytes());
    out.extend_from_slice(&(cfg.params.degree as f64).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(out, c.regions.len())?;
    for r in &c.regions {
        for v in [r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(out, r.words.len())?;
    }
    put_u32(out, c.positives.len())?;
    out.extend(encode_payload(c, header.vocab_bits)?);
    Ok(())
}

/// Self-contained record of one place; places never share bytes.
pub fn encode_place(p: &CompressedPlace, header: &MapHeader) -> Result<Vec<u8>> {
    if p.vocab_hash != header.vocab_hash {
        return Err(Error::Integrity(format!("place {} belongs to another vocabulary", p.place_id)));
    }
    let mut out = Vec::new();
    put_u32(&mut out, p.images.len())?;
    for img in &p.images {
        let id = img.image_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Format(format!("image id '{}' too long", img.image_id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&img.width.to_le_bytes());
        out.extend_from_slice(&img.height.to_le_bytes());
        put_u32(&mut out, img.clusters.len())?;
        for c in &img.clusters {
            encode_cluster(&mut out, c, header)?;
        }
    }
    Ok(out)
}

pub fn encode_header(h: &MapHeader, place_count: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(MapHeader::ENCODED_LEN);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&h.vocab_hash);
    out.extend_from_slice(&h.descriptor_bits.to_le_bytes());
    out.extend_from_slice(&h.vocab_bits.to_le_bytes());
    out.extend_from_slice(&h.place_len.to_le_bytes());
    put_u32(&mut out, place_count)?;
    out.extend_from_slice(&h.c_reg.to_le_bytes());
    out.extend_from_slice(&h.tol.to_le_bytes());
    out.extend_from_slice(&h.sigma_d.to_le_bytes());
    Ok(out)
}

pub fn encode_map(m: &CompressedMap) -> Result<Vec<u8>> {
    let mut out = encode_header(&m.header, m.places.len())?;
    for p in &m.places {
        out.extend(encode_place(p, &m.header)?);
    }
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<CompressedMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAP_MAGIC {
        return Err(Error::Format("not a map file (bad magic)".into()));
    }
    let mut vocab_hash = [0u8; 32];
    vocab_hash.copy_from_slice(cur.take(32)?);
    let descriptor_bits = cur.u32()?;
    let vocab_bits = cur.u32()?;
    let place_len = cur.u32()?;
    let n_places = cur.u32()? as usize;
    let header = MapHeader {
        vocab_hash,
        descriptor_bits,
        vocab_bits,
        place_len,
        c_reg: cur.f64()?,
        tol: cur.f64()?,
        sigma_d: cur.f64()?,
    };
    if !(1..=32).contains(&vocab_bits) {
        return Err(Error::Format(format!("vocabulary bits {vocab_bits} out of range")));
    }
    let mut places = Vec::with_capacity(n_places.min(1 << 16));
    for place_id in 0..n_places {
        places.push(read_place(&mut cur, place_id, &header)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last place", bytes.len() - cur.pos)));
    }
    Ok(CompressedMap { header, places })
}

/// Decodes one record produced by [`encode_place`].
pub fn decode_place(bytes: &[u8], place_id: usize, header: &MapHeader) -> Result<CompressedPlace> {
    let mut cur = Cursor { bytes, pos: 0 };
    let p = read_place(&mut cur, place_id, header)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after place record".into()));
    }
    Ok(p)
}

pub fn save_map(path: impl AsRef<Path>, m: &CompressedMap) -> Result<()> {
    std::fs::write(path, encode_map(m)?)?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<CompressedMap> {
    decode_map(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("unexpected end of map data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_place(cur: &mut Cursor, place_id: usize, h: &MapHeader) -> Result<CompressedPlace> {
    let n_images = cur.u32()? as usize;
    let mut images = Vec::with_capacity(n_images.min(1 << 12));
    for _ in 0..n_images {
        let len = cur.u16()? as usize;
        let image_id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("image id is not UTF-8".into()))?
            .to_string();
        let width = cur.u32()?;
        let height = cur.u32()?;
        let n_clusters = cur.u32()? as usize;
        let mut clusters = Vec::with_capacity(n_clusters.min(1 << 12));
        for _ in 0..n_clusters {
            clusters.push(read_cluster(cur, h, width, height)?);
        }
        images.push(CompressedImage { image_id, width, height, clusters });
    }
    Ok(CompressedPlace { place_id, vocab_hash: h.vocab_hash, images })
}

fn read_cluster(cur: &mut Cursor, h: &MapHeader, width: u32, height: u32) -> Result<CompressedCluster> {
    let flags = cur.u8()?;
    if flags & !(FLAG_BACKGROUND | FLAG_NN_FALLBACK) != 0 {
        return Err(Error::Format(format!("unknown cluster flags {flags:#04x}")));
    }
    let kind = ClassifierKind::from_code(cur.u8()?)?;
    let kernel = KernelKind::from_code(cur.u8()?)?;
    let gamma = cur.f64()?;
    let coef0 = cur.f64()?;
    let degree = cur.f64()?;
    if !(degree >= 0.0 && degree <= u32::MAX as f64 && degree.fract() == 0.0) {
        return Err(Error::Format(format!("invalid polynomial degree {degree}")));
    }
    let seed = cur.u64()?;
    let n_regions = cur.u32()? as usize;
    let mut boxes = Vec::with_capacity(n_regions.min(1 << 12));
    for _ in 0..n_regions {
        let (x0, y0, x1, y1) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
        let bbox = BoundingBox::new(x0, y0, x1, y1).map_err(|e| Error::Format(e.to_string()))?;
        if !bbox.within(width, height) {
            return Err(Error::Format(format!("region {x0},{y0},{x1},{y1} outside {width}x{height} image")));
        }
        boxes.push((bbox, cur.u32()? as usize));
    }
    let n_pos = cur.u32()? as usize;
    let mut bits: u64 = n_pos as u64 * h.vocab_bits as u64;
    for (b, n) in &boxes {
        bits += *n as u64 * (h.vocab_bits + super::pose_bits(b)) as u64;
    }
    let payload = cur.take(bits.div_ceil(8) as usize)?;
    let mut rd = BitReader::new(payload);
    let mut regions = Vec::with_capacity(boxes.len());
    for (bbox, n) in boxes {
        let pb = super::pose_bits(&bbox);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            let appearance = rd.read(h.vocab_bits)? as u32;
            let pose = rd.read(pb)?;
            if pose >= bbox.area() {
                return Err(Error::Format(format!("pose word {pose} outside its region")));
            }
            words.push(VisualWord { appearance, pose });
        }
        regions.push(CompressedRegion { bbox, words });
    }
    let positives = (0..n_pos).map(|_| rd.read(h.vocab_bits).map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
    let c = CompressedCluster {
        is_background: flags & FLAG_BACKGROUND != 0,
        regions,
        positives,
        config: ClassifierConfig {
            kind,
            kernel,
            params: KernelParams { gamma, coef0, degree: degree as u32 },
            c_reg: h.c_reg,
            tol: h.tol,
            sigma_d: h.sigma_d,
            seed,
        },
    };
    if c.uses_nn_fallback() != (flags & FLAG_NN_FALLBACK != 0) {
        return Err(Error::Format("NN fallback flag disagrees with positive count".into()));
    }
    if c.negative_count() == 0 {
        return Err(Error::Format("cluster without negatives".into()));
    }
    Ok(c)
}
