//! Visual-word vocabulary: a codebook of exemplar descriptors.
//!
//! The vocabulary doubles as the external knowledge base from which
//! positive (change) examples are mined. Quantization is an exact
//! nearest-neighbour scan with ties broken towards the lowest word id;
//! exemplars are distinct, so a descriptor that is itself an exemplar
//! short-circuits through a sorted index.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature::{hamming_words, words_for, Descriptor, ImageFeatures};

pub type WordId = u32;

const MAGIC: &[u8; 8] = b"CCMVOCAB";
const VERSION: u32 = 1;

/// Default desk-scale vocabulary size.
pub const DEFAULT_VOCAB_BITS: u32 = 16;

pub struct Vocabulary {
    width: u32,
    stride: usize,
    data: Vec<u64>,
    seed: u64,
    sorted: Vec<WordId>,
    hash: [u8; 32],
}

impl std::fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vocabulary")
            .field("width", &self.width)
            .field("len", &self.len())
            .field("bits", &self.bits())
            .field("seed", &self.seed)
            .finish()
    }
}

/// Samples `size` distinct exemplars uniformly without replacement from the
/// deduplicated descriptor pool of `feature_sets`.
pub fn build_vocabulary(feature_sets: &[ImageFeatures], size: usize, seed: u64) -> Result<Vocabulary> {
    let mut pool: Vec<&Descriptor> = feature_sets.iter().flat_map(|f| f.descriptors.iter()).collect();
    if let Some(first) = pool.first() {
        let w = first.width();
        if pool.iter().any(|d| d.width() != w) {
            return Err(Error::MalformedInput("descriptor widths differ across feature sets".into()));
        }
    }
    pool.sort_unstable();
    pool.dedup();
    if size < 2 {
        return Err(Error::Config(format!("vocabulary size must be at least 2, got {size}")));
    }
    if pool.len() < size {
        return Err(Error::Capacity {
            requested: size,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), size);
    let exemplars: Vec<Descriptor> = picked.iter().map(|i| pool[i].clone()).collect();
    Vocabulary::from_exemplars(exemplars, seed)
}

impl Vocabulary {
    /// Wraps an explicit exemplar list (ids follow list order).
    pub fn from_exemplars(exemplars: Vec<Descriptor>, seed: u64) -> Result<Self> {
        if exemplars.len() < 2 {
            return Err(Error::Config("a vocabulary needs at least 2 exemplars".into()));
        }
        if exemplars.len() > u32::MAX as usize {
            return Err(Error::Config("vocabulary too large for 32-bit word ids".into()));
        }
        let width = exemplars[0].width();
        let stride = words_for(width);
        let mut data = Vec::with_capacity(stride * exemplars.len());
        for d in &exemplars {
            if d.width() != width {
                return Err(Error::MalformedInput("exemplar widths differ".into()));
            }
            data.extend_from_slice(d.words());
        }
        let mut v = Vocabulary {
            width,
            stride,
            data,
            seed,
            sorted: Vec::new(),
            hash: [0; 32],
        };
        v.index()?;
        Ok(v)
    }

    fn index(&mut self) -> Result<()> {
        let mut sorted: Vec<WordId> = (0..self.len() as WordId).collect();
        sorted.sort_unstable_by(|a, b| self.row(*a).cmp(self.row(*b)));
        if sorted.windows(2).any(|w| self.row(w[0]) == self.row(w[1])) {
            return Err(Error::MalformedInput("vocabulary exemplars are not pairwise distinct".into()));
        }
        self.sorted = sorted;
        self.hash = Sha256::digest(self.to_bytes()).into();
        Ok(())
    }

    #[inline]
    fn row(&self, id: WordId) -> &[u64] {
        let s = id as usize * self.stride;
        &self.data[s..s + self.stride]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Appearance-word width `B = ceil(log2 |V|)`.
    pub fn bits(&self) -> u32 {
        ceil_log2(self.len() as u64)
    }

    /// SHA-256 of the serialized vocabulary file.
    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn lookup(&self, id: WordId) -> Result<Descriptor> {
        if id as usize >= self.len() {
            return Err(Error::Index {
                index: id as usize,
                len: self.len(),
            });
        }
        Ok(self.exemplar(id))
    }

    pub(crate) fn exemplar(&self, id: WordId) -> Descriptor {
        let bytes: Vec<u8> = self
            .row(id)
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(self.width as usize / 8)
            .collect();
        Descriptor::from_bytes(&bytes).expect("non-empty exemplar")
    }

    /// Hamming distance between two exemplars.
    #[inline]
    pub fn word_distance(&self, a: WordId, b: WordId) -> u32 {
        hamming_words(self.row(a), self.row(b))
    }

    /// Hamming distance from an exemplar to an arbitrary descriptor.
    #[inline]
    pub fn distance_to(&self, id: WordId, d: &Descriptor) -> u32 {
        hamming_words(self.row(id), d.words())
    }

    pub fn quantize(&self, d: &Descriptor) -> Result<WordId> {
        if d.width() != self.width {
            return Err(Error::MalformedInput(format!(
                "descriptor has {} bits, vocabulary uses {}",
                d.width(),
                self.width
            )));
        }
        if let Ok(pos) = self.sorted.binary_search_by(|id| self.row(*id).cmp(d.words())) {
            return Ok(self.sorted[pos]);
        }
        Ok(self.scan(d))
    }

    /// Exhaustive nearest-exemplar scan, lowest id on ties.
    pub fn scan(&self, d: &Descriptor) -> WordId {
        let q = d.words();
        let mut best = (u32::MAX, 0u32);
        for (id, row) in self.data.chunks_exact(self.stride).enumerate() {
            let dist = hamming_words(row, q);
            if dist < best.0 {
                best = (dist, id as WordId);
                if dist == 0 {
                    break;
                }
            }
        }
        best.1
    }

    /// Quantizes a batch in parallel; output order matches input order.
    pub fn quantize_all(&self, ds: &[Descriptor]) -> Result<Vec<WordId>> {
        ds.par_iter().map(|d| self.quantize(d)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.width as usize / 8;
        let mut out = Vec::with_capacity(32 + self.len() * nbytes);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for row in self.data.chunks_exact(self.stride) {
            out.extend(row.iter().flat_map(|w| w.to_le_bytes()).take(nbytes));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("vocabulary file: {m}"));
        if bytes.len() < 32 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        if width == 0 || width % 8 != 0 {
            return Err(fmt(&format!("invalid descriptor width {width}")));
        }
        let nbytes = width as usize / 8;
        let body = &bytes[32..];
        if body.len() != count.checked_mul(nbytes).ok_or_else(|| fmt("size overflow"))? {
            return Err(fmt(&format!("expected {count} exemplars of {nbytes} bytes, found {} bytes", body.len())));
        }
        let exemplars = body
            .chunks_exact(nbytes)
            .map(Descriptor::from_bytes)
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::from_exemplars(exemplars, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn ceil_log2(n: u64) -> u32 {
    assert!(n >= 1);
    if n == 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::Keypoint;
    use proptest::prelude::*;
    use rand::Rng;

    fn pool_image(descs: Vec<Descriptor>) -> ImageFeatures {
        let kps = (0..descs.len()).map(|i| Keypoint::new(i as f64, 0.0)).collect();
        ImageFeatures::new("pool", descs.len().max(1) as u32, 1, kps, descs).unwrap()
    }

    fn random_pool(seed: u64, n: usize) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Descriptor::random(&mut rng, 256)).collect()
    }

    #[test]
    fn exhaustive_sample_takes_whole_pool() {
        let pool = random_pool(3, 10);
        let v = build_vocabulary(&[pool_image(pool.clone())], 10, 99).unwrap();
        assert_eq!(v.len(), 10);
        let mut got: Vec<_> = (0..10).map(|i| v.lookup(i).unwrap()).collect();
        let mut want = pool;
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn capacity_error_reports_pool_size() {
        let mut pool = random_pool(4, 5);
        pool.push(pool[0].clone());
        match build_vocabulary(&[pool_image(pool)], 6, 0) {
            Err(Error::Capacity { requested: 6, available: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bits_is_ceil_log2() {
        assert_eq!(ceil_log2(1 << 20), 20);
        assert_eq!(ceil_log2((1 << 20) + 1), 21);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(1 << 16), 16);
    }

    #[test]
    fn quantize_cases() {
        let pool = random_pool(5, 12);
        let v = Vocabulary::from_exemplars(pool.clone(), 0).unwrap();
        assert_eq!(v.quantize(&pool[7]).unwrap(), 7);

        let v2 = Vocabulary::from_exemplars(vec![Descriptor::zeros(256), Descriptor::ones(256)], 0).unwrap();
        let mut d = Descriptor::zeros(256);
        for i in 0..10 {
            d.flip_bit(i * 7);
        }
        // distances 10 and 246
        assert_eq!(v2.distance_to(0, &d), 10);
        assert_eq!(v2.distance_to(1, &d), 246);
        assert_eq!(v2.quantize(&d).unwrap(), 0);
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_id() {
        let mut ex = random_pool(6, 6);
        // exemplars 2 and 5 differ in exactly two bits; the query sits between them
        let mut e5 = ex[2].clone();
        e5.flip_bit(0);
        e5.flip_bit(1);
        ex[5] = e5;
        let v = Vocabulary::from_exemplars(ex.clone(), 0).unwrap();
        let mut q = ex[2].clone();
        q.flip_bit(0);
        assert_eq!(v.distance_to(2, &q), v.distance_to(5, &q));
        assert_eq!(v.quantize(&q).unwrap(), 2);
    }

    #[test]
    fn lookup_bounds() {
        let pool = random_pool(7, 4);
        let v = Vocabulary::from_exemplars(pool.clone(), 0).unwrap();
        assert_eq!(v.lookup(0).unwrap(), pool[0]);
        assert!(matches!(v.lookup(4), Err(Error::Index { index: 4, len: 4 })));
        for (k, e) in pool.iter().enumerate() {
            assert_eq!(v.lookup(v.quantize(e).unwrap()).unwrap(), *e, "exemplar {k}");
        }
    }

    #[test]
    fn rejects_duplicate_exemplars_and_width_mismatch() {
        let pool = random_pool(8, 3);
        let dup = vec![pool[0].clone(), pool[1].clone(), pool[0].clone()];
        assert!(Vocabulary::from_exemplars(dup, 0).is_err());
        let v = Vocabulary::from_exemplars(pool, 0).unwrap();
        assert!(v.quantize(&Descriptor::zeros(128)).is_err());
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = build_vocabulary(&[pool_image(random_pool(9, 50))], 32, 4).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..8], b"CCMVOCAB");
        assert_eq!(bytes.len(), 32 + 32 * 32);
        let back = Vocabulary::from_bytes(&bytes).unwrap();
        assert_eq!(back.hash(), v.hash());
        assert_eq!(back.seed(), 4);
        for i in 0..32 {
            assert_eq!(back.lookup(i).unwrap(), v.lookup(i).unwrap());
        }
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Vocabulary::from_bytes(&truncated).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn build_is_deterministic_and_members_map_to_themselves(seed in any::<u64>(), size in 2usize..40) {
            let img = pool_image(random_pool(10, 40));
            let a = build_vocabulary(std::slice::from_ref(&img), size, seed).unwrap();
            let b = build_vocabulary(std::slice::from_ref(&img), size, seed).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
            for id in 0..a.len() as WordId {
                prop_assert_eq!(a.quantize(&a.lookup(id).unwrap()).unwrap(), id);
            }
        }

        #[test]
        fn quantize_matches_scan_and_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Vocabulary::from_exemplars(random_pool(seed ^ 1, 64), 0).unwrap();
            for _ in 0..20 {
                let mut d = v.lookup(rng.gen_range(0..64)).unwrap();
                for _ in 0..rng.gen_range(0..100) {
                    d.flip_bit(rng.gen_range(0..256));
                }
                let id = v.quantize(&d).unwrap();
                let best = (0..64).map(|i| v.distance_to(i, &d)).min().unwrap();
                prop_assert_eq!(v.distance_to(id, &d), best);
                prop_assert_eq!(v.quantize(&v.lookup(id).unwrap()).unwrap(), id);
            }
        }
    }
}
