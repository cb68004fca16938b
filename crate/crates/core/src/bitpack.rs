//! MSB-first bit streams.

use crate::error::{Error, Result};

#[derive(Default, Debug)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nacc: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, width: u32) {
        assert!(width <= 64, "field too wide");
        debug_assert!(width == 64 || value >> width == 0, "value does not fit in {width} bits");
        if width > 32 {
            self.write(value >> 32, width - 32);
            self.write(value & 0xFFFF_FFFF, 32);
            return;
        }
        self.acc = (self.acc << width) | value;
        self.nacc += width;
        while self.nacc >= 8 {
            self.nacc -= 8;
            self.bytes.push((self.acc >> self.nacc) as u8);
        }
        self.acc &= (1u64 << self.nacc) - 1;
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8 + self.nacc as usize
    }

    /// Pads the final partial byte with zeros.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nacc > 0 {
            self.bytes.push((self.acc << (8 - self.nacc)) as u8);
        }
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn read(&mut self, width: u32) -> Result<u64> {
        if self.pos + width as usize > self.bytes.len() * 8 {
            return Err(Error::Format("bitstream truncated".into()));
        }
        let mut v = 0u64;
        for _ in 0..width {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn msb_first_layout() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        w.write(0b1, 1);
        w.write(0xAB, 8);
        assert_eq!(w.bit_len(), 12);
        // 1011 1010 1011 (0000 pad)
        assert_eq!(w.finish(), vec![0b1011_1010, 0b1011_0000]);
    }

    #[test]
    fn reader_detects_truncation() {
        let mut r = BitReader::new(&[0xFF]);
        assert_eq!(r.read(5).unwrap(), 0b11111);
        assert!(r.read(4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(fields in prop::collection::vec((1u32..=64, any::<u64>()), 0..50)) {
            let fields: Vec<(u32, u64)> = fields.into_iter().map(|(w, v)| (w, if w == 64 { v } else { v & ((1u64 << w) - 1) })).collect();
            let mut wr = BitWriter::new();
            for &(w, v) in &fields {
                wr.write(v, w);
            }
            let bits = wr.bit_len();
            let bytes = wr.finish();
            prop_assert_eq!(bytes.len(), (bits + 7) / 8);
            let mut rd = BitReader::new(&bytes);
            for &(w, v) in &fields {
                prop_assert_eq!(rd.read(w).unwrap(), v);
            }
        }
    }
}
