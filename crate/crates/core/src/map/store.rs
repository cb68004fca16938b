use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::codec::{encode_place, CompressedMap, MapHeader};
use super::{compress_place, decompress_place, CompressedPlace, PlaceModel};
use crate::error::{Error, Result};
use crate::vocabulary::Vocabulary;

pub const DEFAULT_WINDOW: usize = 1;

/// Raw storage per keypoint in a live classifier (two `f32`).
pub const KEYPOINT_BITS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "action", content = "place", rename_all = "lowercase")]
pub enum Action {
    Compress(usize),
    Decompress(usize),
}

#[derive(Clone, Debug)]
enum Slot {
    Compressed(CompressedPlace),
    Decompressed(Arc<PlaceModel>),
}

/// All places of a map, each either compressed or decompressed.
///
/// Mutation goes through `&mut self`; decompressed places are handed out
/// as shared immutable snapshots.
#[derive(Clone, Debug)]
pub struct MapStore {
    header: MapHeader,
    vocab: Arc<Vocabulary>,
    slots: Vec<Slot>,
}

/// One row of a replayed trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimRow {
    pub frame_id: usize,
    pub place_id: usize,
    /// Raw storage of the decompressed places: `D + 64` bits per negative
    /// (descriptor plus keypoint) and `D` per positive.
    pub resident_bits: u64,
    /// Serialized size of the same places.
    pub compressed_bits: u64,
    /// Whole-map footprint: resident places raw, the rest serialized.
    pub map_bits: u64,
    pub decompressed_places: usize,
}

impl MapStore {
    /// Wraps a loaded map with every place compressed.
    pub fn from_compressed(map: CompressedMap, vocab: Arc<Vocabulary>) -> Result<Self> {
        if map.header.vocab_hash != vocab.hash() {
            return Err(Error::Integrity("map was built with a different vocabulary".into()));
        }
        Ok(MapStore {
            header: map.header,
            vocab,
            slots: map.places.into_iter().map(Slot::Compressed).collect(),
        })
    }

    /// Wraps freshly built places, all decompressed.
    pub fn from_models(models: Vec<PlaceModel>, header: MapHeader, vocab: Arc<Vocabulary>) -> Result<Self> {
        if header.vocab_hash != vocab.hash() || models.iter().any(|m| m.vocab_hash != header.vocab_hash) {
            return Err(Error::Integrity("place models were built with a different vocabulary".into()));
        }
        Ok(MapStore {
            header,
            vocab,
            slots: models.into_iter().map(|m| Slot::Decompressed(Arc::new(m))).collect(),
        })
    }

    pub fn header(&self) -> &MapHeader {
        &self.header
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn check(&self, id: usize) -> Result<()> {
        if id >= self.slots.len() {
            return Err(Error::Lookup(format!("unknown place {id} (map has {})", self.slots.len())));
        }
        Ok(())
    }

    pub fn is_decompressed(&self, id: usize) -> Result<bool> {
        self.check(id)?;
        Ok(matches!(self.slots[id], Slot::Decompressed(_)))
    }

    pub fn decompressed_ids(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| matches!(self.slots[i], Slot::Decompressed(_)))
            .collect()
    }

    /// Live model of a decompressed place.
    pub fn model(&self, id: usize) -> Result<Option<Arc<PlaceModel>>> {
        self.check(id)?;
        Ok(match &self.slots[id] {
            Slot::Decompressed(m) => Some(Arc::clone(m)),
            Slot::Compressed(_) => None,
        })
    }

    /// Compressed form of any place.
    pub fn compressed(&self, id: usize) -> Result<CompressedPlace> {
        self.check(id)?;
        Ok(match &self.slots[id] {
            Slot::Compressed(c) => c.clone(),
            Slot::Decompressed(m) => compress_place((**m).clone()),
        })
    }

    pub fn to_compressed_map(&self) -> Result<CompressedMap> {
        Ok(CompressedMap {
            header: self.header.clone(),
            places: (0..self.len()).map(|i| self.compressed(i)).collect::<Result<_>>()?,
        })
    }

    pub fn decompress(&mut self, id: usize) -> Result<Arc<PlaceModel>> {
        self.check(id)?;
        if let Slot::Compressed(c) = &self.slots[id] {
            let m = Arc::new(decompress_place(c, &self.vocab)?);
            self.slots[id] = Slot::Decompressed(m);
        }
        Ok(self.model(id)?.expect("just decompressed"))
    }

    pub fn compress(&mut self, id: usize) -> Result<()> {
        self.check(id)?;
        if let Slot::Decompressed(m) = &self.slots[id] {
            self.slots[id] = Slot::Compressed(compress_place((**m).clone()));
        }
        Ok(())
    }

    /// Moves the decompressed window to `[current - w, current + w]`.
    ///
    /// Returns compress actions then decompress actions, each in ascending
    /// place order. Decompression of several places runs in parallel; on
    /// error the store is left unchanged.
    pub fn scheduler_step(&mut self, current: usize, w: usize) -> Result<Vec<Action>> {
        self.check(current)?;
        let lo = current.saturating_sub(w);
        let hi = current.saturating_add(w).min(self.slots.len() - 1);
        let in_window = |i: usize| (lo..=hi).contains(&i);
        let to_compress: Vec<usize> = self
            .decompressed_ids()
            .into_iter()
            .filter(|&i| !in_window(i))
            .collect();
        let to_decompress: Vec<usize> = (lo..=hi)
            .filter(|&i| matches!(self.slots[i], Slot::Compressed(_)))
            .collect();
        let decoded = to_decompress
            .par_iter()
            .map(|&i| match &self.slots[i] {
                Slot::Compressed(c) => decompress_place(c, &self.vocab).map(Arc::new),
                Slot::Decompressed(_) => unreachable!(),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut actions = Vec::with_capacity(to_compress.len() + to_decompress.len());
        for &i in &to_compress {
            self.compress(i)?;
            actions.push(Action::Compress(i));
        }
        for (&i, m) in to_decompress.iter().zip(decoded) {
            self.slots[i] = Slot::Decompressed(m);
            actions.push(Action::Decompress(i));
        }
        Ok(actions)
    }

    /// Raw bits a live copy of place `id` occupies.
    pub fn raw_bits(&self, id: usize) -> Result<u64> {
        let d = self.header.descriptor_bits as u64;
        let c = self.compressed(id)?;
        Ok(c.images
            .iter()
            .flat_map(|i| &i.clusters)
            .map(|cl| cl.negative_count() as u64 * (d + KEYPOINT_BITS) + cl.positives.len() as u64 * d)
            .sum())
    }

    /// Serialized bits of place `id`.
    pub fn serialized_bits(&self, id: usize) -> Result<u64> {
        Ok(encode_place(&self.compressed(id)?, &self.header)?.len() as u64 * 8)
    }

    /// Replays a trajectory of place ids through [`MapStore::scheduler_step`].
    pub fn simulate(&mut self, trajectory: &[usize], w: usize) -> Result<Vec<SimRow>> {
        let n = self.len();
        let raw: Vec<u64> = (0..n).map(|i| self.raw_bits(i)).collect::<Result<_>>()?;
        let ser: Vec<u64> = (0..n).map(|i| self.serialized_bits(i)).collect::<Result<_>>()?;
        let total_ser: u64 = ser.iter().sum();
        let mut rows = Vec::with_capacity(trajectory.len());
        for (frame_id, &place_id) in trajectory.iter().enumerate() {
            self.scheduler_step(place_id, w)?;
            let live = self.decompressed_ids();
            let resident_bits: u64 = live.iter().map(|&i| raw[i]).sum();
            let compressed_bits: u64 = live.iter().map(|&i| ser[i]).sum();
            rows.push(SimRow {
                frame_id,
                place_id,
                resident_bits,
                compressed_bits,
                map_bits: total_ser - compressed_bits + resident_bits,
                decompressed_places: live.len(),
            });
        }
        Ok(rows)
    }
}
