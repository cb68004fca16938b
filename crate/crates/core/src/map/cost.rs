use serde::Serialize;

use super::codec::{encode_cluster, encode_place, payload_bits, MapHeader};
use super::CompressedPlace;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterCost {
    pub image_id: String,
    pub cluster_index: usize,
    pub negative_words: usize,
    /// `sum over stored negatives of (B + B'_r)`.
    pub bits: u64,
    pub positive_words: usize,
    /// `|S+| * B`, kept out of `bits`.
    pub positive_bits: u64,
    /// Serialized record size, fixed fields included.
    pub record_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaceCost {
    pub place_id: usize,
    pub bits: u64,
    pub positive_bits: u64,
    pub serialized_bytes: usize,
    pub clusters: Vec<ClusterCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceCostReport {
    pub vocab_bits: u32,
    /// Total space cost `C` over stored negatives.
    pub total_bits: u64,
    pub positive_bits: u64,
    /// Sum of the place records; the file header is not included.
    pub serialized_bytes: usize,
    pub places: Vec<PlaceCost>,
}

pub fn space_cost(places: &[CompressedPlace], header: &MapHeader) -> Result<SpaceCostReport> {
    let b = header.vocab_bits;
    let mut report = SpaceCostReport {
        vocab_bits: b,
        total_bits: 0,
        positive_bits: 0,
        serialized_bytes: 0,
        places: Vec::with_capacity(places.len()),
    };
    for p in places {
        let mut pc = PlaceCost {
            place_id: p.place_id,
            bits: 0,
            positive_bits: 0,
            serialized_bytes: encode_place(p, header)?.len(),
            clusters: Vec::new(),
        };
        for img in &p.images {
            for (i, c) in img.clusters.iter().enumerate() {
                let positive_bits = c.positives.len() as u64 * b as u64;
                let mut rec = Vec::new();
                encode_cluster(&mut rec, c, header)?;
                let cc = ClusterCost {
                    image_id: img.image_id.clone(),
                    cluster_index: i,
                    negative_words: c.negative_count(),
                    bits: payload_bits(c, b) - positive_bits,
                    positive_words: c.positives.len(),
                    positive_bits,
                    record_bytes: rec.len(),
                };
                pc.bits += cc.bits;
                pc.positive_bits += positive_bits;
                pc.clusters.push(cc);
            }
        }
        report.total_bits += pc.bits;
        report.positive_bits += pc.positive_bits;
        report.serialized_bytes += pc.serialized_bytes;
        report.places.push(pc);
    }
    Ok(report)
}
