use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::Keypoint;
use crate::proposals::BoundingBox;

/// One (query, reference) pair; no change boxes means a no-change pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub query_id: String,
    pub ref_id: String,
    pub change_boxes: Vec<BoundingBox>,
}

impl Pair {
    pub fn is_change(&self) -> bool {
        !self.change_boxes.is_empty()
    }

    /// Ground-truth hit: strictly inside some change box.
    pub fn is_hit(&self, kp: &Keypoint) -> bool {
        self.change_boxes.iter().any(|b| b.contains_strictly(kp))
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    query_id: String,
    ref_id: String,
    change_boxes: Vec<[u32; 4]>,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    read_annotations(File::open(path)?)
}

pub fn read_annotations<R: Read>(reader: R) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("annotation line {}", i + 1), e.to_string()))?;
        let boxes = rec
            .change_boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| BoundingBox::new(x0, y0, x1, y1))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(format!("annotation line {} (query {})", i + 1, rec.query_id), e.to_string()))?;
        if !seen.insert((rec.query_id.clone(), rec.ref_id.clone())) {
            return Err(Error::parse(
                format!("annotation line {}", i + 1),
                format!("duplicate pair ({}, {})", rec.query_id, rec.ref_id),
            ));
        }
        out.push(Pair { query_id: rec.query_id, ref_id: rec.ref_id, change_boxes: boxes });
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(w: W, pairs: &[Pair]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for p in pairs {
        let rec = AnnotationRecord {
            query_id: p.query_id.clone(),
            ref_id: p.ref_id.clone(),
            change_boxes: p.change_boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_annotations(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    write_annotations(File::create(path)?, pairs)
}

/// One change pair plus `size - 1` sampled no-change pairs, as indices
/// into the pair list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Collection {
    pub id: usize,
    pub change_pair: usize,
    pub pairs: Vec<usize>,
}

/// Collection `i` uses the `i`-th change pair; `count = None` uses all of
/// them. No-change pairs are drawn without replacement per collection.
pub fn build_collections(pairs: &[Pair], size: usize, count: Option<usize>, seed: u64) -> Result<Vec<Collection>> {
    if size == 0 {
        return Err(Error::Config("collection size must be at least 1".into()));
    }
    let change: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].is_change()).collect();
    let nochange: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].is_change()).collect();
    let count = count.unwrap_or(change.len());
    if count > change.len() {
        return Err(Error::Capacity { requested: count, available: change.len() });
    }
    if size - 1 > nochange.len() {
        return Err(Error::Capacity { requested: size - 1, available: nochange.len() });
    }
    Ok((0..count)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            let mut members = vec![change[id]];
            members.extend(
                rand::seq::index::sample(&mut rng, nochange.len(), size - 1)
                    .into_iter()
                    .map(|k| nochange[k]),
            );
            Collection { id, change_pair: change[id], pairs: members }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(change: usize, nochange: usize) -> Vec<Pair> {
        let mut v = Vec::new();
        for i in 0..change {
            v.push(Pair {
                query_id: format!("c{i}"),
                ref_id: "r".into(),
                change_boxes: vec![BoundingBox::new(0, 0, 10, 10).unwrap()],
            });
        }
        for i in 0..nochange {
            v.push(Pair { query_id: format!("n{i}"), ref_id: "r".into(), change_boxes: vec![] });
        }
        v
    }

    #[test]
    fn protocol_structure() {
        let p = pairs(5, 600);
        let cs = build_collections(&p, 100, None, 1).unwrap();
        assert_eq!(cs.len(), 5);
        for c in &cs {
            assert_eq!(c.pairs.len(), 100);
            assert_eq!(c.pairs.iter().filter(|&&i| p[i].is_change()).count(), 1);
            let uniq: HashSet<_> = c.pairs.iter().collect();
            assert_eq!(uniq.len(), 100);
        }
        assert_eq!(cs, build_collections(&p, 100, None, 1).unwrap());
        assert_ne!(cs, build_collections(&p, 100, None, 2).unwrap());
    }

    #[test]
    fn insufficient_nochange_pairs() {
        let p = pairs(1, 50);
        assert!(matches!(build_collections(&p, 100, None, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn annotation_round_trip() {
        let p = pairs(2, 3);
        let mut buf = Vec::new();
        write_annotations(&mut buf, &p).unwrap();
        assert_eq!(read_annotations(&buf[..]).unwrap(), p);
        let bad = b"{\"query_id\":\"a\",\"ref_id\":\"b\",\"change_boxes\":[[5,5,5,9]]}\n";
        let err = read_annotations(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn strict_hit_rule() {
        let p = &pairs(1, 0)[0];
        assert!(p.is_hit(&Keypoint::new(5.0, 5.0)));
        assert!(!p.is_hit(&Keypoint::new(0.0, 5.0)));
        assert!(!p.is_hit(&Keypoint::new(10.0, 5.0)));
    }
}
