use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ccm_core::classifier::LiveClassifier;
use ccm_core::eval::synth::synth_generate;
use ccm_core::eval::{
    ablate as run_ablation, ablation_variants, build_collections, evaluate as run_evaluation, load_annotations,
    oracle_scores, write_curves_csv, Dataset, Pipeline, SuccessCurve,
};
use ccm_core::feature::{load_features, ImageFeatures};
use ccm_core::map::{
    build_place_models, compress_place, load_map, save_map, space_cost, CompressedMap, MapHeader, MapStore,
};
use ccm_core::proposals::{load_proposals, ProposalSet};
use ccm_core::ranking::write_ranking_csv;
use ccm_core::vocabulary::{build_vocabulary, Vocabulary};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

fn with_path(path: &Path) -> impl Fn(ccm_core::Error) -> CliError + '_ {
    move |e| match e {
        ccm_core::Error::Io(io) => CliError::io(path, io),
        other => CliError::new(other.kind(), format!("{}: {other}", path.display())),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::missing(flag, command))
}

fn features(cfg: &RunConfig, command: &str) -> Result<Vec<ImageFeatures>, CliError> {
    if cfg.paths.features.is_empty() {
        return Err(CliError::missing("features", command));
    }
    let mut out = Vec::new();
    for p in &cfg.paths.features {
        out.extend(load_features(p).map_err(with_path(p))?);
    }
    Ok(out)
}

fn proposals(p: &Option<PathBuf>) -> Result<Option<ProposalSet>, CliError> {
    p.as_deref().map(|p| load_proposals(p).map_err(with_path(p))).transpose()
}

fn vocabulary(cfg: &RunConfig, command: &str) -> Result<Arc<Vocabulary>, CliError> {
    let p = require(&cfg.paths.vocab, "vocab", command)?;
    Ok(Arc::new(Vocabulary::load(p).map_err(with_path(p))?))
}

fn store(cfg: &RunConfig, command: &str) -> Result<MapStore, CliError> {
    let vocab = vocabulary(cfg, command)?;
    let p = require(&cfg.paths.map, "map", command)?;
    let map = load_map(p).map_err(with_path(p))?;
    MapStore::from_compressed(map, vocab).map_err(with_path(p))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Writes the resolved config next to `out`.
fn write_sidecar(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let path = sidecar_path(out);
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::to_writer_pretty(
        f,
        &json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "config": cfg }),
    )?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

pub fn vocab_build(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "vocab-build")?;
    let sets = features(cfg, "vocab-build")?;
    let vocab = build_vocabulary(&sets, cfg.vocab_size(), cfg.seed)?;
    vocab.save(out).map_err(with_path(out))?;
    write_sidecar(out, "vocab-build", cfg)?;
    print_json(&json!({
        "words": vocab.len(),
        "bits": vocab.bits(),
        "descriptor_bits": vocab.width(),
        "hash": hex::encode(vocab.hash()),
    }))
}

pub fn map_build(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "map-build")?;
    let vocab = vocabulary(cfg, "map-build")?;
    let reference = features(cfg, "map-build")?;
    let props = proposals(&cfg.paths.proposals)?;
    let pc = cfg.pipeline(vocab.width())?;
    let models = build_place_models(&reference, props.as_ref(), &vocab, &pc.mining, &pc.classifier, &pc.build)?;
    let header = MapHeader::new(&vocab, pc.build.place_len, &pc.classifier);
    let map = CompressedMap { header, places: models.into_iter().map(compress_place).collect() };
    save_map(out, &map).map_err(with_path(out))?;
    let report = space_cost(&map.places, &map.header)?;
    let mut cost_path = out.as_os_str().to_owned();
    cost_path.push(".cost.json");
    let cost_path = PathBuf::from(cost_path);
    serde_json::to_writer_pretty(create(&cost_path)?, &report)?;
    write_sidecar(out, "map-build", cfg)?;
    print_json(&json!({
        "places": map.places.len(),
        "images": reference.len(),
        "space_cost_bits": report.total_bits,
        "positive_bits": report.positive_bits,
        "serialized_bytes": report.serialized_bytes,
    }))
}

pub fn compress(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "compress")?;
    let mut store = store(cfg, "compress")?;
    let before = store.to_compressed_map()?;
    for id in 0..store.len() {
        store.decompress(id)?;
        store.compress(id)?;
    }
    let after = store.to_compressed_map()?;
    save_map(out, &after).map_err(with_path(out))?;
    write_sidecar(out, "compress", cfg)?;
    print_json(&json!({ "places": after.places.len(), "identical": before == after }))
}

#[derive(Serialize)]
struct ClusterSummary {
    background: bool,
    regions: usize,
    negatives: usize,
    positives: usize,
    classifier: String,
    support_vectors: Option<usize>,
    bias: Option<f64>,
    platt_a: Option<f64>,
    platt_b: Option<f64>,
    dual_objective: Option<f64>,
}

pub fn decompress(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "decompress")?;
    let mut store = store(cfg, "decompress")?;
    let mut places = Vec::new();
    for id in 0..store.len() {
        let model = store.decompress(id)?;
        let images: Vec<_> = model
            .images
            .iter()
            .map(|img| {
                let clusters: Vec<ClusterSummary> = img
                    .clusters
                    .iter()
                    .map(|c| {
                        let svm = match &c.classifier {
                            LiveClassifier::Svm(s) => Some(s),
                            LiveClassifier::Nn(_) => None,
                        };
                        ClusterSummary {
                            background: c.compressed.is_background,
                            regions: c.compressed.regions.len(),
                            negatives: c.compressed.negative_count(),
                            positives: c.compressed.positives.len(),
                            classifier: c.classifier.kind().to_string(),
                            support_vectors: svm.map(|s| s.support_vectors().len()),
                            bias: svm.map(|s| s.bias()),
                            platt_a: svm.map(|s| s.platt().a),
                            platt_b: svm.map(|s| s.platt().b),
                            dual_objective: svm.map(|s| s.dual_objective()),
                        }
                    })
                    .collect();
                json!({ "image_id": img.image_id, "clusters": clusters })
            })
            .collect();
        places.push(json!({ "place_id": id, "images": images }));
    }
    serde_json::to_writer_pretty(create(out)?, &json!({ "places": places }))?;
    write_sidecar(out, "decompress", cfg)?;
    print_json(&json!({ "places": store.len(), "decompressed": store.decompressed_ids().len() }))
}

pub fn detect(cfg: &RunConfig, query_id: Option<&str>, ref_id: &str) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "detect")?;
    let qpath = require(&cfg.paths.queries, "queries", "detect")?;
    let queries = load_features(qpath).map_err(with_path(qpath))?;
    let query = match query_id {
        Some(id) => queries
            .iter()
            .find(|q| q.image_id == id)
            .ok_or_else(|| CliError::new("lookup", format!("query image '{id}' not in {}", qpath.display())))?,
        None if queries.len() == 1 => &queries[0],
        None => return Err(CliError::new("config", "detect needs --query-id when --queries holds several images")),
    };
    let qprops = proposals(&cfg.paths.query_proposals)?;
    let boxes = qprops.as_ref().map(|s| s.get(&query.image_id).map(Vec::as_slice).unwrap_or(&[]));

    let mut store = store(cfg, "detect")?;
    let place = (0..store.len())
        .find(|&id| store.compressed(id).map(|p| p.images.iter().any(|i| i.image_id == ref_id)).unwrap_or(false))
        .ok_or_else(|| CliError::new("lookup", format!("reference image '{ref_id}' is not in the map")))?;
    let model = store.decompress(place)?;
    let reference = model.image(ref_id).expect("place holds the image");
    let rc = cfg.pipeline(store.vocabulary().width())?.ranking;
    let ranking = ccm_core::ranking::rank_query(query, boxes, reference, store.vocabulary(), &rc)?;

    let mut gt = vec![false; query.len()];
    if let Some(p) = &cfg.paths.annotations {
        let pairs = load_annotations(p).map_err(with_path(p))?;
        if let Some(pair) = pairs.iter().find(|x| x.query_id == query.image_id && x.ref_id == ref_id) {
            for (g, kp) in gt.iter_mut().zip(&query.keypoints) {
                *g = pair.is_hit(kp);
            }
        }
    }
    let mut w = csv::Writer::from_writer(create(out)?);
    write_ranking_csv(&mut w, 0, &query.image_id, &ranking.ranked, &gt)?;
    w.flush()?;
    write_sidecar(out, "detect", cfg)?;
    let max_p = ranking.ranked.iter().filter(|f| !f.excluded).map(|f| f.p).fold(0.0, f64::max);
    print_json(&json!({
        "query_id": query.image_id,
        "ref_id": ref_id,
        "features": ranking.ranked.len(),
        "max_p": max_p,
        "low_confidence_registration": ranking.registration.low_confidence,
    }))
}

fn dataset(cfg: &RunConfig, command: &str) -> Result<Dataset, CliError> {
    let reference = features(cfg, command)?;
    let qpath = require(&cfg.paths.queries, "queries", command)?;
    let queries = load_features(qpath).map_err(with_path(qpath))?;
    let apath = require(&cfg.paths.annotations, "annotations", command)?;
    let pairs = load_annotations(apath).map_err(with_path(apath))?;
    Ok(Dataset::new(
        reference,
        proposals(&cfg.paths.proposals)?,
        queries,
        proposals(&cfg.paths.query_proposals)?,
        pairs,
    )?)
}

fn curve_summary(c: &SuccessCurve) -> serde_json::Value {
    json!({ "method": c.method, "ratios": c.ratios, "collections": c.collections })
}

pub fn evaluate(cfg: &RunConfig, with_oracle: bool) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "evaluate")?;
    let data = dataset(cfg, "evaluate")?;
    let collections = build_collections(&data.pairs, cfg.collection_size, cfg.collections, cfg.seed)?;
    let pipe = match &cfg.paths.map {
        Some(_) => {
            let mut store = store(cfg, "evaluate")?;
            let pc = cfg.pipeline(store.vocabulary().width())?;
            let mut models = Vec::with_capacity(store.len());
            for id in 0..store.len() {
                models.push((*store.decompress(id)?).clone());
            }
            Pipeline::from_models(models, Arc::clone(store.vocabulary()), pc)?
        }
        None => {
            let vocab = vocabulary(cfg, "evaluate")?;
            let pc = cfg.pipeline(vocab.width())?;
            Pipeline::build(&data, vocab, pc)?
        }
    };
    let (curve, _) = run_evaluation("pipeline", &collections, |p| pipe.score_pair(&data, p))?;
    let mut curves = vec![curve];
    if with_oracle {
        curves.push(run_evaluation("oracle", &collections, |p| oracle_scores(&data, p))?.0);
    }
    write_curves_csv(create(out)?, &curves)?;
    write_sidecar(out, "evaluate", cfg)?;
    print_json(&curves.iter().map(curve_summary).collect::<Vec<_>>())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "ablate")?;
    let data = dataset(cfg, "ablate")?;
    let vocab = vocabulary(cfg, "ablate")?;
    let base = cfg.pipeline(vocab.width())?;
    let collections = build_collections(&data.pairs, cfg.collection_size, cfg.collections, cfg.seed)?;
    let results = run_ablation(&data, vocab, &collections, &ablation_variants(&base))?;
    let mut curves: Vec<SuccessCurve> = results.iter().map(|r| r.curve.clone()).collect();
    curves.push(run_evaluation("oracle", &collections, |p| oracle_scores(&data, p))?.0);
    write_curves_csv(create(out)?, &curves)?;
    write_sidecar(out, "ablate", cfg)?;
    let summary: Vec<_> = results
        .iter()
        .map(|r| {
            let mut s = curve_summary(&r.curve);
            s["clusters_per_image_min"] = json!(r.clusters_per_image.iter().min());
            s["clusters_per_image_max"] = json!(r.clusters_per_image.iter().max());
            s
        })
        .collect();
    print_json(&summary)
}

fn parse_trajectory(arg: &str) -> Result<Vec<usize>, CliError> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(|e| CliError::io(Path::new(arg), e))?
    } else {
        arg.to_string()
    };
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::new("parse", format!("trajectory entry '{t}' is not a place id"))))
        .collect()
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "simulate")?;
    let arg = cfg.paths.trajectory.as_deref().ok_or_else(|| CliError::missing("trajectory", "simulate"))?;
    let trajectory = parse_trajectory(arg)?;
    let mut store = store(cfg, "simulate")?;
    let rows = store.simulate(&trajectory, cfg.window)?;
    let mut w = csv::Writer::from_writer(create(out)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_sidecar(out, "simulate", cfg)?;
    let peak = rows.iter().map(|r| r.decompressed_places).max().unwrap_or(0);
    let ratio = rows
        .iter()
        .filter(|r| r.compressed_bits > 0)
        .map(|r| r.resident_bits as f64 / r.compressed_bits as f64)
        .fold(f64::INFINITY, f64::min);
    print_json(&json!({
        "frames": rows.len(),
        "max_decompressed": peak,
        "min_raw_to_compressed_ratio": if ratio.is_finite() { Some(ratio) } else { None },
    }))
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "out", "synth")?;
    let ds = synth_generate(&cfg.synth)?;
    ds.write(out).map_err(with_path(out))?;
    write_sidecar(&out.join("run"), "synth", cfg)?;
    print_json(&json!({
        "reference_images": ds.reference.len(),
        "query_images": ds.queries.len(),
        "change_pairs": ds.pairs.iter().filter(|p| p.is_change()).count(),
        "ekb_records": ds.ekb.len(),
    }))
}
