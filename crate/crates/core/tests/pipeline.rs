use std::sync::Arc;
use std::time::Instant;

use ccm_core::eval::synth::{synth_generate, SynthConfig};
use ccm_core::eval::{build_collections, evaluate, oracle_scores, Pipeline, PipelineConfig};
use ccm_core::vocabulary::build_vocabulary;

fn run(cfg: SynthConfig) -> ([f64; 6], [f64; 6]) {
    let t = Instant::now();
    let ds = synth_generate(&cfg).unwrap();
    let data = ds.dataset().unwrap();
    let vocab = Arc::new(build_vocabulary(&ds.vocabulary_pool(), 1 << cfg.vocab_bits, 7).unwrap());
    eprintln!("gen+vocab {:?}", t.elapsed());
    let collections = build_collections(&data.pairs, 20, None, 3).unwrap();
    let (oracle, _) = evaluate("oracle", &collections, |p| oracle_scores(&data, p)).unwrap();
    let pipe = Pipeline::build(&data, Arc::clone(&vocab), PipelineConfig::for_width(256)).unwrap();
    eprintln!("build {:?}", t.elapsed());
    let (curve, _) = evaluate("pipeline", &collections, |p| pipe.score_pair(&data, p)).unwrap();
    eprintln!("eval {:?} oracle {:?} pipeline {:?}", t.elapsed(), oracle.ratios, curve.ratios);
    (oracle.ratios, curve.ratios)
}

#[test]
fn noiseless_parity() {
    let (o, p) = run(SynthConfig::noiseless());
    assert_eq!(o, p);
}

#[test]
fn noisy_within_tolerance() {
    let (o, p) = run(SynthConfig::default());
    assert!(p[3] >= o[3] - 0.05);
}
