use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = ccm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary line is JSON")
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr line")).expect("error line is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset plus vocabulary and map in `dir`.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut synth = vec![
            "synth", "--out", s(&data), "--scenes", "10", "--change-pairs", "4", "--nochange-pairs", "24",
            "--vocab-bits", "12", "--seed", "5",
        ];
        synth.extend_from_slice(extra);
        ok(&synth);
        let f = Fixture { dir };
        ok(&[
            "vocab-build", "--features", &f.p("data/reference.jsonl"), "--features", &f.p("data/ekb.jsonl"),
            "--vocab-bits", "12", "--out", &f.p("vocab.bin"),
        ]);
        f
    }

    fn p(&self, rel: &str) -> String {
        s(&self.dir.path().join(rel)).to_string()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn map_build(&self, out: &str, extra: &[&str]) -> serde_json::Value {
        let mut a = vec![
            "map-build".to_string(),
            "--features".into(), self.p("data/reference.jsonl"),
            "--proposals".into(), self.p("data/reference_proposals.jsonl"),
            "--vocab".into(), self.p("vocab.bin"),
            "--out".into(), self.p(out),
        ];
        a.extend(extra.iter().map(|x| x.to_string()));
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn eval_args(&self, out: &str) -> Vec<String> {
        [
            "evaluate", "--features", &self.p("data/reference.jsonl"),
            "--proposals", &self.p("data/reference_proposals.jsonl"),
            "--queries", &self.p("data/query.jsonl"),
            "--query-proposals", &self.p("data/query_proposals.jsonl"),
            "--annotations", &self.p("data/annotations.jsonl"),
            "--vocab", &self.p("vocab.bin"),
            "--out", &self.p(out),
        ]
        .iter()
        .map(|x| x.to_string())
        .collect()
    }
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn synth_to_evaluate_end_to_end() {
    let f = Fixture::new(&[]);
    let built = f.map_build("map.ccm", &[]);
    assert_eq!(built["images"], 10);
    assert!(f.path("map.ccm.cost.json").is_file());
    let mut args = f.eval_args("curves.csv");
    args.extend(["--map".into(), f.p("map.ccm"), "--oracle".into()]);
    let summary = ok(&strs(&args));
    assert_eq!(summary.as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(f.path("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,X_percent,success_ratio"));
    assert_eq!(lines.count(), 12);

    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("curves.csv.config.json")).unwrap()).unwrap();
    assert_eq!(side["command"], "evaluate");
    assert_eq!(side["config"]["collection_size"], 20);
}

#[test]
fn sidecar_reproduces_the_map() {
    let f = Fixture::new(&[]);
    f.map_build("a.ccm", &["--kernel", "linear", "--seed", "3"]);
    let side = f.p("a.ccm.config.json");
    ok(&["map-build", "--config", &side, "--out", &f.p("b.ccm")]);
    assert_eq!(std::fs::read(f.path("a.ccm")).unwrap(), std::fs::read(f.path("b.ccm")).unwrap());
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("b.ccm.config.json")).unwrap()).unwrap();
    assert_eq!(b["config"]["kernel"], "linear");
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new(&[]);
    let toml = f.path("run.toml");
    std::fs::write(&toml, format!("window = 4\nkernel = \"poly\"\n[paths]\nvocab = \"{}\"\n", f.p("vocab.bin"))).unwrap();
    f.map_build("m.ccm", &["--config", s(&toml), "--kernel", "sigmoid"]);
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("m.ccm.config.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["kernel"], "sigmoid");
    assert_eq!(side["config"]["window"], 4);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let f = Fixture::new(&[]);
    f.map_build("j1.ccm", &["--jobs", "1"]);
    f.map_build("j4.ccm", &["--jobs", "4"]);
    assert_eq!(std::fs::read(f.path("j1.ccm")).unwrap(), std::fs::read(f.path("j4.ccm")).unwrap());
    let mut a = f.eval_args("e1.csv");
    a.extend(["--jobs".into(), "1".into()]);
    let mut b = f.eval_args("e3.csv");
    b.extend(["--jobs".into(), "3".into()]);
    ok(&strs(&a));
    ok(&strs(&b));
    assert_eq!(std::fs::read(f.path("e1.csv")).unwrap(), std::fs::read(f.path("e3.csv")).unwrap());
}

#[test]
fn simulate_keeps_the_window_bounded() {
    let f = Fixture::new(&[]);
    f.map_build("map.ccm", &["--place-len", "1"]);
    let summary = ok(&[
        "simulate", "--map", &f.p("map.ccm"), "--vocab", &f.p("vocab.bin"), "--trajectory", "0,1,2,3,4,5,6,7,8,9",
        "--window", "1", "--out", &f.p("sim.csv"),
    ]);
    assert_eq!(summary["frames"], 10);
    let mut r = csv::Reader::from_path(f.path("sim.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[0], "frame_id");
    assert_eq!(&headers[1], "place_id");
    assert_eq!(&headers[2], "resident_bits");
    assert_eq!(&headers[3], "compressed_bits");
    let col = headers.iter().position(|h| h == "decompressed_places").unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let n: usize = rec.unwrap()[col].parse().unwrap();
        assert!(n <= 3);
        rows += 1;
    }
    assert_eq!(rows, 10);

    let traj = f.path("traj.txt");
    std::fs::write(&traj, "3\n4\n5\n").unwrap();
    let summary = ok(&[
        "simulate", "--map", &f.p("map.ccm"), "--vocab", &f.p("vocab.bin"), "--trajectory", s(&traj),
        "--out", &f.p("sim2.csv"),
    ]);
    assert_eq!(summary["frames"], 3);
}

#[test]
fn detect_scores_the_change_pair_above_its_no_change_twin() {
    let f = Fixture::new(&[]);
    f.map_build("map.ccm", &[]);
    // pairs 0 and 10 both observe scene 0; only pair 0 has a planted change
    let run = |q: &str, out: &str| {
        ok(&[
            "detect", "--map", &f.p("map.ccm"), "--vocab", &f.p("vocab.bin"), "--queries", &f.p("data/query.jsonl"),
            "--query-proposals", &f.p("data/query_proposals.jsonl"), "--annotations", &f.p("data/annotations.jsonl"),
            "--query-id", q, "--ref-id", "ref0000", "--out", &f.p(out),
        ])
    };
    let change = run("q0000", "c.csv");
    let same = run("q0010", "n.csv");
    assert!(same["max_p"].as_f64().unwrap() < change["max_p"].as_f64().unwrap(), "{same} vs {change}");
    let text = std::fs::read_to_string(f.path("c.csv")).unwrap();
    assert!(text.starts_with("collection_id,image_id,feature_index,x,y,p,r,score,is_ground_truth_change\n"));
    assert!(text.contains(",true\n"));
}

#[test]
fn compress_and_decompress_round_trip() {
    let f = Fixture::new(&[]);
    f.map_build("map.ccm", &[]);
    let c = ok(&["compress", "--map", &f.p("map.ccm"), "--vocab", &f.p("vocab.bin"), "--out", &f.p("again.ccm")]);
    assert_eq!(c["identical"], true);
    assert_eq!(std::fs::read(f.path("map.ccm")).unwrap(), std::fs::read(f.path("again.ccm")).unwrap());
    let d = ok(&["decompress", "--map", &f.p("map.ccm"), "--vocab", &f.p("vocab.bin"), "--out", &f.p("m.json")]);
    assert_eq!(d["decompressed"], d["places"]);
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("m.json")).unwrap()).unwrap();
    assert!(!dump["places"].as_array().unwrap().is_empty());
}

#[test]
fn ablate_emits_every_variant() {
    let f = Fixture::new(&[]);
    let mut a = f.eval_args("abl.csv");
    a[0] = "ablate".into();
    a.extend(["--collections".into(), "2".into()]);
    let summary = ok(&strs(&a));
    let variants = summary.as_array().unwrap();
    assert_eq!(variants.len(), 3 + 5 + 5 + 3);
    let non_object = variants.iter().find(|v| v["method"] == "object:non-object").unwrap();
    assert_eq!(non_object["clusters_per_image_max"], 1);
    assert_eq!(non_object["clusters_per_image_min"], 1);
    let csv = std::fs::read_to_string(f.path("abl.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * (variants.len() + 1));
}

#[test]
fn failures_emit_a_json_error_line() {
    let f = Fixture::new(&[]);
    let missing = ccm(&["map-build", "--features", &f.p("nope.jsonl"), "--vocab", &f.p("vocab.bin"), "--out", &f.p("x")]);
    assert_eq!(error_line(&missing)["error"], "io");

    let no_out = ccm(&["vocab-build", "--features", &f.p("data/reference.jsonl")]);
    assert_eq!(error_line(&no_out)["error"], "config");

    // a map built with one vocabulary refuses another
    f.map_build("map.ccm", &[]);
    ok(&[
        "vocab-build", "--features", &f.p("data/reference.jsonl"), "--features", &f.p("data/ekb.jsonl"),
        "--vocab-bits", "11", "--out", &f.p("other.bin"),
    ]);
    let mismatch = ccm(&[
        "simulate", "--map", &f.p("map.ccm"), "--vocab", &f.p("other.bin"), "--trajectory", "0", "--out", &f.p("s.csv"),
    ]);
    assert_eq!(error_line(&mismatch)["error"], "integrity");

    let bad_flag = ccm(&["evaluate", "--kernel", "cubic"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    assert_eq!(error_line(&bad_flag)["error"], "usage");

    let infeasible = ccm(&["synth", "--out", &f.p("bad"), "--separation", "300"]);
    assert_eq!(error_line(&infeasible)["error"], "config");
}
