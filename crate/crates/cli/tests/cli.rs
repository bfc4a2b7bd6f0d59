use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "codec": {"hidden": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "latent": 8, "codebook_size": 16},
  "ar": {"dim": 16, "heads": 2, "layers": 1, "cond_dim": 16},
  "checkpoint_every": 2
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facemotion")).args(args).env("RUST_LOG", "warn").output().expect("spawn")
}

fn ok(args: &[&str]) -> Output {
    let o = bin(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

struct Trained {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Synthetic data plus a few steps of both stages on a tiny config.
fn trained() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, codec, model) = (root.join("data"), root.join("codec"), root.join("model"));
    ok(&["gen-synth", "--out", p(&data), "--clips", "2", "--frames", "200", "--seed", "3"]);
    ok(&["train-codec", "--data", p(&data), "--out", p(&codec), "--steps", "3", "--batch-size", "1", "--config", p(&cfg)]);
    ok(&["train-ar", "--data", p(&data), "--codec", p(&codec), "--out", p(&model), "--steps", "2", "--batch-size", "1", "--config", p(&cfg)]);
    Trained { _tmp: tmp, root }
}

#[test]
fn gen_synth_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-synth", "--seed", "7", "--clips", "32", "--out", p(&a)]);
    ok(&["gen-synth", "--seed", "7", "--clips", "32", "--out", p(&b)]);
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 32 * 3 + 4);
    assert!(da == db, "directories differ");
}

#[test]
fn usage_and_format_exit_codes() {
    assert_eq!(bin(&["generate"]).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.artm");
    fs::write(&junk, b"ARTX0000").unwrap();
    let o = bin(&["export-obj", "--motion", p(&junk), "--basis", p(&junk), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
}

#[test]
fn pipeline_end_to_end() {
    let t = trained();
    let (data, codec, model) = (t.path("data"), t.path("codec"), t.path("model"));
    for d in [&data, &codec, &model] {
        assert!(d.join("run_config.json").exists(), "{}", d.display());
    }
    let trace = fs::read_to_string(codec.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,term,value\n"));
    assert!(trace.contains("\n2,recon,"));
    assert!(codec.join("state.artc").exists());

    // resuming continues the step counter and appends
    ok(&["train-codec", "--data", p(&data), "--out", p(&codec), "--steps", "4", "--batch-size", "1", "--resume", "--config", p(&t.path("tiny.json"))]);
    let trace = fs::read_to_string(codec.join("trace.csv")).unwrap();
    assert_eq!(trace.matches("step,term,value").count(), 1);
    assert!(trace.contains("\n3,recon,"));

    // 8 s of audio -> 200 frames
    let clip = data.join("clip_000.artm");
    let two = t.path("long");
    ok(&["gen-synth", "--out", p(&two), "--clips", "1", "--frames", "200", "--seed", "9"]);
    let out = t.path("gen/out.artm");
    ok(&["generate", "--model", p(&model), "--audio", p(&two.join("clip_000.wav")), "--style", p(&clip), "--out", p(&out)]);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"ARTM");
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 200);
    assert!(t.path("gen/out.artm.run.json").exists());

    // argmax generation is reproducible
    let again = t.path("gen/again.artm");
    ok(&["generate", "--model", p(&model), "--audio", p(&two.join("clip_000.wav")), "--style", p(&clip), "--out", p(&again)]);
    assert_eq!(fs::read(&again).unwrap(), bytes);

    // encode -> decode -> eval
    let tokens = t.path("enc/tokens.json");
    let recon = t.path("enc/recon.artm");
    ok(&["encode", "--model", p(&codec), "--motion", p(&clip), "--out", p(&tokens), "--recon", p(&recon)]);
    let tok: serde_json::Value = serde_json::from_str(&fs::read_to_string(&tokens).unwrap()).unwrap();
    assert_eq!(tok["windows"].as_array().unwrap().len(), 2);
    assert_eq!(tok["schedule"], serde_json::json!([1, 5, 25, 50, 100]));
    let report = t.path("eval");
    ok(&[
        "eval", "--pred", p(&recon), "--gt", p(&clip), "--basis", p(&data.join("basis.artb")), "--mask", p(&data.join("mask.json")), "--out", p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(r["lve"].as_f64().unwrap() > 0.0);
    assert!(fs::read_to_string(report.join("report.txt")).unwrap().contains("LVE"));

    // a clip against itself scores zero
    let self_eval = t.path("eval_self");
    ok(&[
        "eval", "--pred", p(&clip), "--gt", p(&clip), "--basis", p(&data.join("basis.artb")), "--mask", p(&data.join("mask.json")), "--out", p(&self_eval),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(self_eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["lve"].as_f64().unwrap(), 0.0);

    // export
    let objs = t.path("obj");
    ok(&["export-obj", "--motion", p(&clip), "--basis", p(&data.join("basis.artb")), "--out", p(&objs)]);
    let obj = fs::read_to_string(objs.join("frame_00000.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 64);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 84);
    let csv = fs::read_to_string(objs.join("params.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 57);

    // bench
    let bench = t.path("bench.json");
    ok(&["bench", "--model", p(&model), "--seconds", "4", "--out", p(&bench)]);
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(b["windows"], 10);
    assert_eq!(b["warmup_windows"], 2);
    assert_eq!(b["paper_reference_seconds_per_second"], 0.01);
}

#[test]
fn ablation_flags_reach_the_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-synth", "--out", p(&data), "--clips", "1", "--frames", "100"]);
    let codec = tmp.path().join("codec");
    ok(&[
        "train-codec", "--data", p(&data), "--out", p(&codec), "--steps", "1", "--batch-size", "1", "--config", p(&cfg), "--no-multiscale", "--no-temporal-vq",
    ]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(codec.join("model.json")).unwrap()).unwrap();
    assert_eq!(side["schedule"], serde_json::json!([100]));
    assert_eq!(side["codec"]["temporal"], false);
    let model = tmp.path().join("model");
    ok(&[
        "train-ar", "--data", p(&data), "--codec", p(&codec), "--out", p(&model), "--steps", "1", "--batch-size", "1", "--config", p(&cfg), "--no-temporal-ar", "--no-style",
    ]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(model.join("model.json")).unwrap()).unwrap();
    assert_eq!(side["ar"]["temporal"], false);
    assert_eq!(side["ar"]["use_style"], false);
    // no style clip needed without the style encoder
    let out = tmp.path().join("g.artm");
    ok(&["generate", "--model", p(&model), "--audio", p(&data.join("clip_000.wav")), "--out", p(&out)]);
}
