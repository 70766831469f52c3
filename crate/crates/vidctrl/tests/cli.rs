use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use vidctrl::checkpoint;
use vidctrl::dataset_file::{read_dataset, write_dataset};
use vidctrl::error::exit;

fn vidctrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidctrl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = vidctrl(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: u64, count: usize) -> PathBuf {
    let p = dir.join(name);
    let (seed, count) = (seed.to_string(), count.to_string());
    ok(&["gen-data", "--seed", &seed, "--count", &count, "--frames", "4", "--height", "8", "--width", "8", "--out", s(&p)]);
    p
}

fn tiny_backbone_config(dir: &Path, data: &Path, steps: usize) -> PathBuf {
    let p = dir.join("bb.toml");
    let text = format!(
        "data = {:?}\nout = {:?}\nsteps = {steps}\nseed = 3\nlr = 0.001\nschedule_steps = 100\nwidths = [4, 8]\ngroups = 2\ntime_dim = 8\ntext_dim = 8\nattn_dim = 8\n",
        s(data),
        s(&dir.join("bb.ckpt"))
    );
    std::fs::write(&p, text).unwrap();
    p
}

fn trained_backbone(dir: &Path) -> (PathBuf, PathBuf) {
    let data = gen(dir, "train.bin", 1, 3);
    let cfg = tiny_backbone_config(dir, &data, 5);
    ok(&["train-backbone", "--config", s(&cfg)]);
    (data, dir.join("bb.ckpt"))
}

fn encoder_config(dir: &Path, data: &Path, backbone: &Path, variant: &str, modality: &str) -> PathBuf {
    let p = dir.join(format!("enc_{variant}.toml"));
    let text = format!(
        "data = {:?}\nbackbone = {:?}\nout = {:?}\nvariant = \"{variant}\"\nmodality = \"{modality}\"\nsteps = 4\nlr = 0.001\n",
        s(data),
        s(backbone),
        s(&dir.join(format!("enc_{variant}.ckpt")))
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bin", 7, 3);
    let b = gen(dir.path(), "b.bin", 7, 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let records = read_dataset(&a).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0].rgb.shape(), &[4, 3, 8, 8]);
}

#[test]
fn gen_data_rejects_zero_count_and_bad_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    let o = vidctrl(&["gen-data", "--count", "0", "--out", s(&out)]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
    assert!(!out.exists());

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = vidctrl(&["gen-data", "--count", "1", "--frames", "2", "--height", "4", "--width", "4", "--out", s(&blocker.join("x.bin"))]);
    assert_eq!(code(&o), exit::IO, "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let o = vidctrl(&["gen-data", "--count", "1", "--bogus"]);
    assert_eq!(code(&o), exit::USAGE);
    let o = vidctrl(&["train-backbone", "--config", "c.toml", "--variant", "full"]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
}

#[test]
fn smoke_backbone_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "train.bin", 1, 2);
    let cfg = tiny_backbone_config(dir.path(), &data, 50);
    let start = Instant::now();
    ok(&["train-backbone", "--config", s(&cfg)]);
    assert!(start.elapsed() < Duration::from_secs(120), "smoke run took {:?}", start.elapsed());
    let ckpt = dir.path().join("bb.ckpt");
    let loaded = checkpoint::load_backbone(&ckpt).unwrap();
    assert_eq!(loaded.weights.config().frames, 4);
    assert_eq!(loaded.schedule.steps, 100);
    let log = std::fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 50);
    assert_eq!(lines[49]["step"], 49);
    assert!(lines.iter().all(|l| l["loss"].as_f64().unwrap().is_finite() && l["wall_time"].is_number()));
}

#[test]
fn training_is_deterministic_and_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "train.bin", 1, 2);
    let cfg = tiny_backbone_config(dir.path(), &data, 3);
    let (a, b, c) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"), dir.path().join("c.ckpt"));
    ok(&["train-backbone", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train-backbone", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["train-backbone", "--config", s(&cfg), "--out", s(&c), "--seed", "99"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert!(!dir.path().join("bb.ckpt").exists());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "data = \"d.bin\"\nout = \"o.ckpt\"\n").unwrap();
    let o = vidctrl(&["train-backbone", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::CONFIG);
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));

    std::fs::write(&cfg, "data = \"d.bin\"\nout = \"o.ckpt\"\nsteps = 2\nlearning_rate = 1\n").unwrap();
    let o = vidctrl(&["train-backbone", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::CONFIG);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = vidctrl(&["train-backbone", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), exit::IO);
}

#[test]
fn encoder_run_and_tampered_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let (data, bb) = trained_backbone(dir.path());
    let cfg = encoder_config(dir.path(), &data, &bb, "frame_wise", "depth");
    ok(&["train-encoder", "--config", s(&cfg), "--variant", "full", "--keyframes", "0,3"]);
    let enc = checkpoint::load_encoder(&dir.path().join("enc_frame_wise.ckpt")).unwrap();
    assert_eq!(enc.weights.variant().name(), "full");
    let backbone = checkpoint::load_backbone(&bb).unwrap();
    checkpoint::check_pairing(&enc, &backbone.weights).unwrap();

    let mut bytes = std::fs::read(&bb).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let tampered = dir.path().join("tampered.ckpt");
    std::fs::write(&tampered, bytes).unwrap();
    let cfg = encoder_config(dir.path(), &data, &tampered, "frame_wise", "depth");
    let o = vidctrl(&["train-encoder", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::INTEGRITY, "{}", stderr(&o));

    let o = vidctrl(&["train-encoder", "--config", s(&cfg), "--modality", "heat"]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
}

fn frame_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    names.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn sampling_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let (data, bb) = trained_backbone(dir.path());
    let cfg = encoder_config(dir.path(), &data, &bb, "full", "rgb");
    ok(&["train-encoder", "--config", s(&cfg)]);
    let enc = dir.path().join("enc_full.ckpt");

    // Unconditional, then rerun from its metadata.
    let plain = dir.path().join("plain");
    ok(&["sample", "--backbone", s(&bb), "--prompt", "red circle right", "--seed", "5", "--steps", "4", "--out", s(&plain)]);
    let frames = frame_bytes(&plain);
    assert_eq!(frames.len(), 4);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(plain.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["steps"], 4);
    assert_eq!(meta["guidance"], 3.0);
    assert!(meta["keyframes"].as_array().unwrap().is_empty());
    let again = dir.path().join("again");
    ok(&["sample", "--from-metadata", s(&plain.join("metadata.json")), "--out", s(&again)]);
    assert_eq!(frame_bytes(&again), frames);

    // Two unrelated images at the first and last frame.
    let records = read_dataset(&data).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    vidctrl::images::rgb_frame_image(records[0].rgb.slab(0), 8, 8).save(&a).unwrap();
    vidctrl::images::rgb_frame_image(records[1].rgb.slab(3), 8, 8).save(&b).unwrap();
    let trans = dir.path().join("transition");
    ok(&[
        "sample", "--backbone", s(&bb), "--encoder", s(&enc), "--prompt", "blue square left", "--condition", s(&a),
        "--condition", s(&b), "--keyframes", "0,3", "--steps", "4", "--out", s(&trans),
    ]);
    assert_eq!(frame_bytes(&trans).len(), 4);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(trans.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["keyframes"], serde_json::json!([0, 3]));
    assert_eq!(meta["modality"], "rgb");
    let again = dir.path().join("transition2");
    ok(&["sample", "--from-metadata", s(&trans.join("metadata.json")), "--out", s(&again)]);
    assert_eq!(frame_bytes(&again), frame_bytes(&trans));

    let o = vidctrl(&[
        "sample", "--backbone", s(&bb), "--encoder", s(&enc), "--prompt", "red", "--condition", s(&a), "--keyframes", "4",
        "--out", s(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
    let o = vidctrl(&["sample", "--backbone", s(&bb), "--prompt", "red", "--keyframes", "0", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
    let o = vidctrl(&["sample", "--backbone", s(&bb), "--prompt", "octarine", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(code(&o), exit::USAGE, "{}", stderr(&o));
}

fn eval_config(dir: &Path, bb: &Path, encoders: &[&Path], data: &Path) -> PathBuf {
    let p = dir.join("eval.toml");
    let list: Vec<String> = encoders.iter().map(|e| format!("{:?}", s(e))).collect();
    let text = format!(
        "backbone = {:?}\nencoders = [{}]\ndata = {:?}\nout = {:?}\ninclude_backbone = true\nsample_steps = 2\nguidance = 1.0\n",
        s(bb),
        list.join(", "),
        s(data),
        s(&dir.join("eval_out"))
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn eval_writes_reports_with_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let (data, bb) = trained_backbone(dir.path());
    let cfg = encoder_config(dir.path(), &data, &bb, "frame_wise", "depth");
    ok(&["train-encoder", "--config", s(&cfg), "--out", s(&dir.path().join("fw.ckpt"))]);
    let eval_data = gen(dir.path(), "eval.bin", 500, 1);
    let cfg = eval_config(dir.path(), &bb, &[&dir.path().join("fw.ckpt")], &eval_data);
    ok(&["eval", "--config", s(&cfg), "--r-mask", "0,1/2"]);
    let out = dir.path().join("eval_out");
    let txt = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let digest = txt.lines().next().unwrap().strip_prefix("config_digest: ").unwrap().to_string();
    assert_eq!(digest.len(), 64);
    assert!(csv.contains(&digest));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(txt.contains("[frame_wise r_mask=0.5]"));
    assert!(txt.contains("[backbone r_mask=0]"));

    // Default list covers the four standard ratios; frames=4 cannot host 7/8.
    let o = vidctrl(&["eval", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::CONFIG, "{}", stderr(&o));

    let empty = dir.path().join("empty.bin");
    write_dataset(&empty, &[]).unwrap();
    let cfg = eval_config(dir.path(), &bb, &[], &empty);
    let o = vidctrl(&["eval", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::CONFIG, "{}", stderr(&o));
}

#[test]
fn ablate_reports_reach_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (data, bb) = trained_backbone(dir.path());
    let eval_data = gen(dir.path(), "eval.bin", 500, 1);
    let cfg = dir.path().join("ablate.toml");
    let text = format!(
        "data = {:?}\neval_data = {:?}\nbackbone = {:?}\nout = {:?}\nsteps = 3\nr_mask = [0.0, 0.75]\nsample_steps = 2\n",
        s(&data),
        s(&eval_data),
        s(&bb),
        s(&dir.path().join("ablate"))
    );
    std::fs::write(&cfg, text).unwrap();
    ok(&["ablate", "--config", s(&cfg)]);
    let out = dir.path().join("ablate");
    for v in ["frame_wise", "temporal_noise", "full"] {
        assert!(out.join(format!("encoder_{v}.ckpt")).exists());
        assert!(out.join(format!("train_{v}.jsonl")).exists());
    }
    let txt = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(txt.contains("frame_wise: #..."), "{txt}");
    assert!(txt.contains("full: ####"), "{txt}");
    assert!(txt.contains("[temporal_noise r_mask=0.75]"));
}
