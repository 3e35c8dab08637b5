use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "d = 8\nlayers = 2\nheads = 2\nbatch_size = 2\nclips = 16\nwarmup = 2\n";

fn hiervid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiervid"))
        .args(args)
        .current_dir(dir)
        .env_remove("HIERVID_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = workspace();
    let d = dir.path();
    for args in [
        &["train"][..],
        &["generate"],
        &["frobnicate"],
        &["schedule", "--bogus"],
        &["--config", "missing.cfg", "verify"],
        &["generate", "--seed", "1", "--caption", "blob,left,1"],
        &["schedule", "--ax", "9"],
        &["--threads", "0", "verify"],
        &[],
    ] {
        let out = hiervid(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    fs::write(d.join("bad.cfg"), "d = 8\nwidth = 3\n").unwrap();
    assert_eq!(hiervid(d, &["--config", "bad.cfg", "verify"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = hiervid(d, &["generate", "--seed", "1", "--key", "junk.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn defaults_dump_parses_back() {
    let dir = workspace();
    let out = hiervid(dir.path(), &["--dump-defaults"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("d = 64") && text.contains("max_lr = 0.0002"));
    fs::write(dir.path().join("defaults.cfg"), &text).unwrap();
    let out = hiervid(dir.path(), &["--config", "defaults.cfg", "--out", "s", "schedule"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn generate_two_rounds_writes_seventeen_frames_deterministically() {
    let dir = workspace();
    let d = dir.path();
    let args = |out: &'static str| ["--config", "tiny.cfg", "--out", out, "generate", "--seed", "4", "--rounds", "2"];
    assert_eq!(hiervid(d, &args("a")).status.code(), Some(0));
    assert_eq!(hiervid(d, &args("b")).status.code(), Some(0));
    let pgms: Vec<_> = fs::read_dir(d.join("a/frames"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 17);
    let first = fs::read(d.join("a/frames/frame_0000.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(first.len(), 13 + 32 * 32);
    let m = manifest(&d.join("a"));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["details"]["frames"], 17);
    assert_eq!(m["details"]["fps"], 4.0);
    assert_eq!(m["details"]["provenance"][0], "stage1");
    assert_eq!(m["details"]["provenance"][1], "interp_round_2");
    assert_eq!(m["details"]["provenance"][2], "interp_round_1");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["versions"]["hiervid"], env!("CARGO_PKG_VERSION"));
    for entry in fs::read_dir(d.join("a/frames")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(d.join("a/frames").join(&name)).unwrap(), fs::read(d.join("b/frames").join(&name)).unwrap());
    }
    assert_eq!(fs::read(d.join("a/manifest.json")).unwrap(), fs::read(d.join("b/manifest.json")).unwrap());
}

#[test]
fn train_resume_and_checkpoint_mismatch() {
    let dir = workspace();
    let d = dir.path();
    let run = |args: &[&str]| hiervid(d, args).status.code();
    assert_eq!(run(&["--config", "tiny.cfg", "--out", "pt", "pretrain-spatial", "--steps", "2"]), Some(0));
    assert_eq!(run(&["--config", "tiny.cfg", "--out", "t1", "train", "--seed", "3", "--steps", "2", "--init", "pt/backbone.ckpt"]), Some(0));
    assert_eq!(run(&["--config", "tiny.cfg", "--out", "t2", "train", "--seed", "3", "--steps", "2", "--init", "pt/backbone.ckpt"]), Some(0));
    assert_eq!(fs::read(d.join("t1/model.ckpt")).unwrap(), fs::read(d.join("t2/model.ckpt")).unwrap());
    let log = fs::read_to_string(d.join("t1/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr,grad_norm,wall_ms\n0,"));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(run(&["--config", "tiny.cfg", "--out", "t3", "train", "--seed", "3", "--steps", "1", "--resume", "t1/model.ckpt"]), Some(0));
    assert_eq!(manifest(&d.join("t3"))["details"]["start_step"], 2);
    // A backbone without optimizer state cannot be resumed.
    assert_eq!(run(&["--config", "tiny.cfg", "--out", "t4", "train", "--seed", "3", "--resume", "pt/backbone.ckpt"]), Some(2));
    // A config file that disagrees with the checkpoint is refused.
    fs::write(d.join("wide.cfg"), TINY.replace("d = 8", "d = 16")).unwrap();
    let out = hiervid(d, &["--config", "wide.cfg", "--out", "g", "generate", "--seed", "1", "--key", "t1/model.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = workspace();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_hiervid"))
        .args(["--out", "flag", "schedule", "--x", "4", "--y", "4", "--ts", "3"])
        .current_dir(d)
        .env("HIERVID_OUT", d.join("env"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(!d.join("flag").exists());
    let csv = fs::read_to_string(d.join("env/schedule.csv")).unwrap();
    assert!(csv.starts_with("step,t,x,y\n0,0,0,0\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 16);
    assert!(fs::read_to_string(d.join("env/summary.txt")).unwrap().contains("violations = 0"));
}

#[test]
fn make_data_and_analyze_outputs() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(hiervid(d, &["--config", "tiny.cfg", "--out", "md", "make-data", "--count", "3", "--previews", "1"]).status.code(), Some(0));
    let seq = fs::read_to_string(d.join("md/sequences/seq_00000.txt")).unwrap();
    assert!(seq.starts_with("hiervid-sequence 1\nts 5\nside 4\nn_text 8\n"));
    assert!(d.join("md/previews/seq_00000_frame_4.pgm").exists());
    assert!(fs::read_to_string(d.join("md/clips.csv")).unwrap().starts_with("index,shape,direction,speed"));

    assert_eq!(hiervid(d, &["--config", "tiny.cfg", "--out", "an", "analyze"]).status.code(), Some(0));
    let csv = fs::read_to_string(d.join("an/attention/layer1_head0_plus.csv")).unwrap();
    assert!(csv.starts_with("frame,frame0,frame1,frame2,frame3,frame4,text\n"));
    assert!(fs::read(d.join("an/attention/layer0_head1_base.pgm")).unwrap().starts_with(b"P5\n"));
    assert!(fs::read_to_string(d.join("an/alpha.csv")).unwrap().starts_with("layer,mean,variance\n0,0.5,"));
}

#[test]
fn verify_passes_and_reports_the_tightness_limitation() {
    let dir = workspace();
    let out = hiervid(dir.path(), &["--out", "v", "verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains(" PASS ")).count(), 9);
    assert!(table.lines().any(|l| l.starts_with("dependency bound tightness") && l.contains("FAIL*")));
    let m = manifest(&dir.path().join("v"));
    assert_eq!(m["details"]["checks"].as_array().unwrap().len(), 10);
}
