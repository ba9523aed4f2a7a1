use std::path::Path;
use std::process::{Command, Output};

use hdr_vdiff::io::write_hdrf;
use hdr_vdiff::toy::{toy_scenes, ToySpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdr-vdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"
seed = 3
[data]
toy = { sequences = 2, frames = 3, height = 32, width = 32, seed = 1 }
[autoencoder]
widths = [4, 4, 8, 8]
[ldm]
base_width = 4
embed_dim = 8
[schedule]
steps = 50
[sampler]
num_steps = 3
[tcam]
features = 4
decoder_widths = [4, 4, 6, 6]
[train.autoencoder]
steps = 3
batch_size = 2
lr = 1e-3
[train.ldm]
steps = 3
batch_size = 2
lr = 1e-3
[train.tcam]
steps = 2
batch_size = 1
lr = 1e-3
[train.recon]
steps = 2
batch_size = 1
lr = 1e-3
[checkpoints]
dir = "ckpt"
[stages]
log_every = 0
"#;

fn write_frames(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let spec = ToySpec { sequences: 1, frames: n, height: 32, width: 32, seed: 11 };
    for (i, f) in toy_scenes(&spec).unwrap()[0].iter().enumerate() {
        write_hdrf(&dir.join(format!("frame_{i:03}.hdrf")), f.pixels()).unwrap();
    }
}

#[test]
fn full_command_line_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    write_frames(&root.join("hdr"), 3);

    let seq = root.join("seq");
    ok(&["synthesize", "--input", &s(&root.join("hdr")), "--pattern", "1,8", "--out", &s(&seq), "--seed", "2"]);
    assert!(seq.join("sequence.json").exists());
    assert!(seq.join("ldr_0002.png").exists() && seq.join("hdr_0002.hdrf").exists());
    let toy = root.join("toy");
    ok(&["synthesize", "--toy", "5", "--toy-size", "16", "--pattern", "1,4,16", "--out", &s(&toy)]);
    assert!(toy.join("ldr_0004.png").exists());

    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg_s = s(&cfg);

    let out = run(&["train", "--stage", "recon", "--config", &cfg_s]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite: autoencoder"));

    for stage in ["autoencoder", "ldm"] {
        ok(&["train", "--stage", stage, "--config", &cfg_s]);
    }
    let out = run(&["train", "--stage", "recon", "--config", &cfg_s]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite: tcam"));
    for stage in ["tcam", "recon"] {
        ok(&["train", "--stage", stage, "--config", &cfg_s]);
    }
    for stage in ["autoencoder", "ldm", "tcam", "recon"] {
        assert!(root.join("ckpt").join(format!("{stage}.ckpt")).exists());
        assert!(root.join("ckpt").join(format!("{stage}.run.json")).exists());
    }

    let pred = root.join("pred");
    ok(&["infer", "--config", &cfg_s, "--input", &s(&seq), "--out", &s(&pred), "--seed", "5"]);
    assert!(pred.join("hdr_0000.hdrf").exists() && pred.join("inference.json").exists());
    let again = root.join("pred2");
    ok(&["infer", "--config", &cfg_s, "--input", &s(&seq), "--out", &s(&again), "--seed", "5"]);
    for i in 0..3 {
        let name = format!("hdr_{i:04}.hdrf");
        assert_eq!(std::fs::read(pred.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }

    let report = root.join("report.json");
    ok(&["evaluate", "--pred", &s(&pred), "--gt", &s(&seq), "--out", &s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["frame_count"], 3);
    let self_report = root.join("self.json");
    ok(&["evaluate", "--pred", &s(&seq), "--gt", &s(&seq), "--out", &s(&self_report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&self_report).unwrap()).unwrap();
    assert_eq!(r["mean_psnr_t"], 99.0);
    assert_eq!(r["mean_ssim_t"], 1.0);

    let fig = root.join("fig").join("dist");
    ok(&[
        "plot-dist",
        "--sets",
        &format!("ldr=png:{}", s(&seq)),
        &format!("hdr=hdrf:{}", s(&seq)),
        &format!("ours={}", s(&pred)),
        "--patch",
        "8",
        "--iterations",
        "100",
        "--out",
        &s(&fig),
    ]);
    let csv = std::fs::read_to_string(fig.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 48);
    assert!(std::fs::read_to_string(fig.with_extension("svg")).unwrap().starts_with("<svg"));
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\ntoy = {}\ntypo_key = 1\n").unwrap();
    let out = run(&["train", "--stage", "tcam", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_key"));

    let out = run(&["train", "--stage", "bogus", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());

    let out = run(&["plot-dist", "--sets", "nolabel", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        hdr_vdiff::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
