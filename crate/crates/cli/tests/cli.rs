use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use noisynp::backbone::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_noisynp");

const TINY: &str = r#"
[data]
setup = 3

[data.noise]
std = 0.3
coupled = true

[data.task]
max_ctx = 10
max_points = 20

[data.task.kernel]
family = "rbf"

[model]
variant = "anp"

[model.backbone]
hidden_dim = 8
depth = 1
decoder_depth = 1
n_heads = 2

[train]
steps = 6
batch_size = 2

[eval]
K_eval = 4
eval_batch = 8
n_tasks = 8
n_val_tasks = 8
seeds = [0]
"#;

const IMAGES: &str = r#"
[data]
setup = 3

[data.noise]
std = 0.3
coupled = true

[data.images]
dir = "images"
size = 32

[data.images.task]
num_ctx = 100
num_tar = 100

[model]
variant = "anp"
dim_x = 2
dim_y = 3

[model.backbone]
hidden_dim = 8
depth = 1
decoder_depth = 1
n_heads = 2

[train]
steps = 4
batch_size = 2
"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Work { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("NOISYNP_ROOT", self.dir.path())
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, extra: &[&str]) -> PathBuf {
        let mut args = vec!["train", "--config", "exp.toml"];
        args.extend_from_slice(extra);
        PathBuf::from(self.ok(&args).trim())
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn zero_steps_gives_initial_checkpoint_and_empty_log() {
    let w = Work::new(TINY);
    let ckpt = w.train(&["--set", "train.steps=0"]);
    let ck: Checkpoint<f32> = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.step, 0);
    let log = ckpt.with_extension("log.jsonl");
    assert_eq!(fs::read_to_string(log).unwrap(), "");
    let dir = ckpt.parent().unwrap();
    assert!(dir.join("resolved_config.toml").exists());
    assert_eq!(
        fs::read_to_string(dir.join("code_version"))
            .unwrap()
            .trim()
            .len(),
        64
    );
}

#[test]
fn training_logs_every_step() {
    let w = Work::new(TINY);
    let ckpt = w.train(&[]);
    let log = fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[5]["step"], 6);
    assert!(lines[0]["total"].as_f64().unwrap().is_finite());
}

#[test]
fn same_config_and_seed_give_identical_checkpoints() {
    let a = Work::new(TINY);
    let b = Work::new(TINY);
    let pa = a.train(&["--seed", "3"]);
    let pb = b.train(&["--seed", "3"]);
    assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
}

#[test]
fn robust_and_standard_share_shapes_but_not_values() {
    let w = Work::new(TINY);
    let plain = w.train(&[]);
    let robust = w.train(&["--set", "model.variant=r-anp", "--set", "loss.w_sigma=5"]);
    assert_ne!(plain, robust);
    let a: Checkpoint<f32> = Checkpoint::load(&plain).unwrap();
    let b: Checkpoint<f32> = Checkpoint::load(&robust).unwrap();
    assert_eq!(a.params.shapes(), b.params.shapes());
    assert_ne!(a.params, b.params);
}

#[test]
fn resume_reuses_a_finished_checkpoint() {
    let w = Work::new(TINY);
    let ckpt = w.train(&[]);
    let before = fs::read(&ckpt).unwrap();
    let mtime = fs::metadata(&ckpt).unwrap().modified().unwrap();
    assert_eq!(w.train(&["--resume"]), ckpt);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), mtime);
    // without --resume the run starts over and lands on the same bytes
    w.train(&[]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
}

#[test]
fn eval_appends_a_row_and_prints_the_summary() {
    let w = Work::new(TINY);
    let ckpt = w.train(&[]);
    let ck = ckpt.to_str().unwrap();
    let out = w.ok(&["eval", "--config", "exp.toml", "--checkpoint", ck]);
    assert!(out.contains("anp setup 3 s=0.3 r=0.3"), "{out}");
    assert!(out.contains("(1 seeds)"), "{out}");
    let csv = fs::read_to_string(w.path("results/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    // a second evaluation of the same cell is not duplicated
    w.ok(&["eval", "--config", "exp.toml", "--checkpoint", ck]);
    let csv2 = fs::read_to_string(w.path("results/results.csv")).unwrap();
    assert_eq!(csv, csv2);
    // a second seed turns the summary into mean and spread
    let other = w.train(&["--seed", "1"]);
    let out = w.ok(&[
        "eval",
        "--config",
        "exp.toml",
        "--checkpoint",
        other.to_str().unwrap(),
    ]);
    assert!(out.contains(" ± ") && out.contains("(2 seeds)"), "{out}");
    assert!(w.path("results/resolved_config.toml").exists());
}

#[test]
fn variant_mismatch_is_a_config_error() {
    let w = Work::new(TINY);
    let ckpt = w.train(&[]);
    let out = w.run(&[
        "eval",
        "--config",
        "exp.toml",
        "--set",
        "model.variant=np",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("anp"));
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let w = Work::new(TINY);
    let ckpt = w.train(&[]);
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = w.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = w.run(&[
        "eval",
        "--config",
        "exp.toml",
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
    assert!(
        !w.path("results/results.csv").exists()
            || fs::read_to_string(w.path("results/results.csv"))
                .unwrap()
                .lines()
                .count()
                <= 1
    );
}

#[test]
fn exit_codes_separate_config_numeric_and_io_failures() {
    let w = Work::new(TINY);
    assert_eq!(
        code(&w.run(&["train", "--config", "exp.toml", "--set", "train.bogus=1"])),
        2
    );
    assert_eq!(
        code(&w.run(&[
            "train",
            "--config",
            "exp.toml",
            "--set",
            "model.backbone.n_heads=3"
        ])),
        2
    );
    assert_eq!(code(&w.run(&["train", "--config", "missing.toml"])), 4);
    assert_eq!(
        code(&w.run(&["train", "--config", "exp.toml", "--set", "train.lr=1e30"])),
        3
    );
    assert_eq!(
        code(&w.run(&[
            "export-plots",
            "--results",
            "results",
            "--figure",
            "fig9",
            "--out",
            "plots"
        ])),
        2
    );
}

#[test]
fn sweep_is_restartable_without_duplicates() {
    let cfg = format!(
        "{TINY}\n[[sweep.blocks]]\nmodels = [\"np\", \"gp-oracle\"]\nsetups = [1]\nnoise_grid = [0.0, 0.6]\n"
    );
    let w = Work::new(&cfg);
    let first = w.ok(&["sweep", "--config", "exp.toml"]);
    let csv = fs::read_to_string(w.path("results/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let second = w.ok(&["sweep", "--config", "exp.toml"]);
    assert_eq!(first, second);
    assert_eq!(
        fs::read_to_string(w.path("results/results.csv")).unwrap(),
        csv
    );

    let plots = w.ok(&[
        "export-plots",
        "--results",
        "results",
        "--figure",
        "fig1",
        "--out",
        "plots",
    ]);
    assert!(plots.starts_with("2 series files"), "{plots}");
    assert!(w.path("plots/fig1/setup1/np.csv").exists());
    assert!(w.path("plots/code_version").exists());
}

fn write_images(dir: &Path, n: u32) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = RgbImage::from_fn(32, 32, |x, y| {
            Rgb([(x * 8) as u8, (y * 8) as u8, ((x + y + i * 13) % 256) as u8])
        });
        img.save(dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

#[test]
fn render_writes_strip_renders_and_sidecar() {
    let w = Work::new(IMAGES);
    write_images(&w.path("images"), 5);
    let a = w.train(&[]);
    let b = w.train(&["--set", "model.variant=r-anp"]);
    let strip = w.ok(&[
        "render",
        "--config",
        "exp.toml",
        "--checkpoint",
        a.to_str().unwrap(),
        "--checkpoint",
        b.to_str().unwrap(),
        "--samples",
        "3",
        "--out",
        "renders",
    ]);
    let strip = w.path(strip.trim());
    let img = image::open(&strip).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 32 + 3 * 2, 32));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("renders/strip.json")).unwrap()).unwrap();
    assert_eq!(side["num_ctx"], 100);
    assert_eq!(side["models"].as_array().unwrap().len(), 2);
    assert!(w.path("renders/resolved_config.toml").exists());
    let stds = fs::read_dir(w.path("renders"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with("-std.png")
        })
        .count();
    assert_eq!(stds, 2);
}
