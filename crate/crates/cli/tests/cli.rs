use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hydra_core::checkpoint::ModelCheckpoint;
use hydra_core::data::{load_cube, load_rgb};
use hydra_core::metrics::{parse_spectral_csv, read_pnm};
use hydra_core::student::{Student, StudentConfig};
use hydra_core::teacher::{Teacher, TeacherConfig};
use hydra_core::training::{parse_loss_history_csv, Stage};
use tempfile::TempDir;

const STUDENT_FLAGS: &[&str] = &[
    "--width",
    "4",
    "--heads",
    "1",
    "--encoder-blocks",
    "1,1,1,1",
    "--decoder-blocks",
    "1,1,1",
    "--batch-size",
    "1",
];

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hydra(args);
    assert!(
        out.status.success(),
        "hydra {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--out", p(&data), "--h", "16", "--w", "16", "--b", "31", "--n", &n.to_string(), "--seed", &seed.to_string()]);
    data
}

fn train(stage: u8, data: &Path, run: &Path, epochs: usize, extra: &[&str]) -> Output {
    let stage = stage.to_string();
    let epochs = epochs.to_string();
    let mut args = vec!["train", "--stage", &stage, "--data", p(data), "--out", p(run), "--epochs", &epochs];
    args.extend_from_slice(extra);
    hydra(&args)
}

/// Stage 1 to 3 on a four-cube toy set.
fn toy_pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let data = gen(dir, 4, 1);
    let run = dir.join("run");
    for (stage, epochs, extra) in [
        (1, 30, &["--latent", "6", "--pixel-stride", "2", "--lr", "0.003"][..]),
        (2, 3, STUDENT_FLAGS),
        (3, 2, &["--batch-size", "1"][..]),
    ] {
        let out = train(stage, &data, &run, epochs, extra);
        assert!(out.status.success(), "stage {stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    (data, run)
}

fn hashes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "hsic" || e == "csv"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&["gen-data", "--out", p(a.path()), "--h", "32", "--w", "32", "--b", "31", "--n", "8", "--seed", "7"]);
    ok(&["gen-data", "--out", p(b.path()), "--h", "32", "--w", "32", "--b", "31", "--n", "8", "--seed", "7"]);
    let ha = hashes(a.path());
    assert_eq!(ha, hashes(b.path()));
    assert_eq!(ha.iter().filter(|(n, _)| n.starts_with("cube_")).count(), 8);
    assert_eq!(ha.iter().filter(|(n, _)| n.starts_with("rgb_")).count(), 8);
    let cube = load_cube(a.path().join("cube_0003.hsic")).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.bands()), (32, 32, 31));
    let rgb = load_rgb(a.path().join("rgb_0003.hsic")).unwrap();
    assert_eq!((rgb.height(), rgb.width()), (32, 32));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], "7");
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 17);
}

#[test]
fn gen_data_rejects_too_few_bands() {
    let dir = TempDir::new().unwrap();
    let out = hydra(&["gen-data", "--out", p(dir.path()), "--b", "3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 4"));
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("data");
    let out = hydra(&["gen-data", "--out", p(&target), "--n", "1"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&target)));
}

#[test]
fn later_stages_require_their_predecessor() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 4, 2);
    let run = dir.path().join("run");
    let out = train(2, &data, &run, 1, STUDENT_FLAGS);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 1 checkpoint required"));

    assert!(train(1, &data, &run, 1, &["--latent", "4"]).status.success());
    let out = train(3, &data, &run, 1, &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 2 checkpoint required"));

    // A stage-1 checkpoint handed to stage 3 is rejected as well.
    let from = run.join("stage1.hydt");
    let out = train(3, &data, &run, 1, &["--from", p(&from)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 2 checkpoint required"));
}

#[test]
fn full_pipeline_emits_checkpoints_and_reports() {
    let dir = TempDir::new().unwrap();
    let (data, run) = toy_pipeline(dir.path());
    for stage in 1..=3u8 {
        let ck = ModelCheckpoint::load(run.join(format!("stage{stage}.hydt"))).unwrap();
        assert_eq!(ck.stage.number(), stage);
        assert_eq!(ck.student.is_some(), stage > 1);
        let csv = fs::read_to_string(run.join(format!("loss_stage{stage}.csv"))).unwrap();
        let history = parse_loss_history_csv(&csv).unwrap();
        assert!(!history.is_empty() && history.iter().all(|r| r.loss.is_finite()));
        assert!(run.join(format!("stage{stage}.manifest.json")).is_file());
    }

    // Evaluation on the training cubes: the teacher round trip bounds the pipeline.
    let eval = dir.path().join("eval");
    let ckpt = run.join("stage3.hydt");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&eval), "--set", "train", "--flops"]);
    let table = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let (mean, images) = rows.split_last().unwrap();
    assert_eq!(images.len(), 3);
    assert!(table.lines().last().unwrap().starts_with("mean,"));
    for col in 0..6 {
        let expected = images.iter().map(|r| r[col]).sum::<f64>() / images.len() as f64;
        assert!((mean[col] - expected).abs() <= 1e-12 * expected.abs().max(1.0), "column {col}");
    }
    assert!(mean[5] > mean[2], "teacher PSNR {} should exceed pipeline PSNR {}", mean[5], mean[2]);

    let names: Vec<String> = table.lines().skip(1).map(|l| l.split(',').next().unwrap().to_owned()).collect();
    let first = &names[0];
    let pnm = read_pnm(&fs::read(eval.join(format!("heatmap_{first}.pgm"))).unwrap()).unwrap();
    assert_eq!((pnm.width, pnm.height), (16, 16));
    read_pnm(&fs::read(eval.join(format!("heatmap_{first}.ppm"))).unwrap()).unwrap();
    let spectra = parse_spectral_csv(&fs::read_to_string(eval.join(format!("spectra_{first}.csv"))).unwrap()).unwrap();
    assert_eq!(spectra.len(), 6 * 31);
    assert!(fs::read_to_string(eval.join("flops.csv")).unwrap().contains("student,total,"));
    assert!(eval.join("manifest.json").is_file());

    // Default validation split of the same data.
    let val = dir.path().join("val");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&val)]);
    assert_eq!(fs::read_to_string(val.join("metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn zero_epochs_copies_the_input_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 4, 3);
    let run = dir.path().join("run");
    assert!(train(1, &data, &run, 2, &["--latent", "4"]).status.success());
    let other = dir.path().join("other");
    let from = run.join("stage1.hydt");
    let out = train(2, &data, &other, 0, &[&["--from", p(&from)], STUDENT_FLAGS].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&from).unwrap(), fs::read(other.join("stage2.hydt")).unwrap());
}

#[test]
fn eval_rejects_empty_sets_and_early_checkpoints() {
    let dir = TempDir::new().unwrap();
    let (data, run) = toy_pipeline(dir.path());
    let ckpt = run.join("stage3.hydt");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = hydra(&["eval", "--data", p(&empty), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("e")), "--set", "all"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(!dir.path().join("e").join("metrics.csv").exists());

    let stage2 = run.join("stage2.hydt");
    let out = hydra(&["eval", "--data", p(&data), "--checkpoint", p(&stage2), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 3 checkpoint required"));

    // Cubes with a different band count than the checkpoint.
    let narrow = dir.path().join("narrow");
    ok(&["gen-data", "--out", p(&narrow), "--h", "16", "--w", "16", "--b", "20", "--n", "4"]);
    let out = hydra(&["eval", "--data", p(&narrow), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bands"));
}

fn tiny_model(dir: &Path, out_bias: f64) -> PathBuf {
    let tcfg = TeacherConfig {
        bands: 31,
        latent: 4,
        base_width: 4,
        se_ratio: 2,
        kernel: 3,
    };
    let mut teacher = Teacher::new(tcfg, 1).unwrap();
    let id = teacher.params().id("teacher.decoder.out_proj.bias").unwrap();
    teacher.params_mut().get_mut(id).data_mut().fill(out_bias);
    let scfg = StudentConfig {
        latent: 4,
        base_width: 2,
        heads: 1,
        encoder_blocks: [1, 0, 0, 0],
        decoder_blocks: [1, 1, 1],
        ffn_expansion: 1,
    };
    let ck = ModelCheckpoint {
        stage: Stage::Refine,
        teacher,
        student: Some(Student::new(scfg, 2).unwrap()),
        train_state: None,
    };
    let path = dir.join("tiny.hydt");
    ck.save(&path).unwrap();
    path
}

#[test]
fn reconstruct_writes_a_clamped_cube() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 1, 4);
    let rgb = data.join("rgb_0000.hsic");
    let ckpt = tiny_model(dir.path(), 5.0);
    let out = dir.path().join("rec.hsic");
    ok(&["reconstruct", "--checkpoint", p(&ckpt), "--input", p(&rgb), "--out", p(&out)]);
    let cube = load_cube(&out).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.bands()), (16, 16, 31));
    assert!(cube.data().iter().all(|&v| v == 1.0));
    assert!(PathBuf::from(format!("{}.manifest.json", out.display())).is_file());

    let ckpt = tiny_model(dir.path(), -5.0);
    ok(&["reconstruct", "--checkpoint", p(&ckpt), "--input", p(&rgb), "--out", p(&out)]);
    assert!(load_cube(&out).unwrap().data().iter().all(|&v| v == 0.0));

    let plot = dir.path().join("plot");
    let gt = data.join("cube_0000.hsic");
    ok(&["plot", "--gt", p(&gt), "--pred", p(&out), "--out", p(&plot)]);
    read_pnm(&fs::read(plot.join("heatmap.pgm")).unwrap()).unwrap();
    assert_eq!(parse_spectral_csv(&fs::read_to_string(plot.join("spectra.csv")).unwrap()).unwrap().len(), 6 * 31);
}

#[test]
fn reconstruct_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_model(dir.path(), 0.0);
    let data = dir.path().join("odd");
    ok(&["gen-data", "--out", p(&data), "--h", "12", "--w", "16", "--n", "1"]);
    let out = dir.path().join("rec.hsic");
    let res = hydra(&["reconstruct", "--checkpoint", p(&ckpt), "--input", p(&data.join("rgb_0000.hsic")), "--out", p(&out)]);
    assert_eq!(code(&res), 3);
    assert!(!out.exists());

    let garbage = dir.path().join("garbage.hsic");
    fs::write(&garbage, b"not a cube").unwrap();
    let res = hydra(&["reconstruct", "--checkpoint", p(&ckpt), "--input", p(&garbage), "--out", p(&out)]);
    assert_eq!(code(&res), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    let data = dir.path().join("data");
    fs::write(&cfg, format!("out = {}\nh = 8\nw = 8\nb = 12\nn = 5 # cubes\n", p(&data))).unwrap();
    ok(&["--config", p(&cfg), "gen-data", "--n", "2"]);
    let cube = load_cube(data.join("cube_0001.hsic")).unwrap();
    assert_eq!((cube.height(), cube.bands()), (8, 12));
    assert!(!data.join("cube_0002.hsic").exists());

    fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = hydra(&["--config", p(&cfg), "gen-data", "--out", p(&data)]);
    assert_eq!(code(&out), 2);

    let out = hydra(&["gen-data", "--out", p(&data), "--h", "many"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 4, 5);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let run = dir.path().join(format!("run{threads}"));
        let out = Command::new(env!("CARGO_BIN_EXE_hydra"))
            .env("HYDRA_THREADS", threads)
            .args(["train", "--stage", "1", "--data", p(&data), "--out", p(&run), "--epochs", "3", "--latent", "4"])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(fs::read(run.join("stage1.hydt")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = Command::new(env!("CARGO_BIN_EXE_hydra"))
        .env("HYDRA_THREADS", "zero")
        .args(["gen-data", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
