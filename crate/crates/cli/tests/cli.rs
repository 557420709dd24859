use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mffcn::dsp::{log_mel, pair_segments, SegmentTriple};
use mffcn::io::{load_checkpoint, load_frame_dir, load_mten, load_wav, save_frame_dir, save_mten, save_pgm, save_triples, save_wav};
use mffcn::train::{synth_clip, SynthConfig};
use mffcn::{Architecture, FusionStrategy, Tensor};

fn mffcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mffcn")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 7] = [
        ("gradcheck", &["--seed", "--width-divisor", "--tolerance", "--strategy"]),
        ("trace-shapes", &[]),
        ("train", &["--config", "--seed", "--width-divisor", "--strategy", "--lr", "--batch", "--steps", "--snr-low", "--snr-high", "--data", "--checkpoint", "--out"]),
        ("enhance", &["--checkpoint", "--data", "--out"]),
        ("eval", &["--checkpoint", "--seed", "--out"]),
        ("ablate", &["--config", "--seed", "--width-divisor", "--lr", "--batch", "--steps", "--snr-low", "--snr-high", "--out"]),
        ("export-spec", &["--data", "--out"]),
    ];
    let top = mffcn(&["--help"]);
    assert_eq!(code(&top), 0);
    for (cmd, flags) in cases {
        assert!(stdout(&top).contains(cmd), "{cmd} missing from top-level help");
        let o = mffcn(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd} --help");
        for f in flags {
            assert!(stdout(&o).contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_are_bad_input() {
    assert_eq!(code(&mffcn(&["train", "--bogus", "1", "--out", "x"])), 2);
    assert_eq!(code(&mffcn(&["train", "--strategy", "sideways", "--out", "x"])), 2);
    assert_eq!(code(&mffcn(&[])), 2);
    assert_eq!(code(&mffcn(&["frobnicate"])), 2);
}

#[test]
fn trace_shapes_passes() {
    let o = mffcn(&["trace-shapes"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("64x40x10") && out.contains("64x40x20"));
    assert!(!out.contains("MISMATCH"));
    assert!(out.contains("both branches end at 1024x5x1"));
}

#[test]
fn zero_tolerance_fails_the_gate() {
    let o = mffcn(&["gradcheck", "--tolerance", "0", "--width-divisor", "32", "--strategy", "late"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAILED"));
    assert!(stderr(&o).contains("worst offender"), "{}", stderr(&o));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mffcn(&["train", "--steps", "0", "--width-divisor", "32", "--strategy", "mid-decoder", "--seed", "9", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = load_checkpoint(&out.join("checkpoint.mffc")).unwrap();
    let arch = Architecture::new(FusionStrategy::IntermediateDecoder, 32).unwrap();
    assert_eq!(ckpt.arch, arch);
    assert_eq!(ckpt.params, arch.init_params::<f32>(9));
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap(), "step,loss\n");
}

#[test]
fn training_is_bit_reproducible_and_config_is_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, "# small\nsteps = 3\nbatch = 2\nitems = 3\nwidth_divisor = 32\nlr = 0.001\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = mffcn(&["train", "--config", p(&config), "--lr", "0.0005", "--snr-low", "-3", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["checkpoint.mffc", "loss.csv", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let cfg = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(cfg.contains("learning_rate = 0.0005") && cfg.contains("steps = 3") && cfg.contains("snr_low = -3"), "{cfg}");
    assert_eq!(fs::read_to_string(a.join("loss.csv")).unwrap().lines().count(), 4);

    // resuming from a checkpoint takes its architecture
    let resumed = dir.path().join("c");
    let o = mffcn(&["train", "--checkpoint", p(&a.join("checkpoint.mffc")), "--steps", "1", "--batch", "2", "--out", p(&resumed)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(resumed.join("config.txt")).unwrap().contains("width_divisor = 32"));
    let o = mffcn(&["train", "--checkpoint", p(&a.join("checkpoint.mffc")), "--width-divisor", "16", "--steps", "1", "--out", p(&resumed)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_inputs_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("nope");
    assert_eq!(code(&mffcn(&["train", "--data", p(&missing), "--out", p(&out)])), 2);
    assert_eq!(code(&mffcn(&["train", "--lr", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&mffcn(&["train", "--config", p(&missing), "--out", p(&out)])), 2);
    let garbage = dir.path().join("garbage.mffc");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&mffcn(&["eval", "--checkpoint", p(&garbage), "--out", p(&out)])), 2);
    assert_eq!(code(&mffcn(&["enhance", "--checkpoint", p(&garbage), "--data", p(&missing), "--out", p(&out)])), 2);

    let o = mffcn(&["train", "--lr", "1e30", "--steps", "5", "--batch", "2", "--items", "2", "--width-divisor", "32", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "--items is not a flag");
    let o = mffcn(&["train", "--lr", "1e30", "--steps", "5", "--batch", "2", "--width-divisor", "32", "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));

    let o = Command::new(env!("CARGO_BIN_EXE_mffcn")).arg("trace-shapes").env("MFFCN_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_and_ablate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&mffcn(&["train", "--steps", "0", "--width-divisor", "32", "--out", p(&run)])), 0);
    let ckpt = run.join("checkpoint.mffc");
    let eval_dir = dir.path().join("eval");
    let o = mffcn(&["eval", "--checkpoint", p(&ckpt), "--seed", "3", "--out", p(&eval_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "item,strategy,snr_db,seed,stoi,si_sdr_db,lsd");
    assert_eq!(lines.iter().filter(|l| l.starts_with("mean,")).count(), 2);
    assert!(lines.iter().any(|l| l.starts_with("mean,multilayer,-5,3,")));

    let ablate = |name: &str| {
        let out = dir.path().join(name);
        let o = mffcn(&["ablate", "--width-divisor", "32", "--steps", "2", "--batch", "2", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (ablate("a1"), ablate("a2"));
    let table = fs::read_to_string(a.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].split(',').count(), 7);
    for (row, s) in rows[1..].iter().zip(FusionStrategy::ALL) {
        assert!(row.starts_with(&format!("{s},")), "{row}");
    }
    assert!(fs::read_to_string(a.join("ablation.txt")).unwrap().contains("PESQ"));
    for f in ["ablation.csv", "ablation.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn export_spec_converts_both_ways() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap();
    let src = dir.path().join("mel.mten");
    save_mten(&src, &t).unwrap();
    let o = mffcn(&["export-spec", "--data", p(&src), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in ["mel_0000", "mel_0001"] {
        assert!(out.join(format!("{k}.pgm")).exists());
    }
    let back_dir = dir.path().join("back");
    assert_eq!(code(&mffcn(&["export-spec", "--data", p(&out.join("mel_0001.csv")), "--out", p(&back_dir)])), 0);
    let back = load_mten(&back_dir.join("mel_0001.mten")).unwrap();
    assert_eq!(back.dims(), &[3, 4]);
    assert_eq!(back.data(), &t.data()[12..]);

    let img = mffcn::dsp::GrayImage::new(2, 2, vec![0.0, 1.0, 51.0 / 255.0, 1.0]).unwrap();
    save_pgm(&dir.path().join("im.pgm"), &img).unwrap();
    assert_eq!(code(&mffcn(&["export-spec", "--data", p(&dir.path().join("im.pgm")), "--out", p(&back_dir)])), 0);
    assert_eq!(load_mten(&back_dir.join("im.mten")).unwrap().data(), &img.data[..]);

    fs::write(dir.path().join("x.txt"), "1").unwrap();
    assert_eq!(code(&mffcn(&["export-spec", "--data", p(&dir.path().join("x.txt")), "--out", p(&out)])), 2);
    save_mten(&src, &Tensor::<f32>::zeros(&[2])).unwrap();
    assert_eq!(code(&mffcn(&["export-spec", "--data", p(&src), "--out", p(&out)])), 2);
}

/// Clean speech fed as the noisy input: an overfit checkpoint should get the
/// enhanced Mel as close to the clean Mel as its training loss says.
#[test]
fn enhance_matches_the_overfit_loss() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input");
    let segments = 4;
    let samples = 640 + 160 * (20 * segments - 1);
    let clip = synth_clip(&SynthConfig { samples, ..Default::default() }, 21, 0).unwrap();
    save_wav(&input.join("clean.wav"), &clip.clean).unwrap();
    save_wav(&input.join("noisy.wav"), &clip.clean).unwrap();
    save_frame_dir(&input.join("frames"), &clip.frames).unwrap();

    // training triples built from the same files enhance will read
    let clean = load_wav(&input.join("clean.wav")).unwrap();
    let frames = load_frame_dir(&input.join("frames")).unwrap();
    let pairs = pair_segments(&clean, &frames).unwrap();
    let targets = log_mel(&clean).unwrap();
    assert_eq!(pairs.len(), segments);
    let triples: Vec<SegmentTriple> = pairs.into_iter().zip(targets).map(|((noisy, video), clean)| SegmentTriple { noisy, video, clean }).collect();
    let data = dir.path().join("data");
    save_triples(&data, &triples).unwrap();

    let fit = dir.path().join("fit");
    let o = mffcn(&["train", "--data", p(&data), "--width-divisor", "8", "--batch", "4", "--steps", "500", "--out", p(&fit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // a resumed run at a negligible rate lets the batch-norm running statistics catch up with the weights
    let run = dir.path().join("run");
    let o = mffcn(&["train", "--data", p(&data), "--checkpoint", p(&fit.join("checkpoint.mffc")), "--batch", "4", "--steps", "50", "--lr", "1e-9", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first_loss: f64 = fs::read_to_string(fit.join("loss.csv")).unwrap().lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    let final_loss: f64 = losses.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(final_loss < 0.1 * first_loss, "not overfit: {first_loss} -> {final_loss}");

    let out = dir.path().join("enhanced");
    let o = mffcn(&["enhance", "--checkpoint", p(&run.join("checkpoint.mffc")), "--data", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lsd_csv = fs::read_to_string(out.join("lsd.csv")).unwrap();
    let lsd: f64 = lsd_csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(lsd < final_loss.sqrt(), "lsd {lsd} vs sqrt(final loss) {}", final_loss.sqrt());

    assert_eq!(load_mten(&out.join("enhanced.mten")).unwrap().dims(), &[segments, 80, 20]);
    for name in ["noisy", "enhanced", "clean"] {
        assert!(out.join(format!("{name}.pgm")).exists());
        assert!(out.join("segments").join(format!("seg_0003_{name}.pgm")).exists());
    }
    assert!(out.join("enhanced.wav").exists());
}
