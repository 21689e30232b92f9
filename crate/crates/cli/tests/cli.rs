use std::path::Path;
use std::process::{Command, Output};

use jnd_core::audio::{load_wav, measured_snr, save_wav};
use jnd_core::{synth, WavEncoding};
use serde_json::Value;

fn jndlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jndlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = jndlab(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn additive_axis(dir: &Path) -> String {
    let path = dir.join("axis.json");
    std::fs::write(
        &path,
        r#"{"seed": 5, "noise_source": "pink",
            "steps": [{"category": "additive", "kind": "additive", "params_template": {}, "weight": 1.0}]}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn perturb_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    save_wav(&synth::speech_like(3, 16_000), &input, WavEncoding::Pcm16).unwrap();

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"seed": 1, "steps": [], "noise_source": null}"#).unwrap();
    let copy = dir.path().join("copy.wav");
    ok(&[
        "perturb",
        "--in",
        s(&input),
        "--axis-file",
        s(&empty),
        "--rho",
        "80",
        "--out",
        s(&copy),
    ]);
    assert_eq!(
        std::fs::read(&input).unwrap(),
        std::fs::read(&copy).unwrap()
    );

    let axis = additive_axis(dir.path());
    let clean = load_wav(&input).unwrap();
    for (rho, snr) in [("0", 66.0), ("100", 2.0)] {
        let out = dir.path().join(format!("snr{rho}.wav"));
        ok(&[
            "perturb",
            "--in",
            s(&input),
            "--axis-file",
            &axis,
            "--rho",
            rho,
            "--out",
            s(&out),
        ]);
        let got = measured_snr(&clean, &load_wav(&out).unwrap()).unwrap();
        assert!((got - snr).abs() <= 0.1, "rho {rho}: {got} dB");
    }

    let a = dir.path().join("a.wav");
    let b = dir.path().join("b.wav");
    let axis_a = ok(&[
        "perturb",
        "--in",
        s(&input),
        "--axis-seed",
        "9",
        "--rho",
        "40",
        "--out",
        s(&a),
    ]);
    let axis_b = ok(&[
        "perturb",
        "--in",
        s(&input),
        "--axis-seed",
        "9",
        "--rho",
        "40",
        "--out",
        s(&b),
    ]);
    assert_eq!(axis_a, axis_b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    save_wav(&synth::speech_like(3, 16_000), &input, WavEncoding::Float32).unwrap();
    let out = dir.path().join("out.wav");
    let config = dir.path().join("config.json");
    let axis = additive_axis(dir.path());
    std::fs::write(
        &config,
        serde_json::json!({
            "perturb": { "in": s(&input), "axis-file": axis, "rho": 100.0, "out": s(&out) }
        })
        .to_string(),
    )
    .unwrap();
    let clean = load_wav(&input).unwrap();
    ok(&["--config", s(&config), "perturb"]);
    assert!((measured_snr(&clean, &load_wav(&out).unwrap()).unwrap() - 2.0).abs() < 0.1);

    // environment beats the config file
    let status = Command::new(env!("CARGO_BIN_EXE_jndlab"))
        .args(["--config", s(&config), "perturb"])
        .env("JND_RHO", "0")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!((measured_snr(&clean, &load_wav(&out).unwrap()).unwrap() - 66.0).abs() < 0.1);
}

#[test]
fn errors_are_one_json_line() {
    for args in [
        vec![
            "perturb",
            "--in",
            "/no/such.wav",
            "--axis-seed",
            "1",
            "--rho",
            "5",
            "--out",
            "/tmp/x.wav",
        ],
        vec!["train", "--no-such-flag"],
        vec!["fit-jnd", "--corpus-dir", "/no/such/dir"],
        vec!["perturb", "--axis-seed", "1"],
    ] {
        let out = jndlab(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        let lines: Vec<&str> = err.lines().collect();
        assert_eq!(lines.len(), 1, "{args:?}: {err}");
        let v: Value = serde_json::from_str(lines[0]).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

#[test]
fn simulate_is_seeded_and_sentinels_catch_lapses() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, lapse: &str, n: &str| {
        ok(&[
            "simulate",
            "--sessions",
            n,
            "--seed",
            "4",
            "--lapse",
            lapse,
            "--corpus-dir",
            s(&dir.path().join(name)),
        ])
    };
    let a = run("a", "0.02", "3");
    let b = run("b", "0.02", "3");
    assert_eq!(a["log_sha256"], b["log_sha256"]);

    let careful = run("careful", "0", "12");
    let sloppy = run("sloppy", "0.5", "12");
    let rejected = |v: &Value| {
        v["status_counts"]["rejected_sentinel"]
            .as_u64()
            .unwrap_or(0)
    };
    assert!(
        rejected(&sloppy) > rejected(&careful),
        "{sloppy} vs {careful}"
    );

    let fit = ok(&["fit-jnd", "--corpus-dir", s(&dir.path().join("a"))]);
    assert_eq!(fit.as_object().unwrap().len(), 3);
}

#[test]
fn train_eval_and_grad_demo_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(&[
        "simulate",
        "--sessions",
        "2",
        "--seed",
        "1",
        "--lapse",
        "0",
        "--n-refs",
        "2",
        "--corpus-dir",
        &p("corpus"),
    ]);
    let export = ok(&[
        "export-triplets",
        "--corpus-dir",
        &p("corpus"),
        "--n-refs",
        "2",
        "--out",
        &p("export"),
    ]);
    assert_eq!(export["triplets"], 48);
    let manifest = export["manifest"].as_str().unwrap().to_string();

    let pre = ok(&[
        "train",
        "--mode",
        "pre",
        "--clips",
        "10",
        "--epochs",
        "1",
        "--n-refs",
        "2",
        "--ckpt-out",
        &p("pre.json"),
    ]);
    assert!(Path::new(&p("pre.loss.csv")).exists());
    let lin = |out: &str| {
        ok(&[
            "train",
            "--mode",
            "lin",
            "--init-ckpt",
            &p("pre.json"),
            "--manifest",
            &manifest,
            "--epochs",
            "1",
            "--seed",
            "2",
            "--ckpt-out",
            &p(out),
        ])
    };
    let l1 = lin("lin1.json");
    let l2 = lin("lin2.json");
    assert_eq!(l1["backbone_checksum"], pre["backbone_checksum"]);
    assert_ne!(l1["checksum"], pre["checksum"]);
    assert_eq!(l1["checksum"], l2["checksum"]);
    assert_eq!(
        std::fs::read(p("lin1.json")).unwrap(),
        std::fs::read(p("lin2.json")).unwrap()
    );

    let refs: Vec<_> = std::fs::read_dir(p("export/ref"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let pers: Vec<_> = std::fs::read_dir(p("export/per"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let csv = p("afc.csv");
    std::fs::write(
        &csv,
        format!(
            "ref,a,b,choice\n{},{},{},A\n{},{},{},B\n",
            s(&refs[0]),
            s(&refs[0]),
            s(&pers[0]),
            s(&refs[0]),
            s(&pers[0]),
            s(&refs[0]),
        ),
    )
    .unwrap();
    let acc = ok(&["eval", "--ckpt", &p("lin1.json"), "--2afc", &csv]);
    assert_eq!(acc["accuracy"], 1.0);

    let clean = load_wav(&refs[0]).unwrap();
    let noisy_path = dir.path().join("noisy.wav");
    let noisy: Vec<f64> = clean
        .samples()
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.01 * ((i * 7919 % 101) as f64 / 50.0 - 1.0))
        .collect();
    save_wav(
        &clean.with_samples(noisy).unwrap(),
        &noisy_path,
        WavEncoding::Float32,
    )
    .unwrap();
    let demo = ok(&[
        "grad-demo",
        "--ckpt",
        &p("lin1.json"),
        "--clean",
        s(&refs[0]),
        "--noisy",
        s(&noisy_path),
        "--steps",
        "3",
        "--step-size",
        "1e-3",
        "--out",
        &p("denoised.wav"),
    ]);
    assert!(demo["final_distance"].as_f64().unwrap() <= demo["initial_distance"].as_f64().unwrap());
    let trace = std::fs::read_to_string(p("denoised.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);
}
