//! End-to-end tests of the `hitok` binary: every subcommand runs against a
//! small dataset with a briefly trained tokenizer/generator pair.

use std::path::PathBuf;
use std::process::{Command, Output};

use hitok_core::{artifact, codec, vae};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hitok"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn hitok");
    assert!(
        out.status.success(),
        "hitok {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("spawn hitok");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    data: PathBuf,
    tok_ckpt: PathBuf,
    gen_ckpt: PathBuf,
}

/// Shared tiny pipeline: dataset, briefly trained tokenizer + generator.
fn fixture() -> &'static Fixture {
    use std::sync::OnceLock;
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("data");
        run_ok(&[
            "datagen",
            "--out",
            data.to_str().unwrap(),
            "--count",
            "8",
            "--seed",
            "21",
        ]);
        let config = dir.path().join("tiny.json");
        std::fs::write(
            &config,
            r#"{
                "tokenizer_train": {"steps": 20, "batch_size": 2, "seed": 5},
                "generator_train": {"steps": 10, "batch_size": 2, "seed": 6}
            }"#,
        )
        .unwrap();
        let tok_ckpt = dir.path().join("tok.htck");
        run_ok(&[
            "train-tokenizer",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            tok_ckpt.to_str().unwrap(),
        ]);
        let gen_ckpt = dir.path().join("gen.htck");
        run_ok(&[
            "train-generator",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--tokenizer",
            tok_ckpt.to_str().unwrap(),
            "--out",
            gen_ckpt.to_str().unwrap(),
        ]);
        Fixture {
            dir,
            data,
            tok_ckpt,
            gen_ckpt,
        }
    })
}

fn first_clip(fx: &Fixture) -> PathBuf {
    fx.data.join("clip_00000.htvv")
}

#[test]
fn datagen_is_deterministic_and_echoes_config() {
    let fx = fixture();
    assert!(fx.data.join("config.json").exists());
    assert!(fx.data.join("clip_00007.htvv").exists());
    assert!(fx.data.join("clip_00007.txt").exists());

    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    run_ok(&[
        "datagen",
        "--out",
        again.to_str().unwrap(),
        "--count",
        "8",
        "--seed",
        "21",
    ]);
    for i in 0..8 {
        let name = format!("clip_{:05}.htvv", i);
        let a = std::fs::read(fx.data.join(&name)).unwrap();
        let b = std::fs::read(again.join(&name)).unwrap();
        assert_eq!(a, b, "{} differs across identical runs", name);
    }
}

#[test]
fn stats_reproduces_the_reference_arithmetic() {
    let out = run_ok(&["stats", "--config", "../../configs/full_scale.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total_tokens"], 2448);
    let ratio = v["compression_ratio"].as_f64().unwrap();
    assert!((ratio - 1713.36).abs() < 0.05, "ratio {}", ratio);
    assert_eq!(v["per_layer"][0][0], 2048);
    assert_eq!(v["per_layer"][3][0], 16);

    let out = run_ok(&["stats", "--config", "../../configs/single_layer.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total_tokens"], 2312);
}

#[test]
fn encode_decode_matches_the_in_process_path_bit_for_bit() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let tokens = tmp.path().join("clip.htvt");
    let decoded = tmp.path().join("clip_out.htvv");
    run_ok(&[
        "encode",
        "--ckpt",
        fx.tok_ckpt.to_str().unwrap(),
        "--video",
        first_clip(fx).to_str().unwrap(),
        "--out",
        tokens.to_str().unwrap(),
    ]);
    run_ok(&[
        "decode",
        "--ckpt",
        fx.tok_ckpt.to_str().unwrap(),
        "--tokens",
        tokens.to_str().unwrap(),
        "--out",
        decoded.to_str().unwrap(),
    ]);

    // in-process reference
    let (params, meta) = artifact::load(&fx.tok_ckpt, "tokenizer").unwrap();
    let clip = codec::read_video_from_path(&first_clip(fx)).unwrap();
    let latents = vae::encode(&clip, &meta.hierarchy, &params).unwrap();
    let recon = vae::decode(&latents.codes, &meta.hierarchy, &params, None).unwrap();
    let mut want = Vec::new();
    codec::write_video(&recon, &mut want).unwrap();
    let got = std::fs::read(&decoded).unwrap();
    assert_eq!(got, want, "CLI decode differs from the in-process path");
}

#[test]
fn masked_encode_decodes_and_shrinks_the_stream() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("plain.htvt");
    let masked = tmp.path().join("masked.htvt");
    for (out, mask) in [(&plain, "none"), (&masked, "repeat")] {
        run_ok(&[
            "encode",
            "--ckpt",
            fx.tok_ckpt.to_str().unwrap(),
            "--video",
            first_clip(fx).to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--mask",
            mask,
            "--mask-seed",
            "3",
        ]);
    }
    let decoded = tmp.path().join("masked_out.htvv");
    run_ok(&[
        "decode",
        "--ckpt",
        fx.tok_ckpt.to_str().unwrap(),
        "--tokens",
        masked.to_str().unwrap(),
        "--out",
        decoded.to_str().unwrap(),
    ]);
    let clip = codec::read_video_from_path(&decoded).unwrap();
    assert_eq!(clip.shape(), [16, 32, 32, 3]);
    // synthetic clips are mostly static, so masking must drop payload bytes
    let plain_len = std::fs::metadata(&plain).unwrap().len();
    let masked_len = std::fs::metadata(&masked).unwrap().len();
    assert!(
        masked_len < plain_len,
        "masked {} vs plain {}",
        masked_len,
        plain_len
    );
}

#[test]
fn generate_eval_and_export_frames() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let video = tmp.path().join("generated.htvv");
    let out = run_ok(&[
        "generate",
        "--gen",
        fx.gen_ckpt.to_str().unwrap(),
        "--tokenizer",
        fx.tok_ckpt.to_str().unwrap(),
        "--caption",
        "a red square moves right",
        "--seed",
        "9",
        "--out",
        video.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cfg_scale"].as_f64().unwrap(), 7.5, "default cfg scale");
    assert!(video.exists());
    assert!(tmp.path().join("generated.htvt").exists());

    // same seed regenerates the identical stream
    let video2 = tmp.path().join("generated2.htvv");
    run_ok(&[
        "generate",
        "--gen",
        fx.gen_ckpt.to_str().unwrap(),
        "--tokenizer",
        fx.tok_ckpt.to_str().unwrap(),
        "--caption",
        "a red square moves right",
        "--seed",
        "9",
        "--out",
        video2.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&video).unwrap(),
        std::fs::read(&video2).unwrap()
    );

    let eval_out = run_ok(&[
        "eval",
        "--ref",
        first_clip(fx).to_str().unwrap(),
        "--out",
        video.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&eval_out.stdout).unwrap();
    assert!(report["psnr_db"].as_f64().unwrap().is_finite());

    let frames = tmp.path().join("frames");
    let out = run_ok(&[
        "export-frames",
        "--video",
        video.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["frames"], 16);
    assert!(frames.join("frame_000015.ppm").exists());
}

#[test]
fn failure_exit_codes_are_machine_parseable() {
    let fx = fixture();
    let tmp = tempfile::tempdir().unwrap();

    // usage error: unknown mask strategy
    let (code, stderr) = exit_code(&[
        "encode",
        "--ckpt",
        fx.tok_ckpt.to_str().unwrap(),
        "--video",
        first_clip(fx).to_str().unwrap(),
        "--out",
        tmp.path().join("x.htvt").to_str().unwrap(),
        "--mask",
        "sometimes",
    ]);
    assert_eq!(code, 2, "stderr: {}", stderr);
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "usage");

    // format error: corrupt magic
    let bad = tmp.path().join("bad.htvt");
    std::fs::write(&bad, b"NOPE....").unwrap();
    let (code, stderr) = exit_code(&[
        "decode",
        "--ckpt",
        fx.tok_ckpt.to_str().unwrap(),
        "--tokens",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("y.htvv").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "stderr: {}", stderr);
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "format");

    // clap usage errors also exit 2
    let (code, _) = exit_code(&["decode", "--nonsense"]);
    assert_eq!(code, 2);

    // unknown config keys are a format error
    let badcfg = tmp.path().join("bad.json");
    std::fs::write(&badcfg, r#"{"tokenizer_trainz": {}}"#).unwrap();
    let (code, _) = exit_code(&["stats", "--config", badcfg.to_str().unwrap()]);
    assert_eq!(code, 3);
}

#[test]
fn tokenizer_training_writes_log_and_config_echo() {
    let fx = fixture();
    let log = fx.tok_ckpt.parent().unwrap().join("tok.log.jsonl");
    assert!(log.exists());
    let text = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["loss"].as_f64().unwrap().is_finite());
    assert!(fx.tok_ckpt.parent().unwrap().join("tok.config.json").exists());
}

