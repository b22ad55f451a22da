//! `hitok` — one binary over the whole pipeline: synthetic data, tokenizer
//! and generator training, encode/decode with optional redundancy masking,
//! CFG sampling, compression stats, reconstruction metrics, frame export.
//!
//! Exit codes: 0 ok, 2 usage error, 3 format error, 4 numeric failure.

mod runconfig;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hitok_core::generator::sampling::{self, SamplingParams};
use hitok_core::generator::GenConfig;
use hitok_core::mask::MaskStrategy;
use hitok_core::train;
use hitok_core::vae::HierarchyConfig;
use hitok_core::video::VideoBlock;
use hitok_core::{artifact, codec, mask, metrics, synth, vae};
use rand::SeedableRng;

use runconfig::RunConfig;

#[derive(Parser)]
#[command(name = "hitok", version, about = "hierarchical LFQ video tokenizer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip+caption dataset into a directory.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// T,H,W of each clip.
        #[arg(long, default_value = "16,32,32", value_parser = parse_shape)]
        shape: (usize, usize, usize),
    },
    /// Train the tokenizer on a datagen directory.
    TrainTokenizer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one HTVV clip into an HTVT token stream.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none | repeat | zero | learned
        #[arg(long, default_value = "none")]
        mask: String,
        #[arg(long, default_value_t = 0.85)]
        mask_cap: f64,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
    /// Decode an HTVT token stream back to an HTVV clip.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator against a frozen tokenizer.
    TrainGenerator {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a video from a caption.
    Generate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = sampling::DEFAULT_CFG_SCALE)]
        cfg: f64,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token counts, compression ratio and bpp for a config.
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
    /// PSNR/SSIM report between two HTVV clips.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one PPM per frame of an HTVV clip.
    ExportFrames {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("shape must be T,H,W".into());
    }
    let mut v = [0usize; 3];
    for (dst, p) in v.iter_mut().zip(&parts) {
        *dst = p.trim().parse().map_err(|_| format!("bad extent `{}`", p))?;
    }
    Ok((v[0], v[1], v[2]))
}

enum Failure {
    Usage(String),
    Format(String),
    Numeric(String),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (kind, msg, code) = match self {
            Failure::Usage(m) => ("usage", m, 2),
            Failure::Format(m) => ("format", m, 3),
            Failure::Numeric(m) => ("numeric", m, 4),
        };
        eprintln!(
            "{}",
            serde_json::json!({ "error": kind, "message": msg })
        );
        ExitCode::from(code)
    }
}

type CmdResult = Result<(), Failure>;

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn format_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Format(e.to_string())
}

fn classify_train(e: train::TrainError) -> Failure {
    match e {
        train::TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
        train::TrainError::Config(_) => Failure::Usage(e.to_string()),
        other => Failure::Numeric(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Format(format!("reading {}: {}", p.display(), e)))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Format(format!("parsing {}: {}", p.display(), e)))
        }
    }
}

/// Every artifact-producing command echoes its fully-resolved config.
fn echo_config(cfg: &RunConfig, target: &Path) -> CmdResult {
    let path = if target.is_dir() {
        target.join("config.json")
    } else {
        let stem = target
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "out".into());
        target
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(format!("{stem}.config.json"))
    };
    let json = serde_json::to_string_pretty(cfg).map_err(format_err)?;
    std::fs::write(path, json).map_err(format_err)
}

fn read_data_dir(dir: &Path, with_captions: bool) -> Result<Vec<(VideoBlock, String)>, Failure> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::Format(format!("reading {}: {}", dir.display(), e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "htvv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Usage(format!("no .htvv clips in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let clip = codec::read_video_from_path(&p).map_err(format_err)?;
        let caption = if with_captions {
            let cap_path = p.with_extension("txt");
            std::fs::read_to_string(&cap_path)
                .map_err(|e| Failure::Format(format!("caption {}: {}", cap_path.display(), e)))?
                .trim()
                .to_string()
        } else {
            String::new()
        };
        out.push((clip, caption));
    }
    Ok(out)
}

fn write_log<S: serde::Serialize>(path: &Path, records: &[S]) -> CmdResult {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(format_err)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(format_err)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    path.parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("{stem}{suffix}"))
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Datagen {
            out,
            count,
            seed,
            shape,
        } => {
            if count == 0 {
                return Err(Failure::Usage("--count must be >= 1".into()));
            }
            std::fs::create_dir_all(&out).map_err(format_err)?;
            let data = synth::dataset(seed, count, shape.0, shape.1, shape.2);
            for (i, (clip, _, caption)) in data.iter().enumerate() {
                let base = out.join(format!("clip_{:05}", i));
                codec::write_video_to_path(clip, &base.with_extension("htvv"))
                    .map_err(format_err)?;
                std::fs::write(base.with_extension("txt"), caption).map_err(format_err)?;
            }
            let mut cfg = RunConfig::default();
            cfg.data.count = count;
            cfg.data.seed = seed;
            cfg.data.shape = [shape.0, shape.1, shape.2];
            echo_config(&cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({ "written": count, "dir": out.display().to_string() })
            );
            Ok(())
        }
        Command::TrainTokenizer { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let hier = cfg.hierarchy.clone();
            hier.validate(true).map_err(usage)?;
            let clips: Vec<VideoBlock> = read_data_dir(&data, false)?
                .into_iter()
                .map(|(v, _)| v)
                .collect();
            let run = train::train_tokenizer(&cfg.tokenizer_train, &clips, &hier)
                .map_err(classify_train)?;
            artifact::save_tokenizer(&run.params, &hier, &out).map_err(format_err)?;
            write_log(&sibling(&out, ".log.jsonl"), &run.log)?;
            echo_config(&cfg, &out)?;
            let last = run.log.last().expect("at least one step");
            println!(
                "{}",
                serde_json::json!({ "steps": cfg.tokenizer_train.steps, "final_l1": last.l1, "final_loss": last.loss, "ckpt": out.display().to_string() })
            );
            Ok(())
        }
        Command::Encode {
            ckpt,
            video,
            out,
            mask: mask_arg,
            mask_cap,
            mask_seed,
        } => {
            let (params, meta) = artifact::load(&ckpt, "tokenizer").map_err(format_err)?;
            let clip = codec::read_video_from_path(&video).map_err(format_err)?;
            let latents = vae::encode(&clip, &meta.hierarchy, &params)
                .map_err(|e| Failure::Numeric(e.to_string()))?;
            let masks: Option<Vec<Option<mask::MaskPlan>>> = match mask_arg.as_str() {
                "none" => None,
                other => {
                    let strategy = MaskStrategy::parse(other)
                        .ok_or_else(|| Failure::Usage(format!("unknown mask strategy `{}`", other)))?;
                    // masking applies to the dense layer (0) only
                    let scores = mask::diff_matrix(&latents.codes[0]);
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mask_seed);
                    let plan = mask::build_mask(
                        &scores,
                        meta.hierarchy.layers[0].latent_shape,
                        strategy,
                        mask_cap,
                        &mut rng,
                    )
                    .map_err(usage)?;
                    let mut ms: Vec<Option<mask::MaskPlan>> =
                        vec![None; meta.hierarchy.layers.len()];
                    ms[0] = Some(plan);
                    Some(ms)
                }
            };
            let stream = codec::TokenStreamFile::from_codes(&latents.codes, masks.as_deref())
                .map_err(format_err)?;
            codec::write_token_stream_to_path(&stream, &out).map_err(format_err)?;
            println!(
                "{}",
                serde_json::json!({ "tokens": stream.total_tokens(), "out": out.display().to_string() })
            );
            Ok(())
        }
        Command::Decode { ckpt, tokens, out } => {
            let (params, meta) = artifact::load(&ckpt, "tokenizer").map_err(format_err)?;
            let stream = codec::read_token_stream_from_path(&tokens).map_err(format_err)?;
            let (codes, masks) = stream
                .to_codes::<f32>(meta.hierarchy.mask_cap)
                .map_err(format_err)?;
            let clip = vae::decode(&codes, &meta.hierarchy, &params, Some(&masks))
                .map_err(|e| Failure::Numeric(e.to_string()))?;
            codec::write_video_to_path(&clip, &out).map_err(format_err)?;
            println!(
                "{}",
                serde_json::json!({ "frames": clip.t, "out": out.display().to_string() })
            );
            Ok(())
        }
        Command::TrainGenerator {
            config,
            data,
            tokenizer,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (tok_params, meta) = artifact::load(&tokenizer, "tokenizer").map_err(format_err)?;
            let gen_cfg = cfg.generator.clone();
            let pairs = read_data_dir(&data, true)?;
            let samples = train::tokenize_dataset(&tok_params, &meta.hierarchy, &gen_cfg, &pairs)
                .map_err(classify_train)?;
            let run = train::train_generator(&cfg.generator_train, &gen_cfg, &samples, &meta.hierarchy)
                .map_err(classify_train)?;
            artifact::save_generator(&run.params, &meta.hierarchy, &gen_cfg, &out)
                .map_err(format_err)?;
            write_log(&sibling(&out, ".log.jsonl"), &run.log)?;
            echo_config(&cfg, &out)?;
            let last = run.log.last().expect("at least one step");
            println!(
                "{}",
                serde_json::json!({ "steps": cfg.generator_train.steps, "final_loss": last.loss, "ckpt": out.display().to_string() })
            );
            Ok(())
        }
        Command::Generate {
            gen,
            tokenizer,
            caption,
            seed,
            cfg,
            temp,
            top_k,
            out,
        } => {
            let (gen_params, gen_meta) = artifact::load(&gen, "generator").map_err(format_err)?;
            let (tok_params, tok_meta) = artifact::load(&tokenizer, "tokenizer").map_err(format_err)?;
            if gen_meta.hierarchy != tok_meta.hierarchy {
                return Err(Failure::Usage(
                    "generator and tokenizer checkpoints use different hierarchies".into(),
                ));
            }
            let gen_cfg: GenConfig = gen_meta
                .generator
                .ok_or_else(|| Failure::Format("generator checkpoint lacks its config".into()))?;
            let sp = SamplingParams {
                cfg_scale: cfg,
                temperature: temp,
                top_k,
                seed,
                max_tokens: None,
            };
            sp.validate().map_err(usage)?;
            let result = sampling::generate(
                &caption,
                &gen_params,
                &gen_cfg,
                &tok_params,
                &tok_meta.hierarchy,
                &sp,
            )
            .map_err(|e| match e {
                hitok_core::generator::GenError::Caption(c) => Failure::Usage(c.to_string()),
                other => Failure::Numeric(other.to_string()),
            })?;
            codec::write_video_to_path(&result.video, &out).map_err(format_err)?;
            let tokens_path = out.with_extension("htvt");
            codec::write_token_stream_to_path(&result.stream, &tokens_path).map_err(format_err)?;
            println!(
                "{}",
                serde_json::json!({
                    "caption": caption,
                    "seed": seed,
                    "cfg_scale": cfg,
                    "video": out.display().to_string(),
                    "tokens": tokens_path.display().to_string(),
                })
            );
            Ok(())
        }
        Command::Stats { config } => {
            let cfg = load_config(Some(&config))?;
            let hier: HierarchyConfig = cfg.hierarchy;
            hier.validate(false).map_err(usage)?;
            let stats = codec::stats(&hier);
            println!("{}", serde_json::to_string_pretty(&stats).map_err(format_err)?);
            Ok(())
        }
        Command::Eval { reference, out } => {
            let a = codec::read_video_from_path(&reference).map_err(format_err)?;
            let b = codec::read_video_from_path(&out).map_err(format_err)?;
            let report = metrics::psnr(&a, &b).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(format_err)?);
            Ok(())
        }
        Command::ExportFrames { video, out } => {
            let clip = codec::read_video_from_path(&video).map_err(format_err)?;
            let paths = codec::export_frames(&clip, &out).map_err(format_err)?;
            println!(
                "{}",
                serde_json::json!({ "frames": paths.len(), "dir": out.display().to_string() })
            );
            Ok(())
        }
    }
}
