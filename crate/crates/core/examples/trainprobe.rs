//! Timing / quality probe for the tokenizer training run.
//! cargo run --release -p hitok-core --example trainprobe -- [steps] [count]

use std::time::Instant;

use hitok_core::synth;
use hitok_core::train::{self, TrainConfig};
use hitok_core::vae::HierarchyConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let entropy_weight: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let boundary: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

    let hier = HierarchyConfig::desk_default();
    let data: Vec<_> = synth::dataset(11, count, 16, 32, 32)
        .into_iter()
        .map(|(v, _, _)| v)
        .collect();
    let held: Vec<_> = synth::dataset(12, 32, 16, 32, 32)
        .into_iter()
        .map(|(v, _, _)| v)
        .collect();

    let cfg = TrainConfig {
        steps,
        seed: 11,
        log_every: 100,
        entropy_weight,
        progressive_boundary: boundary,
        lr,
        ..TrainConfig::default()
    };
    println!(
        "steps={} count={} entropy_weight={} boundary={} lr={}",
        steps, count, entropy_weight, boundary, lr
    );
    let t0 = Instant::now();
    let run = train::train_tokenizer(&cfg, &data, &hier).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!(
        "trained {} steps in {:.1}s ({:.0} ms/step)",
        steps,
        train_time,
        train_time / steps as f64 * 1e3
    );
    for l in &run.log {
        println!(
            "  step {:5}  l1 {:.4}  entropy {:+.4}  loss {:.4}  coarse={}",
            l.step, l.l1, l.entropy, l.loss, l.coarse_only
        );
    }

    let t1 = Instant::now();
    let mut full = Vec::new();
    let mut coarse = Vec::new();
    for clip in &held {
        let r = train::reconstruct(&run.params, &hier, clip, false).unwrap();
        full.push(hitok_core::metrics::psnr_only(clip, &r).unwrap());
        let rz = train::reconstruct(&run.params, &hier, clip, true).unwrap();
        coarse.push(hitok_core::metrics::psnr_only(clip, &rz).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = full.iter().zip(&coarse).filter(|(f, c)| f > c).count();
    println!(
        "eval in {:.1}s: held-out PSNR full {:.2} dB, dense-zeroed {:.2} dB, full>coarse on {}/{}",
        t1.elapsed().as_secs_f64(),
        mean(&full),
        mean(&coarse),
        wins,
        held.len()
    );

    // post-training diagnostics: does the decode still react to the codes?
    let clip = &held[0];
    let latents = hitok_core::vae::encode(clip, &hier, &run.params).unwrap();
    let base = hitok_core::vae::decode(&latents.codes, &hier, &run.params, None).unwrap();
    let stats = |v: &hitok_core::video::VideoBlock| {
        let n = v.data().len() as f64;
        let m: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = v.data().iter().map(|&x| (x as f64 - m) * (x as f64 - m)).sum::<f64>() / n;
        (m, var.sqrt())
    };
    let (rm, rs) = stats(&base);
    let (cm, cs) = stats(clip);
    println!("recon mean/std {:.4}/{:.4} vs clip {:.4}/{:.4}", rm, rs, cm, cs);
    let mut flipped = latents.codes.clone();
    for v in flipped[0].signs.data_mut() {
        *v = -*v;
    }
    let alt = hitok_core::vae::decode(&flipped, &hier, &run.params, None).unwrap();
    let delta: f64 = base
        .data()
        .iter()
        .zip(alt.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / base.data().len() as f64;
    println!("mean |recon delta| from flipping dense signs after training: {:.6}", delta);
    // and per-layer code diversity across the held-out set
    for m in 0..hier.layers.len() {
        let mut uniq = std::collections::HashSet::new();
        for c in &held {
            let l = hitok_core::vae::encode(c, &hier, &run.params).unwrap();
            for &i in &l.codes[m].indices {
                uniq.insert(i);
            }
        }
        println!(
            "layer {}: {} distinct codes over {} held-out clips",
            m,
            uniq.len(),
            held.len()
        );
    }
}
