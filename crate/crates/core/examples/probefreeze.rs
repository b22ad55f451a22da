//! Capacity probe: train only the decoder against a frozen random encoder.
//! cargo run --release -p hitok-core --example probefreeze -- [steps] [lr]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hitok_core::synth;
use hitok_core::tensor::{Graph, ParamStore, Tensor};
use hitok_core::vae::{self, HierarchyConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

    let hier = HierarchyConfig::desk_default();
    let data: Vec<_> = synth::dataset(11, 64, 16, 32, 32)
        .into_iter()
        .map(|(v, _, _)| v)
        .collect();
    let held: Vec<_> = synth::dataset(12, 16, 16, 32, 32)
        .into_iter()
        .map(|(v, _, _)| v)
        .collect();
    let mut params = vae::init_params::<f32>(&hier, 11).unwrap();
    let frozen = |name: &str| name.starts_with("enc.") || name.starts_with("comp");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for step in 0..steps {
        let picks: Vec<usize> = (0..4).map(|_| rng.random_range(0..data.len())).collect();
        let mut flat = Vec::new();
        for &i in &picks {
            flat.extend_from_slice(data[i].data());
        }
        let batch = Tensor::from_vec(&[4, 16, 32, 32, 3], flat).unwrap();

        let mut g = Graph::<f32>::new();
        let mut binding = std::collections::BTreeMap::new();
        for (name, t) in params.iter() {
            let id = g.leaf(t, !frozen(name)).unwrap();
            binding.insert(name.to_string(), id);
        }
        let video = g.leaf(&batch, false).unwrap();
        let pre = vae::encode_nodes(&mut g, video, &hier, &binding).unwrap();
        let signs: Vec<_> = pre.iter().map(|&p| g.lfq_quantize(p).unwrap()).collect();
        let recon = vae::decode_nodes(&mut g, &signs, &hier, &binding).unwrap();
        let diff = g.sub(recon, video).unwrap();
        let absd = g.abs(diff).unwrap();
        let l1 = g.mean_all(absd).unwrap();
        g.backward(l1).unwrap();
        params.zero_grads();
        params.absorb_grads(&g, &binding).unwrap();
        params.adam_step(lr, 0.9, 0.999, 1e-8).unwrap();
        if step % 100 == 0 || step + 1 == steps {
            let rgb = params.get("dec.rgb.w").unwrap();
            let wn: f64 = rgb.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let recon_val = g.value(recon);
            let rd = recon_val.data();
            let m: f64 = rd.iter().map(|&x| x as f64).sum::<f64>() / rd.len() as f64;
            let sd: f64 =
                (rd.iter().map(|&x| (x as f64 - m) * (x as f64 - m)).sum::<f64>() / rd.len() as f64).sqrt();
            println!(
                "step {:5} l1 {:.4}  |rgb.w| {:.4}  recon mean/std {:.4}/{:.4}",
                step,
                g.scalar_value(l1),
                wn,
                m,
                sd
            );
        }
    }

    let mut psnrs = Vec::new();
    for clip in &held {
        let latents = vae::encode(clip, &hier, &params).unwrap();
        let recon = vae::decode(&latents.codes, &hier, &params, None).unwrap();
        psnrs.push(hitok_core::metrics::psnr_only(clip, &recon).unwrap());
    }
    println!(
        "held-out PSNR with frozen random encoder: {:.2} dB",
        psnrs.iter().sum::<f64>() / psnrs.len() as f64
    );
    // reference: object-aware decode needs the codes; verify sensitivity
    let latents = vae::encode(&held[0], &hier, &params).unwrap();
    let base = vae::decode(&latents.codes, &hier, &params, None).unwrap();
    let mut flipped = latents.codes.clone();
    for v in flipped[0].signs.data_mut() {
        *v = -*v;
    }
    let alt = vae::decode(&flipped, &hier, &params, None).unwrap();
    let delta: f64 = base
        .data()
        .iter()
        .zip(alt.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / base.data().len() as f64;
    println!("post-training dense-flip sensitivity: {:.5}", delta);
}
