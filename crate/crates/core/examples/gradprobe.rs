//! Gradient-flow diagnostic: per-group gradient norms of the tokenizer
//! loss at init, plus decode sensitivity to the dense codes.

use hitok_core::synth;
use hitok_core::tensor::Graph;
use hitok_core::train::TrainConfig;
use hitok_core::vae::{self, HierarchyConfig};

fn main() {
    let hier = HierarchyConfig::desk_default();
    let params = vae::init_params::<f32>(&hier, 11).unwrap();
    let data: Vec<_> = synth::dataset(11, 4, 16, 32, 32)
        .into_iter()
        .map(|(v, _, _)| v)
        .collect();
    let cfg = TrainConfig::default();

    // one full forward/backward at init
    let mut flat = Vec::new();
    for v in &data {
        flat.extend_from_slice(v.data());
    }
    let batch = hitok_core::tensor::Tensor::from_vec(&[4, 16, 32, 32, 3], flat).unwrap();

    let mut g = Graph::<f32>::new();
    let binding = params.bind(&mut g, true).unwrap();
    let video = g.leaf(&batch, false).unwrap();
    let pre = vae::encode_nodes(&mut g, video, &hier, &binding).unwrap();
    let signs: Vec<_> = pre.iter().map(|&p| g.lfq_quantize(p).unwrap()).collect();
    let recon = vae::decode_nodes(&mut g, &signs, &hier, &binding).unwrap();
    let diff = g.sub(recon, video).unwrap();
    let absd = g.abs(diff).unwrap();
    let l1 = g.mean_all(absd).unwrap();
    let _ = cfg;
    g.backward(l1).unwrap();
    println!("l1 at init = {}", g.scalar_value(l1));
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for (name, id) in &binding {
        if let Some(grad) = g.grad(*id) {
            let n2: f64 = grad.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let vals = g.data(*id);
            let v2: f64 = vals.iter().map(|&v| (v as f64) * (v as f64)).sum();
            rows.push((name.clone(), n2.sqrt(), v2.sqrt()));
        } else {
            rows.push((name.clone(), -1.0, 0.0));
        }
    }
    for (name, gn, vn) in rows {
        println!("{:28} |grad| {:>12.6}  |w| {:>10.4}", name, gn, vn);
    }

    // decode sensitivity: flip all dense-layer signs
    let latents = vae::encode(&data[0], &hier, &params).unwrap();
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
    println!("mean |recon delta| from flipping dense signs at init: {:.6}", delta);
}
