//! Rough throughput check for the conv kernels at tokenizer shapes.
//! Run with: cargo run --release -p hitok-core --example convbench

use std::time::Instant;

use hitok_core::tensor::{Graph, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32 * 0.1
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

struct Layer {
    name: &'static str,
    transpose: bool,
    xshape: [usize; 5],
    wshape: [usize; 5],
    stride: [usize; 3],
}

fn main() {
    let b = 4;
    let layers = vec![
        Layer { name: "enc.s0.down", transpose: false, xshape: [b, 16, 32, 32, 3], wshape: [2, 3, 3, 3, 32], stride: [2, 2, 2] },
        Layer { name: "enc.s0.res ", transpose: false, xshape: [b, 8, 16, 16, 32], wshape: [1, 3, 3, 32, 32], stride: [1, 1, 1] },
        Layer { name: "enc.s1.down", transpose: false, xshape: [b, 8, 16, 16, 32], wshape: [2, 2, 2, 32, 64], stride: [2, 2, 2] },
        Layer { name: "enc.s1.res ", transpose: false, xshape: [b, 4, 8, 8, 64], wshape: [1, 3, 3, 64, 64], stride: [1, 1, 1] },
        Layer { name: "enc.s2.down", transpose: false, xshape: [b, 4, 8, 8, 64], wshape: [1, 2, 2, 64, 64], stride: [1, 2, 2] },
        Layer { name: "dec.s2.up  ", transpose: true, xshape: [b, 4, 4, 4, 64], wshape: [1, 2, 2, 64, 64], stride: [1, 2, 2] },
        Layer { name: "dec.s1.res ", transpose: false, xshape: [b, 4, 8, 8, 64], wshape: [1, 3, 3, 64, 64], stride: [1, 1, 1] },
        Layer { name: "dec.s1.up  ", transpose: true, xshape: [b, 4, 8, 8, 64], wshape: [2, 2, 2, 64, 32], stride: [2, 2, 2] },
        Layer { name: "dec.s0.res ", transpose: false, xshape: [b, 8, 16, 16, 32], wshape: [1, 3, 3, 32, 32], stride: [1, 1, 1] },
        Layer { name: "dec.s0.up  ", transpose: true, xshape: [b, 8, 16, 16, 32], wshape: [2, 2, 2, 32, 32], stride: [2, 2, 2] },
        Layer { name: "dec.rgb    ", transpose: false, xshape: [b, 16, 32, 32, 32], wshape: [1, 3, 3, 32, 3], stride: [1, 1, 1] },
    ];

    let reps = 10;
    let mut total = 0.0;
    let mut total_macs = 0.0f64;
    for layer in &layers {
        let x = randn(&layer.xshape, 1);
        let w = randn(&layer.wshape, 2);
        let bias = randn(&[layer.wshape[4]], 3);
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::<f32>::new();
            let xi = g.leaf(&x, true).unwrap();
            let wi = g.leaf(&w, true).unwrap();
            let bi = g.leaf(&bias, true).unwrap();
            let y = if layer.transpose {
                g.tconv3d(xi, wi, bi, layer.stride).unwrap()
            } else {
                g.conv3d(xi, wi, bi, layer.stride).unwrap()
            };
            let loss = g.mean_all(y).unwrap();
            g.backward(loss).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        total += dt;

        let taps: usize = layer.wshape[..3].iter().product();
        let (ci, co) = (layer.wshape[3], layer.wshape[4]);
        let out_pos: f64 = if layer.transpose {
            (layer.xshape[1] * layer.stride[0] * layer.xshape[2] * layer.stride[1] * layer.xshape[3] * layer.stride[2]) as f64
        } else {
            (layer.xshape[1] as f64 / layer.stride[0] as f64).ceil()
                * (layer.xshape[2] as f64 / layer.stride[1] as f64).ceil()
                * (layer.xshape[3] as f64 / layer.stride[2] as f64).ceil()
        };
        let macs = if layer.transpose {
            (layer.xshape[1] * layer.xshape[2] * layer.xshape[3]) as f64 * (taps * ci * co) as f64
        } else {
            out_pos * (taps * ci * co) as f64
        } * b as f64
            * 3.0; // fwd + ~2x bwd
        total_macs += macs;
        println!(
            "{}  {:8.3} ms   ~{:6.1} MMAC (f+b)   {:6.2} GMAC/s",
            layer.name,
            dt * 1e3,
            macs / 1e6,
            macs / dt / 1e9
        );
    }
    println!("---");
    println!(
        "step conv total: {:.1} ms  (~{:.2} GMAC at {:.2} GMAC/s)",
        total * 1e3,
        total_macs / 1e9,
        total_macs / total / 1e9
    );
}
