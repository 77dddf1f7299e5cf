//! Trains the reference tiny float model on the synthetic dataset and
//! writes the weight asset consumed by tests and the CLI.
//!
//! Usage: `cargo run --release -p flexhyca-core --bin train-tiny [out.fhfm]`
//!
//! Training is deterministic: fixed seeds for init, shuffling, and data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use flexhyca_core::dataset::{reference_eval, reference_train};
use flexhyca_core::qmodel::{
    calibrate_quantization, pixels_to_float, save_float, tiny_graph, FloatModel,
};

const EPOCHS: usize = 24;
const BATCH: usize = 32;
const LR0: f64 = 0.05;
const MOMENTUM: f64 = 0.9;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/assets/tiny.fhfm".to_string());
    let train = reference_train();
    let eval = reference_eval();

    let graph = tiny_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let weights: Vec<Vec<f64>> = graph
        .weighted_layers()
        .iter()
        .map(|&l| {
            let n = graph.weight_len(l);
            let out_ch = graph.output_shapes().unwrap()[l].channels.max(1);
            let fan_in = n / out_ch;
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
        })
        .collect();
    let mut model = FloatModel::new(graph, weights).unwrap();
    let mut velocity: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();

    let inputs: Vec<Vec<f64>> = (0..train.len()).map(|i| pixels_to_float(train.image(i))).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..EPOCHS {
        let lr = LR0 * (1.0 - 0.9 * epoch as f64 / EPOCHS as f64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(BATCH) {
            // per-sample gradients in parallel, reduced in sample order so
            // the result is schedule independent
            let grads: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&si| {
                    let acts = model.forward(&inputs[si]).unwrap();
                    let (loss, gout) = model.cross_entropy(&acts, train.label(si));
                    let g = model.backward(&inputs[si], &acts, &gout, true).unwrap();
                    (loss, g.weight_grads.unwrap())
                })
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            for (loss, gw) in grads {
                loss_sum += loss;
                for (vel, g) in velocity.iter_mut().zip(&gw) {
                    for (v, gi) in vel.iter_mut().zip(g) {
                        *v += gi * scale;
                    }
                }
            }
            for (w, vel) in model.weights.iter_mut().zip(velocity.iter_mut()) {
                for (wi, v) in w.iter_mut().zip(vel.iter_mut()) {
                    *wi -= lr * *v;
                    *v *= MOMENTUM;
                }
            }
        }
        if epoch % 4 == 3 || epoch == EPOCHS - 1 {
            let acc = model.accuracy(&eval).unwrap();
            println!(
                "epoch {epoch:>2}  lr {lr:.4}  loss {:.4}  eval acc {acc:.4}",
                loss_sum / train.len() as f64
            );
        }
    }

    let float_acc = model.accuracy(&eval).unwrap();
    println!("final float eval accuracy: {float_acc:.4}");

    // sanity: unconstrained quantization should stay within 1% of float
    let calib = train.subset(0, 256);
    let qm = calibrate_quantization(&model, &calib, 0).unwrap();
    let q_acc = qm.accuracy(&eval).unwrap();
    println!("quantized (q_scale=0) eval accuracy: {q_acc:.4}");
    println!("windows: {:?}", qm.windows.iter().map(|w| w.q).collect::<Vec<_>>());

    if let Some(parent) = std::path::Path::new(&out).parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    save_float(&model, std::path::Path::new(&out)).unwrap();
    println!("wrote {out}");
}
