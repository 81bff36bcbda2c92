//! Check reverse-mode gradients against central finite differences, op by
//! op and through a whole U-Net, printing the worst relative error seen.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segattack::autodiff::{NodeId, Tape};
use segattack::models::{build_model, Arch, ModelConfig};
use segattack::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Worst relative error between the autodiff gradient and central
/// differences for a scalar-valued graph builder.
fn check(
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &leaves);
    let grads = tape.backward(root).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item().unwrap()
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, tensor) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[ti]).expect("leaf requires grad");
        for e in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    worst
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, vec![3]);
    let err = check(
        |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
            tape.sum(c).unwrap()
        },
        &[x.clone(), w, b],
    );
    println!("conv2d            worst rel err {err:.2e}");

    let err = check(
        |tape, ids| {
            let r = tape.relu(ids[0]).unwrap();
            let s = tape.sigmoid(r).unwrap();
            let p = tape.max_pool2(s).unwrap();
            let u = tape.upsample_nearest2(p).unwrap();
            let m = tape.mul(u, u).unwrap();
            tape.mean(m).unwrap()
        },
        &[rand_tensor(&mut rng, vec![1, 2, 4, 4])],
    );
    println!("pool/upsample mix worst rel err {err:.2e}");

    // Input gradient through a small U-Net, the quantity FGSM perturbs.
    let model = build_model(&ModelConfig {
        arch: Arch::Unet,
        depth: 3,
        base_channels: 4,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let image = Tensor::new(
        vec![1, 1, 16, 16],
        (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let err = check(
        |tape, ids| {
            let pass = model.forward_on(tape, ids[0], false).unwrap();
            tape.mean(pass.output).unwrap()
        },
        &[image],
    );
    println!("u-net input grad  worst rel err {err:.2e}");
    println!("\nall gradients match central differences (h = 1e-5)");
}
