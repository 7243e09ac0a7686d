//! Finite-difference checks of every layer type and of the full angular
//! margin loss through a small backbone.
//!
//! cargo run --release --example gradient_check

use diverid::embedding::{build_backbone, ArcFaceObjective, ArcMargin, EmbeddingConfig};
use diverid::nnet::{grad_check, grad_check_network, mse_loss, sum_loss, LayerSpec, Network, Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stacks: Vec<(&str, Vec<usize>, Vec<LayerSpec>)> = vec![
        ("dense", vec![5], vec![LayerSpec::dense(5, 3)]),
        ("conv3x3", vec![2, 6, 6], vec![LayerSpec::conv3x3(2, 3), LayerSpec::Flatten, LayerSpec::dense(108, 2)]),
        ("relu", vec![4], vec![LayerSpec::dense(4, 8), LayerSpec::Relu, LayerSpec::dense(8, 2)]),
        ("maxpool", vec![1, 4, 4], vec![LayerSpec::conv3x3(1, 2), LayerSpec::pool2(), LayerSpec::Flatten, LayerSpec::dense(8, 2)]),
        ("l2norm", vec![6], vec![LayerSpec::dense(6, 4), LayerSpec::L2Norm]),
    ];
    for (name, shape, specs) in stacks {
        let net = Network::<f64>::new(shape.clone(), specs, 3)?;
        let mut input_shape = vec![2];
        input_shape.extend(shape);
        let x = random(input_shape, &mut rng);
        let out = net.infer(&x)?;
        let target = random(out.shape().to_vec(), &mut rng);
        let r = grad_check_network(&net, &x, |o| mse_loss(o, &target), 1e-5)?;
        let s = grad_check_network(&net, &x, sum_loss, 1e-5)?;
        println!("{name:<8} mse max rel err {:.2e}  sum max rel err {:.2e}  ({} params)", r.max_rel_error, s.max_rel_error, r.checked);
    }

    let cfg = EmbeddingConfig {
        dim: 8,
        classes: 3,
        input_size: 16,
        backbone: "toy-cnn-lite".into(),
        ..Default::default()
    };
    let backbone = build_backbone(&cfg, 5)?.cast::<f64>();
    let head = Param::new("arcface.weight", random(vec![3, 8], &mut rng));
    let mut obj = ArcFaceObjective {
        backbone,
        head,
        input: random(vec![3, 3, 16, 16], &mut rng),
        labels: vec![0, 2, 1],
        arc: ArcMargin { margin: 0.5, scale: 4.0 },
    };
    let r = grad_check(&mut obj, 1e-5)?;
    println!("arcface through backbone: max rel err {:.2e} over {} params (worst {:?})", r.max_rel_error, r.checked, r.worst);
    Ok(())
}
