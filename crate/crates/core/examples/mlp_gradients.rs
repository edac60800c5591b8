//! Train a small MLP with Adam on a sine regression and check its analytic
//! gradient against central finite differences.

use rand::Rng as _;

use aorl::nn::{adam_step, Activation, AdamState, Mlp, MlpSpec};
use aorl::rng;

fn loss(net: &Mlp, xs: &[f64], ys: &[f64]) -> aorl::Result<f64> {
    let out = net.forward_batch(xs, xs.len())?;
    Ok(out.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / xs.len() as f64)
}

fn main() -> aorl::Result<()> {
    let spec = MlpSpec::feedforward(1, &[32, 32], 1, Activation::Tanh, Activation::Identity, 3)?;
    let mut net = Mlp::new(spec)?;
    let mut opt = AdamState::for_net(&net);
    let mut r = rng::from_seed(3);
    let xs: Vec<f64> = (0..128).map(|_| r.gen_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x: &f64| x.sin()).collect();
    let n = xs.len() as f64;

    let grad_of = |net: &Mlp| -> aorl::Result<Vec<f64>> {
        let cache = net.forward_cached(&xs, xs.len())?;
        let g: Vec<f64> = cache.output().iter().zip(&ys).map(|(p, y)| 2.0 * (p - y) / n).collect();
        let mut grads = vec![0.0; net.params().len()];
        net.backward_cached(&cache, &g, &mut grads, false)?;
        Ok(grads)
    };

    let analytic = grad_of(&net)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..net.params().len()).step_by(97) {
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let numeric = (loss(&plus, &xs, &ys)? - loss(&minus, &xs, &ys)?) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("{} parameters, worst sampled relative error {worst:.2e}", net.params().len());

    for epoch in 0..=2000 {
        if epoch % 500 == 0 {
            println!("step {epoch:>4}: mse {:.5}", loss(&net, &xs, &ys)?);
        }
        let g = grad_of(&net)?;
        adam_step(&mut net, &g, &mut opt)?;
    }
    Ok(())
}
