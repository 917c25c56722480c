//! Reverse-mode gradients of a small network against central differences.

use videobooth::{Graph, RngStream, Tensor};

fn loss(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>, y: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let g = Graph::new();
    let (a, b) = (g.param(w1.clone()), g.param(w2.clone()));
    let h = g.silu(g.linear(g.constant(x.clone()), a, None).unwrap()).unwrap();
    let p = g.softmax_lastdim(g.linear(h, b, None).unwrap(), None).unwrap();
    let l = g.mse(p, g.constant(y.clone())).unwrap();
    let grads = g.backward(l).unwrap();
    (g.value(l).item().unwrap(), grads.get(a).unwrap().clone())
}

fn main() {
    let mut rng = RngStream::new(1);
    let x = rng.normal_tensor::<f64>(vec![4, 5]);
    let w1 = rng.normal_tensor::<f64>(vec![5, 6]).scale(0.5);
    let w2 = rng.normal_tensor::<f64>(vec![6, 3]).scale(0.5);
    let y = rng.normal_tensor::<f64>(vec![4, 3]);
    let (l0, g1) = loss(&x, &w1, &w2, &y);
    println!("loss {l0:.6}");
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..w1.numel() {
        let bump = |d: f64| {
            let mut v = w1.to_vec();
            v[i] += d;
            loss(&x, &Tensor::new(vec![5, 6], v).unwrap(), &w2, &y).0
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let rel = (fd - g1.data()[i]).abs() / fd.abs().max(g1.data()[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    println!("{} coordinates of w1, worst relative error {worst:.2e}", w1.numel());
}
