use mocco::numcore::{AdamState, MlpParams, OutputHead};
use ndarray::Array2;
use std::time::Instant;

fn main() {
    for &(h, b) in &[(64usize, 64usize), (64, 128), (128, 128), (256, 256)] {
        let p0 = MlpParams::init(&[6, h, h, 1], 0).unwrap();
        let mut p = p0.clone();
        let mut adam = AdamState::new(&p, 3e-4);
        let x = Array2::from_elem((b, 6), 0.3);
        let up = Array2::from_elem((b, 1), 0.01);
        let n = 200;
        let t = Instant::now();
        for _ in 0..n {
            let c = p.forward_cached(x.view(), &OutputHead::Identity).unwrap();
            let (g, _) = p.backward(&c, up.view(), &OutputHead::Identity).unwrap();
            adam.step(&mut p, &g).unwrap();
        }
        println!(
            "h={h} b={b}: {:.3} ms per fwd+bwd+adam",
            t.elapsed().as_secs_f64() * 1e3 / n as f64
        );
    }
}
