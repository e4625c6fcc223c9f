//! Brute-force top-k over a random unit gallery with the blocked kernel.
//!
//! cargo run --release --example top_k_search -- [queries] [gallery] [dim] [k]

use std::time::Instant;

use cirfuse::Kernel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    let mut m: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in m.chunks_exact_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    m
}

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (nq, ng, dim, k) = (arg(0, 100), arg(1, 20_000), arg(2, 256), arg(3, 10));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let queries = unit_rows(&mut rng, nq, dim);
    let gallery = unit_rows(&mut rng, ng, dim);
    let kernel = Kernel::default();
    println!(
        "backend {:?}, {} threads",
        kernel.backend,
        rayon::current_num_threads()
    );

    let t = Instant::now();
    let hits = kernel.top_k(&queries, &gallery, dim, k);
    println!(
        "{nq} x {ng} x {dim}, top {k}: {:.3}s",
        t.elapsed().as_secs_f64()
    );
    for (q, row) in hits.iter().take(3).enumerate() {
        let line: Vec<String> = row.iter().map(|(i, s)| format!("{i}:{s:.3}")).collect();
        println!("q{q}  {}", line.join(" "));
    }
}
