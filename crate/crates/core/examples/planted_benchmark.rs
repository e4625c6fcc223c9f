//! Seed-averaged comparison of text-only and fused retrieval on the planted
//! synthetic benchmark, plus the lambda and proxy-count sweeps.
//!
//! cargo run --release --example planted_benchmark -- [seeds] [text_noise] [caption_noise] [proxy_noise] [spread]

use cirfuse::engine::{BalanceParams, Normalization};
use cirfuse::metrics::{EvalConfig, Metric};
use cirfuse::pipeline::{compute_similarities, sweep_lambda, sweep_proxies};
use cirfuse::{generate, FusionConfig, SynthSpec};

fn main() -> cirfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
    let seeds = arg(0).map_or(10, |v| v as u64);
    let eval = EvalConfig {
        recall_ks: vec![1, 5, 10],
        map_ks: vec![10],
        subset_ks: vec![],
    };
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut lambda_r1 = vec![0.0; grid.len()];
    let mut lambda_map = vec![0.0; grid.len()];
    let mut proxy_map = [0.0; 5];
    for seed in 0..seeds {
        let mut spec = SynthSpec::planted(seed);
        if let Some(v) = arg(1) {
            spec.text_noise = v;
        }
        if let Some(v) = arg(2) {
            spec.caption_noise = v;
        }
        if let Some(v) = arg(3) {
            spec.proxy_noise = v;
        }
        if let Some(v) = arg(4) {
            spec.hard_negative_spread = v;
        }
        let ds = generate(&spec)?.resolve()?;
        let cache = compute_similarities(&ds, &FusionConfig::default(), None)?;
        for row in sweep_lambda(&ds, &cache, &grid, Normalization::MinmaxPerQuery, &eval)? {
            let i = (row.x * 10.0).round() as usize;
            match (row.metric, row.k) {
                (Metric::Recall, 1) => lambda_r1[i] += row.value / seeds as f64,
                (Metric::Map, 10) => lambda_map[i] += row.value / seeds as f64,
                _ => {}
            }
        }
        let params = BalanceParams::new(0.5, Normalization::MinmaxPerQuery)?;
        for row in sweep_proxies(&ds, &FusionConfig::default(), &params, 5, &eval)? {
            if row.metric == Metric::Map {
                proxy_map[row.x as usize - 1] += row.value / seeds as f64;
            }
        }
    }
    println!("lambda  R@1     mAP@10");
    for (i, l) in grid.iter().enumerate() {
        println!("{l:<6.1}  {:.4}  {:.4}", lambda_r1[i], lambda_map[i]);
    }
    println!("proxies mAP@10 (lambda 0.5)");
    for (n, v) in proxy_map.iter().enumerate() {
        println!("{}       {v:.4}", n + 1);
    }
    Ok(())
}
