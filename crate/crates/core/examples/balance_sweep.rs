//! How lambda trades the text score against its product with the proxy score
//! for a handful of candidates, and where pairs of candidates swap order.

use cirfuse::engine::{balance, ScoreKind};
use cirfuse::{lambda_crossover, top_k, BalanceParams, Normalization, SimilarityVector};

fn main() -> cirfuse::Result<()> {
    // (text, proxy) per candidate
    let cands = [
        (0.31, 0.20),
        (0.29, 0.55),
        (0.27, 0.61),
        (0.22, 0.70),
        (0.18, 0.30),
    ];
    let text = SimilarityVector::new("q", ScoreKind::Text, cands.iter().map(|c| c.0).collect())?;
    let proxy = SimilarityVector::new("q", ScoreKind::Proxy, cands.iter().map(|c| c.1).collect())?;

    println!("lambda  order");
    for i in 0..=10 {
        let lambda = i as f64 / 10.0;
        let s = balance(
            &text,
            &proxy,
            &BalanceParams::new(lambda, Normalization::MinmaxPerQuery)?,
        )?;
        let order: Vec<String> = top_k(&s, cands.len())?
            .indices()
            .map(|i| i.to_string())
            .collect();
        println!("{lambda:<6.1}  {}", order.join(" "));
    }

    println!("raw-score crossovers");
    for a in 0..cands.len() {
        for b in a + 1..cands.len() {
            if let Some(l) = lambda_crossover(cands[a], cands[b])? {
                println!("{a} vs {b}: {l:.6}");
            }
        }
    }
    Ok(())
}
