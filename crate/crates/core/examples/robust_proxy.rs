//! Fuses a proxy image feature with the query image and the caption shift,
//! and shows how each weight setting moves the result.

use cirfuse::fusion::{scale_factor, semantic_perturbation};
use cirfuse::{robust_proxy, Embedding, FusionInputs, FusionWeights};

fn cos(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    dot / (a.norm() * b.norm())
}

fn main() -> cirfuse::Result<()> {
    // text features are an order of magnitude smaller than image features
    let proxy = Embedding::new(vec![0.9, 0.1, 0.4, -0.2])?;
    let query = Embedding::new(vec![0.8, 0.3, -0.1, 0.0])?;
    let target_caption = Embedding::new(vec![0.02, 0.01, 0.06, -0.03])?;
    let origin_caption = Embedding::new(vec![0.03, 0.02, -0.01, 0.0])?;

    let shift = semantic_perturbation(&target_caption, &origin_caption)?;
    println!("perturbation      {:?}", shift.values());
    println!("scale(p, q)       {:.4}", scale_factor(&proxy, &query));
    println!("scale(p, shift)   {:.4}", scale_factor(&proxy, &shift));

    let inputs = FusionInputs::new(proxy.clone(), query.clone(), target_caption, origin_caption)?;
    for (wq, ws, wp) in [
        (1.0, 1.0, 1.0),
        (0.0, 0.0, 1.0),
        (1.0, 0.0, 1.0),
        (0.5, 2.0, 1.0),
    ] {
        let rp = robust_proxy(&inputs, &FusionWeights::new(wq, ws, wp)?)?;
        println!(
            "w=({wq},{ws},{wp})  {:?}  cos(proxy)={:.3} cos(query)={:.3} cos(shift)={:.3}",
            rp.embedding.values(),
            cos(&rp.embedding, &proxy),
            cos(&rp.embedding, &query),
            cos(&rp.embedding, &shift),
        );
    }
    Ok(())
}
