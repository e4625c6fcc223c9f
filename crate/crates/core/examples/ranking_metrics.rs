//! Recall@K, mAP@K and subset recall for one hand-made ranking.

use cirfuse::engine::ScoreKind;
use cirfuse::{map_at_k, recall_at_k, subset_recall_at_k, top_k, SimilarityVector};

fn main() -> cirfuse::Result<()> {
    let scores = vec![0.10, 0.80, 0.80, 0.35, 0.92, 0.05, 0.60, 0.41];
    let ground_truth = [2, 6];
    let subset = [0, 2, 3, 5, 6];

    let s = SimilarityVector::new("q", ScoreKind::Final, scores)?;
    let ranked = top_k(&s, s.len())?;
    let order: Vec<usize> = ranked.indices().collect();
    println!("ranking {order:?}  (ties go to the lower index)");
    println!("k  recall  mAP     subset");
    for k in 1..=5 {
        println!(
            "{k}  {:.3}   {:.3}   {:.3}",
            recall_at_k(&ranked, &ground_truth, k)?,
            map_at_k(&ranked, &ground_truth, k)?,
            subset_recall_at_k(&s, &subset, &ground_truth, k)?,
        );
    }
    Ok(())
}
