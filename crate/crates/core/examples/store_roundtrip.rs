//! Writes a small gallery to an IPCE file, reads it back and prints its stats.
//!
//! cargo run --example store_roundtrip -- [out.ipce]

use cirfuse::{load_embedding_set, write_embedding_set, Embedding, EmbeddingSet, Role};

fn main() -> cirfuse::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cirfuse_gallery.ipce"));

    let items = (0..5)
        .map(|i| {
            let v = (0..8).map(|d| ((i * 8 + d) as f32).sin()).collect();
            Ok((format!("img{i:03}.jpg"), Embedding::new(v)?))
        })
        .collect::<cirfuse::Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::from_embeddings(Role::Gallery, items)?;
    set.normalize_rows();
    write_embedding_set(&path, &set)?;

    let back = load_embedding_set(&path, Role::Gallery)?;
    assert_eq!(back.matrix(), set.matrix());
    println!("{}", path.display());
    println!("{:?}", back.stats());
    for (i, id) in back.ids().iter().enumerate() {
        println!("{id}  {:?}", &back.row(i)[..3]);
    }
    Ok(())
}
