//! Embedding-free attention next to the embedded baseline on one feature map.
//!
//!     cargo run --release --example attention_demo

use efaseg::attention::{
    attention_forward, attention_map, spatial_reduce, standalone, AttentionConfig, Pooling, Variant,
};
use efaseg::numerics::gradcheck::random_tensor;
use efaseg::numerics::Graph;
use efaseg::params::Bound;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> efaseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&[1, 8, 8, 16], &mut rng);

    for variant in [Variant::EmbeddingFree, Variant::Embedded] {
        let cfg = AttentionConfig { variant, ..AttentionConfig::new(16, 2) };
        let (store, w) = standalone(&cfg, &mut rng)?;
        println!("{variant:?}: {} parameters", store.num_scalars());
        for r in [1, 2, 4] {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let y = attention_forward(&mut g, &p, xv, &cfg, &w, r)?;
            let map = attention_map(&mut g, &p, xv, &cfg, &w, r)?;
            let m = g.value(map);
            let keys = m.shape()[m.shape().len() - 1];
            let row: f64 = m.data()[..keys].iter().sum();
            println!("  r={r}: output {:?}, {keys} keys per query, first row sums to {row:.12}", g.value(y).shape());
        }
    }

    println!("\nkey/value grids after reduction of an 8x8 map");
    for pooling in [Pooling::Average, Pooling::Max, Pooling::Overlapped] {
        let grids: Vec<String> = [1, 2, 3, 4]
            .iter()
            .map(|&r| {
                let mut g = Graph::new();
                let p = Bound::from_vars(Vec::new());
                let xv = g.constant(x.clone());
                let s = spatial_reduce(&mut g, &p, xv, r, pooling, None).expect("valid ratio");
                format!("r={r}: {}x{}", g.shape(s)[1], g.shape(s)[2])
            })
            .collect();
        println!("  {pooling:?}: {}", grids.join(", "));
    }
    Ok(())
}
