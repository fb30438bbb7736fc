//! Engine MAC counters next to the analytic cost model.
//!
//!     cargo run --release --example mac_counters

use efaseg::attention::{attention_forward, standalone, AttentionConfig, Pooling, Variant};
use efaseg::flops::{attention_cost, model_cost, AttentionQuery};
use efaseg::isr::{Phase, OPTIMAL_INFERENCE};
use efaseg::model::{EdaFormer, ModelConfig};
use efaseg::numerics::gradcheck::random_tensor;
use efaseg::numerics::{counters, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> efaseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:<14} {:<10} {:>3} {:>10} {:>10}", "variant", "pooling", "r", "counted", "model");
    for variant in [Variant::EmbeddingFree, Variant::Embedded] {
        for pooling in [Pooling::Average, Pooling::Max, Pooling::Overlapped] {
            for r in [1, 2, 4] {
                let cfg = AttentionConfig { variant, pooling, ..AttentionConfig::new(32, 4) };
                let (store, w) = standalone(&cfg, &mut rng)?;
                let mut g = Graph::new();
                let p = store.bind(&mut g, false);
                let x = g.constant(random_tensor(&[1, 13, 11, 32], &mut rng));
                counters::reset();
                attention_forward(&mut g, &p, x, &cfg, &w, r)?;
                let counted = counters::snapshot().macs();
                let q = AttentionQuery { r, variant, pooling, ..AttentionQuery::new(13, 11, 32) };
                let model = attention_cost(&q)?.total().macs;
                let tag = if counted == model { "" } else { "  DIFFERENT" };
                println!(
                    "{:<14} {:<10} {r:>3} {counted:>10} {model:>10}{tag}",
                    format!("{variant:?}"),
                    format!("{pooling:?}")
                );
            }
        }
    }

    let model = EdaFormer::new(ModelConfig::nano(3), 0)?;
    let img = random_tensor(&[1, 64, 64, 3], &mut rng);
    let train = model.config.schedule();
    for (name, s, phase) in [
        ("training ratios", train, Phase::Train),
        ("raised ratios", train.with_target(OPTIMAL_INFERENCE)?, Phase::Inference),
    ] {
        counters::reset();
        model.predict(&img, &s, phase)?;
        let c = counters::snapshot();
        let cost = model_cost(&model.config, &s, phase, 64, 64)?;
        println!(
            "\nnano at {name} {}: counted {} MACs ({} matmul + {} conv), model total {} ({}), attention {}",
            s.effective_ratios(phase)?,
            c.macs(),
            c.matmul_macs,
            c.conv_macs,
            cost.total.macs,
            if c.macs() == cost.total.macs { "equal" } else { "DIFFERENT" },
            cost.attention_macs()
        );
    }
    Ok(())
}
