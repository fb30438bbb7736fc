//! Trains the four decoder depth allocations under one budget and compares.
//!
//!     cargo run --release --example decoder_ablation [-- STEPS]

use efaseg::flops::model_cost;
use efaseg::harness::{evaluate, generate_dataset, train_new, TrainConfig};
use efaseg::isr::Phase;
use efaseg::model::ModelConfig;

fn main() -> efaseg::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(300), |s| s.parse()).expect("STEPS must be an integer");
    let data = generate_dataset(200, 64, 64, 3, 1)?;
    let held_out = generate_dataset(50, 64, 64, 3, 2)?;
    let tc = TrainConfig { steps, ..TrainConfig::default() };

    println!(
        "{:<8} {:>10} {:>12} {:>12} {:>8} {:>9} {:>7}",
        "decoder", "params", "model MACs", "attn MACs", "loss", "accuracy", "mIoU"
    );
    for alloc in [[3, 2, 1], [2, 2, 2], [1, 2, 3], [1, 4, 1]] {
        let cfg = ModelConfig { decoder_depths: alloc, ..ModelConfig::nano(3) };
        let cost = model_cost(&cfg, &cfg.schedule(), Phase::Train, 64, 64)?;
        let (model, _, log) = train_new(cfg, &data, &tc, 0)?;
        let m = evaluate(&model, &held_out, &model.config.schedule(), Phase::Train)?;
        println!(
            "{:<8} {:>10} {:>12} {:>12} {:>8.4} {:>9.4} {:>7.4}",
            format!("{}-{}-{}", alloc[0], alloc[1], alloc[2]),
            model.count_parameters(),
            cost.total.macs,
            cost.attention_macs(),
            log.last().map_or(f64::NAN, |s| s.loss),
            m.pixel_accuracy,
            m.miou
        );
    }
    Ok(())
}
