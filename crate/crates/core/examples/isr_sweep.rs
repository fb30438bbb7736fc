//! Inference-time reduction sweep over the twenty published schedules.
//!
//! Uses a checkpoint when one is given, otherwise trains a nano model
//! briefly first.
//!
//!     cargo run --release --example isr_sweep [-- CHECKPOINT]

use efaseg::harness::{generate_dataset, train_new, TrainConfig};
use efaseg::isr::{appendix_c_schedules, render_sweep, sweep};
use efaseg::model::{Checkpoint, EdaFormer, ModelConfig};

fn main() -> efaseg::Result<()> {
    let held_out = generate_dataset(30, 64, 64, 3, 2)?;
    let model = match std::env::args().nth(1) {
        Some(path) => EdaFormer::from_checkpoint(&Checkpoint::load(path.as_ref())?)?,
        None => {
            println!("no checkpoint given; training nano for 300 steps");
            let data = generate_dataset(200, 64, 64, 3, 1)?;
            train_new(ModelConfig::nano(3), &data, &TrainConfig { steps: 300, ..TrainConfig::default() }, 0)?.0
        }
    };
    let report = sweep(&model, &appendix_c_schedules(), &held_out)?;
    print!("{}", render_sweep(&report));

    let best = report
        .rows
        .iter()
        .filter(|r| r.miou_delta >= -0.01)
        .min_by_key(|r| r.attention_macs)
        .expect("the training schedule itself qualifies");
    println!(
        "\ncheapest schedule within 0.01 mIoU: {} ({:+.1}% attention MACs, {:+.4} mIoU)",
        best.schedule,
        100.0 * best.attention_macs_delta,
        best.miou_delta
    );
    Ok(())
}
