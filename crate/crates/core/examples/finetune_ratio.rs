//! Raising reduction ratios at inference versus fine-tuning at them.
//!
//! A nano model trained at the default ratios is evaluated at the raised
//! schedule as is, then fine-tuned briefly at that schedule and evaluated
//! again.
//!
//!     cargo run --release --example finetune_ratio [-- STEPS FINETUNE_STEPS]

use efaseg::harness::{evaluate, generate_dataset, train, train_new, TrainConfig, TrainState};
use efaseg::isr::{Phase, OPTIMAL_INFERENCE};
use efaseg::model::ModelConfig;

fn main() -> efaseg::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().expect("step counts must be integers"));
    let steps = args.next().unwrap_or(300);
    let tune = args.next().unwrap_or(100);
    let data = generate_dataset(200, 64, 64, 3, 1)?;
    let held_out = generate_dataset(50, 64, 64, 3, 2)?;

    let (model, _, _) = train_new(ModelConfig::nano(3), &data, &TrainConfig { steps, ..TrainConfig::default() }, 0)?;
    let base = model.config.schedule();
    let at_train = evaluate(&model, &held_out, &base, Phase::Train)?;
    let raised = evaluate(&model, &held_out, &base.with_target(OPTIMAL_INFERENCE)?, Phase::Inference)?;
    println!("trained at {} for {steps} steps: mIoU {:.4}", base.train, at_train.miou);
    println!("evaluated at {OPTIMAL_INFERENCE} without retraining: mIoU {:.4}", raised.miou);

    let mut tuned = model.with_train_ratios(OPTIMAL_INFERENCE)?;
    let mut state = TrainState::new(&tuned, 1);
    let cfg = TrainConfig { steps: tune, warmup_steps: 10, lr: 3e-4, ..TrainConfig::default() };
    train(&mut tuned, &mut state, &data, &cfg, |_| {})?;
    let after = evaluate(&tuned, &held_out, &tuned.config.schedule(), Phase::Train)?;
    println!("fine-tuned {tune} steps at {OPTIMAL_INFERENCE}: mIoU {:.4}", after.miou);
    Ok(())
}
