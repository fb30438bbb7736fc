//! Trains the nano model on synthetic scenes and scores a held-out set.
//!
//!     cargo run --release --example train_toy [-- STEPS [CHECKPOINT]]

use std::time::Instant;

use efaseg::harness::{evaluate, generate_dataset, train, TrainConfig, TrainState};
use efaseg::isr::Phase;
use efaseg::model::{EdaFormer, ModelConfig};

fn main() -> efaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(300), |s| s.parse()).expect("STEPS must be an integer");
    let out = args.next();

    let data = generate_dataset(200, 64, 64, 3, 1)?;
    let held_out = generate_dataset(50, 64, 64, 3, 2)?;
    let mut model = EdaFormer::new(ModelConfig::nano(3), 0)?;
    let mut state = TrainState::new(&model, 0);
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    println!("nano: {} parameters, {steps} steps of batch {}", model.count_parameters(), cfg.batch_size);

    let t = Instant::now();
    train(&mut model, &mut state, &data, &cfg, |s| {
        if s.step % 50 == 0 || s.step == steps {
            println!("step {:>5}  loss {:.4}  lr {:.2e}  |g| {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
    })?;
    println!("trained in {:.0} s", t.elapsed().as_secs_f64());

    let m = evaluate(&model, &held_out, &model.config.schedule(), Phase::Train)?;
    println!("held-out pixel accuracy {:.4}, mIoU {:.4}", m.pixel_accuracy, m.miou);
    for (k, iou) in m.iou.iter().enumerate() {
        println!("  class {k}: IoU {}", iou.map_or("-".into(), |v| format!("{v:.4}")));
    }

    if let Some(path) = out {
        let ck = state.checkpoint(&model);
        ck.save(path.as_ref())?;
        println!("saved {path} (digest {})", ck.digest()?);
    }
    Ok(())
}
