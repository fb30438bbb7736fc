//! Saves a model, loads it back and checks predictions are bit-identical.
//!
//!     cargo run --release --example checkpoint_roundtrip

use efaseg::isr::Phase;
use efaseg::model::{Checkpoint, EdaFormer, ModelConfig};
use efaseg::numerics::gradcheck::random_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> efaseg::Result<()> {
    let model = EdaFormer::new(ModelConfig::nano(3), 42)?;
    let dir = std::env::temp_dir().join(format!("efaseg-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("nano.ckpt");

    let ck = model.to_checkpoint(0, 42);
    ck.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("wrote {} ({bytes} bytes, {} tensors)", path.display(), ck.tensors.len());

    let back = EdaFormer::from_checkpoint(&Checkpoint::load(&path)?)?;
    let img = random_tensor(&[1, 64, 64, 3], &mut ChaCha8Rng::seed_from_u64(0));
    let schedule = model.config.schedule();
    let (a, b) = (model.predict(&img, &schedule, Phase::Train)?, back.predict(&img, &schedule, Phase::Train)?);
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("digest before {}\ndigest after  {}", ck.digest()?, back.to_checkpoint(0, 42).digest()?);
    println!("logits bit-identical after reload: {identical}");

    println!("\nconfiguration header:\n{}", model.config.to_toml());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
