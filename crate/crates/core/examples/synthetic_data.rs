//! Synthetic segmentation scenes: generation, statistics and export.
//!
//!     cargo run --release --example synthetic_data [-- OUT_DIR]

use efaseg::harness::{export_dataset, generate_dataset, import_dataset};

fn main() -> efaseg::Result<()> {
    let scenes = generate_dataset(20, 32, 48, 4, 3)?;

    let mut counts = [0usize; 4];
    for s in &scenes {
        for k in s.targets().into_iter().flatten() {
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    println!("{} scenes of {}x{}", scenes.len(), scenes[0].height(), scenes[0].width());
    for (k, n) in counts.iter().enumerate() {
        println!("  class {k}: {:5.1}% of pixels", 100.0 * *n as f64 / total as f64);
    }

    println!("\nlabel map of scene 0 (every other row and column)");
    let s = &scenes[0];
    let targets = s.targets();
    for y in (0..s.height()).step_by(2) {
        let row: String = (0..s.width())
            .step_by(2)
            .map(|x| match targets[y * s.width() + x] {
                Some(k) => char::from(b'0' + k as u8),
                None => '.',
            })
            .collect();
        println!("  {row}");
    }

    if let Some(dir) = std::env::args().nth(1) {
        let files = export_dataset(dir.as_ref(), &scenes)?;
        let back = import_dataset(dir.as_ref())?;
        assert_eq!(back, scenes);
        println!("\nwrote {} files to {dir} and read them back unchanged", files.len());
    }
    Ok(())
}
