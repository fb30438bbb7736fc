//! Per-component cost of one attention layer.
//!
//! Prints the published single-layer comparison, then a small grid of
//! layers under both counting conventions.
//!
//!     cargo run --release --example flops_table

use efaseg::attention::Variant;
use efaseg::flops::{appendix_b, attention_cost, render_table, AttentionQuery, Convention};

fn main() -> efaseg::Result<()> {
    print!("{}", render_table(&appendix_b()));

    println!("\nembedding-free layer, c = 64, r = 2, both conventions");
    println!("{:>7} {:>3} {:>12} {:>12} {:>10}", "grid", "a", "engine", "reference", "tokens");
    for side in [14, 15, 28] {
        for a in [1, 2, 4] {
            let q = AttentionQuery { r: 2, a, ..AttentionQuery::new(side, side, 64) };
            let engine = attention_cost(&q)?;
            let reference = attention_cost(&AttentionQuery { convention: Convention::Reference, ..q })?;
            println!(
                "{:>7} {a:>3} {:>12} {:>12} {:>10}",
                format!("{side}x{side}"),
                engine.total().macs,
                reference.total().macs,
                engine.reduction.tokens
            );
        }
    }

    let q = AttentionQuery { r: 2, variant: Variant::Embedded, ..AttentionQuery::new(14, 14, 128) };
    let sra = attention_cost(&q)?;
    let efa = attention_cost(&AttentionQuery { variant: Variant::EmbeddingFree, ..q })?;
    println!(
        "\nremoving the query/key/value projections at 14x14x128 saves {} MACs and {} parameters",
        sra.total().macs - efa.total().macs,
        sra.total().params - efa.total().params
    );
    Ok(())
}
