//! Finite-difference gradient checks on engine ops and a transformer block.
//!
//!     cargo run --release --example gradcheck

use efaseg::attention::{AttentionConfig, Variant};
use efaseg::blocks::EftBlock;
use efaseg::numerics::gradcheck::{check, random_tensor};
use efaseg::numerics::{Graph, Tensor, Var, LN_EPS};
use efaseg::params::{Bound, Init, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> efaseg::Result<Var>) -> efaseg::Result<()> {
    let r = check(inputs, 7, f)?;
    println!("{name:<28} {:>6} elements  max rel. error {:.2e}", r.checked, r.max_rel_err);
    Ok(())
}

fn main() -> efaseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut rng);

    report("matmul", &[t(&[3, 4]), t(&[4, 5])], |g, v| g.matmul(v[0], v[1]))?;
    report("softmax", &[t(&[3, 6])], |g, v| g.softmax_lastdim(v[0]))?;
    report("layer norm", &[t(&[4, 6]), t(&[6]), t(&[6])], |g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS))?;
    report("gelu", &[t(&[3, 5])], |g, v| g.gelu(v[0]))?;
    report("conv2d stride 2", &[t(&[1, 5, 5, 2]), t(&[3, 3, 2, 3])], |g, v| g.conv2d(v[0], v[1], 2, 1))?;
    report("depthwise conv", &[t(&[1, 4, 5, 3]), t(&[3, 3, 3])], |g, v| g.depthwise_conv2d(v[0], v[1]))?;
    report("average pool r=2", &[t(&[1, 5, 4, 2])], |g, v| g.avg_pool2d(v[0], 2))?;
    report("bilinear upsample", &[t(&[1, 2, 3, 2])], |g, v| g.bilinear_upsample(v[0], 5, 7))?;
    report("cross entropy", &[t(&[4, 3])], |g, v| g.cross_entropy(v[0], &[Some(0), Some(2), None, Some(1)]))?;

    // Every parameter of a block is an input of the checked function.
    for variant in [Variant::EmbeddingFree, Variant::Embedded] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { variant, sr_projection: true, ..AttentionConfig::new(4, 2) };
        let block = EftBlock::new(&mut store, &mut Init::new(&mut rng), "block", cfg, 2)?;
        let mut inputs = vec![random_tensor(&[1, 4, 4, 4], &mut rng)];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        report(&format!("EFT block ({variant:?})"), &inputs, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            block.forward(g, &p, v[0], 2)
        })?;
    }
    Ok(())
}
