//! Finite-difference gradient checking by Ridders' extrapolation of
//! central differences.
//!
//! The checked function maps leaf tensors to any output; it is reduced to a
//! scalar by a fixed random projection so every output element contributes
//! a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Initial step of the extrapolation tableau.
pub const FD_STEP: f64 = 1e-3;

const SHRINK: f64 = 1.4;
const TABLEAU: usize = 12;

/// Gradients below this magnitude on both sides are compared on an
/// absolute scale. Stencil round-off on an O(1) loss is around 1e-12, so
/// an exactly-zero gradient cannot be resolved more finely than this.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() / scale.max(GRAD_FLOOR)
}

fn projected_loss<F>(inputs: &[Tensor], proj_seed: u64, track: bool, f: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) }).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Checks every element of every input.
pub fn check<F>(inputs: &[Tensor], proj_seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e))).collect();
    check_elements(inputs, &all, proj_seed, f)
}

/// Checks only the listed `(input, element)` coordinates.
pub fn check_elements<F>(inputs: &[Tensor], elements: &[(usize, usize)], proj_seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = projected_loss(inputs, proj_seed, true, &f)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work = inputs.to_vec();
    for &(i, e) in elements {
        let orig = work[i].data()[e];
        let mut at = |offset: f64| -> Result<f64> {
            work[i].data_mut()[e] = orig + offset;
            let (gr, _, l) = projected_loss(&work, proj_seed, false, &f)?;
            Ok(gr.value(l).data()[0])
        };
        let numeric = ridders(|h| Ok((at(h)? - at(-h)?) / (2.0 * h)))?;
        work[i].data_mut()[e] = orig;
        let err = relative_error(analytic[i].data()[e], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (i, e);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Extrapolates central differences at geometrically shrinking steps to
/// zero step, keeping the estimate with the smallest error bound and
/// stopping once round-off makes the tableau diverge.
fn ridders(mut central: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let fac2 = SHRINK * SHRINK;
    let mut h = FD_STEP;
    let mut prev = vec![central(h)?];
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    for _ in 1..TABLEAU {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = fac2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= fac2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let n = row.len();
        if (row[n - 1] - prev[n - 2]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// Tensor whose entries are a random permutation of evenly spaced values
/// in `[-1, 1]`, so no two entries are within `2 / numel` of each other.
/// Suits ops with kinks at ties, such as max pooling.
pub fn distinct_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("valid shape")
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}
