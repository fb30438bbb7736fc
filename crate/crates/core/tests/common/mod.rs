//! Explicit-loop attention reference shared by the integration tests.

#![allow(dead_code)]

use efaseg::attention::{
    efa_forward, embedded_sra_forward, standalone, AttentionConfig, AttentionWeights, Pooling, Variant,
};
use efaseg::numerics::gradcheck::random_tensor;
use efaseg::numerics::{Graph, Tensor, LN_EPS};
use efaseg::params::{Bound, Linear, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `[b][h][w][c]` as nested vectors.
pub type Map = Vec<Vec<Vec<Vec<f64>>>>;

pub fn to_map(t: &Tensor) -> Map {
    let s = t.shape();
    (0..s[0])
        .map(|b| {
            (0..s[1]).map(|y| (0..s[2]).map(|x| (0..s[3]).map(|c| t.get(&[b, y, x, c])).collect()).collect()).collect()
        })
        .collect()
}

pub fn windows(extent: usize, r: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < extent {
        out.push((start, (start + width).min(extent)));
        start += r;
    }
    out
}

pub fn ref_pool(x: &Map, r: usize, pooling: Pooling) -> Map {
    if r == 1 {
        return x.clone();
    }
    let (h, w, c) = (x[0].len(), x[0][0].len(), x[0][0][0].len());
    let width = if pooling == Pooling::Overlapped { r + 1 } else { r };
    let (rows, cols) = (windows(h, r, width), windows(w, r, width));
    x.iter()
        .map(|img| {
            rows.iter()
                .map(|&(y0, y1)| {
                    cols.iter()
                        .map(|&(x0, x1)| {
                            (0..c)
                                .map(|ch| {
                                    let vals: Vec<f64> = (y0..y1)
                                        .flat_map(|y| (x0..x1).map(move |xx| (y, xx)))
                                        .map(|(y, xx)| img[y][xx][ch])
                                        .collect();
                                    match pooling {
                                        Pooling::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                                        _ => vals.iter().sum::<f64>() / vals.len() as f64,
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn ref_linear(store: &ParamStore, lin: &Linear, v: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight);
    (0..lin.fan_out)
        .map(|o| {
            let mut acc = lin.bias.map_or(0.0, |b| store.get(b).data()[o]);
            for (i, &vi) in v.iter().enumerate() {
                acc += vi * w.get(&[i, o]);
            }
            acc
        })
        .collect()
}

pub fn ref_plain_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    v.iter().map(|a| (a - mean) / (var + LN_EPS).sqrt()).collect()
}

pub type RefOutput = (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>);

/// Output `[b][hw][c]` and attention `[b][head][query][key]`.
pub fn reference(
    x: &Tensor,
    cfg: &AttentionConfig,
    store: &ParamStore,
    w: &AttentionWeights,
    r: usize,
    embedded: bool,
) -> RefOutput {
    let xm = to_map(x);
    let pooled = ref_pool(&xm, r, cfg.pooling);
    let (heads, d) = (cfg.heads, cfg.channels / cfg.heads);
    let mut outs = Vec::new();
    let mut maps = Vec::new();
    for (img, red) in xm.iter().zip(&pooled) {
        let queries: Vec<Vec<f64>> = img.iter().flatten().cloned().collect();
        let mut kv: Vec<Vec<f64>> = red.iter().flatten().cloned().collect();
        if let Some(sr) = &w.sr {
            kv = kv.iter().map(|t| ref_plain_norm(&ref_linear(store, sr, t))).collect();
        }
        let (q, k, v) = if embedded {
            let proj = |lin: &Option<Linear>, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                rows.iter().map(|t| ref_linear(store, lin.as_ref().unwrap(), t)).collect()
            };
            (proj(&w.query, &queries), proj(&w.key, &kv), proj(&w.value, &kv))
        } else {
            (queries.clone(), kv.clone(), kv.clone())
        };
        let mut mixed = vec![vec![0.0; cfg.channels]; q.len()];
        let mut img_maps = Vec::new();
        for hd in 0..heads {
            let lo = hd * d;
            let mut head_map = Vec::new();
            for (qi, qv) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kv| (lo..lo + d).map(|ch| qv[ch] * kv[ch]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let att: Vec<f64> = e.iter().map(|v| v / z).collect();
                for ch in lo..lo + d {
                    mixed[qi][ch] = att.iter().zip(&v).map(|(a, vv)| a * vv[ch]).sum();
                }
                head_map.push(att);
            }
            img_maps.push(head_map);
        }
        outs.push(mixed.iter().map(|t| ref_linear(store, &w.output, t)).collect());
        maps.push(img_maps);
    }
    (outs, maps)
}

pub struct Case {
    pub cfg: AttentionConfig,
    pub store: ParamStore,
    pub w: AttentionWeights,
    pub x: Tensor,
    pub r: usize,
}

pub fn random_case(rng: &mut ChaCha8Rng, variant: Variant) -> Case {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let per_head = rng.random_range(1..=16 / heads);
    let c = heads * per_head;
    let cfg = AttentionConfig {
        variant,
        pooling: [Pooling::Average, Pooling::Max, Pooling::Overlapped][rng.random_range(0..3)],
        sr_projection: rng.random_bool(0.4),
        bias_free_projections: rng.random_bool(0.5),
        ..AttentionConfig::new(c, heads)
    };
    let (store, w) = standalone(&cfg, rng).unwrap();
    let (b, h, wd) = (rng.random_range(1..=2), rng.random_range(1..=6), rng.random_range(1..=6));
    let x = random_tensor(&[b, h, wd, c], rng);
    let r = rng.random_range(1..=4);
    Case { cfg, store, w, x, r }
}

pub fn run(
    case: &Case,
    f: impl Fn(&mut Graph, &Bound, efaseg::numerics::Var) -> efaseg::Result<efaseg::numerics::Var>,
) -> Tensor {
    let mut g = Graph::new();
    let p = case.store.bind(&mut g, false);
    let x = g.constant(case.x.clone());
    let y = f(&mut g, &p, x).unwrap();
    g.value(y).clone()
}

pub fn max_diff_to_reference(case: &Case, embedded: bool) -> f64 {
    let out = run(case, |g, p, x| {
        if embedded {
            embedded_sra_forward(g, p, x, &case.cfg, &case.w, case.r)
        } else {
            efa_forward(g, p, x, &case.cfg, &case.w, case.r)
        }
    });
    let (expect, _) = reference(&case.x, &case.cfg, &case.store, &case.w, case.r, embedded);
    let flat: Vec<f64> = expect.into_iter().flatten().flatten().collect();
    assert_eq!(flat.len(), out.numel());
    flat.iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
