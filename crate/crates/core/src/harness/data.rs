use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, io_at, Error, Result};
use crate::numerics::serialize::{read_tensor, write_tensor, Dtype};
use crate::numerics::Tensor;

/// Label value excluded from loss and metrics.
pub const IGNORE_INDEX: usize = 255;

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of per-pixel colour noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self { height, width, classes, min_shapes: 1, max_shapes: 4, noise: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return config_err("scene extents must be positive");
        }
        if self.classes < 2 {
            return config_err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return config_err("shape count range must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

/// An image `[H, W, 3]` in `[0, 1]` and its class map `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub labels: Tensor,
    pub seed: u64,
}

impl SyntheticScene {
    /// Class ids in row-major order; ignored pixels map to `None`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels.data().iter().map(|&v| Some(v as usize).filter(|&c| c != IGNORE_INDEX)).collect()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Mean colour of class `k`. The first five are hand-separated; later ones
/// walk the hue circle.
pub fn class_color(k: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 5] =
        [[0.45, 0.45, 0.45], [0.9, 0.2, 0.2], [0.2, 0.3, 0.9], [0.2, 0.85, 0.3], [0.9, 0.85, 0.2]];
    if k < TABLE.len() {
        return TABLE[k];
    }
    let hue = (k as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Deterministic scene for `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0usize; h * w];
    let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let short = h.min(w) as f64;
    for _ in 0..shapes {
        let class = rng.random_range(1..spec.classes);
        if rng.random_bool(0.5) {
            let rh = ((rng.random_range(0.2..0.5) * h as f64) as usize).max(1);
            let rw = ((rng.random_range(0.2..0.5) * w as f64) as usize).max(1);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                labels[y * w + x0..y * w + x0 + rw].fill(class);
            }
        } else {
            let radius = rng.random_range(0.1..0.25) * short;
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        labels[y * w + x] = class;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (fy, fx, phase) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.0..6.3));
    let mut image = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let k = labels[y * w + x];
            let base = class_color(k);
            let texture = if k == 0 { 0.1 * ((y as f64 * fy + x as f64 * fx + phase).sin()) } else { 0.0 };
            for ch in base {
                image.push((ch + texture + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(&[h, w, 3], image)?,
        labels: Tensor::new(&[h, w], labels.into_iter().map(|v| v as f64).collect())?,
        seed,
    })
}

/// Per-scene seeds drawn from a master stream.
pub fn scene_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// `n` scenes of `height × width` with `classes` classes.
pub fn generate_dataset(
    n: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    let spec = SceneSpec::new(height, width, classes);
    spec.validate()?;
    scene_seeds(n, seed).into_iter().map(|s| generate_scene(&spec, s)).collect()
}

pub const INDEX_FILE: &str = "index.tsv";

/// Writes `scene_NNNN.image.eft` / `scene_NNNN.label.eft` per scene plus an
/// index of `seed<TAB>image path<TAB>label path` lines.
pub fn export_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let write = |path: PathBuf, t: &Tensor| -> Result<PathBuf> {
        let mut f = std::fs::File::create(&path).map_err(io_at(&path))?;
        write_tensor(&mut f, t, Dtype::F64)?;
        Ok(path)
    };
    let mut index = String::new();
    let mut written = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let img = format!("scene_{i:04}.image.eft");
        let lab = format!("scene_{i:04}.label.eft");
        written.push(write(dir.join(&img), &s.image)?);
        written.push(write(dir.join(&lab), &s.labels)?);
        index += &format!("{}\t{img}\t{lab}\n", s.seed);
    }
    let index_path = dir.join(INDEX_FILE);
    std::fs::File::create(&index_path).and_then(|mut f| f.write_all(index.as_bytes())).map_err(io_at(&index_path))?;
    written.push(index_path);
    Ok(written)
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let index_path = dir.join(INDEX_FILE);
    let index = std::fs::read_to_string(&index_path).map_err(io_at(&index_path))?;
    let mut out = Vec::new();
    for (ln, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("{}: line {} is not `seed<TAB>image<TAB>label`", INDEX_FILE, ln + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let seed = parts[0].parse().map_err(|_| bad())?;
        let open = |name: &str| {
            let p = dir.join(name);
            std::fs::File::open(&p).map_err(io_at(&p))
        };
        let image = read_tensor(&mut open(parts[1])?)?;
        let labels = read_tensor(&mut open(parts[2])?)?;
        if image.rank() != 3 || image.shape()[2] != 3 || labels.shape() != &image.shape()[..2] {
            return Err(Error::Format(format!(
                "scene {} has shapes {:?} / {:?}",
                ln + 1,
                image.shape(),
                labels.shape()
            )));
        }
        out.push(SyntheticScene { image, labels, seed });
    }
    Ok(out)
}

/// Stacks scenes into a batch `[b, H, W, 3]` and flattened targets,
/// mirroring horizontally where `flips[i]` is set.
pub fn collate(scenes: &[&SyntheticScene], flips: &[bool]) -> Result<(Tensor, Vec<Option<usize>>)> {
    let first = scenes.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(scenes.len() * h * w * 3);
    let mut targets = Vec::with_capacity(scenes.len() * h * w);
    for (s, &flip) in scenes.iter().zip(flips.iter().chain(std::iter::repeat(&false))) {
        if s.height() != h || s.width() != w {
            return crate::error::dim_err(format!("batch mixes {h}x{w} and {}x{} scenes", s.height(), s.width()));
        }
        let t = s.targets();
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                img.extend_from_slice(&s.image.data()[(y * w + sx) * 3..(y * w + sx) * 3 + 3]);
                targets.push(t[y * w + sx]);
            }
        }
    }
    Ok((Tensor::new(&[scenes.len(), h, w, 3], img)?, targets))
}
