use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The eight built-in shape classes, in label order.
pub const SHAPE_LEAVES: [&str; 8] = [
    "triangle", "square", "pentagon", "circle", "ellipse", "plus", "x-cross", "ring",
];

/// Family of each entry of [`SHAPE_LEAVES`].
pub const SHAPE_FAMILIES: [&str; 8] = [
    "polygon", "polygon", "polygon", "round", "round", "cross", "cross", "round",
];

/// Sampling ranges for the per-image nuisance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Jitter {
    /// Center offset in pixels, uniform in `±position`.
    pub position: f64,
    /// Radius as a fraction of the half side, uniform in this range.
    pub scale: (f64, f64),
    /// Rotation in radians, uniform in `±rotation`. Must stay well below
    /// π/4 or plus and x-cross become indistinguishable.
    pub rotation: f64,
    /// Foreground intensity, uniform in this range; background is −1.
    pub intensity: (f64, f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            position: 1.0,
            scale: (0.62, 0.8),
            rotation: 0.2,
            intensity: (0.5, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCorpusSpec {
    pub resolution: usize,
    pub channels: usize,
    pub leaf_labels: Vec<String>,
    /// `families[i]` is the family of `leaf_labels[i]`.
    pub families: Vec<String>,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for ShapeCorpusSpec {
    fn default() -> Self {
        Self {
            resolution: 16,
            channels: 1,
            leaf_labels: SHAPE_LEAVES.iter().map(|s| s.to_string()).collect(),
            families: SHAPE_FAMILIES.iter().map(|s| s.to_string()).collect(),
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl ShapeCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution must be at least 8, got {}", self.resolution)));
        }
        if self.channels != 1 {
            return Err(Error::Config(format!("shape corpus is single-channel, got {}", self.channels)));
        }
        if self.leaf_labels.len() != self.families.len() {
            return Err(Error::Config("every leaf needs exactly one family".into()));
        }
        for leaf in &self.leaf_labels {
            shape_kind(leaf)?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.leaf_labels.len()
    }
}

/// Labeled images stacked as `[n, channels, side, side]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.select(i)
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let size: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(size * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * size..(i + 1) * size]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Splits off every `k`-th sample (by index) as a held-out set.
    pub fn split_every(&self, k: usize) -> Result<(Dataset, Dataset)> {
        let (held, kept): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|i| i % k == k - 1);
        let make = |idx: &[usize]| -> Result<Dataset> {
            let (images, labels) = self.batch(idx)?;
            Ok(Dataset {
                images,
                labels,
                num_classes: self.num_classes,
            })
        };
        Ok((make(&kept)?, make(&held)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Polygon(usize),
    Circle,
    Ellipse,
    Plus,
    XCross,
    Ring,
}

fn shape_kind(label: &str) -> Result<ShapeKind> {
    Ok(match label {
        "triangle" => ShapeKind::Polygon(3),
        "square" => ShapeKind::Polygon(4),
        "pentagon" => ShapeKind::Polygon(5),
        "circle" => ShapeKind::Circle,
        "ellipse" => ShapeKind::Ellipse,
        "plus" => ShapeKind::Plus,
        "x-cross" => ShapeKind::XCross,
        "ring" => ShapeKind::Ring,
        other => return Err(Error::Config(format!("unknown shape label `{other}`"))),
    })
}

/// Inside test in the shape's unit frame (radius 1 around the origin).
fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match kind {
        ShapeKind::Polygon(n) => {
            // vertex at the top; squares get flat sides
            let offset = if n == 4 { PI / 4.0 } else { PI / 2.0 };
            let apothem = (PI / n as f64).cos();
            (0..n).all(|k| {
                let normal = offset + PI / n as f64 + 2.0 * PI * k as f64 / n as f64;
                u * normal.cos() + v * normal.sin() <= apothem
            })
        }
        ShapeKind::Circle => r <= 0.85,
        ShapeKind::Ellipse => (u / 1.0).powi(2) + (v / 0.5).powi(2) <= 1.0,
        ShapeKind::Ring => (0.55..=1.0).contains(&r),
        ShapeKind::Plus => bar_cross(u, v),
        ShapeKind::XCross => {
            let c = std::f64::consts::FRAC_1_SQRT_2;
            bar_cross(c * (u + v), c * (v - u))
        }
    }
}

fn bar_cross(u: f64, v: f64) -> bool {
    (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0)
}

/// Renders one shape with 4×4 supersampled coverage.
fn draw(kind: ShapeKind, side: usize, jitter: &Jitter, rng: &mut impl Rng) -> Vec<f64> {
    let half = side as f64 / 2.0;
    let cx = half + rng.random_range(-jitter.position..=jitter.position);
    let cy = half + rng.random_range(-jitter.position..=jitter.position);
    let radius = half * rng.random_range(jitter.scale.0..=jitter.scale.1);
    let angle = rng.random_range(-jitter.rotation..=jitter.rotation);
    let level = rng.random_range(jitter.intensity.0..=jitter.intensity.1);
    let (sin, cos) = angle.sin_cos();
    let sub = 4;
    let mut out = vec![-1.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let mut hits = 0;
            for a in 0..sub {
                for b in 0..sub {
                    let y = i as f64 + (a as f64 + 0.5) / sub as f64 - cy;
                    let x = j as f64 + (b as f64 + 0.5) / sub as f64 - cx;
                    // image rows grow downward; flip so "up" is +v
                    let (u, v) = ((cos * x + sin * y) / radius, (sin * x - cos * y) / radius);
                    if inside(kind, u, v) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (sub * sub) as f64;
            out[i * side + j] = -1.0 + coverage * (level + 1.0);
        }
    }
    out
}

/// Balanced, deterministic corpus: `n_per_class` images per leaf, classes
/// interleaved so any prefix stays near balanced.
pub fn gen_corpus(spec: &ShapeCorpusSpec, n_per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be at least 1".into()));
    }
    let kinds = spec
        .leaf_labels
        .iter()
        .map(|l| shape_kind(l))
        .collect::<Result<Vec<_>>>()?;
    let side = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = n_per_class * kinds.len();
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (label, &kind) in kinds.iter().enumerate() {
            data.extend(draw(kind, side, &spec.jitter, &mut rng));
            labels.push(label);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, side, side], data)?,
        labels,
        num_classes: kinds.len(),
    })
}
