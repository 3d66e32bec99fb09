use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::corpus::Dataset;
use super::layers::{
    check_param_shapes, constants, conv_bias, init_normal, load_checkpoint, param_count,
    save_checkpoint, ArchText,
};
use super::train::{fit, LossHistory, TrainConfig};

/// A differentiable image classifier.
pub trait Classifier {
    /// `[channels, side, side]` of one input image.
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// Logits `[B, classes]` for images `[B, channels, side, side]`.
    fn logits<'t>(&self, images: Var<'t>) -> Result<Var<'t>>;
}

/// Three conv/silu/pool blocks followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArch {
    pub channels: usize,
    pub side: usize,
    pub widths: [usize; 3],
    pub classes: usize,
}

impl ClassifierArch {
    pub fn new(channels: usize, side: usize, classes: usize) -> Self {
        Self {
            channels,
            side,
            widths: [8, 16, 16],
            classes,
        }
    }

    fn flat(&self) -> usize {
        let s = self.side / 8;
        self.widths[2] * s * s
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let [a, b, c] = self.widths;
        vec![
            vec![a, self.channels, 3, 3],
            vec![a, 1, 1],
            vec![b, a, 3, 3],
            vec![b, 1, 1],
            vec![c, b, 3, 3],
            vec![c, 1, 1],
            vec![self.flat(), self.classes],
            vec![self.classes],
        ]
    }

    pub fn to_text(&self) -> ArchText {
        let mut a = ArchText::default();
        a.set("kind", "conv-classifier");
        a.set("channels", self.channels);
        a.set("side", self.side);
        a.set(
            "widths",
            self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        a.set("classes", self.classes);
        a
    }

    pub fn from_text(a: &ArchText) -> Result<Self> {
        if a.get("kind")? != "conv-classifier" {
            return Err(Error::Format(format!("not a classifier architecture: {}", a.get("kind")?)));
        }
        let widths: Vec<usize> = a
            .get("widths")?
            .split(',')
            .map(|w| w.trim().parse().map_err(|_| Error::Format(format!("bad width `{w}`"))))
            .collect::<Result<_>>()?;
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| Error::Format("classifier needs exactly 3 widths".into()))?;
        Ok(Self {
            channels: a.usize("channels")?,
            side: a.usize("side")?,
            widths,
            classes: a.usize("classes")?,
        })
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let h = conv_bias(x, p[0], p[1])?.silu().avg_pool2()?;
        let h = conv_bias(h, p[2], p[3])?.silu().avg_pool2()?;
        let h = conv_bias(h, p[4], p[5])?.silu().avg_pool2()?;
        h.reshape(&[b, self.flat()])?.matmul(p[6])?.add(p[7])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    arch: ClassifierArch,
    input: Vec<usize>,
    params: Vec<Tensor>,
}

impl ClassifierParams {
    pub fn init(arch: ClassifierArch, seed: u64) -> Result<Self> {
        if arch.side % 8 != 0 || arch.side == 0 {
            return Err(Error::Config(format!("classifier side must be a multiple of 8, got {}", arch.side)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| match s.len() {
                1 => Tensor::zeros(s),
                3 => Tensor::zeros(s),
                4 => init_normal(s, s[1] * 9, 1.4, &mut rng),
                _ => init_normal(s, s[0], 1.0, &mut rng),
            })
            .collect();
        Ok(Self {
            input: vec![arch.channels, arch.side, arch.side],
            arch,
            params,
        })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        save_checkpoint(stem, &self.arch.to_text(), &self.params)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (text, params) = load_checkpoint(stem)?;
        let arch = ClassifierArch::from_text(&text)?;
        check_param_shapes(&params, &arch.param_shapes())?;
        Ok(Self {
            input: vec![arch.channels, arch.side, arch.side],
            arch,
            params,
        })
    }
}

impl Classifier for ClassifierParams {
    fn input_shape(&self) -> &[usize] {
        &self.input
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn logits<'t>(&self, images: Var<'t>) -> Result<Var<'t>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.input[..] {
            return Err(Error::Shape(format!(
                "classifier expects [B, {:?}], got {:?}",
                self.input, shape
            )));
        }
        let p = constants(images.tape(), &self.params);
        self.arch.forward(&p, images)
    }
}

/// Logits for a single image `[channels, side, side]`.
pub fn classify<C: Classifier + ?Sized>(classifier: &C, image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.constant(image.reshape(&shape)?);
    let logits = classifier.logits(x)?.value();
    logits.reshape(&[classifier.num_classes()])
}

/// Predicted labels for a batch `[B, channels, side, side]`.
pub fn predict_labels<C: Classifier + ?Sized>(classifier: &C, images: &Tensor) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let logits = classifier.logits(tape.constant(images.clone()))?.value();
    (0..logits.shape()[0]).map(|i| Ok(logits.select(i)?.argmax())).collect()
}

/// Fraction of `dataset` labeled correctly.
pub fn accuracy_on<C: Classifier + ?Sized>(classifier: &C, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("accuracy of an empty dataset".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(256) {
        let (images, labels) = dataset.batch(chunk)?;
        let pred = predict_labels(classifier, &images)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Cross-entropy training. `augment_noise` adds Gaussian pixel noise of that
/// standard deviation to every training batch.
pub fn train_classifier(
    arch: ClassifierArch,
    dataset: &Dataset,
    cfg: &TrainConfig,
    augment_noise: f64,
) -> Result<(ClassifierParams, LossHistory)> {
    if dataset.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if dataset.num_classes != arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier {}",
            dataset.num_classes, arch.classes
        )));
    }
    let mut model = ClassifierParams::init(arch, cfg.seed)?;
    if dataset.sample_shape() != model.input.as_slice() {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match classifier input {:?}",
            dataset.sample_shape(),
            model.input
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5_5e5);
    let arch = model.arch.clone();
    let classes = arch.classes;
    let history = fit(&mut model.params, dataset.len(), cfg, &mut rng, |tape, p, idx, rng| {
        let (mut images, labels) = dataset.batch(idx)?;
        if augment_noise > 0.0 {
            images = images.axpy(augment_noise, &Tensor::randn(images.shape(), rng))?;
        }
        let logits = arch.forward(p, tape.constant(images))?;
        let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
        Ok(logits.log_softmax().gather(&picks)?.mean().neg())
    })?;
    Ok((model, history))
}
