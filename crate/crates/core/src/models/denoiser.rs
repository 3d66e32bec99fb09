use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::corpus::Dataset;
use super::layers::{
    check_param_shapes, constants, conv_bias, embed, init_normal, load_checkpoint, param_count,
    save_checkpoint, time_features, ArchText,
};
use super::train::{fit, LossHistory, TrainConfig};

/// Probability of replacing the class token by the unconditional token.
pub const UNCOND_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserArch {
    /// Three-resolution convolutional network over `[channels, side, side]`
    /// with skip connections at the two upper levels. Embeddings enter as per-channel biases.
    Conv {
        channels: usize,
        side: usize,
        width: usize,
        width2: usize,
        time_dims: usize,
        vocab: usize,
    },
    /// Residual MLP over flat latents of length `dim`.
    Mlp {
        dim: usize,
        hidden: usize,
        time_dims: usize,
        vocab: usize,
    },
    /// The residual MLP applied with shared weights to each of `points`
    /// consecutive slices of length `width`.
    Points {
        points: usize,
        width: usize,
        hidden: usize,
        time_dims: usize,
        vocab: usize,
    },
}

impl DenoiserArch {
    /// Default image denoiser for `classes` labels plus the unconditional token.
    pub fn conv(side: usize, classes: usize) -> Self {
        DenoiserArch::Conv {
            channels: 1,
            side,
            width: 16,
            width2: 32,
            time_dims: 16,
            vocab: classes + 1,
        }
    }

    pub fn mlp(dim: usize, classes: usize) -> Self {
        DenoiserArch::Mlp {
            dim,
            hidden: 128,
            time_dims: 16,
            vocab: classes + 1,
        }
    }

    pub fn points(points: usize, width: usize, classes: usize) -> Self {
        DenoiserArch::Points {
            points,
            width,
            hidden: 64,
            time_dims: 16,
            vocab: classes + 1,
        }
    }

    pub fn vocab(&self) -> usize {
        match *self {
            DenoiserArch::Conv { vocab, .. }
            | DenoiserArch::Mlp { vocab, .. }
            | DenoiserArch::Points { vocab, .. } => vocab,
        }
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        match *self {
            DenoiserArch::Conv { channels, side, .. } => vec![channels, side, side],
            DenoiserArch::Mlp { dim, .. } => vec![dim],
            DenoiserArch::Points { points, width, .. } => vec![points * width],
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            DenoiserArch::Conv {
                channels: ch,
                width: c,
                width2: c2,
                time_dims: f,
                vocab: v,
                ..
            } => vec![
                vec![c, ch, 3, 3],
                vec![c, 1, 1],
                vec![f, c],
                vec![v, c],
                vec![c, c, 3, 3],
                vec![c, 1, 1],
                vec![c2, c, 3, 3],
                vec![c2, 1, 1],
                vec![f, c2],
                vec![v, c2],
                vec![c2, c2, 3, 3],
                vec![c2, 1, 1],
                vec![c2, c2, 3, 3],
                vec![c2, 1, 1],
                vec![c2, c2, 3, 3],
                vec![c2, 1, 1],
                vec![c2, c2, 3, 3],
                vec![c2, 1, 1],
                vec![c, c2, 3, 3],
                vec![c, 1, 1],
                vec![ch, c, 3, 3],
                vec![ch, 1, 1],
            ],
            DenoiserArch::Mlp {
                dim: d,
                hidden: h,
                time_dims: f,
                vocab: v,
            }
            | DenoiserArch::Points {
                width: d,
                hidden: h,
                time_dims: f,
                vocab: v,
                ..
            } => vec![
                vec![d, h],
                vec![h],
                vec![f, h],
                vec![v, h],
                vec![h, h],
                vec![h],
                vec![h, d],
                vec![d],
            ],
        }
    }

    fn init(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let shapes = self.param_shapes();
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let last = i + 2 == shapes.len();
                match s.len() {
                    // biases
                    1 => Tensor::zeros(s),
                    3 if s[1] == 1 => Tensor::zeros(s),
                    _ => {
                        let fan_in = match s.len() {
                            4 => s[1] * 9,
                            _ => s[0],
                        };
                        init_normal(s, fan_in, if last { 0.1 } else { 1.4 }, rng)
                    }
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> ArchText {
        let mut a = ArchText::default();
        match *self {
            DenoiserArch::Conv {
                channels,
                side,
                width,
                width2,
                time_dims,
                vocab,
            } => {
                a.set("kind", "conv-denoiser");
                a.set("channels", channels);
                a.set("side", side);
                a.set("width", width);
                a.set("width2", width2);
                a.set("time_dims", time_dims);
                a.set("vocab", vocab);
            }
            DenoiserArch::Mlp {
                dim,
                hidden,
                time_dims,
                vocab,
            } => {
                a.set("kind", "mlp-denoiser");
                a.set("dim", dim);
                a.set("hidden", hidden);
                a.set("time_dims", time_dims);
                a.set("vocab", vocab);
            }
            DenoiserArch::Points {
                points,
                width,
                hidden,
                time_dims,
                vocab,
            } => {
                a.set("kind", "point-denoiser");
                a.set("points", points);
                a.set("width", width);
                a.set("hidden", hidden);
                a.set("time_dims", time_dims);
                a.set("vocab", vocab);
            }
        }
        a
    }

    pub fn from_text(a: &ArchText) -> Result<Self> {
        match a.get("kind")? {
            "conv-denoiser" => Ok(DenoiserArch::Conv {
                channels: a.usize("channels")?,
                side: a.usize("side")?,
                width: a.usize("width")?,
                width2: a.usize("width2")?,
                time_dims: a.usize("time_dims")?,
                vocab: a.usize("vocab")?,
            }),
            "mlp-denoiser" => Ok(DenoiserArch::Mlp {
                dim: a.usize("dim")?,
                hidden: a.usize("hidden")?,
                time_dims: a.usize("time_dims")?,
                vocab: a.usize("vocab")?,
            }),
            "point-denoiser" => Ok(DenoiserArch::Points {
                points: a.usize("points")?,
                width: a.usize("width")?,
                hidden: a.usize("hidden")?,
                time_dims: a.usize("time_dims")?,
                vocab: a.usize("vocab")?,
            }),
            other => Err(Error::Format(format!("not a denoiser architecture: {other}"))),
        }
    }

    fn time_dims(&self) -> usize {
        match *self {
            DenoiserArch::Conv { time_dims, .. }
            | DenoiserArch::Mlp { time_dims, .. }
            | DenoiserArch::Points { time_dims, .. } => time_dims,
        }
    }

    /// Noise prediction for a batch `x` of shape `[B, latent...]`.
    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, ts: &[usize], tokens: &[usize]) -> Result<Var<'t>> {
        let tape = x.tape();
        let b = tokens.len();
        let feats = tape.constant(time_features(ts, self.time_dims()));
        match *self {
            DenoiserArch::Conv { width, width2, .. } => {
                let e1 = feats.matmul(p[2])?.add(embed(p[3], tokens)?)?.reshape(&[b, width, 1, 1])?;
                let e2 = feats.matmul(p[8])?.add(embed(p[9], tokens)?)?.reshape(&[b, width2, 1, 1])?;
                let h = conv_bias(x, p[0], p[1])?.add(e1)?.silu();
                let skip = conv_bias(h, p[4], p[5])?.silu();
                let d = conv_bias(skip.avg_pool2()?, p[6], p[7])?.add(e2)?.silu();
                let skip2 = conv_bias(d, p[10], p[11])?.silu();
                let low = conv_bias(skip2.avg_pool2()?, p[12], p[13])?.add(e2)?.silu();
                let low = conv_bias(low, p[14], p[15])?.silu();
                let u = conv_bias(low.upsample2()?, p[16], p[17])?.add(skip2)?.silu();
                let u = conv_bias(u.upsample2()?, p[18], p[19])?.add(skip)?.silu();
                conv_bias(u, p[20], p[21])
            }
            DenoiserArch::Mlp { .. } => {
                let emb = feats.matmul(p[2])?.add(embed(p[3], tokens)?)?;
                let h = x.matmul(p[0])?.add(p[1])?.add(emb)?.silu();
                let h = h.matmul(p[4])?.add(p[5])?.silu().add(h)?;
                h.matmul(p[6])?.add(p[7])
            }
            DenoiserArch::Points {
                points,
                width,
                hidden,
                ..
            } => {
                let emb = feats.matmul(p[2])?.add(embed(p[3], tokens)?)?.reshape(&[b, 1, hidden])?;
                let rows = x.reshape(&[b * points, width])?;
                let h = rows.matmul(p[0])?.add(p[1])?.reshape(&[b, points, hidden])?.add(emb)?.silu();
                let h = h.reshape(&[b * points, hidden])?;
                let h = h.matmul(p[4])?.add(p[5])?.silu().add(h)?;
                h.matmul(p[6])?.add(p[7])?.reshape(&[b, points * width])
            }
        }
    }
}

/// Trained noise-prediction network; see [`DenoiserArch`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    arch: DenoiserArch,
    latent: Vec<usize>,
    params: Vec<Tensor>,
}

impl DenoiserParams {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        if let DenoiserArch::Conv { side, .. } = arch {
            if side % 4 != 0 {
                return Err(Error::Config(format!("conv denoiser needs a side divisible by 4, got {side}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.init(&mut rng);
        Ok(Self {
            latent: arch.latent_shape(),
            arch,
            params,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        save_checkpoint(stem, &self.arch.to_text(), &self.params)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (text, params) = load_checkpoint(stem)?;
        let arch = DenoiserArch::from_text(&text)?;
        check_param_shapes(&params, &arch.param_shapes())?;
        Ok(Self {
            latent: arch.latent_shape(),
            arch,
            params,
        })
    }

    /// Batched prediction with the weights recorded as constants.
    pub fn predict_batch<'t>(&self, x: Var<'t>, ts: &[usize], tokens: &[usize]) -> Result<Var<'t>> {
        let p = constants(x.tape(), &self.params);
        self.arch.forward(&p, x, ts, tokens)
    }
}

impl Denoiser for DenoiserParams {
    fn latent_shape(&self) -> &[usize] {
        &self.latent
    }

    fn vocab_size(&self) -> usize {
        self.arch.vocab()
    }

    fn uncond_token(&self) -> usize {
        self.arch.vocab() - 1
    }

    fn predict<'t>(&self, x: Var<'t>, t: usize, tokens: &[usize]) -> Result<Var<'t>> {
        if x.shape() != self.latent {
            return Err(Error::Shape(format!(
                "denoiser expects {:?}, got {:?}",
                self.latent,
                x.shape()
            )));
        }
        let mut one = vec![1];
        one.extend_from_slice(&self.latent);
        let mut batch = vec![tokens.len()];
        batch.extend_from_slice(&self.latent);
        let xb = x.reshape(&one)?.broadcast_to(&batch)?;
        self.predict_batch(xb, &vec![t; tokens.len()], tokens)
    }
}

/// ε-prediction training: minimizes `‖ε − ε_θ(√ᾱ_t x0 + √(1−ᾱ_t) ε, t, token)‖²`
/// with the token replaced by the unconditional one at rate
/// [`UNCOND_DROPOUT`].
pub fn train_denoiser(
    arch: DenoiserArch,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, LossHistory)> {
    if dataset.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if dataset.sample_shape() != arch.latent_shape().as_slice() {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match denoiser latent {:?}",
            dataset.sample_shape(),
            arch.latent_shape()
        )));
    }
    if dataset.num_classes + 1 != arch.vocab() {
        return Err(Error::Config(format!(
            "{} classes need a vocabulary of {}, got {}",
            dataset.num_classes,
            dataset.num_classes + 1,
            arch.vocab()
        )));
    }
    let mut model = DenoiserParams::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1ff);
    let uncond = model.uncond_token();
    let steps = schedule.steps();
    let arch = model.arch.clone();
    let history = fit(&mut model.params, dataset.len(), cfg, &mut rng, |tape, p, idx, rng| {
        let (x0, labels) = dataset.batch(idx)?;
        let noise = Tensor::randn(x0.shape(), rng);
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=steps)).collect();
        let per = x0.len() / idx.len();
        let mut xt = Vec::with_capacity(x0.len());
        for (k, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            let range = k * per..(k + 1) * per;
            xt.extend(x0.data()[range.clone()].iter().zip(&noise.data()[range]).map(|(x, e)| a * x + s * e));
        }
        let tokens: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(UNCOND_DROPOUT) { uncond } else { l })
            .collect();
        let xt = tape.constant(Tensor::new(x0.shape().to_vec(), xt)?);
        let pred = arch.forward(p, xt, &ts, &tokens)?;
        Ok(pred.sub(tape.constant(noise))?.square().mean())
    })?;
    Ok((model, history))
}

/// Plain conditional DDIM sampling from `x_T`, using masked guidance.
pub fn sample_ddim<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Tensor,
    cond: &crate::diffusion::Conditioning,
    mask: &crate::diffusion::GuidanceMask,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut x = x_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let tape = Tape::new();
        let xv = tape.constant(x);
        let eps = crate::diffusion::masked_epsilon(denoiser, xv, t, cond, mask)?;
        x = crate::diffusion::ddim_step(xv, t, 1, eps, schedule)?.value();
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::models::corpus::{gen_corpus, ShapeCorpusSpec};
    use crate::numerics::{finite_diff, grad, relative_error};

    fn small_arch() -> DenoiserArch {
        DenoiserArch::Conv {
            channels: 1,
            side: 8,
            width: 4,
            width2: 6,
            time_dims: 4,
            vocab: 3,
        }
    }

    #[test]
    fn default_models_fit_the_budget() {
        let conv = DenoiserParams::init(DenoiserArch::conv(16, 8), 0).unwrap();
        assert!(conv.param_count() <= 200_000, "{}", conv.param_count());
        let mlp = DenoiserParams::init(DenoiserArch::mlp(512, 3), 0).unwrap();
        assert!(mlp.param_count() <= 200_000, "{}", mlp.param_count());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = DenoiserParams::init(small_arch(), 1).unwrap();
        let x = Tensor::randn(&[1, 8, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let run = || {
            let tape = Tape::new();
            m.predict(tape.constant(x.clone()), 5, &[2, 0, 1]).unwrap().value()
        };
        let a = run();
        assert_eq!(a.shape(), &[3, 1, 8, 8]);
        assert_eq!(a, run());
        let tape = Tape::new();
        assert!(m.predict(tape.constant(x.clone()), 5, &[3]).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_diff() {
        let m = DenoiserParams::init(small_arch(), 2).unwrap();
        let x = Tensor::randn(&[1, 8, 8], &mut ChaCha8Rng::seed_from_u64(3));
        fn loss<'t>(m: &DenoiserParams, v: Var<'t>) -> Result<Var<'t>> {
            Ok(m.predict(v, 7, &[2, 1])?.sin().sum())
        }
        let g = grad(|_, v| loss(&m, v[0]), std::slice::from_ref(&x)).unwrap();
        let fd = finite_diff(|_, v| loss(&m, v[0]), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn one_epoch_smoke() {
        let spec = ShapeCorpusSpec {
            resolution: 8,
            ..Default::default()
        };
        let data = gen_corpus(&spec, 1).unwrap();
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let arch = DenoiserArch::Conv {
            channels: 1,
            side: 8,
            width: 4,
            width2: 6,
            time_dims: 4,
            vocab: 9,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        };
        let (m, hist) = train_denoiser(arch, &data, &s, &cfg).unwrap();
        assert!(m.is_finite());
        assert_eq!(hist.len(), 1);
        assert!(hist[0].is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = DenoiserParams::init(DenoiserArch::mlp(16, 2), 4).unwrap();
        let dir = std::env::temp_dir().join(format!("semadv-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("den");
        m.save(&stem).unwrap();
        assert_eq!(DenoiserParams::load(&stem).unwrap(), m);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn point_denoiser_is_shaped_and_differentiable() {
        let arch = DenoiserArch::points(5, 8, 3);
        assert_eq!(arch.latent_shape(), vec![40]);
        assert_eq!(DenoiserArch::from_text(&arch.to_text()).unwrap(), arch);
        let m = DenoiserParams::init(arch, 6).unwrap();
        assert!(m.param_count() <= 200_000);
        let x = Tensor::randn(&[40], &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let out = m.predict(tape.constant(x.clone()), 3, &[0, 3]).unwrap().value();
        assert_eq!(out.shape(), &[2, 40]);
        fn loss<'t>(m: &DenoiserParams, v: Var<'t>) -> Result<Var<'t>> {
            Ok(m.predict(v, 4, &[1])?.sin().sum())
        }
        let g = grad(|_, v| loss(&m, v[0]), std::slice::from_ref(&x)).unwrap();
        let fd = finite_diff(|_, v| loss(&m, v[0]), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(relative_error(&g, &fd) < 1e-4);
    }
}
