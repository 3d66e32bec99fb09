//! Isotropic Gaussian splats: latent decoding, pinhole cameras, differentiable
//! front-to-back compositing, expectation over views and the multi-view
//! attack head.

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, GuidanceMask, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{Classifier, Dataset};
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::resadv::{run_resadv_ddim, AttackConfig, AttackHead, AttackResult, AttackTask};

/// Latent values per point: color (3), opacity, log-scale, offset (3).
pub const POINT_DIMS: usize = 8;
pub const DEFAULT_POINTS: usize = 64;
pub const DEFAULT_SIDE: usize = 24;
pub const FOV_DEGREES: f64 = 40.0;
pub const CAMERA_RADIUS: f64 = 2.0;
pub const EVAL_VIEWS: usize = 12;
/// Base pitch of training, attack and evaluation views.
pub const VIEW_PITCH: f64 = FRAC_PI_8;
/// Classifier-free guidance weight applied uniformly over the latent.
pub const SPLAT_GUIDANCE: f64 = 3.0;

pub const SCALE_MIN: f64 = 0.02;
pub const SCALE_MAX: f64 = 0.5;
pub const OFFSET_MAX: f64 = 0.2;
const LOG_SCALE_BIAS: f64 = -2.5;
const LOG_SCALE_GAIN: f64 = 0.5;
const OFFSET_GAIN: f64 = 0.1;
const NEAR: f64 = 0.05;

/// One decoded point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub scale: f64,
}

/// Diagonal derivative of [`decode_point`] with respect to the latent slots.
#[derive(Clone, Copy, Debug, Default)]
struct SplatJacobian {
    color: [f64; 3],
    opacity: f64,
    scale: f64,
    offset: [f64; 3],
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn decode_with_jacobian(base: [f64; 3], z: &[f64]) -> (Splat, SplatJacobian) {
    let mut jac = SplatJacobian::default();
    let mut color = [0.0; 3];
    for c in 0..3 {
        color[c] = sigmoid(z[c]);
        jac.color[c] = color[c] * (1.0 - color[c]);
    }
    let opacity = sigmoid(z[3]);
    jac.opacity = opacity * (1.0 - opacity);
    let raw = (LOG_SCALE_BIAS + LOG_SCALE_GAIN * z[4]).exp();
    let scale = raw.clamp(SCALE_MIN, SCALE_MAX);
    jac.scale = if raw > SCALE_MIN && raw < SCALE_MAX { LOG_SCALE_GAIN * raw } else { 0.0 };
    let mut position = base;
    for d in 0..3 {
        let raw = OFFSET_GAIN * z[5 + d];
        position[d] += raw.clamp(-OFFSET_MAX, OFFSET_MAX);
        jac.offset[d] = if raw.abs() < OFFSET_MAX { OFFSET_GAIN } else { 0.0 };
    }
    (
        Splat {
            position,
            color,
            opacity,
            scale,
        },
        jac,
    )
}

/// Decodes one point's latent slots around its anchor.
pub fn decode_point(base: [f64; 3], z: &[f64]) -> Splat {
    decode_with_jacobian(base, z).0
}

/// A splat object: fixed anchors plus a flat latent of `POINT_DIMS` values per point.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    base: Vec<[f64; 3]>,
    latent: Tensor,
}

fn check_latent(base: &[[f64; 3]], latent: &Tensor) -> Result<()> {
    if latent.shape() != [base.len() * POINT_DIMS] {
        return Err(Error::Shape(format!(
            "{} anchors need a latent of [{}], got {:?}",
            base.len(),
            base.len() * POINT_DIMS,
            latent.shape()
        )));
    }
    Ok(())
}

impl GaussianCloud {
    pub fn new(base: Vec<[f64; 3]>, latent: Tensor) -> Result<Self> {
        check_latent(&base, &latent)?;
        Ok(Self { base, latent })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn base(&self) -> &[[f64; 3]] {
        &self.base
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn decode(&self) -> Vec<Splat> {
        self.base
            .iter()
            .zip(self.latent.data().chunks(POINT_DIMS))
            .map(|(&b, z)| decode_point(b, z))
            .collect()
    }
}

/// Procedural object families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    Blob,
    Box,
    Ring,
}

pub const TEMPLATES: [Template; 3] = [Template::Blob, Template::Box, Template::Ring];

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Blob => "blob",
            Template::Box => "box",
            Template::Ring => "ring",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        TEMPLATES
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Format(format!("unknown object template `{name}`")))
    }

    pub fn index(self) -> usize {
        TEMPLATES.iter().position(|&t| t == self).expect("listed")
    }

    pub fn mean_color(self) -> [f64; 3] {
        match self {
            Template::Blob => [0.85, 0.35, 0.25],
            Template::Box => [0.3, 0.75, 0.35],
            Template::Ring => [0.3, 0.4, 0.85],
        }
    }

    /// `n` anchors: a sphere, the surface of a cube, or a flat torus.
    pub fn base_positions(self, n: usize) -> Vec<[f64; 3]> {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                match self {
                    Template::Blob => {
                        let z = 1.0 - 2.0 * u;
                        let r = (1.0 - z * z).sqrt();
                        let th = golden * i as f64;
                        [0.45 * r * th.cos(), 0.45 * r * th.sin(), 0.45 * z]
                    }
                    Template::Box => {
                        let per_face = n.div_ceil(6);
                        let face = i / per_face;
                        let j = i % per_face;
                        let side = (per_face as f64).sqrt().ceil() as usize;
                        let a = ((j % side) as f64 + 0.5) / side as f64 * 0.8 - 0.4;
                        let b = ((j / side) as f64 + 0.5) / side as f64 * 0.8 - 0.4;
                        let s = if face % 2 == 0 { 0.4 } else { -0.4 };
                        match face / 2 {
                            0 => [s, a, b],
                            1 => [a, s, b],
                            _ => [a, b, s],
                        }
                    }
                    Template::Ring => {
                        let around = n.div_ceil(4);
                        let th = 2.0 * PI * (i / 4) as f64 / around as f64;
                        let ph = 2.0 * PI * (i % 4) as f64 / 4.0;
                        let r = 0.55 + 0.1 * ph.cos();
                        [r * th.cos(), r * th.sin(), 0.1 * ph.sin()]
                    }
                }
            })
            .collect()
    }

    /// A random latent around this template's appearance.
    pub fn sample_latent(self, n: usize, rng: &mut impl Rng) -> Tensor {
        let color = self.mean_color();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let scale_z = ((0.1f64).ln() - LOG_SCALE_BIAS) / LOG_SCALE_GAIN;
        let noise = Tensor::randn(&[n * POINT_DIMS], rng);
        let mut data = Vec::with_capacity(n * POINT_DIMS);
        for z in noise.data().chunks(POINT_DIMS) {
            for c in 0..3 {
                data.push(logit(color[c]) + 0.3 * z[c]);
            }
            data.push(2.0 + 0.3 * z[3]);
            data.push(scale_z + 0.3 * z[4]);
            for d in 0..3 {
                data.push(0.5 * z[5 + d]);
            }
        }
        Tensor::new(vec![n * POINT_DIMS], data).expect("sized above")
    }

    pub fn sample_cloud(self, n: usize, rng: &mut impl Rng) -> GaussianCloud {
        GaussianCloud {
            base: self.base_positions(n),
            latent: self.sample_latent(n, rng),
        }
    }
}

/// Pinhole camera on the sphere of radius 2 looking at the origin, up-axis Z.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub eye: [f64; 3],
    pub side: usize,
    pub fov: f64,
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

impl CameraPose {
    /// Eye at `2·[sin(yaw)cos(pitch), cos(yaw)cos(pitch), sin(pitch)]`.
    pub fn new(yaw: f64, pitch: f64, side: usize) -> Result<Self> {
        let eye = [
            CAMERA_RADIUS * yaw.sin() * pitch.cos(),
            CAMERA_RADIUS * yaw.cos() * pitch.cos(),
            CAMERA_RADIUS * pitch.sin(),
        ];
        let mut cam = Self::look_at(eye, side)?;
        cam.yaw = yaw;
        cam.pitch = pitch;
        Ok(cam)
    }

    /// Camera at `eye` looking at the origin.
    pub fn look_at(eye: [f64; 3], side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Pose("image side must be positive".into()));
        }
        let dist = norm3(eye);
        if !(dist > 1e-9) || !dist.is_finite() {
            return Err(Error::Pose(format!("eye {eye:?} is at the look-at target")));
        }
        let forward = scale3(eye, -1.0 / dist);
        let right = cross3(forward, [0.0, 0.0, 1.0]);
        let rn = norm3(right);
        if rn < 1e-9 {
            return Err(Error::Pose(format!("view direction from {eye:?} is parallel to the up axis")));
        }
        let right = scale3(right, 1.0 / rn);
        let up = cross3(right, forward);
        Ok(Self {
            yaw: eye[0].atan2(eye[1]),
            pitch: (eye[2] / dist).asin(),
            eye,
            side,
            fov: FOV_DEGREES.to_radians(),
            right,
            up,
            forward,
        })
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        self.side as f64 / 2.0 / (self.fov / 2.0).tan()
    }

    /// Camera-frame coordinates `(right, up, depth)` of a world point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = sub3(p, self.eye);
        [dot3(q, self.right), dot3(q, self.up), dot3(q, self.forward)]
    }
}

/// Base pose perturbed by independent `U(−π/4, π/4)` yaw and pitch offsets.
pub fn sample_camera(rng: &mut impl Rng, theta_yaw: f64, theta_pitch: f64, side: usize) -> Result<CameraPose> {
    let dy = rng.random_range(-FRAC_PI_4..FRAC_PI_4);
    let dp = rng.random_range(-FRAC_PI_4..FRAC_PI_4);
    CameraPose::new(theta_yaw + dy, theta_pitch + dp, side)
}

/// `views` cameras at evenly spaced yaw and a fixed pitch.
pub fn camera_ring(views: usize, pitch: f64, side: usize) -> Result<Vec<CameraPose>> {
    (0..views)
        .map(|v| CameraPose::new(2.0 * PI * v as f64 / views as f64, pitch, side))
        .collect()
}

/// Draws views around the object: uniform base yaw, fixed base pitch, then
/// the perturbation of [`sample_camera`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSampler {
    pub pitch: f64,
    pub side: usize,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            pitch: VIEW_PITCH,
            side: DEFAULT_SIDE,
        }
    }
}

impl ViewSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<CameraPose> {
        let yaw = rng.random_range(0.0..2.0 * PI);
        sample_camera(rng, yaw, self.pitch, self.side)
    }

    pub fn sample_many(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<CameraPose>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

struct Projected {
    index: usize,
    cam: [f64; 3],
    px: f64,
    py: f64,
    sigma: f64,
    splat: Splat,
    jac: SplatJacobian,
}

/// Decodes and projects every point in front of the camera, sorted near to
/// far with ties broken by point index.
fn project(base: &[[f64; 3]], latent: &[f64], cam: &CameraPose) -> Vec<Projected> {
    let f = cam.focal();
    let c = cam.side as f64 / 2.0;
    let mut out: Vec<Projected> = base
        .iter()
        .zip(latent.chunks(POINT_DIMS))
        .enumerate()
        .filter_map(|(index, (&b, z))| {
            let (splat, jac) = decode_with_jacobian(b, z);
            let q = cam.to_camera(splat.position);
            if q[2] <= NEAR {
                return None;
            }
            Some(Projected {
                index,
                cam: q,
                px: c + f * q[0] / q[2],
                py: c - f * q[1] / q[2],
                sigma: f * splat.scale / q[2],
                splat,
                jac,
            })
        })
        .collect();
    out.sort_by(|a, b| a.cam[2].total_cmp(&b.cam[2]).then(a.index.cmp(&b.index)));
    out
}

fn alpha_at(p: &Projected, u: f64, v: f64) -> (f64, f64) {
    let d2 = (u - p.px).powi(2) + (v - p.py).powi(2);
    let e = (-d2 / (2.0 * p.sigma * p.sigma)).exp();
    (p.splat.opacity * e, d2)
}

fn render_values(base: &[[f64; 3]], latent: &[f64], cam: &CameraPose, background: f64) -> Tensor {
    let pts = project(base, latent, cam);
    let r = cam.side;
    let mut img = vec![background; 3 * r * r];
    for v in 0..r {
        for u in 0..r {
            let mut trans = 1.0;
            let mut col = [0.0; 3];
            for p in &pts {
                let (a, _) = alpha_at(p, u as f64, v as f64);
                for ch in 0..3 {
                    col[ch] += p.splat.color[ch] * a * trans;
                }
                trans *= 1.0 - a;
            }
            for ch in 0..3 {
                img[ch * r * r + v * r + u] = col[ch] + trans * background;
            }
        }
    }
    Tensor::new(vec![3, r, r], img).expect("sized above")
}

/// Per-pixel compositing weights `αᵢ·Πⱼ<ᵢ(1−αⱼ)` in depth order followed by
/// the background weight `Π(1−αⱼ)`.
pub fn compositing_weights(cloud: &GaussianCloud, cam: &CameraPose) -> Vec<Vec<f64>> {
    let pts = project(&cloud.base, cloud.latent.data(), cam);
    let r = cam.side;
    let mut out = Vec::with_capacity(r * r);
    for v in 0..r {
        for u in 0..r {
            let mut trans = 1.0;
            let mut w = Vec::with_capacity(pts.len() + 1);
            for p in &pts {
                let (a, _) = alpha_at(p, u as f64, v as f64);
                w.push(a * trans);
                trans *= 1.0 - a;
            }
            w.push(trans);
            out.push(w);
        }
    }
    out
}

/// Image `[3, side, side]` of `cloud` seen from `cam` over a uniform background.
pub fn render_image(cloud: &GaussianCloud, cam: &CameraPose, background: f64) -> Tensor {
    render_values(&cloud.base, cloud.latent.data(), cam, background)
}

struct RenderOp {
    base: Vec<[f64; 3]>,
    cam: CameraPose,
    background: f64,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "splat-render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let latent = inputs[0].data();
        let pts = project(&self.base, latent, &self.cam);
        let r = self.cam.side;
        let g = grad_out.data();
        let n = pts.len();
        // Per projected point: d/d opacity, px, py, sigma, color.
        let mut g_op = vec![0.0; n];
        let mut g_px = vec![0.0; n];
        let mut g_py = vec![0.0; n];
        let mut g_sig = vec![0.0; n];
        let mut g_col = vec![[0.0; 3]; n];
        let mut alphas = vec![0.0; n];
        let mut trans = vec![0.0; n];
        for v in 0..r {
            for u in 0..r {
                let gp = [g[v * r + u], g[r * r + v * r + u], g[2 * r * r + v * r + u]];
                let mut tr = 1.0;
                for (k, p) in pts.iter().enumerate() {
                    alphas[k] = alpha_at(p, u as f64, v as f64).0;
                    trans[k] = tr;
                    tr *= 1.0 - alphas[k];
                }
                let mut behind = [self.background; 3];
                for k in (0..n).rev() {
                    let p = &pts[k];
                    let a = alphas[k];
                    let c = p.splat.color;
                    let mut g_a = 0.0;
                    for ch in 0..3 {
                        g_a += gp[ch] * trans[k] * (c[ch] - behind[ch]);
                        g_col[k][ch] += gp[ch] * a * trans[k];
                        behind[ch] = c[ch] * a + (1.0 - a) * behind[ch];
                    }
                    if a == 0.0 {
                        continue;
                    }
                    let s2 = p.sigma * p.sigma;
                    let (du, dv) = (u as f64 - p.px, v as f64 - p.py);
                    g_op[k] += g_a * a / p.splat.opacity;
                    g_px[k] += g_a * a * du / s2;
                    g_py[k] += g_a * a * dv / s2;
                    g_sig[k] += g_a * a * (du * du + dv * dv) / (s2 * p.sigma);
                }
            }
        }
        let f = self.cam.focal();
        let mut out = vec![0.0; latent.len()];
        for (k, p) in pts.iter().enumerate() {
            let [xc, yc, zc] = p.cam;
            let g_xc = g_px[k] * f / zc;
            let g_yc = -g_py[k] * f / zc;
            let g_zc = -g_px[k] * f * xc / (zc * zc) + g_py[k] * f * yc / (zc * zc)
                - g_sig[k] * f * p.splat.scale / (zc * zc);
            let g_scale = g_sig[k] * f / zc;
            let cam = &self.cam;
            let slot = &mut out[p.index * POINT_DIMS..(p.index + 1) * POINT_DIMS];
            for ch in 0..3 {
                slot[ch] = g_col[k][ch] * p.jac.color[ch];
            }
            slot[3] = g_op[k] * p.jac.opacity;
            slot[4] = g_scale * p.jac.scale;
            for d in 0..3 {
                let g_pos = g_xc * cam.right[d] + g_yc * cam.up[d] + g_zc * cam.forward[d];
                slot[5 + d] = g_pos * p.jac.offset[d];
            }
        }
        vec![Tensor::new(vec![latent.len()], out).expect("sized above")]
    }
}

/// Differentiable render of a latent `[N·POINT_DIMS]` over anchors `base`.
pub fn render<'t>(base: &[[f64; 3]], latent: Var<'t>, cam: &CameraPose, background: f64) -> Result<Var<'t>> {
    let value = latent.value();
    check_latent(base, &value)?;
    let image = render_values(base, value.data(), cam, background);
    let op = RenderOp {
        base: base.to_vec(),
        cam: cam.clone(),
        background,
    };
    Ok(latent.tape().custom(&[latent], image, Box::new(op)))
}

/// Maps a rendered image in `[0, 1]` to the classifier's `[−1, 1]` range.
pub fn to_classifier_range(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// View-averaged gradient plus the per-view terms it was formed from.
#[derive(Clone, Debug, PartialEq)]
pub struct EotGradient {
    pub mean: Tensor,
    pub per_view: Vec<Tensor>,
}

/// Gradient of `loss_fn` averaged over the given cameras.
pub fn eot_gradient_with<F>(loss_fn: F, z: &Tensor, cameras: &[CameraPose]) -> Result<EotGradient>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &CameraPose) -> Result<Var<'t>>,
{
    if cameras.is_empty() {
        return Err(Error::Contract("expectation over zero views".into()));
    }
    let mut per_view = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let tape = Tape::new();
        let zv = tape.var(z.clone());
        let loss = loss_fn(&tape, zv, cam)?;
        per_view.push(tape.backward(loss, &[zv])?.remove(0));
    }
    let mut sum = Tensor::zeros(z.shape());
    for g in &per_view {
        sum = sum.add(g)?;
    }
    Ok(EotGradient {
        mean: sum.scale(1.0 / cameras.len() as f64),
        per_view,
    })
}

/// [`eot_gradient_with`] over `views` cameras drawn from `sampler`.
pub fn eot_gradient<F>(
    loss_fn: F,
    z: &Tensor,
    views: usize,
    sampler: &ViewSampler,
    rng: &mut impl Rng,
) -> Result<EotGradient>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &CameraPose) -> Result<Var<'t>>,
{
    if views == 0 {
        return Err(Error::Contract("expectation over zero views".into()));
    }
    let cams = sampler.sample_many(views, rng)?;
    eot_gradient_with(loss_fn, z, &cams)
}

/// Renders a latent through random views during the attack and through a
/// fixed ring for evaluation.
pub struct SplatHead<'a, C: ?Sized> {
    pub classifier: &'a C,
    pub base: Vec<[f64; 3]>,
    /// Views per gradient evaluation.
    pub eot_views: usize,
    pub sampler: ViewSampler,
    pub ring: Vec<CameraPose>,
}

impl<'a, C: Classifier + ?Sized> SplatHead<'a, C> {
    pub fn new(classifier: &'a C, template: Template, eot_views: usize) -> Result<Self> {
        let side = classifier.input_shape().last().copied().unwrap_or(0);
        if classifier.input_shape() != [3, side, side] {
            return Err(Error::Setup(format!(
                "splat views need a classifier over [3, R, R], got {:?}",
                classifier.input_shape()
            )));
        }
        if eot_views == 0 {
            return Err(Error::Config("need at least one view per gradient".into()));
        }
        Ok(Self {
            classifier,
            base: template.base_positions(DEFAULT_POINTS),
            eot_views,
            sampler: ViewSampler { pitch: VIEW_PITCH, side },
            ring: camera_ring(EVAL_VIEWS, VIEW_PITCH, side)?,
        })
    }

    /// Logits `[V, classes]` of `latent` seen from each camera.
    pub fn view_logits<'t>(&self, latent: Var<'t>, cameras: &[CameraPose]) -> Result<Var<'t>> {
        let tape = latent.tape();
        let views = cameras
            .iter()
            .map(|cam| Ok(render(&self.base, latent, cam, 0.0)?.scale(2.0).add_scalar(-1.0)))
            .collect::<Result<Vec<_>>>()?;
        self.classifier.logits(tape.stack(&views)?)
    }

    pub fn ring_images(&self, latent: &Tensor) -> Result<Vec<Tensor>> {
        let cloud = GaussianCloud::new(self.base.clone(), latent.clone())?;
        Ok(self.ring.iter().map(|cam| render_image(&cloud, cam, 0.0)).collect())
    }
}

impl<C: Classifier + ?Sized> AttackHead for SplatHead<'_, C> {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn logits<'t>(&self, x0_hat: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let cams = self.sampler.sample_many(self.eot_views, rng)?;
        self.view_logits(x0_hat, &cams)
    }

    fn evaluate(&self, x0: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let logits = self.view_logits(tape.constant(x0.clone()), &self.ring)?.value();
        (0..logits.shape()[0]).map(|i| Ok(logits.select(i)?.argmax())).collect()
    }
}

/// Latents of every template, labeled by template index, as `[n, N·POINT_DIMS]`.
pub fn splat_latent_corpus(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Contract("need at least one latent per template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = DEFAULT_POINTS * POINT_DIMS;
    let mut data = Vec::with_capacity(n_per_class * TEMPLATES.len() * dim);
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for t in TEMPLATES {
            data.extend_from_slice(t.sample_latent(DEFAULT_POINTS, &mut rng).data());
            labels.push(t.index());
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![labels.len(), dim], data)?,
        labels,
        num_classes: TEMPLATES.len(),
    })
}

/// Rendered random views of random template clouds, in classifier range.
pub fn splat_view_corpus(n_per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Contract("need at least one view per template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = ViewSampler { pitch: VIEW_PITCH, side };
    let mut data = Vec::with_capacity(n_per_class * TEMPLATES.len() * 3 * side * side);
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for t in TEMPLATES {
            let cloud = t.sample_cloud(DEFAULT_POINTS, &mut rng);
            let cam = sampler.sample(&mut rng)?;
            data.extend(to_classifier_range(&render_image(&cloud, &cam, 0.0)).data());
            labels.push(t.index());
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![labels.len(), 3, side, side], data)?,
        labels,
        num_classes: TEMPLATES.len(),
    })
}

/// Attacks one object: adversarial sampling over the cloud latent with
/// view-averaged gradients, evaluated on the head's view ring.
pub fn run_attack_3d<D, C>(
    denoiser: &D,
    head: &SplatHead<'_, C>,
    task: &AttackTask,
    cfg: &AttackConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<AttackResult>
where
    D: Denoiser + ?Sized,
    C: Classifier + ?Sized,
{
    if denoiser.latent_shape() != [head.base.len() * POINT_DIMS] {
        return Err(Error::Setup(format!(
            "denoiser latent {:?} does not match {} splat points",
            denoiser.latent_shape(),
            head.base.len()
        )));
    }
    let mask = GuidanceMask::uniform(denoiser.latent_shape(), SPLAT_GUIDANCE);
    run_resadv_ddim(denoiser, head, task, cfg, &mask, schedule, seed)
}
