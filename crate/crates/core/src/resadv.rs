//! Residual-approximated adversarial DDIM sampling.
//!
//! At every step `t ≤ t_s` the sampler runs a few gradient-ascent iterations
//! on `x_t` against a classifier applied to the coarse clean estimate
//! [`residual_predict`], then takes the ordinary DDIM step. An exemplar
//! trajectory, forked from the shared state at `t_s`, is sampled alongside
//! without attack and anchors the semantic constraint
//! `‖x_adv − x_exemplar‖₂ ≤ ε`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    ddim_step, masked_epsilon, residual_predict, Conditioning, CountingDenoiser, Denoiser, GuidanceMask,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L2 radius around the exemplar trajectory.
    pub epsilon: f64,
    /// Maximum residual iterations; 0 evaluates the classifier on `x_t`.
    pub k: usize,
    /// Attack start as a fraction of `T`.
    pub t_s: f64,
    /// Target-update threshold as a fraction of `T`.
    pub t_k: f64,
    pub xi1: f64,
    pub xi2: f64,
    /// Per-step iteration cap.
    pub m: usize,
    /// Boosted cap at `t = t_s` and `t < 4`.
    pub m_iter: usize,
    pub beta_mom: f64,
    pub s: f64,
    /// Sampling steps `T`.
    pub steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.5,
            k: 4,
            t_s: 0.75,
            t_k: 0.4,
            xi1: 0.1,
            xi2: 0.01,
            m: 3,
            m_iter: 10,
            beta_mom: 0.5,
            s: 0.7,
            steps: 100,
        }
    }
}

impl AttackConfig {
    /// Settings for latent-space attacks on splat clouds.
    pub fn splat_default() -> Self {
        Self {
            epsilon: 10.0,
            k: 4,
            t_s: 0.75,
            t_k: 0.75,
            xi1: 0.01,
            xi2: 0.01,
            m: 30,
            m_iter: 30,
            beta_mom: 0.5,
            s: 0.5,
            steps: 50,
        }
    }

    /// Attack start in grid steps, rounded down.
    pub fn t_s_step(&self) -> usize {
        (self.t_s * self.steps as f64).floor() as usize
    }

    pub fn t_k_step(&self) -> usize {
        (self.t_k * self.steps as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0 < self.xi2 && self.xi2 <= self.xi1 && self.xi1 <= 1.0) {
            return bad(format!("need 0 < xi2 <= xi1 <= 1, got xi1={}, xi2={}", self.xi1, self.xi2));
        }
        if self.m == 0 || self.m > self.m_iter {
            return bad(format!("need 1 <= m <= M_iter, got m={}, M_iter={}", self.m, self.m_iter));
        }
        let (ts, tk) = (self.t_s_step(), self.t_k_step());
        if !(0 < tk && tk <= ts && ts <= self.steps) {
            return bad(format!("need 0 < t_k <= t_s <= T in steps, got t_k={tk}, t_s={ts}, T={}", self.steps));
        }
        if !(0.0..1.0).contains(&self.beta_mom) || !(self.s > 0.0) {
            return bad(format!("need 0 <= beta < 1 and s > 0, got beta={}, s={}", self.beta_mom, self.s));
        }
        Ok(())
    }
}

/// What the sampler attacks: the conditioning of the generator and the
/// labels that count as evasion.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTask {
    pub cond: Conditioning,
    /// Classifier labels in `A_Text`, ascending.
    pub a_text: Vec<usize>,
}

/// Maps a predicted clean latent to classifier logits, one row per view.
pub trait AttackHead {
    fn num_classes(&self) -> usize;

    /// Logits `[V, classes]`; may draw random view transforms from `rng`.
    fn logits<'t>(&self, x0_hat: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>>;

    /// Per-view labels of a final sample under the evaluation protocol.
    fn evaluate(&self, x0: &Tensor) -> Result<Vec<usize>>;
}

/// A classifier applied directly to an image latent.
pub struct ImageHead<'a, C: ?Sized> {
    pub classifier: &'a C,
}

impl<C: Classifier + ?Sized> AttackHead for ImageHead<'_, C> {
    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn logits<'t>(&self, x0_hat: Var<'t>, _rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&x0_hat.shape());
        self.classifier.logits(x0_hat.reshape(&shape)?)
    }

    fn evaluate(&self, x0: &Tensor) -> Result<Vec<usize>> {
        Ok(vec![crate::models::classify(self.classifier, x0)?.argmax()])
    }
}

/// Most frequent label; ties go to the lowest label.
pub fn majority_vote(labels: &[usize]) -> Option<usize> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

fn check_label_sets(classes: usize, a_text: &[usize]) -> Result<()> {
    if a_text.is_empty() {
        return Err(Error::Contract("A_Text is empty".into()));
    }
    if let Some(&bad) = a_text.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
    }
    let mut seen = vec![false; classes];
    for &l in a_text {
        seen[l] = true;
    }
    if seen.iter().all(|&s| s) {
        return Err(Error::Contract("A_Text covers every label".into()));
    }
    Ok(())
}

/// `LogSoftmax[tar] − mean_{i∈A} LogSoftmax[i]` averaged over the rows of
/// `logits` (`[C]` or `[V, C]`).
pub fn attack_loss_var<'t>(logits: Var<'t>, a_text: &[usize], target: usize) -> Result<Var<'t>> {
    let shape = logits.shape();
    let classes = *shape.last().ok_or_else(|| Error::shape("logits must have a class axis"))?;
    let rows = logits.value().len() / classes.max(1);
    check_label_sets(classes, a_text)?;
    if !a_text.contains(&target) {
        return Err(Error::Contract(format!("target {target} not in A_Text")));
    }
    let ls = logits.reshape(&[rows, classes])?.log_softmax();
    let tar: Vec<usize> = (0..rows).map(|r| r * classes + target).collect();
    let avoid: Vec<usize> = (0..rows).flat_map(|r| a_text.iter().map(move |&a| r * classes + a)).collect();
    let pos = ls.gather(&tar)?.sum().scale(1.0 / rows as f64);
    let neg = ls.gather(&avoid)?.sum().scale(1.0 / (rows * a_text.len()) as f64);
    pos.sub(neg)
}

/// Value of [`attack_loss_var`] for plain logits.
pub fn attack_loss(logits: &Tensor, a_text: &[usize], target: usize) -> Result<f64> {
    let tape = Tape::new();
    attack_loss_var(tape.constant(logits.clone()), a_text, target)?.value().item()
}

/// Iteration cap `n` at grid step `t`.
pub fn iteration_cap(t: usize, cfg: &AttackConfig) -> usize {
    if t == cfg.t_s_step() || t < 4 {
        cfg.m_iter
    } else {
        cfg.m
    }
}

/// `(i ≤ n ∧ conf > ξ₁) ∨ (i = 1 ∧ conf > ξ₂)`, where `conf` is the largest
/// probability on a label outside `A_Text`.
pub fn should_optimize(i: usize, t: usize, correct_conf: f64, cfg: &AttackConfig) -> bool {
    let n = iteration_cap(t, cfg);
    (i <= n && correct_conf > cfg.xi1) || (i == 1 && correct_conf > cfg.xi2)
}

/// Projects `x_adv_next` onto the L2 ball of radius `epsilon` around `x_ex_next`.
pub fn semantic_clip(x_adv_next: &Tensor, x_ex_next: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = x_adv_next.sub(x_ex_next)?;
    let dist = d.norm_l2();
    if dist <= epsilon {
        return Ok(x_adv_next.clone());
    }
    x_ex_next.axpy(epsilon / dist, &d)
}

/// One diffusion step of the attack trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub iterations: usize,
    /// Correct-label confidence at each evaluated iteration.
    pub confidences: Vec<f64>,
    /// Cumulative denoiser evaluations after this step.
    pub denoiser_calls: usize,
    /// Whether the projection moved the adversarial state.
    pub clipped: bool,
    /// `‖x_adv − x_exemplar‖₂` after the step, when an exemplar exists.
    pub deviation: Option<f64>,
    pub target: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackTrace {
    pub steps: Vec<StepRecord>,
}

impl AttackTrace {
    pub fn denoiser_calls(&self) -> usize {
        self.steps.last().map_or(0, |s| s.denoiser_calls)
    }

    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }

    /// One line per step: `t iters calls clipped deviation target confs`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# t iterations denoiser_calls clipped deviation target confidences\n");
        for s in &self.steps {
            let dev = s.deviation.map_or("-".to_string(), |d| format!("{d:.17e}"));
            let tar = s.target.map_or("-".to_string(), |t| t.to_string());
            let confs: Vec<String> = s.confidences.iter().map(|c| format!("{c:.6e}")).collect();
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                s.t,
                s.iterations,
                s.denoiser_calls,
                u8::from(s.clipped),
                dev,
                tar,
                if confs.is_empty() { "-".to_string() } else { confs.join(",") }
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub x_exemplar: Tensor,
    pub trace: AttackTrace,
    /// Per-view surrogate labels of the adversarial sample.
    pub adv_views: Vec<usize>,
    pub exemplar_views: Vec<usize>,
}

impl AttackResult {
    pub fn adv_label(&self) -> usize {
        majority_vote(&self.adv_views).expect("at least one view")
    }

    pub fn exemplar_label(&self) -> usize {
        majority_vote(&self.exemplar_views).expect("at least one view")
    }
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let classes = *t.shape().last().unwrap_or(&1);
    let rows = t.len() / classes;
    let mut out = vec![0.0; classes];
    for r in t.data().chunks(classes) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / rows as f64;
        }
    }
    out
}

fn softmax_rows_mean(logits: &Tensor) -> Vec<f64> {
    let classes = *logits.shape().last().unwrap_or(&1);
    let rows = logits.len() / classes;
    let mut out = vec![0.0; classes];
    for r in logits.data().chunks(classes) {
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
        for (o, v) in out.iter_mut().zip(r) {
            *o += (v - max).exp() / z / rows as f64;
        }
    }
    out
}

/// Largest mean probability on a label outside `a_text`.
fn correct_confidence(probs: &[f64], a_text: &[usize]) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|(l, _)| !a_text.contains(l))
        .map(|(_, &p)| p)
        .fold(0.0, f64::max)
}

/// Label in `a_text` with the largest mean logit; ties go to the lowest label.
fn pick_target(mean_logits: &[f64], a_text: &[usize]) -> usize {
    let mut best = a_text[0];
    for &l in a_text {
        if mean_logits[l] > mean_logits[best] || (mean_logits[l] == mean_logits[best] && l < best) {
            best = l;
        }
    }
    best
}

fn check_finite(x: &Tensor, t: usize, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step: t,
            reason: format!("non-finite {what} latent"),
        })
    }
}

fn ddim_tensor<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &Tensor,
    t: usize,
    cond: &Conditioning,
    mask: &GuidanceMask,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let eps = masked_epsilon(denoiser, xv, t, cond, mask)?;
    Ok(ddim_step(xv, t, 1, eps, schedule)?.value())
}

/// Full adversarial sampling run from a seeded `x_T`.
pub fn run_resadv_ddim<D: Denoiser + ?Sized, H: AttackHead + ?Sized>(
    denoiser: &D,
    head: &H,
    task: &AttackTask,
    cfg: &AttackConfig,
    mask: &GuidanceMask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<AttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_t = Tensor::randn(denoiser.latent_shape(), &mut rng);
    run_resadv_ddim_from(denoiser, head, task, cfg, mask, schedule, x_t, &mut rng)
}

/// [`run_resadv_ddim`] from a given `x_T`; `rng` drives the head's view sampling.
#[allow(clippy::too_many_arguments)]
pub fn run_resadv_ddim_from<D: Denoiser + ?Sized, H: AttackHead + ?Sized>(
    denoiser: &D,
    head: &H,
    task: &AttackTask,
    cfg: &AttackConfig,
    mask: &GuidanceMask,
    schedule: &NoiseSchedule,
    x_t: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if schedule.steps() != cfg.steps {
        return Err(Error::Setup(format!(
            "schedule has {} steps, config asks for {}",
            schedule.steps(),
            cfg.steps
        )));
    }
    if x_t.shape() != denoiser.latent_shape() {
        return Err(Error::Setup(format!(
            "initial latent {:?} does not match denoiser {:?}",
            x_t.shape(),
            denoiser.latent_shape()
        )));
    }
    check_label_sets(head.num_classes(), &task.a_text)?;
    let counter = CountingDenoiser::new(denoiser);
    let ts = cfg.t_s_step();
    let tk = cfg.t_k_step();
    let mut x = x_t;
    let mut exemplar: Option<Tensor> = None;
    let mut velocity = Tensor::zeros(x.shape());
    let mut target: Option<usize> = None;
    let mut trace = AttackTrace::default();

    for t in (1..=cfg.steps).rev() {
        let mut record = StepRecord {
            t,
            iterations: 0,
            confidences: Vec::new(),
            denoiser_calls: 0,
            clipped: false,
            deviation: None,
            target,
        };
        if t == ts {
            exemplar = Some(x.clone());
        }
        if t <= ts {
            let cap = iteration_cap(t, cfg);
            let mut i = 1;
            while i <= cap {
                let tape = Tape::new();
                let xv = tape.var(x.clone());
                let x0_hat = residual_predict(&counter, xv, t, &task.cond, mask, cfg.k, schedule)?;
                let logits = head.logits(x0_hat, rng)?;
                let lv = logits.value();
                if !lv.is_finite() {
                    return Err(Error::Numerical {
                        step: t,
                        reason: "non-finite classifier logits".into(),
                    });
                }
                let conf = correct_confidence(&softmax_rows_mean(&lv), &task.a_text);
                record.confidences.push(conf);
                if !should_optimize(i, t, conf, cfg) {
                    break;
                }
                if t == ts || t < tk || target.is_none() {
                    target = Some(pick_target(&mean_rows(&lv), &task.a_text));
                }
                let loss = attack_loss_var(logits, &task.a_text, target.expect("set above"))?;
                let grad = tape.backward(loss, &[xv])?.remove(0);
                velocity = velocity.scale(cfg.beta_mom).axpy(1.0 - cfg.beta_mom, &grad)?;
                x = x.axpy(cfg.s, &velocity)?;
                check_finite(&x, t, "adversarial")?;
                record.iterations += 1;
                i += 1;
            }
            record.target = target;
        }
        let mut next = ddim_tensor(&counter, &x, t, &task.cond, mask, schedule)?;
        check_finite(&next, t, "adversarial")?;
        if let Some(ex) = exemplar.as_mut() {
            let ex_next = ddim_tensor(&counter, ex, t, &task.cond, mask, schedule)?;
            check_finite(&ex_next, t, "exemplar")?;
            let clipped = semantic_clip(&next, &ex_next, cfg.epsilon)?;
            record.clipped = clipped != next;
            record.deviation = Some(clipped.sub(&ex_next)?.norm_l2());
            next = clipped;
            *ex = ex_next;
        }
        x = next;
        record.denoiser_calls = counter.calls();
        trace.steps.push(record);
    }

    let mut x_ex = exemplar.unwrap_or_else(|| x.clone());
    write_back_border(&mut x_ex, &x, mask)?;
    Ok(AttackResult {
        adv_views: head.evaluate(&x)?,
        exemplar_views: head.evaluate(&x_ex)?,
        x_adv: x,
        x_exemplar: x_ex,
        trace,
    })
}

/// Averages the exemplar with the adversarial sample on the mask's border band.
fn write_back_border(x_ex: &mut Tensor, x_adv: &Tensor, mask: &GuidanceMask) -> Result<()> {
    let edge = mask.edge_region();
    if !edge.iter().any(|&e| e) {
        return Ok(());
    }
    let plane = edge.len();
    let mut data = x_ex.to_vec();
    for (k, (v, a)) in data.iter_mut().zip(x_adv.data()).enumerate() {
        if edge[k % plane] {
            *v = (*v + a) / 2.0;
        }
    }
    *x_ex = Tensor::new(x_ex.shape().to_vec(), data)?;
    Ok(())
}

/// Denoiser evaluations when every step skips optimization:
/// `Σ_{t≤t_s} ⌈t/(T/K)⌉ + t_s + T = (K·t_s/T + 3)·t_s/2 + T`.
pub fn predicted_min_steps(steps: usize, k: usize, t_s: usize) -> Result<usize> {
    if k == 0 || steps % k != 0 {
        return Err(Error::Contract(format!("bound needs K | T, got K={k}, T={steps}")));
    }
    let d = steps / k;
    if t_s == 0 || t_s % d != 0 || t_s > steps {
        return Err(Error::Contract(format!("bound needs (T/K) | t_s, got T/K={d}, t_s={t_s}")));
    }
    let m = t_s / d;
    Ok(d * m * (m + 1) / 2 + t_s + steps)
}

/// Momentum iterative sign-gradient ascent on [`attack_loss`] within an L∞
/// ball, pixels kept in `[−1, 1]`. The target is re-picked every iteration.
pub fn mi_fgsm<C: Classifier + ?Sized>(
    classifier: &C,
    x0: &Tensor,
    a_text: &[usize],
    steps: usize,
    eps_inf: f64,
    mu: f64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Contract("MI-FGSM needs at least one step".into()));
    }
    if !(eps_inf > 0.0) {
        return Err(Error::Contract(format!("L-inf budget must be positive, got {eps_inf}")));
    }
    check_label_sets(classifier.num_classes(), a_text)?;
    let alpha = eps_inf / steps as f64;
    let mut shape = vec![1];
    shape.extend_from_slice(x0.shape());
    let mut x = x0.clone();
    let mut g = Tensor::zeros(x0.shape());
    for _ in 0..steps {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let logits = classifier.logits(xv.reshape(&shape)?)?;
        let target = pick_target(&mean_rows(&logits.value()), a_text);
        let loss = attack_loss_var(logits, a_text, target)?;
        let grad = tape.backward(loss, &[xv])?.remove(0);
        let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
        g = g.scale(mu).axpy(1.0 / l1.max(1e-300), &grad)?;
        let stepped = x.axpy(alpha, &g.map(f64::signum))?;
        x = stepped.zip_map(x0, |v, o| v.clamp(o - eps_inf, o + eps_inf).clamp(-1.0, 1.0))?;
    }
    Ok(x)
}

/// Outcome of [`reject_sampling_attack`].
#[derive(Clone, Debug, PartialEq)]
pub enum RejectOutcome<R> {
    Accepted { result: R, attempts: usize },
    GaveUp { attempts: usize },
}

impl<R> RejectOutcome<R> {
    pub fn attempts(&self) -> usize {
        match self {
            RejectOutcome::Accepted { attempts, .. } | RejectOutcome::GaveUp { attempts } => *attempts,
        }
    }
}

/// `⌈log ε_fail / log(1 − p_s)⌉`.
pub fn reject_cap(p_s: f64, eps_fail: f64) -> Result<usize> {
    if !(0.0 < p_s && p_s < 1.0) || !(0.0 < eps_fail && eps_fail < 1.0) {
        return Err(Error::Contract(format!(
            "need 0 < p_s < 1 and 0 < eps_fail < 1, got p_s={p_s}, eps_fail={eps_fail}"
        )));
    }
    Ok((eps_fail.ln() / (1.0 - p_s).ln()).ceil() as usize)
}

/// Reruns `attack_fn` (given the 0-based attempt index) until
/// `exemplar_correct` accepts a result, at most [`reject_cap`] times.
pub fn reject_sampling_attack<R>(
    mut attack_fn: impl FnMut(usize) -> Result<R>,
    exemplar_correct: impl Fn(&R) -> bool,
    p_s: f64,
    eps_fail: f64,
) -> Result<RejectOutcome<R>> {
    let cap = reject_cap(p_s, eps_fail)?;
    for attempt in 0..cap {
        let result = attack_fn(attempt)?;
        if exemplar_correct(&result) {
            return Ok(RejectOutcome::Accepted {
                result,
                attempts: attempt + 1,
            });
        }
    }
    Ok(RejectOutcome::GaveUp { attempts: cap })
}
