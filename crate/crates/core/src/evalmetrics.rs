//! Attack-success accounting and exemplar-pair similarity.
//!
//! A sample counts as a successful attack when its adversarial verdict lies
//! in the task's A_Text set, and as correctly classified when its verdict
//! lies outside it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::resadv::AttackTrace;

/// Surrogate labels of one sample pair under one target model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub adv: usize,
    pub exemplar: usize,
}

/// Compact per-run summary of an [`AttackTrace`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceSummary {
    pub iterations: usize,
    pub denoiser_calls: usize,
    pub clipped_steps: usize,
    pub final_deviation: Option<f64>,
}

impl TraceSummary {
    pub fn from_trace(trace: &AttackTrace) -> Self {
        Self {
            iterations: trace.total_iterations(),
            denoiser_calls: trace.denoiser_calls(),
            clipped_steps: trace.steps.iter().filter(|s| s.clipped).count(),
            final_deviation: trace.steps.last().and_then(|s| s.deviation),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub task_id: String,
    /// Leaf label the sample was generated for.
    pub leaf: usize,
    /// Labels that count as evasion, ascending.
    pub a_text: Vec<usize>,
    /// Verdicts keyed by target model id.
    pub verdicts: BTreeMap<String, Verdict>,
    pub ms_ssim: Option<f64>,
    pub l2_diff: Option<f64>,
    pub trace: TraceSummary,
}

impl SampleRecord {
    pub fn success(&self, model: &str) -> Result<bool> {
        Ok(self.a_text.contains(&self.verdict(model)?.adv))
    }

    pub fn exemplar_correct(&self, model: &str) -> Result<bool> {
        Ok(!self.a_text.contains(&self.verdict(model)?.exemplar))
    }

    fn verdict(&self, model: &str) -> Result<Verdict> {
        self.verdicts
            .get(model)
            .copied()
            .ok_or_else(|| Error::Contract(format!("record `{}` has no verdict for model `{model}`", self.task_id)))
    }

    /// Line-oriented `key value` block terminated by `end`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.17e}"));
        let _ = writeln!(out, "task {}", self.task_id);
        let _ = writeln!(out, "leaf {}", self.leaf);
        let a: Vec<String> = self.a_text.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "a_text {}", a.join(" "));
        for (model, v) in &self.verdicts {
            let _ = writeln!(out, "verdict {model} {} {}", v.adv, v.exemplar);
        }
        let _ = writeln!(out, "ms_ssim {}", opt(self.ms_ssim));
        let _ = writeln!(out, "l2_diff {}", opt(self.l2_diff));
        let _ = writeln!(out, "iterations {}", self.trace.iterations);
        let _ = writeln!(out, "denoiser_calls {}", self.trace.denoiser_calls);
        let _ = writeln!(out, "clipped_steps {}", self.trace.clipped_steps);
        let _ = writeln!(out, "final_deviation {}", opt(self.trace.final_deviation));
        out.push_str("end\n");
        out
    }

    /// Parses every block written by [`SampleRecord::to_text`].
    pub fn parse_all(text: &str) -> Result<Vec<SampleRecord>> {
        let mut out = Vec::new();
        let mut cur: Option<SampleRecord> = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}", no + 1));
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            if key == "task" {
                if cur.is_some() {
                    return Err(bad("`task` inside an unterminated record"));
                }
                cur = Some(SampleRecord {
                    task_id: rest.to_string(),
                    leaf: 0,
                    a_text: Vec::new(),
                    verdicts: BTreeMap::new(),
                    ms_ssim: None,
                    l2_diff: None,
                    trace: TraceSummary::default(),
                });
                continue;
            }
            let rec = cur.as_mut().ok_or_else(|| bad("field outside a record"))?;
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
            let real = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| bad("expected a number"))
                }
            };
            match key {
                "leaf" => rec.leaf = int(rest)?,
                "a_text" => rec.a_text = rest.split_whitespace().map(int).collect::<Result<_>>()?,
                "verdict" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(bad("verdict needs model, adv and exemplar"));
                    }
                    rec.verdicts.insert(
                        f[0].to_string(),
                        Verdict {
                            adv: int(f[1])?,
                            exemplar: int(f[2])?,
                        },
                    );
                }
                "ms_ssim" => rec.ms_ssim = real(rest)?,
                "l2_diff" => rec.l2_diff = real(rest)?,
                "iterations" => rec.trace.iterations = int(rest)?,
                "denoiser_calls" => rec.trace.denoiser_calls = int(rest)?,
                "clipped_steps" => rec.trace.clipped_steps = int(rest)?,
                "final_deviation" => rec.trace.final_deviation = real(rest)?,
                "end" => out.push(cur.take().expect("checked above")),
                _ => return Err(bad("unknown field")),
            }
        }
        if cur.is_some() {
            return Err(Error::Format("unterminated record at end of input".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Adv,
    Exemplar,
}

/// Fraction of records whose chosen sample is classified outside A_Text.
pub fn accuracy(records: &[SampleRecord], which: Which, model: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("accuracy of an empty record set".into()));
    }
    let mut correct = 0usize;
    for r in records {
        let v = r.verdict(model)?;
        let label = match which {
            Which::Adv => v.adv,
            Which::Exemplar => v.exemplar,
        };
        correct += usize::from(!r.a_text.contains(&label));
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Fraction of adversarial samples classified into A_Text.
pub fn asr(records: &[SampleRecord], model: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("attack success rate of an empty record set".into()));
    }
    let mut hits = 0usize;
    for r in records {
        hits += usize::from(r.success(model)?);
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Successful attacks whose exemplar was correctly classified, divided by
/// `K · Acc(exemplars)`.
pub fn asr_relative(records: &[SampleRecord], model: &str) -> Result<f64> {
    let acc = accuracy(records, Which::Exemplar, model)?;
    if acc == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "no exemplar is classified correctly by `{model}`"
        )));
    }
    let mut hits = 0usize;
    for r in records {
        hits += usize::from(r.success(model)? && r.exemplar_correct(model)?);
    }
    Ok(hits as f64 / (records.len() as f64 * acc))
}

pub fn l2_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.norm_l2())
}

/// Standard five-scale weights, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Multi-scale SSIM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MsSsim {
    pub kernel: usize,
    pub sigma: f64,
    pub levels: usize,
    /// Dynamic range of the pixel values; images in `[-1, 1]` use 2.
    pub data_range: f64,
}

impl MsSsim {
    pub fn new(levels: usize) -> Self {
        Self {
            kernel: 11,
            sigma: 1.5,
            levels,
            data_range: 2.0,
        }
    }

    /// Largest level count the given side supports, capped at five.
    pub fn max_levels(&self, side: usize) -> usize {
        (0..MS_SSIM_WEIGHTS.len())
            .take_while(|&l| side >= self.kernel << l)
            .count()
    }

    /// Accepts `[H, W]` or `[C, H, W]`; channels are scored separately and averaged.
    pub fn compute(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        a.expect_same_shape(b)?;
        let (c, h, w) = match *a.shape() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(format!("ms_ssim expects [H,W] or [C,H,W], got {:?}", a.shape()))),
        };
        if self.kernel == 0 || self.kernel % 2 == 0 || self.sigma <= 0.0 || self.data_range <= 0.0 {
            return Err(Error::Config(format!(
                "ms_ssim needs an odd kernel and positive sigma and range, got {self:?}"
            )));
        }
        let feasible = self.max_levels(h.min(w));
        if self.levels == 0 || self.levels > feasible {
            return Err(Error::Levels {
                requested: self.levels,
                max_feasible: feasible,
            });
        }
        let window = gaussian_window(self.kernel, self.sigma);
        let weights = &MS_SSIM_WEIGHTS[..self.levels];
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for ch in 0..c {
            let plane = |t: &Tensor| t.data()[ch * h * w..(ch + 1) * h * w].to_vec();
            let (mut x, mut y) = (plane(a), plane(b));
            let (mut hh, mut ww) = (h, w);
            let mut value = 1.0;
            for (l, wt) in weights.iter().enumerate() {
                let (ssim, cs) = self.ssim_level(&x, &y, hh, ww, &window);
                let term = if l + 1 == self.levels { ssim } else { cs };
                value *= term.max(0.0).powf(wt / total);
                if l + 1 < self.levels {
                    x = avg_pool2(&x, hh, ww);
                    y = avg_pool2(&y, hh, ww);
                    hh /= 2;
                    ww /= 2;
                }
            }
            acc += value;
        }
        Ok(acc / c as f64)
    }

    /// Mean SSIM and mean contrast-structure term over valid windows.
    fn ssim_level(&self, x: &[f64], y: &[f64], h: usize, w: usize, window: &[f64]) -> (f64, f64) {
        let c1 = (0.01 * self.data_range).powi(2);
        let c2 = (0.03 * self.data_range).powi(2);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let (mx, oh, ow) = filter_valid(x, h, w, window);
        let (my, ..) = filter_valid(y, h, w, window);
        let (sxx, ..) = filter_valid(&xx, h, w, window);
        let (syy, ..) = filter_valid(&yy, h, w, window);
        let (sxy, ..) = filter_valid(&xy, h, w, window);
        let (mut ssim, mut cs) = (0.0, 0.0);
        for i in 0..oh * ow {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let cs_i = (2.0 * cov + c2) / (vx + vy + c2);
            let lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
            cs += cs_i;
            ssim += lum * cs_i;
        }
        let n = (oh * ow) as f64;
        (ssim / n, cs / n)
    }
}

/// Multi-scale SSIM with kernel 11 and σ 1.5 over `[-1, 1]` images.
pub fn ms_ssim(a: &Tensor, b: &Tensor, levels: usize) -> Result<f64> {
    MsSsim::new(levels).compute(a, b)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| g[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|j| g[j] * rows[(r + j) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

fn avg_pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
        }
    }
    out
}

#[cfg(test)]
mod tests;
