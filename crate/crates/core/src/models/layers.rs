use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{read_tensors, write_tensors, Tape, Tensor, Var};

/// Normal init with standard deviation `gain / √fan_in`.
pub(crate) fn init_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, rng).scale(gain / (fan_in as f64).sqrt())
}

/// Sinusoidal timestep features, one row per entry of `ts`.
pub(crate) fn time_features(ts: &[usize], dims: usize) -> Tensor {
    let half = dims / 2;
    let mut data = Vec::with_capacity(ts.len() * dims);
    for &t in ts {
        for j in 0..half {
            let freq = (-(j as f64) / half as f64 * 1000f64.ln()).exp();
            data.push((t as f64 * freq).sin());
        }
        for j in 0..half {
            let freq = (-(j as f64) / half as f64 * 1000f64.ln()).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::new(vec![ts.len(), 2 * half], data).expect("rows of equal width")
}

/// Rows of an embedding table `[vocab, width]` for each token, as `[B, width]`.
pub(crate) fn embed<'t>(table: Var<'t>, tokens: &[usize]) -> Result<Var<'t>> {
    let shape = table.shape();
    let (vocab, width) = (shape[0], shape[1]);
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Contract(format!("token {bad} outside embedding table of {vocab}")));
    }
    let idx: Vec<usize> = tokens.iter().flat_map(|&t| (0..width).map(move |c| t * width + c)).collect();
    table.gather(&idx)?.reshape(&[tokens.len(), width])
}

/// `conv(x, w) + b` with `b` shaped `[co, 1, 1]`.
pub(crate) fn conv_bias<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.conv2d(w, 1)?.add(b)
}

pub(crate) fn constants<'t>(tape: &'t Tape, params: &[Tensor]) -> Vec<Var<'t>> {
    params.iter().map(|p| tape.constant(p.clone())).collect()
}

pub(crate) fn param_count(params: &[Tensor]) -> usize {
    params.iter().map(Tensor::len).sum()
}

/// Plain-text `key=value` architecture descriptor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchText(pub BTreeMap<String, String>);

impl ArchText {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("architecture descriptor lacks `{key}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("`{key}` is not a count: {raw}")))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }
}

fn sibling(stem: &Path, ext: &str) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

/// Writes `<stem>.bin` (tensors) and `<stem>.arch` (descriptor); returns both paths.
pub fn save_checkpoint(stem: &Path, arch: &ArchText, params: &[Tensor]) -> Result<(PathBuf, PathBuf)> {
    let bin = sibling(stem, "bin");
    let text = sibling(stem, "arch");
    let mut out = BufWriter::new(File::create(&bin)?);
    write_tensors(&mut out, params)?;
    out.flush()?;
    std::fs::write(&text, arch.render())?;
    Ok((bin, text))
}

pub fn load_checkpoint(stem: &Path) -> Result<(ArchText, Vec<Tensor>)> {
    let text = std::fs::read_to_string(sibling(stem, "arch"))?;
    let arch = ArchText::parse(&text)?;
    let mut input = BufReader::new(File::open(sibling(stem, "bin"))?);
    let params = read_tensors(&mut input)?;
    Ok((arch, params))
}

pub(crate) fn check_param_shapes(params: &[Tensor], expected: &[Vec<usize>]) -> Result<()> {
    if params.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture needs {}",
            params.len(),
            expected.len()
        )));
    }
    for (i, (p, s)) in params.iter().zip(expected).enumerate() {
        if p.shape() != s.as_slice() {
            return Err(Error::Format(format!("tensor {i} has shape {:?}, expected {s:?}", p.shape())));
        }
    }
    Ok(())
}
