//! Named parameter storage, the Adam update, and checkpoint files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

struct Entry {
    tensor: Tensor,
    grad: Option<Vec<f64>>,
    lr_scale: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Map from path-like identifiers (`enc/conv1/k`, `baseline/out/w`, ...) to
/// tensors. Iteration order is lexicographic, which keeps every reduction and
/// optimizer sweep deterministic.
#[derive(Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let n = tensor.numel();
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                grad: None,
                lr_scale: 1.0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor.values)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(|e| e.grad.as_deref())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Set the learning-rate multiplier for every parameter whose identifier
    /// starts with `prefix`.
    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.lr_scale = scale;
            }
        }
    }

    pub fn lr_scale(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|e| e.lr_scale)
    }

    /// Add `g` into the persistent gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if g.len() != e.tensor.numel() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("{} elements", e.tensor.numel()),
                format!("{} elements", g.len()),
            ));
        }
        match &mut e.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => e.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Copy values from `src` under a renamed prefix, shape-checked. Used for
    /// warm-starting one perceptor from another's checkpoint.
    pub fn copy_renamed_from(
        &mut self,
        src: &ParameterSet,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            if let Some(rest) = name.strip_prefix(dst_prefix) {
                let src_name = format!("{src_prefix}{rest}");
                let src_t = src.tensor(&src_name)?;
                let dst = self.entries.get_mut(&name).unwrap();
                if src_t.shape != dst.tensor.shape {
                    return Err(Error::Checkpoint(format!(
                        "transfer shape mismatch for {name}: expected {:?}, found {:?}",
                        dst.tensor.shape, src_t.shape
                    )));
                }
                dst.tensor.values.copy_from_slice(&src_t.values);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer. Moment state lives inside the [`ParameterSet`] entries;
/// this struct owns the step counter and hyperparameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam { hyper, step: 0 }
    }

    /// One update over every parameter, scaled per-group, then zero grads.
    /// Errors if any parameter never received a gradient.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        for (name, e) in params.entries.iter() {
            if e.grad.is_none() {
                return Err(Error::contract(format!(
                    "adam_step: missing gradient for {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.hyper.beta1.powf(t);
        let bc2 = 1.0 - self.hyper.beta2.powf(t);
        for e in params.entries.values_mut() {
            let g = e.grad.take().unwrap();
            let lr = self.hyper.lr * e.lr_scale;
            for i in 0..g.len() {
                e.m[i] = self.hyper.beta1 * e.m[i] + (1.0 - self.hyper.beta1) * g[i];
                e.v[i] = self.hyper.beta2 * e.v[i] + (1.0 - self.hyper.beta2) * g[i] * g[i];
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                e.tensor.values[i] -= lr * mhat / (vhat.sqrt() + self.hyper.eps);
            }
        }
        Ok(())
    }
}

// ---- checkpoint files ------------------------------------------------------
//
// `<prefix>.manifest`: one line per tensor —
//     <identifier> f64 <extent>... <byte offset> <byte length>
// `<prefix>.bin`: little-endian f64 payload, entries in manifest order.

pub fn save_checkpoint(params: &ParameterSet, prefix: &Path) -> Result<()> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, e) in params.entries.iter() {
        let offset = blob.len();
        for v in &e.tensor.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let shape = e
            .tensor
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        manifest.push_str(&format!(
            "{} f64 {} {} {}\n",
            name,
            shape,
            offset,
            blob.len() - offset
        ));
    }
    std::fs::write(with_ext(prefix, "manifest"), manifest)?;
    std::fs::write(with_ext(prefix, "bin"), blob)?;
    Ok(())
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| {
            Error::Checkpoint(format!(
                "manifest line {}: {} in entry {:?}",
                lineno + 1,
                what,
                fields.first().copied().unwrap_or("")
            ))
        };
        if fields.len() < 5 {
            return Err(bad("too few fields"));
        }
        if fields[1] != "f64" {
            return Err(bad("unsupported dtype"));
        }
        let name = fields[0].to_string();
        let shape: Vec<usize> = fields[2..fields.len() - 2]
            .iter()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("unparseable shape"))?;
        let offset = fields[fields.len() - 2]
            .parse::<usize>()
            .map_err(|_| bad("unparseable offset"))?;
        let length = fields[fields.len() - 1]
            .parse::<usize>()
            .map_err(|_| bad("unparseable length"))?;
        if length != numel(&shape) * 8 {
            return Err(Error::Checkpoint(format!(
                "size mismatch for {}: shape {:?} implies {} bytes, manifest says {}",
                name,
                shape,
                numel(&shape) * 8,
                length
            )));
        }
        out.push(ManifestEntry {
            name,
            shape,
            offset,
            length,
        });
    }
    Ok(out)
}

/// Load a checkpoint into an already-configured parameter set. Every manifest
/// key must exist with a matching shape, and every parameter must be covered.
pub fn load_checkpoint_into(params: &mut ParameterSet, prefix: &Path) -> Result<()> {
    let text = std::fs::read_to_string(with_ext(prefix, "manifest"))
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest: {e}")))?;
    let entries = parse_manifest(&text)?;
    let mut blob = Vec::new();
    std::fs::File::open(with_ext(prefix, "bin"))
        .map_err(|e| Error::Checkpoint(format!("cannot read payload: {e}")))?
        .read_to_end(&mut blob)?;

    let mut seen: Vec<&str> = Vec::new();
    for entry in &entries {
        if !params.contains(&entry.name) {
            return Err(Error::Checkpoint(format!(
                "unknown key in manifest: {}",
                entry.name
            )));
        }
        let expected_shape = params.tensor(&entry.name)?.shape.clone();
        if expected_shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: expected {:?}, found {:?}",
                entry.name, expected_shape, entry.shape
            )));
        }
        if entry.offset + entry.length > blob.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload for {}: need bytes {}..{}, file has {}",
                entry.name,
                entry.offset,
                entry.offset + entry.length,
                blob.len()
            )));
        }
        let values = params.values_mut(&entry.name)?;
        for (i, chunk) in blob[entry.offset..entry.offset + entry.length]
            .chunks_exact(8)
            .enumerate()
        {
            values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen.push(&entry.name);
    }
    if seen.len() != params.len() {
        let missing: Vec<&str> = params
            .names()
            .filter(|n| !seen.contains(n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "manifest missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Read a checkpoint without a pre-built parameter set, reconstructing
/// tensors from the manifest alone.
pub fn load_checkpoint(prefix: &Path) -> Result<ParameterSet> {
    let text = std::fs::read_to_string(with_ext(prefix, "manifest"))
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest: {e}")))?;
    let entries = parse_manifest(&text)?;
    let mut params = ParameterSet::new();
    for e in &entries {
        params.insert(&e.name, Tensor::zeros(e.shape.clone()))?;
    }
    load_checkpoint_into(&mut params, prefix)?;
    Ok(params)
}

fn with_ext(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    std::path::PathBuf::from(s)
}

/// Write a text file atomically enough for our purposes.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
