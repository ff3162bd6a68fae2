//! Multi-domain datasets: synthetic generation, CSV persistence, and
//! leave-one-domain-out splits.
//!
//! The synthetic generator builds a *two-branch* feature layout per sample:
//!
//! - an **invariant block** drawn from one fixed distribution (standard
//!   normal) in every domain, and
//! - a **spurious block** whose distribution is domain-specific: an
//!   isotropic normal pushed through a per-domain rotation and scale.
//!
//! Labels are a linear map of the invariant block plus optional Gaussian
//! noise, so they never depend on the spurious block directly.  A
//! *shortcut regime* can be switched on by leaking `alpha_d * label` into
//! the first spurious coordinate: the leaked coordinate then predicts the
//! label well inside each training domain while its reliability varies
//! across domains, which is exactly the failure mode the cross-domain
//! sensitivity statistics are designed to expose.
//!
//! Everything is deterministic: each domain samples from its own counter
//! stream of a ChaCha generator derived from the master seed, so a fixed
//! spec regenerates bit-identical datasets regardless of how many domains
//! precede it.
//!
//! The CSV interchange format is one row per sample,
//! `domain,label,f0,...,f{d-1}`, with floats printed to 17 significant
//! digits so a write/load round trip reproduces every `f64` exactly.
//! Labels that are all bare non-negative integers load as classes;
//! anything else loads as real targets.  Parse errors cite 1-based line
//! numbers counted from the header line.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, Labels};
use crate::sensitivity::DomainBatch;
use crate::tensor::Tensor;

/// A labeled feature matrix tied to one named domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    id: String,
    batch: Batch,
}

impl DomainDataset {
    /// Wraps an id, feature matrix, and labels into a dataset.
    ///
    /// Requires a non-empty `n x d` feature matrix and exactly one label
    /// per row.
    pub fn new(id: impl Into<String>, features: Tensor, labels: Labels) -> Result<Self> {
        let id = id.into();
        let n = match features.shape() {
            [n, _] => *n,
            other => {
                return Err(Error::Data(format!(
                    "domain {:?}: features must be a matrix, got shape {:?}",
                    id, other
                )))
            }
        };
        if n == 0 {
            return Err(Error::Data(format!("domain {:?} holds no samples", id)));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "domain {:?}: {} samples but {} labels",
                id,
                n,
                labels.len()
            )));
        }
        Ok(DomainDataset {
            id,
            batch: Batch { features, labels },
        })
    }

    /// Domain identifier.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// The features and labels as a model-ready batch.
    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    /// Feature matrix, one sample per row.
    pub fn features(&self) -> &Tensor {
        &self.batch.features
    }

    /// Per-row labels.
    pub fn labels(&self) -> &Labels {
        &self.batch.labels
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    /// Always false: construction requires at least one sample.
    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// An owned `(id, batch)` pair for the sensitivity estimators.
    pub fn to_domain_batch(&self) -> DomainBatch {
        DomainBatch {
            id: self.id.clone(),
            batch: self.batch.clone(),
        }
    }
}

/// Recipe for the synthetic multi-domain construction.
///
/// The per-domain vectors (`spurious_scales`, `rotation_seeds`,
/// `label_leak`) must all hold one entry per domain, and `label_weights`
/// one entry per invariant coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Number of domains (at least 2).
    pub domains: usize,
    /// Samples drawn per domain.
    pub samples_per_domain: usize,
    /// Width of the invariant feature block.
    pub invariant_dim: usize,
    /// Width of the spurious feature block.
    pub spurious_dim: usize,
    /// Per-domain standard-deviation scale of the spurious block.
    pub spurious_scales: Vec<f64>,
    /// Per-domain seed for the spurious block's rotation matrix.
    pub rotation_seeds: Vec<u64>,
    /// Per-domain coefficient leaking `alpha * label` into the first
    /// spurious coordinate; 0 disables the shortcut.
    pub label_leak: Vec<f64>,
    /// Linear map from the invariant block to the scalar label.
    pub label_weights: Vec<f64>,
    /// Standard deviation of additive label noise (0 for exact labels).
    pub label_noise_std: f64,
    /// Seed from which every domain's sample stream is derived.
    pub master_seed: u64,
}

impl Default for SyntheticSpec {
    /// A shortcut-regime benchmark: the label leaks into the first spurious
    /// coordinate with a strength that differs in sign and magnitude across
    /// domains (and vanishes in the last one), so a model that exploits the
    /// leak transfers badly to whichever domain is held out.
    fn default() -> Self {
        SyntheticSpec {
            domains: 3,
            samples_per_domain: 1000,
            invariant_dim: 4,
            spurious_dim: 4,
            spurious_scales: vec![1.0, 1.0, 1.0],
            rotation_seeds: vec![101, 102, 103],
            label_leak: vec![3.0, -1.5, 0.0],
            label_weights: vec![1.0, -1.0, 0.5, -0.5],
            label_noise_std: 0.5,
            master_seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Checks every structural invariant of the recipe.
    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(Error::Contract(format!(
                "synthetic data needs at least 2 domains, got {}",
                self.domains
            )));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Contract("samples_per_domain must be at least 1".to_string()));
        }
        if self.invariant_dim == 0 || self.spurious_dim == 0 {
            return Err(Error::Contract(format!(
                "feature blocks must be non-empty, got invariant_dim={} spurious_dim={}",
                self.invariant_dim, self.spurious_dim
            )));
        }
        let per_domain = [
            ("spurious_scales", self.spurious_scales.len()),
            ("rotation_seeds", self.rotation_seeds.len()),
            ("label_leak", self.label_leak.len()),
        ];
        for (name, len) in per_domain {
            if len != self.domains {
                return Err(Error::Contract(format!(
                    "{} holds {} entries for {} domains",
                    name, len, self.domains
                )));
            }
        }
        if let Some(s) = self.spurious_scales.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(Error::Contract(format!("spurious scales must be finite and > 0, got {}", s)));
        }
        if let Some(a) = self.label_leak.iter().find(|a| !a.is_finite()) {
            return Err(Error::Contract(format!("label leak coefficients must be finite, got {}", a)));
        }
        if self.label_weights.len() != self.invariant_dim {
            return Err(Error::Contract(format!(
                "label_weights holds {} entries for invariant_dim={}",
                self.label_weights.len(),
                self.invariant_dim
            )));
        }
        if let Some(w) = self.label_weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Contract(format!("label weights must be finite, got {}", w)));
        }
        if !self.label_noise_std.is_finite() || self.label_noise_std < 0.0 {
            return Err(Error::Contract(format!(
                "label_noise_std must be finite and >= 0, got {}",
                self.label_noise_std
            )));
        }
        Ok(())
    }

    /// Total feature width: invariant block followed by spurious block.
    pub fn feature_dim(&self) -> usize {
        self.invariant_dim + self.spurious_dim
    }

    /// Canonical id of domain `d`: `d0`, `d1`, ...
    pub fn domain_id(&self, d: usize) -> String {
        format!("d{}", d)
    }
}

/// A uniformly random rotation of `dim`-dimensional space.
///
/// Built by orthonormalizing a Gaussian matrix with (twice-applied)
/// modified Gram-Schmidt; the result satisfies `R^T R = I` to machine
/// precision.  One-dimensional "rotation" is the identity.
fn random_rotation(dim: usize, seed: u64) -> Tensor {
    if dim == 1 {
        return Tensor::matrix(1, 1, vec![1.0]).expect("1x1 matrix");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'redraw: loop {
        let mut cols: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        for j in 0..dim {
            // Two orthogonalization passes keep the basis orthogonal to
            // machine precision even for nearly dependent draws.
            for _ in 0..2 {
                for i in 0..j {
                    let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    for r in 0..dim {
                        cols[j][r] -= dot * cols[i][r];
                    }
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue 'redraw;
            }
            for v in &mut cols[j] {
                *v /= norm;
            }
        }
        let mut data = vec![0.0; dim * dim];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * dim + j] = v;
            }
        }
        return Tensor::matrix(dim, dim, data).expect("square matrix");
    }
}

/// Draws one dataset per domain according to `spec`.
///
/// Per sample in domain `d`: the invariant block is standard normal; the
/// label is `label_weights . invariant + noise`; the spurious block is
/// `scale_d * R_d z` for isotropic normal `z`, after which
/// `label_leak[d] * label` is added to its first coordinate.  Each domain
/// draws from its own deterministic stream of the master seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let d_x = spec.feature_dim();
    let n = spec.samples_per_domain;
    let mut out = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let rotation = random_rotation(spec.spurious_dim, spec.rotation_seeds[d]);
        let scale = spec.spurious_scales[d];
        let leak = spec.label_leak[d];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.master_seed);
        rng.set_stream(d as u64 + 1);
        let mut features = Vec::with_capacity(n * d_x);
        let mut targets = Vec::with_capacity(n);
        let mut invariant = vec![0.0; spec.invariant_dim];
        let mut raw = vec![0.0; spec.spurious_dim];
        for _ in 0..n {
            for v in &mut invariant {
                *v = rng.sample(StandardNormal);
            }
            for v in &mut raw {
                *v = rng.sample(StandardNormal);
            }
            let noise: f64 = rng.sample(StandardNormal);
            let mut label = 0.0;
            for (w, x) in spec.label_weights.iter().zip(&invariant) {
                label += w * x;
            }
            label += spec.label_noise_std * noise;
            features.extend_from_slice(&invariant);
            let offset = features.len();
            for i in 0..spec.spurious_dim {
                let mut v = 0.0;
                for (j, &z) in raw.iter().enumerate() {
                    v += rotation.at(i, j) * z;
                }
                features.push(scale * v);
            }
            features[offset] += leak * label;
            targets.push(label);
        }
        let features = Tensor::matrix(n, d_x, features)?;
        let labels = Labels::Targets(Tensor::matrix(n, 1, targets)?);
        out.push(DomainDataset::new(spec.domain_id(d), features, labels)?);
    }
    Ok(out)
}

/// All leave-one-domain-out splits, in domain order.
///
/// Split `i` holds out `domains[i]` and trains on every other domain in
/// their original order.  Requires at least two domains with distinct ids.
pub fn lodo_splits(domains: &[DomainDataset]) -> Result<Vec<(Vec<&DomainDataset>, &DomainDataset)>> {
    if domains.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    for (i, a) in domains.iter().enumerate() {
        if domains[..i].iter().any(|b| b.id == a.id) {
            return Err(Error::Data(format!("duplicate domain id {:?}", a.id)));
        }
    }
    Ok((0..domains.len())
        .map(|i| {
            let train: Vec<&DomainDataset> = domains
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, d)| d)
                .collect();
            (train, &domains[i])
        })
        .collect())
}

/// Stacks several domains into one batch, rows in the given domain order.
///
/// All domains must share the feature width and the label kind (all
/// classes, or all targets of one width).
pub fn merge_domains(domains: &[&DomainDataset]) -> Result<Batch> {
    let first = domains
        .first()
        .ok_or_else(|| Error::Data("cannot merge zero domains".to_string()))?;
    let d_x = first.features().shape()[1];
    let mut features = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut target_dim = 0;
    let classification = matches!(first.labels(), Labels::Classes(_));
    for domain in domains {
        if domain.features().shape()[1] != d_x {
            return Err(Error::dimension(
                "merge_domains",
                format!(
                    "domain {:?} has {} features, expected {}",
                    domain.id(),
                    domain.features().shape()[1],
                    d_x
                ),
            ));
        }
        features.extend_from_slice(domain.features().data());
        match (classification, domain.labels()) {
            (true, Labels::Classes(c)) => classes.extend_from_slice(c),
            (false, Labels::Targets(t)) => {
                let dt = t.shape()[1];
                if target_dim == 0 {
                    target_dim = dt;
                } else if dt != target_dim {
                    return Err(Error::Data(format!(
                        "domain {:?} has target width {}, expected {}",
                        domain.id(),
                        dt,
                        target_dim
                    )));
                }
                targets.extend_from_slice(t.data());
            }
            _ => {
                return Err(Error::Data(format!(
                    "domain {:?} mixes label kinds with {:?}",
                    domain.id(),
                    first.id()
                )))
            }
        }
    }
    let n = features.len() / d_x;
    let labels = if classification {
        Labels::Classes(classes)
    } else {
        Labels::Targets(Tensor::matrix(n, target_dim, targets)?)
    };
    Ok(Batch {
        features: Tensor::matrix(n, d_x, features)?,
        labels,
    })
}

/// Owned `(id, batch)` pairs for a set of domains, preserving order.
pub fn domain_batches(domains: &[&DomainDataset]) -> Vec<DomainBatch> {
    domains.iter().map(|d| d.to_domain_batch()).collect()
}

/// True when `id` is safe to embed in CSV fields and file names.
fn writable_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

/// Formats one float to 17 significant digits (exact `f64` round trip).
fn fmt_float(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Writes domains as CSV rows `domain,label,f0,...` behind one shared
/// header.
///
/// Class labels are written as bare integers, real targets (single column
/// only) to 17 significant digits.  Domain ids are restricted to
/// `[A-Za-z0-9_.-]` so the field never needs quoting.
pub fn write_csv(domains: &[&DomainDataset], out: &mut impl Write) -> Result<()> {
    let first = domains
        .first()
        .ok_or_else(|| Error::Data("cannot write zero domains".to_string()))?;
    let d_x = first.features().shape()[1];
    let mut header = String::from("domain,label");
    for i in 0..d_x {
        header.push_str(&format!(",f{}", i));
    }
    writeln!(out, "{}", header)?;
    for domain in domains {
        if !writable_id(domain.id()) {
            return Err(Error::Data(format!(
                "domain id {:?} is not writable; use only letters, digits, '_', '.', '-'",
                domain.id()
            )));
        }
        if domain.features().shape()[1] != d_x {
            return Err(Error::dimension(
                "write_csv",
                format!(
                    "domain {:?} has {} features, expected {}",
                    domain.id(),
                    domain.features().shape()[1],
                    d_x
                ),
            ));
        }
        for r in 0..domain.len() {
            let label = match domain.labels() {
                Labels::Classes(c) => c[r].to_string(),
                Labels::Targets(t) => {
                    if t.shape()[1] != 1 {
                        return Err(Error::Capability(format!(
                            "CSV interchange supports single-column targets, domain {:?} has width {}",
                            domain.id(),
                            t.shape()[1]
                        )));
                    }
                    fmt_float(t.at(r, 0))
                }
            };
            let mut line = format!("{},{}", domain.id(), label);
            for v in domain.features().row(r) {
                line.push(',');
                line.push_str(&fmt_float(*v));
            }
            writeln!(out, "{}", line)?;
        }
    }
    Ok(())
}

/// Parses the CSV interchange format from any buffered reader.
///
/// Returns one dataset per distinct domain value, in order of first
/// appearance.  Labels load as classes when every label in the file is a
/// bare non-negative integer, as single-column targets otherwise.
pub fn load_csv_reader(reader: impl BufRead) -> Result<Vec<DomainDataset>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::Parse("line 1: empty file, expected header 'domain,label,f0,...'".to_string())),
    };
    let header = header.strip_suffix('\r').unwrap_or(&header).to_string();
    let fields: Vec<&str> = header.split(',').collect();
    let well_formed = fields.len() >= 3
        && fields[0] == "domain"
        && fields[1] == "label"
        && fields[2..]
            .iter()
            .enumerate()
            .all(|(i, f)| **f == format!("f{}", i));
    if !well_formed {
        return Err(Error::Parse(format!(
            "line 1: unknown header {:?}, expected 'domain,label,f0,...,f{{d-1}}'",
            header
        )));
    }
    let d_x = fields.len() - 2;

    struct PendingDomain {
        id: String,
        features: Vec<f64>,
        raw_labels: Vec<(usize, String)>,
    }
    let mut order: Vec<PendingDomain> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut all_integer = true;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_x + 2 {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, got {}",
                line_no,
                d_x + 2,
                fields.len()
            )));
        }
        let label = fields[1].trim();
        if label.is_empty() {
            return Err(Error::Parse(format!("line {}: empty label", line_no)));
        }
        all_integer &= label.bytes().all(|b| b.is_ascii_digit());
        let slot = match index.get(fields[0]) {
            Some(&s) => s,
            None => {
                index.insert(fields[0].to_string(), order.len());
                order.push(PendingDomain {
                    id: fields[0].to_string(),
                    features: Vec::new(),
                    raw_labels: Vec::new(),
                });
                order.len() - 1
            }
        };
        for (c, field) in fields[2..].iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "line {}: feature f{} is not a number: {:?}",
                    line_no, c, field
                ))
            })?;
            order[slot].features.push(v);
        }
        order[slot].raw_labels.push((line_no, label.to_string()));
    }
    if order.is_empty() {
        return Err(Error::Data("CSV file holds a header but no data rows".to_string()));
    }
    order
        .into_iter()
        .map(|pending| {
            let n = pending.raw_labels.len();
            let labels = if all_integer {
                let classes = pending
                    .raw_labels
                    .iter()
                    .map(|(line_no, s)| {
                        s.parse::<usize>().map_err(|_| {
                            Error::Parse(format!("line {}: class label out of range: {:?}", line_no, s))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Labels::Classes(classes)
            } else {
                let targets = pending
                    .raw_labels
                    .iter()
                    .map(|(line_no, s)| {
                        s.parse::<f64>().map_err(|_| {
                            Error::Parse(format!("line {}: label is not a number: {:?}", line_no, s))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Labels::Targets(Tensor::matrix(n, 1, targets)?)
            };
            DomainDataset::new(pending.id, Tensor::matrix(n, d_x, pending.features)?, labels)
        })
        .collect()
}

/// Loads the CSV interchange format from a file; see [`load_csv_reader`].
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let file = File::open(path.as_ref())?;
    load_csv_reader(BufReader::new(file))
}

/// The `manifest.json` written next to generated domain files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// The exact recipe the files were generated from.
    pub spec: SyntheticSpec,
    /// Domain CSV file names, in domain order.
    pub files: Vec<String>,
}

/// Writes one `domain_<id>.csv` per domain plus a `manifest.json`
/// recording the recipe, creating `dir` if needed.
///
/// Returns the paths written (manifest last).  Output bytes depend only on
/// the data, so a fixed spec writes identical files on every run.
pub fn write_dataset_dir(dir: impl AsRef<Path>, spec: &SyntheticSpec, domains: &[DomainDataset]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(domains.len() + 1);
    let mut files = Vec::with_capacity(domains.len());
    for domain in domains {
        if !writable_id(domain.id()) {
            return Err(Error::Data(format!(
                "domain id {:?} is not writable; use only letters, digits, '_', '.', '-'",
                domain.id()
            )));
        }
        let name = format!("domain_{}.csv", domain.id());
        let path = dir.join(&name);
        let mut out = Vec::new();
        write_csv(&[domain], &mut out)?;
        fs::write(&path, out)?;
        paths.push(path);
        files.push(name);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest serialization failed: {}", e)))?;
    body.push('\n');
    fs::write(&path, body)?;
    paths.push(path);
    Ok(paths)
}

/// Reads a `manifest.json` written by [`write_dataset_dir`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let body = fs::read_to_string(path.as_ref())?;
    serde_json::from_str(&body).map_err(|e| Error::Parse(format!("manifest: {}", e)))
}

/// Loads every domain file listed by a dataset directory's manifest, in
/// manifest order.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir.join("manifest.json"))?;
    let mut domains = Vec::new();
    for name in &manifest.files {
        domains.extend(load_csv(dir.join(name))?);
    }
    Ok(domains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Activation, Head, ModelSpec};
    use crate::sensitivity::{cross_domain_stats, per_domain_sensitivity, EstimatorMode};
    use proptest::prelude::*;

    /// A small leak-free spec: two domains with unit spurious scale are
    /// identically distributed by construction.
    fn twin_spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            domains: 2,
            samples_per_domain: n,
            invariant_dim: 3,
            spurious_dim: 2,
            spurious_scales: vec![1.0, 1.0],
            rotation_seeds: vec![5, 5],
            label_leak: vec![0.0, 0.0],
            label_weights: vec![1.0, -1.0, 0.5],
            label_noise_std: 0.0,
            master_seed: 42,
        }
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let ok = twin_spec(10);
        ok.validate().unwrap();

        let mut s = ok.clone();
        s.domains = 1;
        s.spurious_scales = vec![1.0];
        s.rotation_seeds = vec![5];
        s.label_leak = vec![0.0];
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok.clone();
        s.spurious_scales = vec![1.0, 0.0];
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok.clone();
        s.spurious_scales = vec![1.0];
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok.clone();
        s.label_weights = vec![1.0];
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok.clone();
        s.label_noise_std = -0.1;
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok.clone();
        s.invariant_dim = 0;
        s.label_weights = vec![];
        assert!(matches!(s.validate(), Err(Error::Contract(_))));

        let mut s = ok;
        s.samples_per_domain = 0;
        assert!(matches!(s.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn generate_produces_expected_shapes_and_ids() {
        let spec = twin_spec(12);
        let domains = generate(&spec).unwrap();
        assert_eq!(domains.len(), 2);
        for (d, domain) in domains.iter().enumerate() {
            assert_eq!(domain.id(), format!("d{}", d));
            assert_eq!(domain.features().shape(), &[12, 5]);
            match domain.labels() {
                Labels::Targets(t) => assert_eq!(t.shape(), &[12, 1]),
                other => panic!("expected targets, got {:?}", other),
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_seed_sensitive() {
        let spec = twin_spec(20);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);

        let mut other = spec;
        other.master_seed = 43;
        let c = generate(&other).unwrap();
        assert_ne!(a[0].features(), c[0].features());
    }

    #[test]
    fn labels_are_the_exact_linear_map_without_noise() {
        let spec = twin_spec(50);
        let domains = generate(&spec).unwrap();
        for domain in &domains {
            let targets = match domain.labels() {
                Labels::Targets(t) => t,
                other => panic!("expected targets, got {:?}", other),
            };
            for r in 0..domain.len() {
                let row = domain.features().row(r);
                let mut expected = 0.0;
                for (w, x) in spec.label_weights.iter().zip(row) {
                    expected += w * x;
                }
                assert_eq!(targets.at(r, 0), expected, "row {}", r);
            }
        }
    }

    #[test]
    fn label_noise_matches_requested_scale() {
        let mut spec = twin_spec(10_000);
        spec.label_noise_std = 0.3;
        let domains = generate(&spec).unwrap();
        let domain = &domains[0];
        let targets = match domain.labels() {
            Labels::Targets(t) => t,
            other => panic!("expected targets, got {:?}", other),
        };
        let n = domain.len();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for r in 0..n {
            let row = domain.features().row(r);
            let mut clean = 0.0;
            for (w, x) in spec.label_weights.iter().zip(row) {
                clean += w * x;
            }
            let residual = targets.at(r, 0) - clean;
            sum += residual;
            sum_sq += residual * residual;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // Sample variance of N(0, 0.09) at n = 1e4 has standard error
        // 0.09 * sqrt(2/n) ~ 1.3e-3; 0.01 is a > 5-sigma band.
        assert!((var - 0.09).abs() < 0.01, "residual variance {}", var);
        assert!(mean.abs() < 0.02, "residual mean {}", mean);
    }

    #[test]
    fn spurious_scale_multiplies_features_exactly() {
        // Two recipes differing only in one domain's scale draw identical
        // streams, so the scaled domain's spurious block is exactly 2x and
        // its per-coordinate second moments exactly 4x.
        let base = twin_spec(200);
        let mut scaled = base.clone();
        scaled.spurious_scales = vec![1.0, 2.0];
        let a = generate(&base).unwrap();
        let b = generate(&scaled).unwrap();
        assert_eq!(a[0], b[0], "unscaled domain must be untouched");
        let inv = base.invariant_dim;
        let d_x = base.feature_dim();
        let n = base.samples_per_domain;
        for c in inv..d_x {
            let mut moment_a = 0.0;
            let mut moment_b = 0.0;
            for r in 0..n {
                assert_eq!(b[1].features().at(r, c), 2.0 * a[1].features().at(r, c));
                moment_a += a[1].features().at(r, c).powi(2);
                moment_b += b[1].features().at(r, c).powi(2);
            }
            assert_eq!(moment_b, 4.0 * moment_a, "column {}", c);
        }
        for c in 0..inv {
            for r in 0..n {
                assert_eq!(b[1].features().at(r, c), a[1].features().at(r, c));
            }
        }
    }

    #[test]
    fn invariant_second_moments_match_across_domains() {
        let spec = SyntheticSpec {
            domains: 3,
            samples_per_domain: 10_000,
            invariant_dim: 4,
            spurious_dim: 4,
            spurious_scales: vec![1.0, 2.0, 4.0],
            rotation_seeds: vec![1, 2, 3],
            label_leak: vec![0.0, 0.0, 0.0],
            label_weights: vec![1.0, -1.0, 0.5, -0.5],
            label_noise_std: 0.0,
            master_seed: 9,
        };
        let domains = generate(&spec).unwrap();
        let n = spec.samples_per_domain as f64;
        // Mean of n squared standard normals is chi-square_n / n: standard
        // error sqrt(2/n), so 5 * sqrt(2/n) is a 5-sigma band.
        let band = 5.0 * (2.0 / n).sqrt();
        let mut moments = vec![vec![0.0; spec.invariant_dim]; spec.domains];
        for (d, domain) in domains.iter().enumerate() {
            for c in 0..spec.invariant_dim {
                let m: f64 = (0..domain.len()).map(|r| domain.features().at(r, c).powi(2)).sum::<f64>() / n;
                assert!((m - 1.0).abs() < band, "domain {} column {}: moment {}", d, c, m);
                moments[d][c] = m;
            }
        }
        let diff_band = 5.0 * (4.0f64 / n).sqrt();
        for a in 0..spec.domains {
            for b in a + 1..spec.domains {
                for c in 0..spec.invariant_dim {
                    let diff = (moments[a][c] - moments[b][c]).abs();
                    assert!(diff < diff_band, "domains {}/{} column {}: diff {}", a, b, c, diff);
                }
            }
        }
    }

    #[test]
    fn identical_domains_drive_cross_domain_variation_to_zero() {
        let spec = twin_spec(10_000);
        let domains = generate(&spec).unwrap();
        let model = ModelSpec {
            layers: vec![spec.feature_dim(), 1],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: 3,
        };
        let params = init_params(&model).unwrap();
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        let matrix = per_domain_sensitivity(&model, &params, &domain_batches(&refs), EstimatorMode::Jacobian).unwrap();
        let report = cross_domain_stats(&matrix, 0.0);
        for (k, c) in report.coefficients.iter().enumerate() {
            assert!(*c < 0.05, "parameter {}: c = {}", k, c);
        }
    }

    #[test]
    fn label_leak_correlates_spurious_coordinate_with_label() {
        let mut spec = twin_spec(10_000);
        spec.label_leak = vec![2.0, 0.0];
        let domains = generate(&spec).unwrap();
        let leak_col = spec.invariant_dim;
        let corr = |domain: &DomainDataset| -> f64 {
            let targets = match domain.labels() {
                Labels::Targets(t) => t,
                other => panic!("expected targets, got {:?}", other),
            };
            let n = domain.len() as f64;
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..domain.len() {
                let x = domain.features().at(r, leak_col);
                let y = targets.at(r, 0);
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
            let cov = sxy / n - sx / n * (sy / n);
            let vx = sxx / n - (sx / n).powi(2);
            let vy = syy / n - (sy / n).powi(2);
            cov / (vx * vy).sqrt()
        };
        assert!(corr(&domains[0]) > 0.8, "leaked domain correlation {}", corr(&domains[0]));
        assert!(corr(&domains[1]).abs() < 0.05, "clean domain correlation {}", corr(&domains[1]));
    }

    #[test]
    fn rotations_are_orthogonal_and_norm_preserving() {
        for (dim, seed) in [(1usize, 0u64), (2, 1), (4, 7), (6, 99)] {
            let r = random_rotation(dim, seed);
            for i in 0..dim {
                for j in 0..dim {
                    let dot: f64 = (0..dim).map(|k| r.at(k, i) * r.at(k, j)).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-12, "dim {} entry ({}, {}): {}", dim, i, j, dot);
                }
            }
        }

        // Rotations never change the spurious block's per-sample norm, so
        // two recipes differing only in rotation seeds agree on it.
        let base = twin_spec(100);
        let mut rotated = base.clone();
        rotated.rotation_seeds = vec![5, 77];
        let a = generate(&base).unwrap();
        let b = generate(&rotated).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1].features(), b[1].features());
        let inv = base.invariant_dim;
        for r in 0..base.samples_per_domain {
            let norm = |t: &Tensor| -> f64 {
                (inv..base.feature_dim()).map(|c| t.at(r, c).powi(2)).sum::<f64>().sqrt()
            };
            let na = norm(a[1].features());
            let nb = norm(b[1].features());
            assert!((na - nb).abs() <= 1e-9 * (1.0 + na), "row {}: {} vs {}", r, na, nb);
        }
    }

    #[test]
    fn lodo_splits_cover_every_domain_exactly_once() {
        let spec = SyntheticSpec {
            domains: 3,
            samples_per_domain: 4,
            spurious_scales: vec![1.0, 1.0, 1.0],
            rotation_seeds: vec![1, 2, 3],
            label_leak: vec![0.0, 0.0, 0.0],
            ..twin_spec(4)
        };
        let domains = generate(&spec).unwrap();
        let splits = lodo_splits(&domains).unwrap();
        assert_eq!(splits.len(), 3);
        let mut held_out = Vec::new();
        for (i, (train, heldout)) in splits.iter().enumerate() {
            assert_eq!(train.len(), 2);
            assert_eq!(heldout.id(), domains[i].id());
            assert!(train.iter().all(|d| d.id() != heldout.id()));
            held_out.push(heldout.id().to_string());
        }
        held_out.sort();
        assert_eq!(held_out, vec!["d0", "d1", "d2"]);

        let two = generate(&twin_spec(4)).unwrap();
        assert_eq!(lodo_splits(&two).unwrap().len(), 2);
        assert!(matches!(lodo_splits(&two[..1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn merge_domains_concatenates_in_order() {
        let spec = twin_spec(6);
        let domains = generate(&spec).unwrap();
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        let merged = merge_domains(&refs).unwrap();
        assert_eq!(merged.len(), 12);
        assert_eq!(merged.features.row(0), domains[0].features().row(0));
        assert_eq!(merged.features.row(6), domains[1].features().row(0));
        match (&merged.labels, domains[0].labels(), domains[1].labels()) {
            (Labels::Targets(m), Labels::Targets(a), Labels::Targets(b)) => {
                assert_eq!(m.at(0, 0), a.at(0, 0));
                assert_eq!(m.at(6, 0), b.at(0, 0));
            }
            other => panic!("expected merged targets, got {:?}", other),
        }

        let classes = DomainDataset::new(
            "c",
            Tensor::matrix(2, 5, vec![0.0; 10]).unwrap(),
            Labels::Classes(vec![0, 1]),
        )
        .unwrap();
        assert!(matches!(
            merge_domains(&[&domains[0], &classes]),
            Err(Error::Data(_))
        ));
        assert!(matches!(merge_domains(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn per_domain_sensitivity_matches_analytic_second_moments() {
        // For a linear model y = w . x + b, the output's sensitivity to
        // w_k on a batch is Var(w_k) * mean(x_k^2), so the estimator must
        // reproduce raw column second moments exactly.
        let spec = SyntheticSpec {
            spurious_scales: vec![1.0, 3.0],
            ..twin_spec(2000)
        };
        let domains = generate(&spec).unwrap();
        let model = ModelSpec {
            layers: vec![spec.feature_dim(), 1],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: 11,
        };
        let params = init_params(&model).unwrap();
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        let matrix = per_domain_sensitivity(&model, &params, &domain_batches(&refs), EstimatorMode::Jacobian).unwrap();
        for (d, domain) in domains.iter().enumerate() {
            let n = domain.len() as f64;
            for k in 0..spec.feature_dim() {
                let moment: f64 = (0..domain.len()).map(|r| domain.features().at(r, k).powi(2)).sum::<f64>() / n;
                let expected = params.variances()[k] * moment;
                let got = matrix.value(k, d);
                assert!(
                    (got - expected).abs() <= 1e-12 * expected.abs(),
                    "domain {} parameter {}: {} vs {}",
                    d,
                    k,
                    got,
                    expected
                );
            }
            // The bias gradient is identically 1, so its sensitivity is its
            // variance in every domain.
            let bias = spec.feature_dim();
            let got = matrix.value(bias, d);
            let expected = params.variances()[bias];
            assert!((got - expected).abs() <= 1e-12 * expected.abs());
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut spec = twin_spec(7);
        spec.label_leak = vec![1.5, 0.0];
        spec.label_noise_std = 0.2;
        let domains = generate(&spec).unwrap();
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        let mut buffer = Vec::new();
        write_csv(&refs, &mut buffer).unwrap();
        let loaded = load_csv_reader(buffer.as_slice()).unwrap();
        assert_eq!(loaded, domains);
    }

    #[test]
    fn integer_labels_load_as_classes() {
        let body = "domain,label,f0\nA,0,1.5\nA,1,2.5\nB,1,0.0\n";
        let loaded = load_csv_reader(body.as_bytes()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id(), "A");
        assert_eq!(loaded[0].labels(), &Labels::Classes(vec![0, 1]));
        assert_eq!(loaded[1].labels(), &Labels::Classes(vec![1]));

        let body = "domain,label,f0\nA,0,1.5\nA,1.5,2.5\n";
        let loaded = load_csv_reader(body.as_bytes()).unwrap();
        match loaded[0].labels() {
            Labels::Targets(t) => {
                assert_eq!(t.at(0, 0), 0.0);
                assert_eq!(t.at(1, 0), 1.5);
            }
            other => panic!("expected targets, got {:?}", other),
        }
    }

    #[test]
    fn csv_parse_errors_carry_line_numbers() {
        let check = |body: &str, needle: &str| {
            let err = load_csv_reader(body.as_bytes()).unwrap_err();
            match err {
                Error::Parse(message) => {
                    assert!(message.contains(needle), "message {:?} lacks {:?}", message, needle)
                }
                other => panic!("expected parse error, got {:?}", other),
            }
        };
        check("id,label,f0\nA,1,2\n", "line 1");
        check("domain,label,f0,f2\nA,1,2,3\n", "line 1");
        check("domain,label,f0\nA,1,2\nB,1\n", "line 3");
        check("domain,label,f0\nA,1,oops\n", "line 2");
        check("domain,label,f0\nA,x,2.0\n", "line 2");
        check("", "line 1");

        assert!(matches!(
            load_csv_reader("domain,label,f0\n".as_bytes()),
            Err(Error::Data(_))
        ));
        assert!(matches!(load_csv("/nonexistent/path.csv"), Err(Error::Io(_))));
    }

    #[test]
    fn dataset_dir_round_trips_through_manifest() {
        let spec = twin_spec(5);
        let domains = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_dataset_dir(dir.path(), &spec, &domains).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].ends_with("domain_d0.csv"));
        assert!(paths[2].ends_with("manifest.json"));

        let manifest = read_manifest(dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.spec, spec);
        assert_eq!(manifest.files, vec!["domain_d0.csv", "domain_d1.csv"]);

        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded, domains);

        // Identical recipe, fresh directory: byte-identical files.
        let again = tempfile::tempdir().unwrap();
        write_dataset_dir(again.path(), &spec, &generate(&spec).unwrap()).unwrap();
        for name in ["domain_d0.csv", "domain_d1.csv", "manifest.json"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(again.path().join(name)).unwrap();
            assert_eq!(a, b, "{} differs between runs", name);
        }
    }

    #[test]
    fn dataset_construction_rejects_malformed_shapes() {
        let features = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            DomainDataset::new("a", features.clone(), Labels::Classes(vec![0])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            DomainDataset::new("a", Tensor::matrix(0, 3, vec![]).unwrap(), Labels::Classes(vec![])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            DomainDataset::new("a", Tensor::vector(vec![1.0]), Labels::Classes(vec![0])),
            Err(Error::Data(_))
        ));
        let bad_id = DomainDataset::new("a/b", features, Labels::Classes(vec![0, 1])).unwrap();
        assert!(matches!(write_csv(&[&bad_id], &mut Vec::new()), Err(Error::Data(_))));
    }

    proptest! {
        /// Any finite features and targets survive a CSV round trip
        /// bit-for-bit: 17 significant digits reproduce every f64.
        #[test]
        fn csv_round_trip_preserves_arbitrary_floats(
            rows in 1usize..6,
            cols in 1usize..5,
            raw in proptest::collection::vec(-1e300f64..1e300, 36),
            labels in proptest::collection::vec(-1e300f64..1e300, 6),
        ) {
            let features = Tensor::matrix(rows, cols, raw[..rows * cols].to_vec()).unwrap();
            let targets = Tensor::matrix(rows, 1, labels[..rows].to_vec()).unwrap();
            let domain = DomainDataset::new("p", features, Labels::Targets(targets)).unwrap();
            let mut buffer = Vec::new();
            write_csv(&[&domain], &mut buffer).unwrap();
            let loaded = load_csv_reader(buffer.as_slice()).unwrap();
            prop_assert_eq!(&loaded[..], &[domain][..]);
        }

        /// Every split holds out exactly one domain and trains on the rest.
        #[test]
        fn lodo_partition_property(domains in 2usize..6) {
            let spec = SyntheticSpec {
                domains,
                samples_per_domain: 2,
                spurious_scales: vec![1.0; domains],
                rotation_seeds: (0..domains as u64).collect(),
                label_leak: vec![0.0; domains],
                ..twin_spec(2)
            };
            let data = generate(&spec).unwrap();
            let splits = lodo_splits(&data).unwrap();
            prop_assert_eq!(splits.len(), domains);
            for (i, (train, heldout)) in splits.iter().enumerate() {
                prop_assert_eq!(train.len(), domains - 1);
                prop_assert_eq!(heldout.id(), data[i].id());
                let mut ids: Vec<&str> = train.iter().map(|d| d.id()).collect();
                ids.push(heldout.id());
                ids.sort();
                let mut all: Vec<&str> = data.iter().map(|d| d.id()).collect();
                all.sort();
                prop_assert_eq!(ids, all);
            }
        }
    }
}
