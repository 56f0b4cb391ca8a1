//! Per-example, per-layer gradient manifests and their on-disk format.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! "IN2G" | version u16 | layer count u16
//!   per layer:   name length u16 | UTF-8 name | dim u32
//! example count u64
//!   per example: id length u16 | UTF-8 id | loss f32 | token_count u32 | f32 payload (layer order)
//! ```
//!
//! A sibling `<path>.meta.json` carries the split, model tag and creation
//! timestamp, plus the declared layer dims and example count so that a
//! header whose dims disagree with the payload can be told apart from a
//! truncated file.
//!
//! Gradients are held as `f32`. Every reduction in this module sums in
//! ascending `example_id` order in `f64`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IN2G";
pub const FORMAT_VERSION: u16 = 1;

/// Bytes stored per example besides the id and the gradient payload
/// (`loss f32` + `token_count u32`).
pub const PER_EXAMPLE_OVERHEAD_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
    TrainMean,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::TrainMean => "train-mean",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "train-mean" => Ok(Split::TrainMean),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_index: usize,
    pub name: String,
    pub dim: usize,
}

impl LayerSpec {
    pub fn new(layer_index: usize, name: impl Into<String>, dim: usize) -> Self {
        Self { layer_index, name: name.into(), dim }
    }
}

/// Gradient of one example's loss, split by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleGradient {
    pub example_id: String,
    pub per_layer: Vec<Vec<f32>>,
    pub loss_value: f32,
    pub token_count: u32,
}

impl ExampleGradient {
    pub fn new(example_id: impl Into<String>, per_layer: Vec<Vec<f32>>, loss_value: f32, token_count: u32) -> Self {
        Self { example_id: example_id.into(), per_layer, loss_value, token_count }
    }

    pub fn total_dim(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }

    /// Upcast copy of the per-layer vectors.
    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.per_layer.iter().map(|v| v.iter().map(|&x| f64::from(x)).collect()).collect()
    }

    /// Returns a copy with every entry multiplied by `c`.
    pub fn scaled(&self, c: f32) -> Self {
        let per_layer = self.per_layer.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        Self { per_layer, ..self.clone() }
    }

    fn check(&self, layers: &[LayerSpec]) -> Result<()> {
        if self.per_layer.len() != layers.len() {
            return Err(Error::InvariantViolation {
                example_id: self.example_id.clone(),
                layer_index: None,
                reason: format!("has {} layer vectors, manifest declares {}", self.per_layer.len(), layers.len()),
            });
        }
        for (spec, v) in layers.iter().zip(&self.per_layer) {
            if v.len() != spec.dim {
                return Err(Error::InvariantViolation {
                    example_id: self.example_id.clone(),
                    layer_index: Some(spec.layer_index),
                    reason: format!("vector length {} != declared dim {}", v.len(), spec.dim),
                });
            }
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvariantViolation {
                    example_id: self.example_id.clone(),
                    layer_index: Some(spec.layer_index),
                    reason: format!("non-finite entry at position {pos}"),
                });
            }
        }
        if !self.loss_value.is_finite() || self.loss_value < 0.0 {
            return Err(Error::InvariantViolation {
                example_id: self.example_id.clone(),
                layer_index: None,
                reason: format!("loss_value {} must be finite and >= 0", self.loss_value),
            });
        }
        if self.token_count == 0 {
            return Err(Error::InvariantViolation {
                example_id: self.example_id.clone(),
                layer_index: None,
                reason: "token_count must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Validated, immutable collection of example gradients sharing one layer
/// structure.
///
/// Every access to the example data goes through [`GradientManifest::examples`],
/// which bumps a read counter; see [`GradientManifest::example_reads`].
#[derive(Debug)]
pub struct GradientManifest {
    split: Split,
    layers: Vec<LayerSpec>,
    examples: Vec<ExampleGradient>,
    model_tag: String,
    created_at: u64,
    reads: AtomicU64,
}

impl Clone for GradientManifest {
    fn clone(&self) -> Self {
        Self {
            split: self.split,
            layers: self.layers.clone(),
            examples: self.examples.clone(),
            model_tag: self.model_tag.clone(),
            created_at: self.created_at,
            reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for GradientManifest {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split
            && self.layers == other.layers
            && self.model_tag == other.model_tag
            && self.created_at == other.created_at
            && self.examples.len() == other.examples.len()
            && self.examples.iter().zip(&other.examples).all(|(a, b)| {
                a.example_id == b.example_id
                    && a.token_count == b.token_count
                    && a.loss_value.to_bits() == b.loss_value.to_bits()
                    && a.per_layer.len() == b.per_layer.len()
                    && a.per_layer.iter().zip(&b.per_layer).all(|(x, y)| {
                        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                    })
            })
    }
}

impl GradientManifest {
    /// Builds a manifest, validating every invariant.
    pub fn new(
        split: Split,
        layers: Vec<LayerSpec>,
        examples: Vec<ExampleGradient>,
        model_tag: impl Into<String>,
        created_at: u64,
    ) -> Result<Self> {
        validate_layers(&layers)?;
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.example_id.as_str()) {
                return Err(Error::InvariantViolation {
                    example_id: ex.example_id.clone(),
                    layer_index: None,
                    reason: "duplicate example_id".into(),
                });
            }
            ex.check(&layers)?;
        }
        Ok(Self {
            split,
            layers,
            examples,
            model_tag: model_tag.into(),
            created_at,
            reads: AtomicU64::new(0),
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(|l| l.dim).sum()
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The example gradients, in stored order. Counts as one read.
    pub fn examples(&self) -> &[ExampleGradient] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.examples
    }

    /// Number of times example data has been accessed since load.
    pub fn example_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Indices of the examples sorted by ascending `example_id`.
    pub fn id_order(&self) -> Vec<usize> {
        let ex = self.examples();
        let mut order: Vec<usize> = (0..ex.len()).collect();
        order.sort_by(|&a, &b| ex[a].example_id.cmp(&ex[b].example_id));
        order
    }

    /// Gradient payload bytes (`n × Σ dim × 4`).
    pub fn payload_bytes(&self) -> u64 {
        self.examples.len() as u64 * self.total_dim() as u64 * 4
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Checks that `other` has the same layer structure.
    pub fn check_compatible(&self, other: &GradientManifest) -> Result<()> {
        check_layers_match(&self.layers, &other.layers)
    }
}

pub(crate) fn check_layers_match(a: &[LayerSpec], b: &[LayerSpec]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LayerMismatch(format!("{} layers vs {} layers", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.dim != y.dim {
            return Err(Error::LayerMismatch(format!(
                "layer {} has dim {} vs {}",
                x.layer_index, x.dim, y.dim
            )));
        }
    }
    Ok(())
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("a manifest needs at least one layer".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.layer_index != i {
            return Err(Error::InvalidArgument(format!(
                "layer indices must be contiguous from 0; position {i} holds {}",
                l.layer_index
            )));
        }
        if l.dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has dim 0")));
        }
    }
    Ok(())
}

/// Keeps only layers with `layer_index < k`.
pub fn restrict_layers(manifest: &GradientManifest, k: usize) -> Result<GradientManifest> {
    if k == 0 || k > manifest.layer_count() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            manifest.layer_count()
        )));
    }
    let indices: Vec<usize> = (0..k).collect();
    select_layers(manifest, &indices)
}

/// Keeps an arbitrary subset of layers (in the given order) and renumbers
/// them contiguously.
pub fn select_layers(manifest: &GradientManifest, indices: &[usize]) -> Result<GradientManifest> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("layer selection is empty".into()));
    }
    let mut seen = HashSet::new();
    for &i in indices {
        if i >= manifest.layer_count() || !seen.insert(i) {
            return Err(Error::InvalidArgument(format!("invalid or repeated layer index {i}")));
        }
    }
    let layers = indices
        .iter()
        .enumerate()
        .map(|(new, &old)| LayerSpec::new(new, manifest.layers[old].name.clone(), manifest.layers[old].dim))
        .collect();
    let examples = manifest
        .examples()
        .iter()
        .map(|ex| ExampleGradient {
            example_id: ex.example_id.clone(),
            per_layer: indices.iter().map(|&i| ex.per_layer[i].clone()).collect(),
            loss_value: ex.loss_value,
            token_count: ex.token_count,
        })
        .collect();
    Ok(GradientManifest {
        split: manifest.split,
        layers,
        examples,
        model_tag: manifest.model_tag.clone(),
        created_at: manifest.created_at,
        reads: AtomicU64::new(0),
    })
}

/// Per-layer mean gradient in `f64`, summed in ascending `example_id` order.
pub fn mean_gradient_f64(manifest: &GradientManifest) -> Result<Vec<Vec<f64>>> {
    if manifest.is_empty() {
        return Err(Error::EmptyInput("mean of an empty manifest".into()));
    }
    let order = manifest.id_order();
    let examples = manifest.examples();
    let mut acc: Vec<Vec<f64>> = manifest.layers.iter().map(|l| vec![0.0; l.dim]).collect();
    for &i in &order {
        for (sum, v) in acc.iter_mut().zip(&examples[i].per_layer) {
            for (s, &x) in sum.iter_mut().zip(v) {
                *s += f64::from(x);
            }
        }
    }
    let n = order.len() as f64;
    for layer in &mut acc {
        for s in layer.iter_mut() {
            *s /= n;
        }
    }
    Ok(acc)
}

/// Arithmetic mean over all examples. Loss is the mean loss; token_count is 1.
pub fn mean_gradient(manifest: &GradientManifest) -> Result<ExampleGradient> {
    let mean = mean_gradient_f64(manifest)?;
    let order = manifest.id_order();
    let examples = manifest.examples();
    let loss = order.iter().map(|&i| f64::from(examples[i].loss_value)).sum::<f64>() / order.len() as f64;
    Ok(ExampleGradient {
        example_id: "mean".into(),
        per_layer: mean.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect(),
        loss_value: loss as f32,
        token_count: 1,
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub split: Split,
    pub model_tag: String,
    pub created_at: u64,
    #[serde(default)]
    pub format_version: Option<u16>,
    #[serde(default)]
    pub layer_dims: Option<Vec<u32>>,
    #[serde(default)]
    pub example_count: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serializes the binary body of a manifest.
pub fn encode(manifest: &GradientManifest) -> Result<Vec<u8>> {
    if manifest.layers.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument("more than 65535 layers".into()));
    }
    let mut buf = Vec::with_capacity(64 + manifest.payload_bytes() as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.layers.len() as u16).to_le_bytes());
    for l in &manifest.layers {
        put_str(&mut buf, &l.name, || format!("layer {} name", l.layer_index))?;
        let dim = u32::try_from(l.dim).map_err(|_| Error::InvalidArgument(format!("layer {} dim too large", l.layer_index)))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.extend_from_slice(&(manifest.examples.len() as u64).to_le_bytes());
    for ex in &manifest.examples {
        ex.check(&manifest.layers)?;
        put_str(&mut buf, &ex.example_id, || format!("example id `{}`", ex.example_id))?;
        buf.extend_from_slice(&ex.loss_value.to_le_bytes());
        buf.extend_from_slice(&ex.token_count.to_le_bytes());
        for v in &ex.per_layer {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

fn put_str(buf: &mut Vec<u8>, s: &str, what: impl FnOnce() -> String) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("{} longer than 65535 bytes", what())))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn meta_of(manifest: &GradientManifest) -> ManifestMeta {
    ManifestMeta {
        split: manifest.split,
        model_tag: manifest.model_tag.clone(),
        created_at: manifest.created_at,
        format_version: Some(FORMAT_VERSION),
        layer_dims: Some(manifest.layers.iter().map(|l| l.dim as u32).collect()),
        example_count: Some(manifest.examples.len() as u64),
    }
}

/// Writes the binary file plus its `.meta.json` sidecar; returns the size
/// of the binary file in bytes.
pub fn write_manifest(manifest: &GradientManifest, path: &Path) -> Result<u64> {
    let bytes = encode(manifest)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&meta_of(manifest))?;
    let side = sidecar_path(path);
    fs::write(&side, meta + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_manifest(path: &Path) -> Result<GradientManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ManifestMeta = serde_json::from_str(&meta_text)?;
    decode(&bytes, &meta)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.u32().map(f32::from_bits)
    }

    fn string(&mut self) -> Option<std::result::Result<&'a str, std::str::Utf8Error>> {
        let len = self.u16()? as usize;
        self.take(len).map(std::str::from_utf8)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a binary body against its sidecar metadata.
pub fn decode(bytes: &[u8], meta: &ManifestMeta) -> Result<GradientManifest> {
    let mut r = Reader { bytes, pos: 0 };
    let header = |what: &str| Error::CorruptHeader(format!("file ends inside {what}"));

    if r.take(4).ok_or_else(|| header("magic"))? != MAGIC {
        return Err(Error::CorruptHeader("bad magic bytes".into()));
    }
    let version = r.u16().ok_or_else(|| header("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported format version {version}")));
    }
    let layer_count = r.u16().ok_or_else(|| header("layer count"))? as usize;
    if layer_count == 0 {
        return Err(Error::CorruptHeader("layer count is 0".into()));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let name = r
            .string()
            .ok_or_else(|| header("layer table"))?
            .map_err(|_| Error::CorruptHeader(format!("layer {i} name is not UTF-8")))?
            .to_owned();
        let dim = r.u32().ok_or_else(|| header("layer table"))?;
        if dim == 0 {
            return Err(Error::CorruptHeader(format!("layer {i} declares dim 0")));
        }
        layers.push(LayerSpec::new(i, name, dim as usize));
    }
    let count = r.u64().ok_or_else(|| header("example count"))?;

    if let Some(dims) = &meta.layer_dims {
        let declared: Vec<u32> = layers.iter().map(|l| l.dim as u32).collect();
        if *dims != declared {
            return Err(Error::DimensionMismatch(format!(
                "header declares dims {declared:?}, payload was written with {dims:?}"
            )));
        }
    }
    if let Some(expected) = meta.example_count {
        if expected != count {
            return Err(Error::DimensionMismatch(format!(
                "header declares {count} examples, sidecar records {expected}"
            )));
        }
    }

    let total_dim: usize = layers.iter().map(|l| l.dim).sum();
    let mut examples = Vec::with_capacity(count.min(1 << 20) as usize);
    for e in 0..count {
        let truncated = || Error::TruncatedPayload(format!("file ends inside example {e} of {count}"));
        let id = r
            .string()
            .ok_or_else(truncated)?
            .map_err(|_| Error::CorruptHeader(format!("example {e} id is not UTF-8")))?
            .to_owned();
        let loss_value = r.f32().ok_or_else(truncated)?;
        let token_count = r.u32().ok_or_else(truncated)?;
        let raw = r.take(total_dim * 4).ok_or_else(|| {
            Error::TruncatedPayload(format!("example `{id}` ({e} of {count}) payload shorter than {} bytes", total_dim * 4))
        })?;
        let mut floats = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let per_layer = layers.iter().map(|l| floats.by_ref().take(l.dim).collect()).collect();
        examples.push(ExampleGradient { example_id: id, per_layer, loss_value, token_count });
    }
    if r.remaining() != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} bytes remain after the declared payload",
            r.remaining()
        )));
    }
    GradientManifest::new(meta.split, layers, examples, meta.model_tag.clone(), meta.created_at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layers(dims: &[usize]) -> Vec<LayerSpec> {
        dims.iter().enumerate().map(|(i, &d)| LayerSpec::new(i, format!("layer{i}"), d)).collect()
    }

    fn random_manifest(n: usize, dims: &[usize], seed: u64) -> GradientManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| {
                let per_layer = dims.iter().map(|&d| (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect();
                ExampleGradient::new(format!("ex{i:03}"), per_layer, rng.random_range(0.0f32..3.0), 1 + i as u32)
            })
            .collect();
        GradientManifest::new(Split::Train, layers(dims), examples, "tag", 17).unwrap()
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.in2g");
        let m = GradientManifest::new(Split::Validation, layers(&[4]), vec![], "t", 0).unwrap();
        let bytes = write_manifest(&m, &path).unwrap();
        // magic + version + count + (name len + "layer0" + dim) + example count
        assert_eq!(bytes, 4 + 2 + 2 + (2 + 6 + 4) + 8);
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn random_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.in2g");
        let m = random_manifest(3, &[4, 6], 11);
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.examples().iter().zip(m.examples()) {
            for (x, y) in a.per_layer.iter().flatten().zip(b.per_layer.iter().flatten()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn nan_entry_is_rejected_with_example_name() {
        let mut ex = ExampleGradient::new("bad-one", vec![vec![0.0, 1.0, 2.0, 3.0]], 0.5, 1);
        ex.per_layer[0][2] = f32::NAN;
        let err = GradientManifest::new(Split::Train, layers(&[4]), vec![ex], "t", 0).unwrap_err();
        match err {
            Error::InvariantViolation { example_id, layer_index, .. } => {
                assert_eq!(example_id, "bad-one");
                assert_eq!(layer_index, Some(0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = ExampleGradient::new("x", vec![vec![1.0]], 0.0, 1);
        let err = GradientManifest::new(Split::Train, layers(&[1]), vec![a.clone(), a], "t", 0).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation { .. }));
    }

    #[test]
    fn truncated_final_vector_detected() {
        let m = random_manifest(3, &[4, 6], 2);
        let mut bytes = encode(&m).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode(&bytes, &meta_of(&m)).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload(_)), "{err:?}");
    }

    #[test]
    fn corrupted_dim_detected() {
        let m = random_manifest(3, &[4, 6], 3);
        let mut bytes = encode(&m).unwrap();
        // magic(4) version(2) count(2) name len(2) "layer0"(6) -> dim of layer 0 at offset 16
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        bytes[16..20].copy_from_slice(&5u32.to_le_bytes());
        let err = decode(&bytes, &meta_of(&m)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err:?}");

        // Without sidecar dims the walk itself catches a single-example mismatch.
        let single = random_manifest(1, &[4, 6], 3);
        let mut meta = meta_of(&single);
        meta.layer_dims = None;
        let mut bytes = encode(&single).unwrap();
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        let err = decode(&bytes, &meta).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err:?}");
    }

    #[test]
    fn bad_magic_is_corrupt_header() {
        let m = random_manifest(1, &[2], 4);
        let mut bytes = encode(&m).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, &meta_of(&m)), Err(Error::CorruptHeader(_))));
        assert!(matches!(decode(&bytes[..3], &meta_of(&m)), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn missing_file_is_missing_path() {
        let err = read_manifest(Path::new("/nonexistent/nowhere.in2g")).unwrap_err();
        assert!(matches!(err, Error::MissingPath(_)));
    }

    #[test]
    fn restrict_layers_cases() {
        let m = random_manifest(4, &[4, 6], 5);
        assert_eq!(restrict_layers(&m, 2).unwrap(), m);
        let r = restrict_layers(&m, 1).unwrap();
        assert_eq!(r.layer_count(), 1);
        for (a, b) in r.examples().iter().zip(m.examples()) {
            assert_eq!(a.per_layer.len(), 1);
            assert_eq!(a.per_layer[0], b.per_layer[0]);
        }
        assert!(matches!(restrict_layers(&m, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(restrict_layers(&m, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn select_layers_renumbers() {
        let m = random_manifest(2, &[4, 6, 3], 6);
        let s = select_layers(&m, &[2, 0]).unwrap();
        assert_eq!(s.layer_dims(), vec![3, 4]);
        assert_eq!(s.layers()[0].layer_index, 0);
        assert_eq!(s.examples()[1].per_layer[0], m.examples()[1].per_layer[2]);
    }

    #[test]
    fn mean_gradient_cases() {
        let single = random_manifest(1, &[3], 7);
        let mean = mean_gradient(&single).unwrap();
        assert_eq!(mean.per_layer, single.examples()[0].per_layer);

        let v = vec![1.5f32, -2.0, 0.25];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let m = GradientManifest::new(
            Split::Train,
            layers(&[3]),
            vec![ExampleGradient::new("a", vec![v], 1.0, 1), ExampleGradient::new("b", vec![neg], 1.0, 1)],
            "t",
            0,
        )
        .unwrap();
        assert_eq!(mean_gradient(&m).unwrap().per_layer, vec![vec![0.0; 3]]);

        let m = GradientManifest::new(
            Split::Train,
            layers(&[2]),
            vec![
                ExampleGradient::new("a", vec![vec![1.0, 0.0]], 1.0, 3),
                ExampleGradient::new("b", vec![vec![0.0, 1.0]], 2.0, 1),
                ExampleGradient::new("c", vec![vec![2.0, 2.0]], 3.0, 1),
            ],
            "t",
            0,
        )
        .unwrap();
        let mean = mean_gradient(&m).unwrap();
        assert_eq!(mean.per_layer, vec![vec![1.0, 1.0]]);
        assert_eq!(mean.loss_value, 2.0);
        assert_eq!(mean.token_count, 1);

        let empty = GradientManifest::new(Split::Train, layers(&[2]), vec![], "t", 0).unwrap();
        assert!(matches!(mean_gradient(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn read_counter_tracks_example_access() {
        let m = random_manifest(2, &[2], 8);
        assert_eq!(m.example_reads(), 0);
        let _ = m.len();
        let _ = m.layer_dims();
        assert_eq!(m.example_reads(), 0);
        let _ = m.examples();
        assert_eq!(m.example_reads(), 1);
    }
}
