//! Writing result deltas back out as adapter checkpoints.
//!
//! Layers come out in the template model's naming convention, orientation
//! and (by default) dtypes, so results are drop-in replacements. A layer
//! whose delta is bit-identical to the reference keeps its original factor
//! tensors. Other layers are re-factorized by truncated SVD or stored at
//! full rank with an identity factor. Passthrough tensors are copied
//! verbatim.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{assemble, AdapterLayer, AdapterModel, DeltaModel, Orientation, OrientationPolicy, ORIENTATION_KEY};
use crate::lowrank::{effective_rank, svd_truncate};
use crate::matrix::{Matrix, Real};
use crate::store::{DType, TensorEntry, TensorStore};
use crate::Error;

/// Metadata key carrying the LoRA scaling numerator.
pub const ALPHA_KEY: &str = "lora_alpha";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorStorage {
    /// Truncate to `rank` (default: each template layer's own rank). With
    /// `max_error`, layers whose truncation error exceeds it are stored full.
    Truncate { rank: Option<usize>, max_error: Option<f64> },
    Full,
}

impl Default for FactorStorage {
    fn default() -> Self {
        FactorStorage::Truncate { rank: None, max_error: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutputOptions {
    pub storage: FactorStorage,
    /// `None` keeps each factor's input dtype.
    pub out_dtype: Option<DType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStorage {
    Unchanged,
    Truncated,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutput {
    pub storage: LayerStorage,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_frobenius_error: Option<f64>,
    #[serde(rename = "effective_rank_at_1e-6", skip_serializing_if = "Option::is_none")]
    pub effective_rank: Option<usize>,
}

fn convert(entry: &TensorEntry, dtype: Option<DType>) -> TensorEntry {
    match dtype {
        Some(dt) if dt != entry.dtype() => {
            TensorEntry::from_f64(entry.name(), entry.shape().to_vec(), &entry.to_f64_vec(), dt)
                .expect("same shape and length")
        }
        _ => entry.clone(),
    }
}

fn factor_entries<T: Real>(
    model: &AdapterModel,
    layer: &AdapterLayer,
    b: &Matrix<T>,
    a: &Matrix<T>,
    out_dtype: Option<DType>,
) -> [TensorEntry; 2] {
    let conv = model.convention();
    let b_dtype = out_dtype.unwrap_or(layer.b_entry().dtype());
    let a_dtype = out_dtype.unwrap_or(layer.a_entry().dtype());
    let key = layer.key();
    match layer.orientation() {
        Orientation::Standard => [
            TensorEntry::from_matrix(conv.b_name(key), b, b_dtype),
            TensorEntry::from_matrix(conv.a_name(key), a, a_dtype),
        ],
        Orientation::Transposed => [
            TensorEntry::from_matrix(conv.b_name(key), &b.transpose(), b_dtype),
            TensorEntry::from_matrix(conv.a_name(key), &a.transpose(), a_dtype),
        ],
    }
}

/// `ΔW` as exact factors of rank `min(d, k)`: `I·ΔW` or `ΔW·I`.
fn full_factors<T: Real>(delta: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let (d, k) = delta.shape();
    if d <= k {
        (Matrix::identity(d), delta.clone())
    } else {
        (delta.clone(), Matrix::identity(k))
    }
}

fn write_layer<T: Real>(
    model: &AdapterModel,
    layer: &AdapterLayer,
    delta: &Matrix<T>,
    reference: Option<&Matrix<T>>,
    opts: &OutputOptions,
) -> Result<(Vec<TensorEntry>, LayerOutput), Error> {
    if reference.is_some_and(|r| r.bit_eq(delta)) {
        let entries = vec![convert(layer.b_entry(), opts.out_dtype), convert(layer.a_entry(), opts.out_dtype)];
        let out = LayerOutput {
            storage: LayerStorage::Unchanged,
            rank: layer.rank(),
            target_rank: None,
            rel_frobenius_error: None,
            effective_rank: None,
        };
        return Ok((entries, out));
    }

    let (d, k) = delta.shape();
    let full = |effective: usize| {
        let (b, a) = full_factors(delta);
        let out = LayerOutput {
            storage: LayerStorage::Full,
            rank: d.min(k),
            target_rank: None,
            rel_frobenius_error: Some(0.0),
            effective_rank: Some(effective),
        };
        (factor_entries(model, layer, &b, &a, opts.out_dtype).to_vec(), out)
    };
    match opts.storage {
        FactorStorage::Full => Ok(full(effective_rank(delta, 1e-6))),
        FactorStorage::Truncate { rank, max_error } => {
            let target = match rank {
                Some(r) => r,
                None if layer.rank() == 0 => return Ok(full(0)),
                None => layer.rank().min(d.min(k)),
            };
            let t = svd_truncate(delta, target)?;
            let summary = t.summary();
            if max_error.is_some_and(|m| t.rel_frobenius_error > m) {
                return Ok(full(summary.effective_rank));
            }
            let out = LayerOutput {
                storage: LayerStorage::Truncated,
                rank: target,
                target_rank: Some(target),
                rel_frobenius_error: Some(summary.rel_frobenius_error),
                effective_rank: Some(summary.effective_rank),
            };
            Ok((factor_entries(model, layer, &t.b, &t.a, opts.out_dtype).to_vec(), out))
        }
    }
}

/// Builds an output store for `result` laid out like `template`.
///
/// `reference` is the delta set the result is compared against to detect
/// unchanged layers (normally the template's own composed deltas).
pub fn build_store<T: Real>(
    template: &AdapterModel,
    result: &DeltaModel<T>,
    reference: Option<&DeltaModel<T>>,
    opts: &OutputOptions,
) -> Result<(TensorStore, BTreeMap<String, LayerOutput>), Error> {
    let layers: Vec<(&String, &AdapterLayer)> = template.layers().iter().collect();
    let written: Vec<Result<(Vec<TensorEntry>, LayerOutput), Error>> = layers
        .par_iter()
        .map(|(key, layer)| {
            let delta = result.get(key).ok_or_else(|| {
                crate::adapter::AdapterError::KeySetMismatch { missing: vec![(*key).clone()], extra: vec![] }
            })?;
            write_layer(template, layer, delta, reference.and_then(|r| r.get(key)), opts)
        })
        .collect();

    let mut store = TensorStore::new();
    let mut outputs = BTreeMap::new();
    for ((key, _), res) in layers.iter().zip(written) {
        let (entries, out) = res?;
        for e in entries {
            store.insert(e);
        }
        outputs.insert((*key).clone(), out);
    }
    for entry in template.passthrough().values() {
        store.insert(entry.clone());
    }
    *store.metadata_mut() = template.metadata().clone();
    if !auto_detects(&store, template) {
        let mut orientations = template.layers().values().map(AdapterLayer::orientation);
        if let Some(first) = orientations.next() {
            if orientations.all(|o| o == first) {
                store.metadata_mut().insert(ORIENTATION_KEY.into(), first.as_str().into());
            }
        }
    }
    Ok((store, outputs))
}

/// Whether automatic orientation detection recovers the template's layout.
fn auto_detects(store: &TensorStore, template: &AdapterModel) -> bool {
    match assemble(store, template.convention(), OrientationPolicy::Auto) {
        Ok(model) => template
            .layers()
            .iter()
            .all(|(key, layer)| model.layer(key).is_some_and(|l| l.orientation() == layer.orientation())),
        Err(_) => false,
    }
}

/// Compares the scaling metadata of two modules. Returns a warning when both
/// carry differing values; the first module's value is kept.
pub fn reconcile_alpha(expert: &BTreeMap<String, String>, anti: &BTreeMap<String, String>) -> Option<String> {
    match (expert.get(ALPHA_KEY), anti.get(ALPHA_KEY)) {
        (Some(e), Some(a)) if e != a => Some(format!(
            "{ALPHA_KEY} differs between expert ({e}) and anti-expert ({a}); keeping the expert value"
        )),
        _ => None,
    }
}
