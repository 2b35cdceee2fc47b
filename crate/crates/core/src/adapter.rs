//! Low-rank adapter checkpoints: pairing `B`/`A` factors by name, composing
//! per-layer deltas `ΔW = B·A`, and checking that two delta sets line up.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::matrix::{Matrix, Real};
use crate::store::{StoreError, TensorEntry, TensorStore};

/// Metadata key recording how factors are laid out in a checkpoint written
/// by this crate. Honoured by [`OrientationPolicy::Auto`].
pub const ORIENTATION_KEY: &str = "extsub.orientation";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("layer {key:?} has a {present} factor but no matching {missing} factor")]
    UnpairedFactor { key: String, present: &'static str, missing: &'static str },
    #[error("layer {key:?}: factor shapes B {b:?} and A {a:?} have no common inner dimension")]
    RankMismatch { key: String, b: (usize, usize), a: (usize, usize) },
    #[error(
        "layer {key:?}: square factors B {b:?} / A {a:?} fit both the standard and transposed layout; pass an explicit orientation"
    )]
    AmbiguousOrientation { key: String, b: (usize, usize), a: (usize, usize) },
    #[error("layer key sets differ: missing {missing:?}, extra {extra:?}")]
    KeySetMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("layer {key:?}: shape {left:?} does not match {right:?}")]
    ShapeMismatch { key: String, left: (usize, usize), right: (usize, usize) },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Name suffixes that identify the two factors of a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixConvention {
    pub b_suffix: String,
    pub a_suffix: String,
}

impl Default for SuffixConvention {
    fn default() -> Self {
        Self { b_suffix: ".lora_B.weight".into(), a_suffix: ".lora_A.weight".into() }
    }
}

impl SuffixConvention {
    pub fn new(b_suffix: impl Into<String>, a_suffix: impl Into<String>) -> Self {
        Self { b_suffix: b_suffix.into(), a_suffix: a_suffix.into() }
    }

    pub fn b_name(&self, key: &str) -> String {
        format!("{key}{}", self.b_suffix)
    }

    pub fn a_name(&self, key: &str) -> String {
        format!("{key}{}", self.a_suffix)
    }
}

/// How factors are stored on disk.
///
/// `Standard`: B is `d×r`, A is `r×k`. `Transposed`: B is stored as `r×d`
/// and A as `k×r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Standard,
    Transposed,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Standard => "standard",
            Orientation::Transposed => "transposed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Orientation::Standard),
            "transposed" => Some(Orientation::Transposed),
            _ => None,
        }
    }
}

/// Orientation selection when assembling a checkpoint.
///
/// `Auto` uses the checkpoint's orientation metadata when present, otherwise
/// the layout whose inner dimension is the smallest one (`r <= min(d, k)`).
/// That only fails for fully square factors, which are reported as
/// ambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrientationPolicy {
    #[default]
    Auto,
    Fixed(Orientation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    key: String,
    b: TensorEntry,
    a: TensorEntry,
    orientation: Orientation,
    d: usize,
    r: usize,
    k: usize,
}

impl AdapterLayer {
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// `(d, k)`, the shape of the composed delta.
    pub fn delta_shape(&self) -> (usize, usize) {
        (self.d, self.k)
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Raw factor entries as stored.
    pub fn b_entry(&self) -> &TensorEntry {
        &self.b
    }

    pub fn a_entry(&self) -> &TensorEntry {
        &self.a
    }

    /// `B` as a `d×r` matrix.
    pub fn b<T: Real>(&self) -> Result<Matrix<T>, AdapterError> {
        let m = self.b.to_compute::<T>()?;
        Ok(match self.orientation {
            Orientation::Standard => m,
            Orientation::Transposed => m.transpose(),
        })
    }

    /// `A` as an `r×k` matrix.
    pub fn a<T: Real>(&self) -> Result<Matrix<T>, AdapterError> {
        let m = self.a.to_compute::<T>()?;
        Ok(match self.orientation {
            Orientation::Standard => m,
            Orientation::Transposed => m.transpose(),
        })
    }

    /// `ΔW = B·A`.
    pub fn delta<T: Real>(&self) -> Result<Matrix<T>, AdapterError> {
        Ok(self.b::<T>()?.matmul(&self.a::<T>()?))
    }
}

/// Paired adapter layers plus every tensor that is not a factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    convention: SuffixConvention,
    layers: BTreeMap<String, AdapterLayer>,
    passthrough: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
}

impl AdapterModel {
    pub fn convention(&self) -> &SuffixConvention {
        &self.convention
    }

    pub fn layers(&self) -> &BTreeMap<String, AdapterLayer> {
        &self.layers
    }

    pub fn layer(&self, key: &str) -> Option<&AdapterLayer> {
        self.layers.get(key)
    }

    pub fn passthrough(&self) -> &BTreeMap<String, TensorEntry> {
        &self.passthrough
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }
}

fn factor_shape(e: &TensorEntry) -> Result<(usize, usize), AdapterError> {
    match e.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(StoreError::ShapeUnsupported { name: e.name().to_string(), rank: s.len() }.into()),
    }
}

fn resolve_orientation(
    key: &str,
    b: (usize, usize),
    a: (usize, usize),
    policy: OrientationPolicy,
    hint: Option<Orientation>,
) -> Result<Orientation, AdapterError> {
    let standard_fits = b.1 == a.0;
    let transposed_fits = b.0 == a.1;
    let mismatch = || AdapterError::RankMismatch { key: key.to_string(), b, a };
    let wanted = match policy {
        OrientationPolicy::Fixed(o) => Some(o),
        OrientationPolicy::Auto => hint,
    };
    match wanted {
        Some(Orientation::Standard) => return if standard_fits { Ok(Orientation::Standard) } else { Err(mismatch()) },
        Some(Orientation::Transposed) => {
            return if transposed_fits { Ok(Orientation::Transposed) } else { Err(mismatch()) }
        }
        None => {}
    }
    match (standard_fits, transposed_fits) {
        (false, false) => Err(mismatch()),
        (true, false) => Ok(Orientation::Standard),
        (false, true) => Ok(Orientation::Transposed),
        (true, true) => {
            // Both fit, so b = (n, m) and a = (m, n). Standard has rank m,
            // transposed has rank n; prefer the one with r <= min(d, k).
            let (n, m) = b;
            match m.cmp(&n) {
                std::cmp::Ordering::Less => Ok(Orientation::Standard),
                std::cmp::Ordering::Greater => Ok(Orientation::Transposed),
                std::cmp::Ordering::Equal => {
                    Err(AdapterError::AmbiguousOrientation { key: key.to_string(), b, a })
                }
            }
        }
    }
}

/// Pairs factors by shared prefix; everything else is kept as passthrough.
pub fn assemble(
    store: &TensorStore,
    convention: &SuffixConvention,
    policy: OrientationPolicy,
) -> Result<AdapterModel, AdapterError> {
    let hint = store.metadata().get(ORIENTATION_KEY).and_then(|s| Orientation::parse(s));
    let mut b_factors = BTreeMap::new();
    let mut a_factors = BTreeMap::new();
    let mut passthrough = BTreeMap::new();
    for entry in store.entries() {
        let name = entry.name();
        if let Some(key) = name.strip_suffix(&convention.b_suffix) {
            b_factors.insert(key.to_string(), entry);
        } else if let Some(key) = name.strip_suffix(&convention.a_suffix) {
            a_factors.insert(key.to_string(), entry);
        } else {
            passthrough.insert(name.to_string(), entry.clone());
        }
    }

    if let Some(key) = a_factors.keys().find(|k| !b_factors.contains_key(*k)) {
        return Err(AdapterError::UnpairedFactor { key: key.clone(), present: "A", missing: "B" });
    }
    let mut layers = BTreeMap::new();
    for (key, b) in b_factors {
        let Some(a) = a_factors.remove(&key) else {
            return Err(AdapterError::UnpairedFactor { key, present: "B", missing: "A" });
        };
        let (bs, as_) = (factor_shape(b)?, factor_shape(a)?);
        let orientation = resolve_orientation(&key, bs, as_, policy, hint)?;
        let (d, r, k) = match orientation {
            Orientation::Standard => (bs.0, bs.1, as_.1),
            Orientation::Transposed => (bs.1, bs.0, as_.0),
        };
        layers.insert(
            key.clone(),
            AdapterLayer { key, b: b.clone(), a: a.clone(), orientation, d, r, k },
        );
    }
    Ok(AdapterModel {
        convention: convention.clone(),
        layers,
        passthrough,
        metadata: store.metadata().clone(),
    })
}

/// Composed per-layer deltas `ΔW` (each `d×k`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaModel<T> {
    deltas: BTreeMap<String, Matrix<T>>,
}

impl<T: Real> DeltaModel<T> {
    pub fn new() -> Self {
        Self { deltas: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, delta: Matrix<T>) -> Option<Matrix<T>> {
        self.deltas.insert(key.into(), delta)
    }

    pub fn get(&self, key: &str) -> Option<&Matrix<T>> {
        self.deltas.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.deltas.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.deltas.keys()
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Applies `f` to every layer, keeping keys.
    pub fn map(&self, mut f: impl FnMut(&str, &Matrix<T>) -> Matrix<T>) -> Self {
        Self { deltas: self.deltas.iter().map(|(k, m)| (k.clone(), f(k, m))).collect() }
    }

    /// Bitwise equality of every layer.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.deltas.len() == other.deltas.len()
            && self
                .deltas
                .iter()
                .zip(&other.deltas)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

impl<T: Real> FromIterator<(String, Matrix<T>)> for DeltaModel<T> {
    fn from_iter<I: IntoIterator<Item = (String, Matrix<T>)>>(iter: I) -> Self {
        Self { deltas: iter.into_iter().collect() }
    }
}

/// `ΔW = B·A` for every layer, in the compute precision `T`.
pub fn compose_delta<T: Real>(model: &AdapterModel) -> Result<DeltaModel<T>, AdapterError> {
    model
        .layers
        .iter()
        .map(|(key, layer)| Ok((key.clone(), layer.delta::<T>()?)))
        .collect()
}

/// Succeeds when both delta sets have the same keys and per-key shapes.
/// Adapter ranks are irrelevant once composed.
pub fn check_compatible<T: Real>(a: &DeltaModel<T>, b: &DeltaModel<T>) -> Result<(), AdapterError> {
    let missing: Vec<String> = a.keys().filter(|k| b.get(k).is_none()).cloned().collect();
    let extra: Vec<String> = b.keys().filter(|k| a.get(k).is_none()).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(AdapterError::KeySetMismatch { missing, extra });
    }
    for (key, left) in a.iter() {
        let right = &b.deltas[key];
        if left.shape() != right.shape() {
            return Err(AdapterError::ShapeMismatch {
                key: key.clone(),
                left: left.shape(),
                right: right.shape(),
            });
        }
    }
    Ok(())
}
