//! Extraction-before-subtraction.
//!
//! Every row `v⁻` of an anti-expert delta is split against the matching
//! expert row `v⁺`:
//!
//! ```text
//! g        = v⁺/|v⁺| + v⁻/|v⁻|          general direction (bisector)
//! ĝ        = g/|g|
//! general  = (v⁻·ĝ) ĝ                    shared capability
//! Ext(v⁻)  = v⁻ − general                deficiency
//! v′       = v⁺ − λ·Ext(v⁻)
//! ```
//!
//! Direct subtraction `θ⁺ − λθ⁻` is provided alongside as the baseline.
//!
//! Rows whose norms fall below `eps` are flagged instead of normalized:
//! a zero anti-expert or zero expert row yields a zero deficiency, and
//! anti-parallel rows (where the two unit vectors cancel) yield the whole
//! anti-expert row as deficiency.
//!
//! Reductions within a row run sequentially in index order; rows are
//! processed in parallel, so outputs do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{check_compatible, AdapterError, DeltaModel};
use crate::matrix::{dot, norm, Matrix, Real};

pub const HIST_BINS: usize = 16;

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    ZeroExpert,
    ZeroAnti,
    AntiParallel,
}

/// Result of [`general_direction`].
#[derive(Debug, Clone, PartialEq)]
pub enum Direction<T> {
    General(Vec<T>),
    Degenerate(Degeneracy),
}

/// Unit-vector sum `v⁺/|v⁺| + v⁻/|v⁻|`.
pub fn general_direction<T: Real>(v_plus: &[T], v_minus: &[T], eps: T) -> Direction<T> {
    assert_eq!(v_plus.len(), v_minus.len(), "row lengths differ");
    let (np, nm) = (norm(v_plus), norm(v_minus));
    if nm < eps {
        return Direction::Degenerate(Degeneracy::ZeroAnti);
    }
    if np < eps {
        return Direction::Degenerate(Degeneracy::ZeroExpert);
    }
    let g: Vec<T> = v_plus.iter().zip(v_minus).map(|(&p, &m)| p / np + m / nm).collect();
    if norm(&g) < eps {
        return Direction::Degenerate(Degeneracy::AntiParallel);
    }
    Direction::General(g)
}

/// Per-row summary used by the reports.
#[derive(Debug, Clone, Copy)]
struct RowOutcome {
    degenerate: Degeneracy,
    norm_plus: f64,
    norm_minus: f64,
    cosine: Option<f64>,
    deficiency_fraction: Option<f64>,
}

/// Writes `Ext(v⁻)` into `deficiency`, using `g_hat` as scratch (it holds ĝ
/// on return when the row is not degenerate).
fn decompose_into<T: Real>(
    v_plus: &[T],
    v_minus: &[T],
    eps: T,
    g_hat: &mut [T],
    deficiency: &mut [T],
) -> RowOutcome {
    let (np, nm) = (norm(v_plus), norm(v_minus));
    let cosine = (np >= eps && nm >= eps).then(|| {
        (dot(v_plus, v_minus) / (np * nm)).as_f64().clamp(-1.0, 1.0)
    });
    let mut outcome = RowOutcome {
        degenerate: Degeneracy::None,
        norm_plus: np.as_f64(),
        norm_minus: nm.as_f64(),
        cosine,
        deficiency_fraction: None,
    };

    if nm < eps || np < eps {
        outcome.degenerate = if nm < eps { Degeneracy::ZeroAnti } else { Degeneracy::ZeroExpert };
        deficiency.fill(T::zero());
        if nm >= eps {
            outcome.deficiency_fraction = Some(0.0);
        }
        return outcome;
    }

    for ((g, &p), &m) in g_hat.iter_mut().zip(v_plus).zip(v_minus) {
        *g = p / np + m / nm;
    }
    let ng = norm(g_hat);
    if ng < eps {
        outcome.degenerate = Degeneracy::AntiParallel;
        deficiency.copy_from_slice(v_minus);
        outcome.deficiency_fraction = Some(1.0);
        return outcome;
    }
    for g in g_hat.iter_mut() {
        *g = *g / ng;
    }
    let s = dot(v_minus, g_hat);
    for ((d, &m), &g) in deficiency.iter_mut().zip(v_minus).zip(g_hat.iter()) {
        *d = m - s * g;
    }
    outcome.deficiency_fraction = Some((norm(deficiency) / nm).as_f64().clamp(0.0, 1.0));
    outcome
}

/// Full decomposition of one anti-expert row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGeometry<T> {
    pub v_plus: Vec<T>,
    pub v_minus: Vec<T>,
    /// Unnormalized general direction; zero when a norm is degenerate.
    pub g: Vec<T>,
    pub general_part: Vec<T>,
    pub deficiency: Vec<T>,
    pub degenerate: Degeneracy,
}

pub fn extract_row<T: Real>(v_plus: &[T], v_minus: &[T], eps: T) -> RowGeometry<T> {
    assert_eq!(v_plus.len(), v_minus.len(), "row lengths differ");
    let k = v_plus.len();
    let mut scratch = vec![T::zero(); k];
    let mut deficiency = vec![T::zero(); k];
    let outcome = decompose_into(v_plus, v_minus, eps, &mut scratch, &mut deficiency);

    let g = match general_direction(v_plus, v_minus, eps) {
        Direction::General(g) => g,
        Direction::Degenerate(Degeneracy::AntiParallel) => {
            let (np, nm) = (norm(v_plus), norm(v_minus));
            v_plus.iter().zip(v_minus).map(|(&p, &m)| p / np + m / nm).collect()
        }
        Direction::Degenerate(_) => vec![T::zero(); k],
    };
    let general_part = match outcome.degenerate {
        // s·ĝ, the value subtracted from v⁻ above.
        Degeneracy::None => {
            let s = dot(v_minus, &scratch);
            scratch.iter().map(|&g| s * g).collect()
        }
        _ => v_minus.iter().zip(&deficiency).map(|(&m, &d)| m - d).collect(),
    };
    RowGeometry {
        v_plus: v_plus.to_vec(),
        v_minus: v_minus.to_vec(),
        g,
        general_part,
        deficiency,
        degenerate: outcome.degenerate,
    }
}

/// `v⁺ − λ·Ext(v⁻)`. Returns `v⁺` unchanged when `λ = 0`.
pub fn ext_sub_row<T: Real>(v_plus: &[T], v_minus: &[T], lambda: T, eps: T) -> Vec<T> {
    if lambda == T::zero() {
        return v_plus.to_vec();
    }
    let deficiency = extract_row(v_plus, v_minus, eps).deficiency;
    v_plus.iter().zip(&deficiency).map(|(&p, &d)| p - lambda * d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    #[default]
    Ext,
}

impl Mode {
    /// λ used when none is given: 0.2 for direct subtraction, 1.0 for Ext-Sub.
    pub fn default_lambda(self) -> f64 {
        match self {
            Mode::Direct => 0.2,
            Mode::Ext => 1.0,
        }
    }
}

/// Which axis of `ΔW` supplies the vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VectorAxis {
    #[default]
    Rows,
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnConfig<T> {
    pub lambda: T,
    pub mode: Mode,
    pub eps: T,
    pub axis: VectorAxis,
}

impl<T: Real> Default for UnlearnConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::one(),
            mode: Mode::Ext,
            eps: T::DEFAULT_EPS,
            axis: VectorAxis::Rows,
        }
    }
}

impl<T: Real> UnlearnConfig<T> {
    pub fn new(mode: Mode, lambda: T) -> Self {
        Self { lambda, mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), UnlearnError> {
        if !self.lambda.is_finite() || self.lambda < T::zero() {
            return Err(UnlearnError::InvalidConfig(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !self.eps.is_finite() || self.eps <= T::zero() {
            return Err(UnlearnError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DegenerateCounts {
    pub zero_expert: u64,
    pub zero_anti: u64,
    pub anti_parallel: u64,
}

impl DegenerateCounts {
    pub fn total(&self) -> u64 {
        self.zero_expert + self.zero_anti + self.anti_parallel
    }

    fn record(&mut self, d: Degeneracy) {
        match d {
            Degeneracy::None => {}
            Degeneracy::ZeroExpert => self.zero_expert += 1,
            Degeneracy::ZeroAnti => self.zero_anti += 1,
            Degeneracy::AntiParallel => self.anti_parallel += 1,
        }
    }

    fn merge(&mut self, other: &Self) {
        self.zero_expert += other.zero_expert;
        self.zero_anti += other.zero_anti;
        self.anti_parallel += other.anti_parallel;
    }
}

/// Per-layer geometry of an expert/anti-expert pair.
///
/// `cos_hist` bins cos(v⁺, v⁻) over [-1, 1]; rows with a zero-norm side are
/// left out. `defrac_hist` bins |Ext(v⁻)|/|v⁻| over [0, 1]; zero anti-expert
/// rows are left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGeometry {
    pub rows: u64,
    pub cos_hist: [u64; HIST_BINS],
    pub defrac_hist: [u64; HIST_BINS],
    pub mean_norm_plus: f64,
    pub mean_norm_minus: f64,
    pub degenerate: DegenerateCounts,
}

fn bin(x: f64, lo: f64, hi: f64) -> usize {
    let t = ((x - lo) / (hi - lo) * HIST_BINS as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(HIST_BINS - 1)
    }
}

impl LayerGeometry {
    fn from_rows(outcomes: &[RowOutcome]) -> Self {
        let mut g = LayerGeometry {
            rows: outcomes.len() as u64,
            cos_hist: [0; HIST_BINS],
            defrac_hist: [0; HIST_BINS],
            mean_norm_plus: 0.0,
            mean_norm_minus: 0.0,
            degenerate: DegenerateCounts::default(),
        };
        let (mut sum_plus, mut sum_minus) = (0.0, 0.0);
        for o in outcomes {
            sum_plus += o.norm_plus;
            sum_minus += o.norm_minus;
            g.degenerate.record(o.degenerate);
            if let Some(c) = o.cosine {
                g.cos_hist[bin(c, -1.0, 1.0)] += 1;
            }
            if let Some(f) = o.deficiency_fraction {
                g.defrac_hist[bin(f, 0.0, 1.0)] += 1;
            }
        }
        if !outcomes.is_empty() {
            g.mean_norm_plus = sum_plus / outcomes.len() as f64;
            g.mean_norm_minus = sum_minus / outcomes.len() as f64;
        }
        g
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GeometryReport {
    pub layers: BTreeMap<String, LayerGeometry>,
}

impl GeometryReport {
    pub fn degenerate_totals(&self) -> DegenerateCounts {
        let mut total = DegenerateCounts::default();
        for layer in self.layers.values() {
            total.merge(&layer.degenerate);
        }
        total
    }

    pub fn total_rows(&self) -> u64 {
        self.layers.values().map(|l| l.rows).sum()
    }
}

fn oriented<T: Real>(m: &Matrix<T>, axis: VectorAxis) -> std::borrow::Cow<'_, Matrix<T>> {
    match axis {
        VectorAxis::Rows => std::borrow::Cow::Borrowed(m),
        VectorAxis::Columns => std::borrow::Cow::Owned(m.transpose()),
    }
}

/// Deficiency matrix of one layer plus its geometry.
fn extract_layer<T: Real>(
    plus: &Matrix<T>,
    minus: &Matrix<T>,
    eps: T,
    axis: VectorAxis,
) -> (Matrix<T>, LayerGeometry) {
    let plus = oriented(plus, axis);
    let minus = oriented(minus, axis);
    let (d, k) = plus.shape();
    let mut deficiency = Matrix::zeros(d, k);

    let outcomes: Vec<RowOutcome> = if k == 0 {
        (0..d)
            .map(|_| decompose_into::<T>(&[], &[], eps, &mut [], &mut []))
            .collect()
    } else {
        deficiency
            .as_mut_slice()
            .par_chunks_mut(k)
            .enumerate()
            .map_init(
                || vec![T::zero(); k],
                |scratch, (i, out)| decompose_into(plus.row(i), minus.row(i), eps, scratch, out),
            )
            .collect()
    };
    let deficiency = match axis {
        VectorAxis::Rows => deficiency,
        VectorAxis::Columns => deficiency.transpose(),
    };
    (deficiency, LayerGeometry::from_rows(&outcomes))
}

/// `Ext_{θ⁺}(θ⁻)` for every layer, with the accompanying geometry report.
pub fn extract<T: Real>(
    base: &DeltaModel<T>,
    neg: &DeltaModel<T>,
    eps: T,
    axis: VectorAxis,
) -> Result<(DeltaModel<T>, GeometryReport), UnlearnError> {
    if eps.is_nan() || eps <= T::zero() {
        return Err(UnlearnError::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    check_compatible(base, neg)?;
    let mut deficiencies = DeltaModel::new();
    let mut report = GeometryReport::default();
    for (key, plus) in base.iter() {
        let minus = neg.get(key).expect("checked compatible");
        let (def, geometry) = extract_layer(plus, minus, eps, axis);
        deficiencies.insert(key.clone(), def);
        report.layers.insert(key.clone(), geometry);
    }
    Ok((deficiencies, report))
}

/// Geometry diagnostics without producing an output model.
pub fn geometry_stats<T: Real>(
    base: &DeltaModel<T>,
    neg: &DeltaModel<T>,
    eps: T,
) -> Result<GeometryReport, UnlearnError> {
    extract(base, neg, eps, VectorAxis::Rows).map(|(_, report)| report)
}

/// `θ⁺ − λθ⁻` elementwise. `λ = 0` returns `base` bit-for-bit.
pub fn direct_subtract<T: Real>(
    base: &DeltaModel<T>,
    neg: &DeltaModel<T>,
    lambda: T,
) -> Result<DeltaModel<T>, UnlearnError> {
    check_compatible(base, neg)?;
    if lambda == T::zero() {
        return Ok(base.clone());
    }
    Ok(base.map(|key, m| m.sub_scaled(lambda, neg.get(key).expect("checked compatible"))))
}

/// `θ⁺ + w·θ` elementwise.
pub fn add<T: Real>(
    base: &DeltaModel<T>,
    other: &DeltaModel<T>,
    weight: T,
) -> Result<DeltaModel<T>, UnlearnError> {
    check_compatible(base, other)?;
    Ok(base.map(|key, m| m.axpy(weight, other.get(key).expect("checked compatible"))))
}

/// `θ⁺ − λ·Ext(θ⁻)` with its geometry report.
///
/// Computed as extraction followed by [`direct_subtract`], so subtracting a
/// previously extracted deficiency reproduces this result exactly.
pub fn ext_sub<T: Real>(
    base: &DeltaModel<T>,
    neg: &DeltaModel<T>,
    cfg: &UnlearnConfig<T>,
) -> Result<(DeltaModel<T>, GeometryReport), UnlearnError> {
    cfg.validate()?;
    let (deficiency, report) = extract(base, neg, cfg.eps, cfg.axis)?;
    Ok((direct_subtract(base, &deficiency, cfg.lambda)?, report))
}

/// Dispatches on `cfg.mode`. Direct mode produces no geometry report.
pub fn unlearn<T: Real>(
    base: &DeltaModel<T>,
    neg: &DeltaModel<T>,
    cfg: &UnlearnConfig<T>,
) -> Result<(DeltaModel<T>, Option<GeometryReport>), UnlearnError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Direct => Ok((direct_subtract(base, neg, cfg.lambda)?, None)),
        Mode::Ext => ext_sub(base, neg, cfg).map(|(m, r)| (m, Some(r))),
    }
}
