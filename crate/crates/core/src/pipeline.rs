//! Checkpoint-level operations: loading modules, running ordered unlearning
//! steps, and producing output stores with JSON-ready summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{
    assemble, check_compatible, compose_delta, AdapterModel, DeltaModel, OrientationPolicy, SuffixConvention,
};
use crate::checkpoint::{build_store, reconcile_alpha, LayerOutput, OutputOptions};
use crate::extsub::{
    direct_subtract, ext_sub, extract, DegenerateCounts, GeometryReport, Mode, UnlearnConfig, VectorAxis,
};
use crate::lowrank::{svd_truncate, TruncationSummary};
use crate::matrix::Real;
use crate::store::TensorStore;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeDType {
    F32,
    #[default]
    F64,
}

/// Settings shared by every checkpoint operation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub convention: SuffixConvention,
    pub orientation: OrientationPolicy,
    pub compute: ComputeDType,
    /// `None` uses the compute precision's default.
    pub eps: Option<f64>,
    pub axis: VectorAxis,
    pub output: OutputOptions,
    /// Extract every step's deficiency against the original expert instead
    /// of the running result.
    pub frozen_expert: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            convention: SuffixConvention::default(),
            orientation: OrientationPolicy::Auto,
            compute: ComputeDType::F64,
            eps: None,
            axis: VectorAxis::Rows,
            output: OutputOptions::default(),
            frozen_expert: false,
        }
    }
}

impl RunOptions {
    fn eps<T: Real>(&self) -> T {
        self.eps.map_or(T::DEFAULT_EPS, T::from_f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub mode: Mode,
    pub anti: PathBuf,
    pub lambda: f64,
}

impl Step {
    pub fn new(mode: Mode, anti: impl Into<PathBuf>, lambda: Option<f64>) -> Self {
        Self { mode, anti: anti.into(), lambda: lambda.unwrap_or(mode.default_lambda()) }
    }
}

pub fn validate_steps(steps: &[Step]) -> Result<(), Error> {
    if steps.is_empty() {
        return Err(Error::Pipeline("pipeline has no steps".into()));
    }
    for (i, s) in steps.iter().enumerate() {
        if !s.lambda.is_finite() || s.lambda < 0.0 {
            return Err(Error::Pipeline(format!("step {i}: lambda must be finite and >= 0, got {}", s.lambda)));
        }
    }
    Ok(())
}

pub fn load_model(path: &Path, opts: &RunOptions) -> Result<AdapterModel, Error> {
    let store = TensorStore::load(path)?;
    Ok(assemble(&store, &opts.convention, opts.orientation)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub mode: Mode,
    pub anti: String,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<DegenerateCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub layers: usize,
    pub passthrough: usize,
    pub steps: Vec<StepSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<DegenerateCounts>,
    pub output: BTreeMap<String, LayerOutput>,
    pub warnings: Vec<String>,
}

pub struct RunOutcome {
    pub store: TensorStore,
    pub summary: RunSummary,
    /// Geometry of every ext step, in step order.
    pub geometry: Vec<GeometryReport>,
}

/// Applies `steps` in order, each one's result becoming the next expert.
pub fn run_pipeline(expert: &Path, steps: &[Step], opts: &RunOptions) -> Result<RunOutcome, Error> {
    validate_steps(steps)?;
    match opts.compute {
        ComputeDType::F64 => run_pipeline_in::<f64>(expert, steps, opts),
        ComputeDType::F32 => run_pipeline_in::<f32>(expert, steps, opts),
    }
}

fn run_pipeline_in<T: Real>(expert_path: &Path, steps: &[Step], opts: &RunOptions) -> Result<RunOutcome, Error> {
    let expert = load_model(expert_path, opts)?;
    let original = compose_delta::<T>(&expert)?;
    let eps = opts.eps::<T>();

    let mut running = original.clone();
    let mut warnings = Vec::new();
    let mut step_summaries = Vec::with_capacity(steps.len());
    let mut geometry = Vec::new();
    let mut totals: Option<DegenerateCounts> = None;

    for step in steps {
        let anti = load_model(&step.anti, opts)?;
        warnings.extend(reconcile_alpha(expert.metadata(), anti.metadata()));
        let anti_deltas = compose_delta::<T>(&anti)?;
        let lambda = T::from_f64(step.lambda);
        let mut degenerate = None;
        running = match step.mode {
            Mode::Direct => direct_subtract(&running, &anti_deltas, lambda)?,
            Mode::Ext => {
                let cfg = UnlearnConfig { lambda, mode: Mode::Ext, eps, axis: opts.axis };
                let (next, report) = if opts.frozen_expert {
                    cfg.validate()?;
                    check_compatible(&running, &anti_deltas)?;
                    let (deficiency, report) = extract(&original, &anti_deltas, eps, opts.axis)?;
                    (direct_subtract(&running, &deficiency, lambda)?, report)
                } else {
                    ext_sub(&running, &anti_deltas, &cfg)?
                };
                let counts = report.degenerate_totals();
                let t = totals.get_or_insert_with(DegenerateCounts::default);
                t.zero_expert += counts.zero_expert;
                t.zero_anti += counts.zero_anti;
                t.anti_parallel += counts.anti_parallel;
                degenerate = Some(counts);
                geometry.push(report);
                next
            }
        };
        step_summaries.push(StepSummary {
            mode: step.mode,
            anti: step.anti.display().to_string(),
            lambda: step.lambda,
            degenerate,
        });
    }

    let (store, output) = build_store(&expert, &running, Some(&original), &opts.output)?;
    let summary = RunSummary {
        layers: expert.layers().len(),
        passthrough: expert.passthrough().len(),
        steps: step_summaries,
        degenerate: totals,
        output,
        warnings,
    };
    Ok(RunOutcome { store, summary, geometry })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractSummary {
    pub layers: usize,
    pub degenerate: DegenerateCounts,
    pub output: BTreeMap<String, LayerOutput>,
    pub warnings: Vec<String>,
}

/// Writes `Ext_{θ⁺}(θ⁻)` laid out like the anti-expert checkpoint.
pub fn run_extract(
    expert: &Path,
    anti: &Path,
    opts: &RunOptions,
) -> Result<(TensorStore, ExtractSummary, GeometryReport), Error> {
    match opts.compute {
        ComputeDType::F64 => run_extract_in::<f64>(expert, anti, opts),
        ComputeDType::F32 => run_extract_in::<f32>(expert, anti, opts),
    }
}

fn run_extract_in<T: Real>(
    expert_path: &Path,
    anti_path: &Path,
    opts: &RunOptions,
) -> Result<(TensorStore, ExtractSummary, GeometryReport), Error> {
    let expert = load_model(expert_path, opts)?;
    let anti = load_model(anti_path, opts)?;
    let warnings = reconcile_alpha(expert.metadata(), anti.metadata()).into_iter().collect();
    let (deficiency, report) =
        extract(&compose_delta::<T>(&expert)?, &compose_delta::<T>(&anti)?, opts.eps::<T>(), opts.axis)?;
    let (store, output) = build_store(&anti, &deficiency, None, &opts.output)?;
    let summary = ExtractSummary {
        layers: anti.layers().len(),
        degenerate: report.degenerate_totals(),
        output,
        warnings,
    };
    Ok((store, summary, report))
}

pub fn run_stats(expert: &Path, anti: &Path, opts: &RunOptions) -> Result<GeometryReport, Error> {
    fn go<T: Real>(expert: &Path, anti: &Path, opts: &RunOptions) -> Result<GeometryReport, Error> {
        let e = compose_delta::<T>(&load_model(expert, opts)?)?;
        let a = compose_delta::<T>(&load_model(anti, opts)?)?;
        Ok(extract(&e, &a, opts.eps::<T>(), opts.axis)?.1)
    }
    match opts.compute {
        ComputeDType::F64 => go::<f64>(expert, anti, opts),
        ComputeDType::F32 => go::<f32>(expert, anti, opts),
    }
}

/// Re-factorizes every layer of a checkpoint at `opts.output.storage`.
pub fn run_truncate(
    input: &Path,
    opts: &RunOptions,
) -> Result<(TensorStore, BTreeMap<String, LayerOutput>), Error> {
    fn go<T: Real>(input: &Path, opts: &RunOptions) -> Result<(TensorStore, BTreeMap<String, LayerOutput>), Error> {
        let model = load_model(input, opts)?;
        let deltas = compose_delta::<T>(&model)?;
        build_store(&model, &deltas, None, &opts.output)
    }
    match opts.compute {
        ComputeDType::F64 => go::<f64>(input, opts),
        ComputeDType::F32 => go::<f32>(input, opts),
    }
}

/// Truncation error of each layer at `rank` without writing anything.
pub fn truncation_report<T: Real>(
    deltas: &DeltaModel<T>,
    rank: usize,
) -> Result<BTreeMap<String, TruncationSummary>, Error> {
    deltas
        .iter()
        .map(|(k, m)| {
            let r = rank.min(m.rows().min(m.cols()));
            Ok((k.clone(), svd_truncate(m, r)?.summary()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub rank: usize,
    pub d: usize,
    pub k: usize,
    pub orientation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub tensors: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
    pub layers: BTreeMap<String, LayerInfo>,
    pub passthrough: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairing_error: Option<String>,
}

/// Lists a checkpoint's tensors and, when the factors pair up, its layers.
pub fn inspect(path: &Path, opts: &RunOptions) -> Result<InspectReport, Error> {
    let store = TensorStore::load(path)?;
    let tensors = store
        .entries()
        .map(|e| TensorInfo { name: e.name().into(), dtype: e.dtype().to_string(), shape: e.shape().to_vec() })
        .collect();
    let mut report = InspectReport {
        tensors,
        metadata: store.metadata().clone(),
        layers: BTreeMap::new(),
        passthrough: Vec::new(),
        pairing_error: None,
    };
    match assemble(&store, &opts.convention, opts.orientation) {
        Ok(model) => {
            report.layers = model
                .layers()
                .iter()
                .map(|(k, l)| {
                    let (d, kk) = l.delta_shape();
                    (k.clone(), LayerInfo { rank: l.rank(), d, k: kk, orientation: l.orientation().as_str().into() })
                })
                .collect();
            report.passthrough = model.passthrough().keys().cloned().collect();
        }
        Err(e) => report.pairing_error = Some(e.to_string()),
    }
    Ok(report)
}

/// JSON pipeline description.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub expert: PathBuf,
    pub steps: Vec<StepSpec>,
    pub output: PathBuf,
    #[serde(default)]
    pub truncate: Option<TruncateSpec>,
    #[serde(default)]
    pub full: bool,
    #[serde(default)]
    pub compute_dtype: Option<ComputeDType>,
    #[serde(default)]
    pub out_dtype: Option<String>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub frozen_expert: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub mode: Mode,
    pub anti: PathBuf,
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncateSpec {
    pub rank: usize,
    #[serde(default)]
    pub max_error: Option<f64>,
}

impl PipelineSpec {
    /// Parses a spec; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, Error> {
        let mut spec: PipelineSpec =
            serde_json::from_str(text).map_err(|e| Error::Pipeline(format!("invalid pipeline spec: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut spec.expert);
        resolve(&mut spec.output);
        for s in &mut spec.steps {
            resolve(&mut s.anti);
        }
        validate_steps(&spec.steps())?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| crate::store::StoreError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn steps(&self) -> Vec<Step> {
        self.steps.iter().map(|s| Step::new(s.mode, s.anti.clone(), s.lambda)).collect()
    }
}
