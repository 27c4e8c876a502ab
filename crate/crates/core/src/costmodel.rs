//! Cost accounting for model-based data selection methods.
//!
//! Every method is reduced to two parts: training of additional models,
//! expressed through opaque `C(model, data, epochs)` scalars, and per-sample
//! feature computation, expressed in forward passes. A backward pass costs
//! two forward passes, so a gradient pass costs three.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BACKWARD_PASS_FORWARDS: u32 = 2;
pub const GRADIENT_PASS_FORWARDS: u32 = 1 + BACKWARD_PASS_FORWARDS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("missing training cost {0}")]
    MissingTrainingCost(&'static str),
    #[error("{method} needs f_ref")]
    MissingReferenceForward { method: Method },
    #[error("invalid parameter {name}: {value}")]
    InvalidParam { name: String, value: f64 },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grape,
    GradientInfluenceLess,
    InrunInfluence,
    GradientMatching,
    GradientNorm,
    Embedding,
    Uncertainty,
    PerplexityRef,
    Learnability,
    LossTrajectoryS2l,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Grape,
        Method::GradientInfluenceLess,
        Method::InrunInfluence,
        Method::GradientMatching,
        Method::GradientNorm,
        Method::Embedding,
        Method::Uncertainty,
        Method::PerplexityRef,
        Method::Learnability,
        Method::LossTrajectoryS2l,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grape => "grape",
            Method::GradientInfluenceLess => "gradient_influence_less",
            Method::InrunInfluence => "inrun_influence",
            Method::GradientMatching => "gradient_matching",
            Method::GradientNorm => "gradient_norm",
            Method::Embedding => "embedding",
            Method::Uncertainty => "uncertainty",
            Method::PerplexityRef => "perplexity_ref",
            Method::Learnability => "learnability",
            Method::LossTrajectoryS2l => "loss_trajectory_s2l",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Grape => "GRAPE",
            Method::GradientInfluenceLess => "Gradient-based influence (LESS)",
            Method::InrunInfluence => "In-run gradient-based influence",
            Method::GradientMatching => "Gradient matching",
            Method::GradientNorm => "Gradient norm",
            Method::Embedding => "Embedding-based",
            Method::Uncertainty => "Simple uncertainty indicators",
            Method::PerplexityRef => "Perplexity (reference model)",
            Method::Learnability => "Learnability",
            Method::LossTrajectoryS2l => "Loss trajectory (S2L)",
        }
    }

    pub fn cost(self) -> MethodCost {
        use Factor::*;
        use ForwardModel::*;
        use TrainingRun::*;
        let (training_terms, feature_term, notes) = match self {
            Method::Grape => (
                vec![],
                Some(FeatureTerm::new(Coefficient::constant(1), Target)),
                "one conditional-probability pass per response under the target model",
            ),
            Method::GradientInfluenceLess => (
                vec![TrainingTerm::once(LoraWarmup)],
                Some(FeatureTerm::new(Coefficient::gradient(Some(Epochs)), Target)),
                "one gradient per sample per saved warmup checkpoint",
            ),
            Method::InrunInfluence => (
                vec![TrainingTerm::once(TargetOneEpoch)],
                None,
                "scores come out of a single training run and reflect only the model state at that step",
            ),
            Method::GradientMatching => (
                vec![TrainingTerm::once(LoraWarmup)],
                Some(FeatureTerm::new(Coefficient::gradient(Some(Epochs)), Target)),
                "gradients per checkpoint, matched against a target gradient",
            ),
            Method::GradientNorm => (
                vec![TrainingTerm {
                    run: TargetOneEpoch,
                    coefficient: Coefficient {
                        scalar: 1,
                        factor: Some(Inits),
                    },
                }],
                Some(FeatureTerm::new(Coefficient::gradient(Some(Inits)), Target)),
                "one short training run and one gradient pass per initialization",
            ),
            Method::Embedding => (
                vec![],
                Some(FeatureTerm::new(Coefficient::constant(1), Target)),
                "one forward pass per sample to embed it",
            ),
            Method::Uncertainty => (
                vec![],
                Some(FeatureTerm::new(Coefficient::constant(1), Target)),
                "one forward pass per sample for loss or entropy",
            ),
            Method::PerplexityRef => (
                vec![TrainingTerm::once(ReferenceOnRefData)],
                Some(FeatureTerm::new(Coefficient::constant(1), Reference)),
                "reference model trained on separate data, then one pass per sample",
            ),
            Method::Learnability => (
                vec![TrainingTerm::once(TargetOneEpoch)],
                Some(FeatureTerm::new(Coefficient::constant(2), Target)),
                "losses before and after training: two passes per sample",
            ),
            Method::LossTrajectoryS2l => (
                vec![TrainingTerm::once(ReferenceOnData)],
                Some(FeatureTerm::new(Coefficient::epochs(1), Reference)),
                "reference-model loss at every saved checkpoint",
            ),
        };
        MethodCost {
            method: self,
            training_terms,
            feature_term,
            notes,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CostError::UnknownMethod(s.to_owned()))
    }
}

/// Parses `all` or a comma-separated list of method names.
pub fn parse_methods(spec: &str) -> Result<Vec<Method>, CostError> {
    if spec.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    /// T, epochs or checkpoints
    Epochs,
    /// m, weight initializations
    Inits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coefficient {
    pub scalar: u32,
    pub factor: Option<Factor>,
}

impl Coefficient {
    pub const fn constant(scalar: u32) -> Self {
        Self {
            scalar,
            factor: None,
        }
    }

    pub const fn epochs(scalar: u32) -> Self {
        Self {
            scalar,
            factor: Some(Factor::Epochs),
        }
    }

    /// One gradient pass (three forwards) per unit of `factor`.
    pub const fn gradient(factor: Option<Factor>) -> Self {
        Self {
            scalar: GRADIENT_PASS_FORWARDS,
            factor,
        }
    }

    pub fn value(&self, params: &CostParams) -> f64 {
        let factor = match self.factor {
            None => 1.0,
            Some(Factor::Epochs) => params.t as f64,
            Some(Factor::Inits) => params.m as f64,
        };
        f64::from(self.scalar) * factor
    }

    fn symbol(&self) -> String {
        let factor = match self.factor {
            None => "",
            Some(Factor::Epochs) => "T",
            Some(Factor::Inits) => "m",
        };
        match (self.scalar, factor) {
            (1, "") => String::new(),
            (1, f) => format!("{f}·"),
            (s, f) => format!("{s}{f}·"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingRun {
    LoraWarmup,
    TargetOneEpoch,
    ReferenceOnRefData,
    ReferenceOnData,
}

impl TrainingRun {
    /// Key of the run's cost in [`CostParams::c_train`].
    pub fn descriptor(self) -> &'static str {
        match self {
            TrainingRun::LoraWarmup => "C(theta_lora,D_warmup,T)",
            TrainingRun::TargetOneEpoch => "C(theta,D,1)",
            TrainingRun::ReferenceOnRefData => "C(theta_ref,D_ref,1)",
            TrainingRun::ReferenceOnData => "C(theta_ref,D,T)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTerm {
    pub run: TrainingRun,
    pub coefficient: Coefficient,
}

impl TrainingTerm {
    fn once(run: TrainingRun) -> Self {
        Self {
            run,
            coefficient: Coefficient::constant(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardModel {
    Target,
    Reference,
}

/// `coefficient · N · F_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTerm {
    pub coefficient: Coefficient,
    pub model: ForwardModel,
}

impl FeatureTerm {
    fn new(coefficient: Coefficient, model: ForwardModel) -> Self {
        Self { coefficient, model }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodCost {
    pub method: Method,
    pub training_terms: Vec<TrainingTerm>,
    /// `None` when no per-sample features are computed.
    pub feature_term: Option<FeatureTerm>,
    pub notes: &'static str,
}

impl MethodCost {
    pub fn training_expr(&self) -> String {
        if self.training_terms.is_empty() {
            return "0".into();
        }
        self.training_terms
            .iter()
            .map(|t| format!("{}{}", t.coefficient.symbol(), t.run.descriptor()))
            .collect::<Vec<_>>()
            .join(" + ")
    }

    pub fn feature_expr(&self) -> String {
        match &self.feature_term {
            None => "0".into(),
            Some(f) => {
                let model = match f.model {
                    ForwardModel::Target => "F_theta",
                    ForwardModel::Reference => "F_theta_ref",
                };
                format!("{}N·{model}", f.coefficient.symbol())
            }
        }
    }

    pub fn evaluate(&self, params: &CostParams) -> Result<(f64, f64), CostError> {
        params.validate()?;
        let mut training = 0.0;
        for term in &self.training_terms {
            let key = term.run.descriptor();
            let c = params
                .c_train
                .get(key)
                .ok_or(CostError::MissingTrainingCost(key))?;
            training += term.coefficient.value(params) * c;
        }
        let feature = match &self.feature_term {
            None => 0.0,
            Some(f) => {
                let forward = match f.model {
                    ForwardModel::Target => params.f_theta,
                    ForwardModel::Reference => {
                        params.f_ref.ok_or(CostError::MissingReferenceForward {
                            method: self.method,
                        })?
                    }
                };
                f.coefficient.value(params) * params.n as f64 * forward
            }
        };
        Ok((training, feature))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub n: u64,
    pub f_theta: f64,
    #[serde(default)]
    pub f_ref: Option<f64>,
    #[serde(default = "one")]
    pub t: u64,
    #[serde(default = "one")]
    pub m: u64,
    #[serde(default)]
    pub c_train: BTreeMap<String, f64>,
}

fn one() -> u64 {
    1
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |name: &str, value: f64| CostError::InvalidParam {
            name: name.to_owned(),
            value,
        };
        for (name, v) in [("n", self.n), ("t", self.t), ("m", self.m)] {
            if v == 0 {
                return Err(bad(name, 0.0));
            }
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.f_theta) {
            return Err(bad("f_theta", self.f_theta));
        }
        if let Some(f) = self.f_ref.filter(|f| !positive(*f)) {
            return Err(bad("f_ref", f));
        }
        if let Some((k, v)) = self.c_train.iter().find(|(_, v)| !positive(**v)) {
            return Err(bad(k, *v));
        }
        Ok(())
    }
}

pub fn cost_of(method: Method, params: &CostParams) -> Result<(f64, f64), CostError> {
    method.cost().evaluate(params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub method: Method,
    pub training_expr: String,
    pub feature_expr: String,
    pub training_cost: f64,
    pub feature_cost: f64,
    pub total_cost: f64,
    /// Strictly cheaper in total than selection by target-model likelihood
    /// under the same parameters.
    pub cheaper_than_grape: bool,
    pub notes: &'static str,
}

/// Evaluates `methods` and sorts them by total cost, keeping the given order
/// among equal totals.
pub fn compare(methods: &[Method], params: &CostParams) -> Result<Vec<CostRow>, CostError> {
    let (gt, gf) = cost_of(Method::Grape, params)?;
    let grape_total = gt + gf;
    let mut rows = methods
        .iter()
        .map(|&m| {
            let cost = m.cost();
            let (training_cost, feature_cost) = cost.evaluate(params)?;
            let total_cost = training_cost + feature_cost;
            Ok(CostRow {
                method: m,
                training_expr: cost.training_expr(),
                feature_expr: cost.feature_expr(),
                training_cost,
                feature_cost,
                total_cost,
                cheaper_than_grape: total_cost < grape_total,
                notes: cost.notes,
            })
        })
        .collect::<Result<Vec<_>, CostError>>()?;
    rows.sort_by(|a, b| a.total_cost.total_cmp(&b.total_cost));
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn rows_to_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(
        "method,training_expr,feature_expr,training_cost,feature_cost,total_cost,cheaper_than_grape,notes\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            csv_field(&r.training_expr),
            csv_field(&r.feature_expr),
            r.training_cost,
            r.feature_cost,
            r.total_cost,
            r.cheaper_than_grape,
            csv_field(r.notes)
        );
    }
    out
}
