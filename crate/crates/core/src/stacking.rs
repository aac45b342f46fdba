//! Stacking networks that merge the tag logits of `m` frozen domain models
//! into one tag distribution per character.
//!
//! Every variant computes a pre-softmax score vector `z` per position and
//! the distribution is `softmax(z)`:
//!
//! * `gaussian`: `z = Σ_j w_j·h_j` with weights from a kernel on the
//!   distance of each model's logits to the target model's logits.
//! * `bagging`: `z = (1/m)·Σ_j h_j`.
//! * `concatenate`: per-dimension weights from `tanh(W₁·[W₂·[h₁..h_m]; h_j])`,
//!   followed by a learned `tanh(W_g·s + b_g)` layer.
//! * `sequence`: per-dimension weights from a small Bi-LSTM run over the
//!   models' logits in `model_order`.
//! * `tree`: a gated recursive tree over adjacent models, one shared cell
//!   per layer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, AffineParams, Initializer, LstmParams, LstmVars, ParamKind, Parameters, TreeCellParams, TreeCellVars,
};
use crate::segmenter::model::to_array;
use crate::segmenter::{DomainModel, Scorer, NUM_TAGS};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Width of the vectors being stacked: one logit per tag.
pub const STACK_DIM: usize = NUM_TAGS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gaussian,
    Concatenate,
    Sequence,
    Tree,
    Bagging,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gaussian,
        Variant::Concatenate,
        Variant::Sequence,
        Variant::Tree,
        Variant::Bagging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gaussian => "gaussian",
            Variant::Concatenate => "concatenate",
            Variant::Sequence => "sequence",
            Variant::Tree => "tree",
            Variant::Bagging => "bagging",
        }
    }

    /// Whether the variant has learned parameters.
    pub fn is_parametric(self) -> bool {
        matches!(self, Variant::Concatenate | Variant::Sequence | Variant::Tree)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stacker variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerConfig {
    pub variant: Variant,
    /// Number of stacked models.
    pub m: usize,
    /// Which model belongs to the target domain.
    pub target_index: usize,
    /// Kernel width of the gaussian variant.
    pub sigma: f64,
    /// Candidate widths tried on dev data when training a gaussian stacker.
    pub sigma_grid: Vec<f64>,
    /// Use `‖·‖²` instead of `‖·‖` in the gaussian kernel.
    pub squared_distance: bool,
    /// Hidden size of the sequence variant's weighting Bi-LSTM.
    pub seq_hidden: usize,
    /// Order in which the sequence and tree variants visit the models.
    pub model_order: Vec<usize>,
}

impl StackerConfig {
    pub fn new(variant: Variant, m: usize, target_index: usize) -> Self {
        StackerConfig {
            variant,
            m,
            target_index,
            sigma: 1.0,
            sigma_grid: vec![0.1, 0.5, 1.0, 2.0, 5.0],
            squared_distance: false,
            seq_hidden: 16,
            model_order: (0..m).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("a stacker needs at least one model".into()));
        }
        if self.target_index >= self.m {
            return Err(Error::Config(format!(
                "target index {} out of range for {} models",
                self.target_index, self.m
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(s) = self.sigma_grid.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("sigma grid value {s} must be positive")));
        }
        if self.seq_hidden == 0 {
            return Err(Error::Config("seq_hidden must be positive".into()));
        }
        let mut seen = vec![false; self.m];
        let is_perm = self.model_order.len() == self.m
            && self
                .model_order
                .iter()
                .all(|&i| i < self.m && !std::mem::replace(&mut seen[i], true));
        if !is_perm {
            return Err(Error::Config(format!(
                "model order {:?} is not a permutation of 0..{}",
                self.model_order, self.m
            )));
        }
        Ok(())
    }
}

/// Learned tensors of a stacker; empty for the gaussian and bagging
/// variants.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum StackerParams {
    None,
    Concatenate {
        /// `[d, 2d]`
        w1: Tensor,
        /// `[d, m·d]`
        w2: Tensor,
        /// Output layer `g`; absent for a single model, where the stacker is
        /// the identity.
        g: Option<AffineParams>,
    },
    Sequence {
        fwd: LstmParams,
        bwd: LstmParams,
        /// `[d, 2·seq_hidden]` projection of each Bi-LSTM state to a weight
        /// vector.
        proj: AffineParams,
    },
    Tree {
        /// One cell per recursive layer, `m - 1` in all.
        cells: Vec<TreeCellParams>,
    },
}

impl StackerParams {
    /// Fresh parameters drawn from N(0, 0.01²).
    pub fn init(config: &StackerConfig, seed: u64) -> Self {
        Self::build(config, &mut Initializer::new(seed))
    }

    pub fn zeros(config: &StackerConfig) -> Self {
        let mut p = Self::init(config, 0);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    fn build(config: &StackerConfig, init: &mut Initializer) -> Self {
        let d = STACK_DIM;
        match config.variant {
            Variant::Gaussian | Variant::Bagging => StackerParams::None,
            Variant::Concatenate => StackerParams::Concatenate {
                w1: init.tensor(&[d, 2 * d], ParamKind::Weight),
                w2: init.tensor(&[d, config.m * d], ParamKind::Weight),
                g: (config.m > 1).then(|| AffineParams::new(d, d, init)),
            },
            Variant::Sequence => StackerParams::Sequence {
                fwd: LstmParams::new(d, config.seq_hidden, init),
                bwd: LstmParams::new(d, config.seq_hidden, init),
                proj: AffineParams::new(d, 2 * config.seq_hidden, init),
            },
            Variant::Tree => StackerParams::Tree {
                cells: (1..config.m).map(|_| TreeCellParams::new(d, init)).collect(),
            },
        }
    }

    /// Checks that tensor shapes match what `config` implies.
    pub fn check_shapes(&self, config: &StackerConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let ours: Vec<&[usize]> = self.tensors().into_iter().map(Tensor::shape).collect();
        let theirs: Vec<&[usize]> = expected.tensors().into_iter().map(Tensor::shape).collect();
        if std::mem::discriminant(self) != std::mem::discriminant(&expected) || ours != theirs {
            return Err(Error::Dimension(format!(
                "stacker parameters {ours:?} do not fit a {} stacker over {} models",
                config.variant, config.m
            )));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> StackerVars {
        match self {
            StackerParams::None => StackerVars::None,
            StackerParams::Concatenate { w1, w2, g } => StackerVars::Concatenate {
                w1: tape.param(w1),
                w2: tape.param(w2),
                g: g.as_ref().map(|g| g.register(tape)),
            },
            StackerParams::Sequence { fwd, bwd, proj } => StackerVars::Sequence {
                fwd: fwd.register(tape),
                bwd: bwd.register(tape),
                proj: proj.register(tape),
            },
            StackerParams::Tree { cells } => StackerVars::Tree {
                cells: cells.iter().map(|c| c.register(tape)).collect(),
            },
        }
    }
}

impl Parameters for StackerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            StackerParams::None => Vec::new(),
            StackerParams::Concatenate { w1, w2, g } => {
                let mut v = vec![w1, w2];
                if let Some(g) = g {
                    v.extend(g.tensors());
                }
                v
            }
            StackerParams::Sequence { fwd, bwd, proj } => {
                let mut v = fwd.tensors();
                v.extend(bwd.tensors());
                v.extend(proj.tensors());
                v
            }
            StackerParams::Tree { cells } => cells.iter().flat_map(|c| c.tensors()).collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            StackerParams::None => Vec::new(),
            StackerParams::Concatenate { w1, w2, g } => {
                let mut v = vec![w1, w2];
                if let Some(g) = g {
                    v.extend(g.tensors_mut());
                }
                v
            }
            StackerParams::Sequence { fwd, bwd, proj } => {
                let mut v = fwd.tensors_mut();
                v.extend(bwd.tensors_mut());
                v.extend(proj.tensors_mut());
                v
            }
            StackerParams::Tree { cells } => cells.iter_mut().flat_map(|c| c.tensors_mut()).collect(),
        }
    }

    fn names(&self) -> Vec<String> {
        let prefixed = |prefix: &str, names: Vec<String>| -> Vec<String> {
            names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
        };
        match self {
            StackerParams::None => Vec::new(),
            StackerParams::Concatenate { g, .. } => {
                let mut v = vec!["w1".to_string(), "w2".to_string()];
                if let Some(g) = g {
                    v.extend(prefixed("g", g.names()));
                }
                v
            }
            StackerParams::Sequence { fwd, bwd, proj } => {
                let mut v = prefixed("fwd", fwd.names());
                v.extend(prefixed("bwd", bwd.names()));
                v.extend(prefixed("proj", proj.names()));
                v
            }
            StackerParams::Tree { cells } => cells
                .iter()
                .enumerate()
                .flat_map(|(l, c)| prefixed(&format!("layer{}", l + 1), c.names()))
                .collect(),
        }
    }
}

/// Tape handles for [`StackerParams`].
#[derive(Debug, Clone)]
pub enum StackerVars {
    None,
    Concatenate {
        w1: Var,
        w2: Var,
        g: Option<(Var, Var)>,
    },
    Sequence {
        fwd: LstmVars,
        bwd: LstmVars,
        proj: (Var, Var),
    },
    Tree {
        cells: Vec<TreeCellVars>,
    },
}

/// Kernel weights `exp(-‖h_j - h_t‖ / 2σ²) / Z`, normalized to sum to one.
pub fn gaussian_weights(h: &[Tensor], target_index: usize, sigma: f64) -> Result<Vec<f64>> {
    kernel_weights(h, target_index, sigma, false)
}

fn kernel_weights(h: &[Tensor], target_index: usize, sigma: f64, squared: bool) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let target = h.get(target_index).ok_or_else(|| {
        Error::Config(format!(
            "target index {target_index} out of range for {} models",
            h.len()
        ))
    })?;
    let exponents = h
        .iter()
        .map(|hj| {
            let dist = hj.sub(target)?.euclidean_norm();
            let dist = if squared { dist * dist } else { dist };
            Ok(-dist / (2.0 * sigma * sigma))
        })
        .collect::<Result<Vec<f64>>>()?;
    // the target's exponent is 0, the maximum, so no term underflows to a
    // zero normalizer
    let unnormalized: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    let z: f64 = unnormalized.iter().sum();
    Ok(unnormalized.into_iter().map(|u| u / z).collect())
}

fn check_inputs(tape: &Tape, h: &[Var]) -> Result<()> {
    if h.is_empty() {
        return Err(Error::Config("nothing to stack".into()));
    }
    for &v in h {
        if tape.value(v).shape() != [STACK_DIM] {
            return Err(Error::Dimension(format!(
                "stacked vectors must have shape [{STACK_DIM}], got {:?}",
                tape.value(v).shape()
            )));
        }
    }
    Ok(())
}

/// `Σ_j α_j ⊙ h_j` where row `j` of `alpha` weights `h[j]`.
fn weighted_vote(tape: &mut Tape, alpha: Var, h: &[Var]) -> Result<Var> {
    let terms = h
        .iter()
        .enumerate()
        .map(|(j, &hj)| {
            let a = tape.row(alpha, j)?;
            tape.mul(a, hj)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Pre-softmax scores of one position. `h` holds one `[4]` node per model,
/// in model index order.
pub fn stack_scores(tape: &mut Tape, config: &StackerConfig, vars: &StackerVars, h: &[Var]) -> Result<Var> {
    check_inputs(tape, h)?;
    if h.len() != config.m {
        return Err(Error::Dimension(format!(
            "stacker over {} models got {} inputs",
            config.m,
            h.len()
        )));
    }
    match (config.variant, vars) {
        (Variant::Bagging, _) => {
            let sum = tape.add_all(h)?;
            tape.scale(sum, 1.0 / h.len() as f64)
        }
        (Variant::Gaussian, _) => {
            let values: Vec<Tensor> = h.iter().map(|&v| tape.value(v).clone()).collect();
            let w = kernel_weights(&values, config.target_index, config.sigma, config.squared_distance)?;
            let terms = h
                .iter()
                .zip(w)
                .map(|(&hj, wj)| tape.scale(hj, wj))
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        }
        (Variant::Concatenate, &StackerVars::Concatenate { w1, w2, g }) => {
            let all = tape.concat(h)?;
            let mixed = tape.matmul(w2, all)?;
            let energies = h
                .iter()
                .map(|&hj| {
                    let pair = tape.concat(&[mixed, hj])?;
                    let e = tape.matmul(w1, pair)?;
                    tape.tanh(e)
                })
                .collect::<Result<Vec<_>>>()?;
            let energies = tape.stack(&energies)?;
            let alpha = tape.softmax_columns(energies)?;
            let s = weighted_vote(tape, alpha, h)?;
            match g {
                Some((gw, gb)) => {
                    let a = layers::affine(tape, gw, gb, s)?;
                    tape.tanh(a)
                }
                None => Ok(s),
            }
        }
        (Variant::Sequence, StackerVars::Sequence { fwd, bwd, proj }) => {
            let ordered: Vec<Var> = config.model_order.iter().map(|&i| h[i]).collect();
            let states = layers::bilstm(tape, fwd, bwd, &ordered)?;
            let energies = states
                .into_iter()
                .map(|s| layers::affine(tape, proj.0, proj.1, s))
                .collect::<Result<Vec<_>>>()?;
            let energies = tape.stack(&energies)?;
            let alpha = tape.softmax_columns(energies)?;
            weighted_vote(tape, alpha, &ordered)
        }
        (Variant::Tree, StackerVars::Tree { cells }) => {
            let mut layer: Vec<Var> = config.model_order.iter().map(|&i| h[i]).collect();
            for cell in cells {
                layer = layer
                    .windows(2)
                    .map(|pair| layers::tree_cell(tape, cell, pair[0], pair[1]))
                    .collect::<Result<Vec<_>>>()?;
            }
            debug_assert_eq!(layer.len(), 1);
            Ok(layer[0])
        }
        (variant, _) => Err(Error::Config(format!(
            "parameters do not belong to a {variant} stacker"
        ))),
    }
}

/// Distribution over tags for one position.
pub fn stack_distribution(config: &StackerConfig, params: &StackerParams, h: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let inputs: Vec<Var> = h.iter().map(|t| tape.input(t.clone())).collect();
    let z = stack_scores(&mut tape, config, &vars, &inputs)?;
    tape.value(z).softmax()
}

pub fn gaussian_stack(h: &[Tensor], config: &StackerConfig) -> Result<Tensor> {
    stack_distribution(&variant_config(config, Variant::Gaussian), &StackerParams::None, h)
}

pub fn bagging_stack(h: &[Tensor]) -> Result<Tensor> {
    let config = StackerConfig::new(Variant::Bagging, h.len().max(1), 0);
    stack_distribution(&config, &StackerParams::None, h)
}

pub fn concat_stack(h: &[Tensor], params: &StackerParams, config: &StackerConfig) -> Result<Tensor> {
    stack_distribution(&variant_config(config, Variant::Concatenate), params, h)
}

pub fn sequence_stack(h: &[Tensor], params: &StackerParams, config: &StackerConfig) -> Result<Tensor> {
    stack_distribution(&variant_config(config, Variant::Sequence), params, h)
}

pub fn tree_stack(h: &[Tensor], params: &StackerParams, config: &StackerConfig) -> Result<Tensor> {
    stack_distribution(&variant_config(config, Variant::Tree), params, h)
}

fn variant_config(config: &StackerConfig, variant: Variant) -> StackerConfig {
    StackerConfig {
        variant,
        ..config.clone()
    }
}

/// A trained stacker bound to the domain models it combines.
#[derive(Debug, Clone)]
pub struct Stacker {
    pub config: StackerConfig,
    pub params: StackerParams,
    pub models: Vec<Arc<DomainModel>>,
}

impl Stacker {
    pub fn new(config: StackerConfig, params: StackerParams, models: Vec<Arc<DomainModel>>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if models.len() != config.m {
            return Err(Error::Config(format!(
                "stacker expects {} models, got {}",
                config.m,
                models.len()
            )));
        }
        for m in &models {
            m.validate()
                .map_err(|e| Error::Config(format!("model {:?}: {e}", m.name)))?;
        }
        Ok(Stacker { config, params, models })
    }

    /// Scores for every position given each model's logits
    /// (`features[model][position]`).
    pub fn scores_from_logits(&self, features: &[Vec<[f64; NUM_TAGS]>]) -> Result<Vec<[f64; NUM_TAGS]>> {
        combine_positions(&self.config, &self.params, features)
    }
}

/// Runs a stacker over precomputed model logits, one tape per sentence.
pub fn combine_positions(
    config: &StackerConfig,
    params: &StackerParams,
    features: &[Vec<[f64; NUM_TAGS]>],
) -> Result<Vec<[f64; NUM_TAGS]>> {
    let len = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != len) {
        return Err(Error::Dimension("models disagree on sentence length".into()));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    (0..len)
        .map(|pos| {
            let h: Vec<Var> = features.iter().map(|f| tape.input(Tensor::vector(&f[pos]))).collect();
            let z = stack_scores(&mut tape, config, &vars, &h)?;
            Ok(to_array(tape.value(z).data()))
        })
        .collect()
}

impl Scorer for Stacker {
    fn scores(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>> {
        let features = self
            .models
            .iter()
            .map(|m| m.logits(symbols))
            .collect::<Result<Vec<_>>>()?;
        self.scores_from_logits(&features)
    }
}

/// Softmax of a score row, as an array.
pub fn distribution(scores: &[f64; NUM_TAGS]) -> [f64; NUM_TAGS] {
    to_array(&tensor::softmax(scores))
}
