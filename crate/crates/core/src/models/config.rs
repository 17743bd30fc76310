use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::deq::SolverConfig;
use crate::error::{Error, Result};
use crate::kernels::{AggKind, AggSpec, ConvKind, NormKind};
use crate::rev::{check_groups, BlockSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Pre-activation residual stack with cached activations.
    Res,
    /// Grouped reversible stack.
    Rev,
    /// Residual stack with one parameter bundle shared by all layers.
    WtRes,
    /// Reversible stack with one parameter bundle shared by all layers.
    WtRev,
    /// Equilibrium model: one cell iterated to its fixed point.
    Deq,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Res, Arch::Rev, Arch::WtRes, Arch::WtRev, Arch::Deq];

    pub fn is_reversible(self) -> bool {
        matches!(self, Arch::Rev | Arch::WtRev)
    }

    pub fn is_tied(self) -> bool {
        matches!(self, Arch::WtRes | Arch::WtRev)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Res => "res",
            Arch::Rev => "rev",
            Arch::WtRes => "wt_res",
            Arch::WtRev => "wt_rev",
            Arch::Deq => "deq",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Input(format!("unknown architecture `{s}` (res, rev, wt_res, wt_rev, deq)")))
    }
}

/// Message-passing operator used inside every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Symmetric-normalised sum over neighbours.
    Gcn,
    /// Mean over neighbours, concatenated with the root features.
    Sage,
    /// Max or softmax over neighbours, with additive edge messages.
    Gen,
}

impl FromStr for Operator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Operator::Gcn),
            "sage" => Ok(Operator::Sage),
            "gen" => Ok(Operator::Gen),
            other => Err(Error::Input(format!("unknown operator `{other}` (gcn, sage, gen)"))),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Gcn => "gcn",
            Operator::Sage => "sage",
            Operator::Gen => "gen",
        })
    }
}

pub fn parse_norm(s: &str) -> Result<NormKind> {
    match s {
        "layer" => Ok(NormKind::Layer),
        "batch" => Ok(NormKind::Batch),
        other => Err(Error::Input(format!("unknown norm `{other}` (layer, batch)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub operator: Operator,
    /// Depth `L`; unused by `deq`.
    pub layers: usize,
    /// Hidden width `D`.
    pub channels: usize,
    /// Group count `C` of reversible blocks.
    pub groups: usize,
    /// Aggregator of the `gen` operator (max or softmax); `gcn` and `sage`
    /// fix their own.
    pub agg: AggSpec,
    pub dropout: f64,
    pub norm: NormKind,
    /// Required by `deq`.
    pub solver: Option<SolverConfig>,
    /// Residual stacks only: keep every `k`-th layer input and recompute
    /// the rest during backward.
    pub checkpoint_every: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Rev,
            operator: Operator::Gen,
            layers: 8,
            channels: 64,
            groups: 2,
            agg: AggSpec::new(AggKind::Max),
            dropout: 0.1,
            norm: NormKind::Layer,
            solver: None,
            checkpoint_every: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Input("channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.arch.is_reversible() {
            check_groups(self.channels, self.groups)?;
            if self.norm == NormKind::Batch {
                return Err(Error::Input(
                    "batch norm is not supported in reversible stacks (its statistics change under inversion)".into(),
                ));
            }
        }
        if self.operator == Operator::Gen && !matches!(self.agg.kind, AggKind::Max | AggKind::Softmax) {
            return Err(Error::Input("the gen operator aggregates with max or softmax".into()));
        }
        if self.agg.kind == AggKind::Softmax && !self.agg.beta.is_finite() {
            return Err(Error::Input("softmax temperature must be finite".into()));
        }
        match (self.arch, &self.solver) {
            (Arch::Deq, None) => return Err(Error::Input("deq needs a solver configuration".into())),
            (Arch::Deq, Some(s)) => s.validate()?,
            _ => {}
        }
        if let Some(k) = self.checkpoint_every {
            if k == 0 {
                return Err(Error::Input("checkpoint interval must be at least 1".into()));
            }
            if !matches!(self.arch, Arch::Res | Arch::WtRes) {
                return Err(Error::Input("checkpointing applies to residual stacks only".into()));
            }
        }
        Ok(())
    }

    /// Block structure implied by the operator.
    pub fn block_spec(&self) -> BlockSpec {
        let (agg, conv) = match self.operator {
            Operator::Gcn => (AggSpec::new(AggKind::Sum), ConvKind::Plain),
            Operator::Sage => (AggSpec::new(AggKind::Mean), ConvKind::Sage),
            Operator::Gen => (self.agg, ConvKind::Plain),
        };
        BlockSpec { agg, conv, norm: self.norm }
    }

    /// Edge-feature width seen by the convolutions: only `gen` uses them.
    pub fn conv_edge_dim(&self, edge_dim: Option<usize>) -> Option<usize> {
        match self.operator {
            Operator::Gen => edge_dim.filter(|&f| f > 0),
            _ => None,
        }
    }
}

/// Input/output widths the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub features: usize,
    pub outputs: usize,
    pub edge_dim: Option<usize>,
}
