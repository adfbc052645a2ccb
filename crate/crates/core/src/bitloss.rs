//! Bitlength regularizer `gamma * sum(lambda_i * n_i)`.
//!
//! The per-group weights are normalized so that a network with every group
//! at 8 bits contributes exactly `gamma`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::quantizer::{QuantGroup, QuantPlan, Role, N_MAX, N_MIN};
use crate::tensor::Tensor;

pub const NORMALIZATION_BITS: f64 = 8.0;

fn default_normalization_bits() -> f64 {
    NORMALIZATION_BITS
}

fn default_footprint_batch_size() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "equal")]
    Equal,
    #[serde(rename = "footprint")]
    Footprint,
    #[serde(rename = "macs", alias = "mac-ops")]
    MacOps,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(Scheme::Equal),
            "footprint" => Ok(Scheme::Footprint),
            "macs" | "mac-ops" => Ok(Scheme::MacOps),
            other => Err(Error::Config(format!(
                "scheme must be one of equal|footprint|macs, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Equal => "equal",
            Scheme::Footprint => "footprint",
            Scheme::MacOps => "macs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitLossConfig {
    pub gamma: f64,
    pub scheme: Scheme,
    /// Batch size at which activation footprints are counted (footprint scheme).
    #[serde(default = "default_footprint_batch_size")]
    pub footprint_batch_size: usize,
    #[serde(default = "default_normalization_bits")]
    pub normalization_bits: f64,
}

impl Default for BitLossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            scheme: Scheme::Equal,
            footprint_batch_size: 1,
            normalization_bits: NORMALIZATION_BITS,
        }
    }
}

impl BitLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.footprint_batch_size == 0 {
            return Err(Error::Config("footprint_batch_size must be >= 1".into()));
        }
        if self.normalization_bits != NORMALIZATION_BITS {
            return Err(Error::Config(format!(
                "normalization_bits is fixed at {NORMALIZATION_BITS}"
            )));
        }
        Ok(())
    }
}

/// Static size facts for one quantization group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCostFacts {
    pub group_id: String,
    pub role: Role,
    pub layer: usize,
    /// Elements for one sample (weights: the whole cell).
    pub per_sample_elements: u64,
    /// Elements at `batch_size` (activations scale with it, weights do not).
    pub element_count: u64,
    /// Multiply-accumulates attributable to the group for one sample.
    pub mac_count: u64,
    pub batch_size: usize,
}

impl GroupCostFacts {
    pub fn elements_at(&self, batch_size: usize) -> u64 {
        match self.role {
            Role::Weights => self.per_sample_elements,
            Role::Activations => self.per_sample_elements * batch_size as u64,
        }
    }
}

/// Loss weight of every group so that `sum(lambda_i) * 8 == 1`.
pub fn compute_lambdas(
    groups: &[QuantGroup],
    facts: &[GroupCostFacts],
    config: &BitLossConfig,
) -> Result<BTreeMap<String, f64>> {
    if groups.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut weights = Vec::with_capacity(groups.len());
    for g in groups {
        let w = match config.scheme {
            Scheme::Equal => 1.0,
            Scheme::Footprint | Scheme::MacOps => {
                let f = facts
                    .iter()
                    .find(|f| f.group_id == g.id)
                    .ok_or_else(|| Error::MissingGroup(g.id.clone()))?;
                match config.scheme {
                    Scheme::Footprint => f.elements_at(config.footprint_batch_size) as f64,
                    _ => f.mac_count as f64,
                }
            }
        };
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{} weighting has zero total count",
            config.scheme
        )));
    }
    let denom = config.normalization_bits * total;
    Ok(groups
        .iter()
        .zip(weights)
        .map(|(g, w)| (g.id.clone(), w / denom))
        .collect())
}

/// `gamma * sum(lambda_i * clamp(n_i, 1, N_MAX))` on the tape, using each
/// group's stored `lambda`.
pub fn bit_loss(tape: &mut Tape, store: &ParamStore, plan: &QuantPlan, gamma: f64) -> Var {
    let mut acc: Option<Var> = None;
    for g in &plan.groups {
        let n = tape.param(store, g.bits);
        let clipped = tape.clamp(n, N_MIN, N_MAX);
        let term = tape.mul_scalar(clipped, gamma * g.lambda);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term).expect("scalar terms"),
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

pub fn total_loss(tape: &mut Tape, task: Var, bits: Var) -> Result<Var> {
    let (a, b) = (tape.value(task), tape.value(bits));
    if !a.is_scalar() || !b.is_scalar() {
        return Err(Error::Shape {
            op: "total_loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    tape.add(task, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{model_facts, Model, ModelSpec};
    use crate::quantizer::{attach_quantization, Granularity, RoleSelection};

    fn setup(widths: Vec<usize>) -> (Model, QuantPlan) {
        let mut m = Model::build(&ModelSpec::Mlp { widths, seed: 3 }).unwrap();
        let plan = attach_quantization(&mut m, Granularity::Tensor, RoleSelection::Both).unwrap();
        (m, plan)
    }

    fn with_lambdas(m: &Model, plan: &mut QuantPlan, scheme: Scheme) {
        let cfg = BitLossConfig {
            scheme,
            ..Default::default()
        };
        let facts = model_facts(m, plan, cfg.footprint_batch_size);
        let l = compute_lambdas(&plan.groups, &facts, &cfg).unwrap();
        plan.set_lambdas(&l).unwrap();
    }

    fn loss_value(m: &Model, plan: &QuantPlan, gamma: f64) -> f64 {
        let mut tape = Tape::new();
        let v = bit_loss(&mut tape, m.params(), plan, gamma);
        tape.value(v).item()
    }

    #[test]
    fn equal_two_groups() {
        let (mut m, mut plan) = setup(vec![3, 2]);
        with_lambdas(&m, &mut plan, Scheme::Equal);
        assert_eq!(plan.len(), 2);
        assert!(plan.groups.iter().all(|g| g.lambda == 1.0 / 16.0));
        let (a, b) = (plan.groups[0].bits, plan.groups[1].bits);
        m.params_mut().set_bits(a, 4.0);
        m.params_mut().set_bits(b, 8.0);
        assert!((loss_value(&m, &plan, 1.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn six_groups_at_four_bits() {
        let (mut m, mut plan) = setup(vec![5, 4, 3, 2]);
        with_lambdas(&m, &mut plan, Scheme::Equal);
        for g in &plan.groups {
            m.params_mut().set_bits(g.bits, 4.0);
        }
        assert!((loss_value(&m, &plan, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eight_bits_gives_gamma_for_every_scheme() {
        for scheme in [Scheme::Equal, Scheme::Footprint, Scheme::MacOps] {
            let (m, mut plan) = setup(vec![6, 9, 4, 3]);
            with_lambdas(&m, &mut plan, scheme);
            assert!((loss_value(&m, &plan, 2.5) - 2.5).abs() < 1e-12, "{scheme}");
        }
    }

    #[test]
    fn gradient_is_gamma_lambda_and_clipped() {
        let (mut m, mut plan) = setup(vec![5, 4, 3]);
        with_lambdas(&m, &mut plan, Scheme::MacOps);
        m.params_mut().set_bits(plan.groups[0].bits, 1.0);
        m.params_mut().set_bits(plan.groups[1].bits, 5.5);
        let mut tape = Tape::new();
        let v = bit_loss(&mut tape, m.params(), &plan, 1.5);
        let g = tape.backward(v).unwrap();
        assert_eq!(g.param(plan.groups[0].bits).unwrap(), &[0.0]);
        assert_eq!(
            g.param(plan.groups[1].bits).unwrap(),
            &[1.5 * plan.groups[1].lambda]
        );
    }

    #[test]
    fn gamma_zero_leaves_task_loss() {
        let (m, mut plan) = setup(vec![5, 4, 3]);
        with_lambdas(&m, &mut plan, Scheme::Equal);
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.9));
        let b = bit_loss(&mut tape, m.params(), &plan, 0.0);
        let t = total_loss(&mut tape, task, b).unwrap();
        assert_eq!(tape.value(t).item(), 0.9);

        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.9));
        let b = tape.constant(Tensor::scalar(0.6));
        let t = total_loss(&mut tape, task, b).unwrap();
        assert!((tape.value(t).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_counts_rejected() {
        let (m, plan) = setup(vec![5, 4, 3]);
        let mut facts = model_facts(&m, &plan, 1);
        for f in &mut facts {
            f.mac_count = 0;
        }
        let cfg = BitLossConfig {
            scheme: Scheme::MacOps,
            ..Default::default()
        };
        assert!(compute_lambdas(&plan.groups, &facts, &cfg).is_err());
    }

    #[test]
    fn scheme_names() {
        assert_eq!("macs".parse::<Scheme>().unwrap(), Scheme::MacOps);
        assert_eq!("footprint".parse::<Scheme>().unwrap(), Scheme::Footprint);
        assert!("bits".parse::<Scheme>().is_err());
    }
}
