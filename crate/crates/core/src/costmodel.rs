//! Memory-footprint, bit-operation and accelerator proxy estimates for a
//! per-group bitlength assignment.
//!
//! The accelerator figures are first-order proxies: per-layer speedup is the
//! ratio of baseline to effective bits on each bitlength-sensitive operand,
//! aggregated with a MAC-weighted harmonic mean. They are not cycle-accurate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bitloss::GroupCostFacts;
use crate::error::{Error, Result};
use crate::quantizer::Role;

/// Bits assumed for a role that carries no quantization group.
pub const FLOAT_BITS: f64 = 32.0;
pub const BASELINE_BITS: u32 = 8;

pub const PROXY_NOTE: &str =
    "accelerator figures are first-order proxies (baseline/effective bits per sensitive operand, MAC-weighted harmonic mean), not cycle-accurate";

pub type BitAssignment = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FootprintMode {
    /// Every group.
    Total,
    /// All weights plus the single largest activation group.
    PeakActivation,
}

fn bits_of(bits: &BitAssignment, id: &str) -> Result<f64> {
    bits.get(id)
        .copied()
        .ok_or_else(|| Error::MissingGroup(id.to_string()))
}

fn check_covered(facts: &[GroupCostFacts], bits: &BitAssignment) -> Result<()> {
    for f in facts {
        bits_of(bits, &f.group_id)?;
    }
    Ok(())
}

/// Stored bits `sum(elements_i * n_i)` over the scope selected by `mode`,
/// with activations counted at `batch_size`.
pub fn footprint(
    facts: &[GroupCostFacts],
    bits: &BitAssignment,
    batch_size: usize,
    mode: FootprintMode,
) -> Result<f64> {
    check_covered(facts, bits)?;
    let cost = |f: &GroupCostFacts| -> f64 { f.elements_at(batch_size) as f64 * bits[&f.group_id] };
    let weights: f64 = facts
        .iter()
        .filter(|f| f.role == Role::Weights)
        .map(cost)
        .sum();
    let acts = facts
        .iter()
        .filter(|f| f.role == Role::Activations)
        .map(cost);
    Ok(match mode {
        FootprintMode::Total => weights + acts.sum::<f64>(),
        FootprintMode::PeakActivation => weights + acts.fold(0.0, f64::max),
    })
}

/// Footprint of one role only, as `(total, largest group)`.
pub fn role_footprint(
    facts: &[GroupCostFacts],
    bits: &BitAssignment,
    batch_size: usize,
    role: Role,
) -> Result<(f64, f64)> {
    check_covered(facts, bits)?;
    let costs: Vec<f64> = facts
        .iter()
        .filter(|f| f.role == role)
        .map(|f| f.elements_at(batch_size) as f64 * bits[&f.group_id])
        .collect();
    Ok((
        costs.iter().sum(),
        costs.iter().copied().fold(0.0, f64::max),
    ))
}

/// One unit of work: a layer, or a weight cell of a per-channel layer.
#[derive(Clone, Debug, PartialEq)]
struct WorkUnit {
    macs: f64,
    weight_bits: Option<f64>,
    act_bits: Option<f64>,
}

fn work_units(facts: &[GroupCostFacts], bits: &BitAssignment) -> Result<Vec<WorkUnit>> {
    check_covered(facts, bits)?;
    let mut layers: Vec<usize> = facts.iter().map(|f| f.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut units = Vec::new();
    for layer in layers {
        let act = facts
            .iter()
            .find(|f| f.layer == layer && f.role == Role::Activations);
        let act_bits = act.map(|f| bits[&f.group_id]);
        let weights: Vec<&GroupCostFacts> = facts
            .iter()
            .filter(|f| f.layer == layer && f.role == Role::Weights)
            .collect();
        if weights.is_empty() {
            let a = act.expect("layer has at least one group");
            units.push(WorkUnit {
                macs: a.mac_count as f64,
                weight_bits: None,
                act_bits,
            });
        } else {
            for w in weights {
                units.push(WorkUnit {
                    macs: w.mac_count as f64,
                    weight_bits: Some(bits[&w.group_id]),
                    act_bits,
                });
            }
        }
    }
    Ok(units)
}

/// `sum(macs * weight_bits * activation_bits)` over layers (per-channel
/// weight cells contribute their share of the layer's MACs).
pub fn bit_ops(facts: &[GroupCostFacts], bits: &BitAssignment) -> Result<f64> {
    Ok(work_units(facts, bits)?
        .iter()
        .map(|u| u.macs * u.weight_bits.unwrap_or(FLOAT_BITS) * u.act_bits.unwrap_or(FLOAT_BITS))
        .sum())
}

/// Total multiply-accumulates per sample.
pub fn total_macs(facts: &[GroupCostFacts]) -> u64 {
    let mut per_layer: BTreeMap<usize, u64> = BTreeMap::new();
    for f in facts {
        match f.role {
            Role::Activations => {
                per_layer.insert(f.layer, f.mac_count);
            }
            Role::Weights => {
                let has_act = facts
                    .iter()
                    .any(|a| a.layer == f.layer && a.role == Role::Activations);
                if !has_act {
                    *per_layer.entry(f.layer).or_default() += f.mac_count;
                }
            }
        }
    }
    per_layer.values().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sensitivity {
    /// Throughput scales with `ceil(n)`.
    Serial,
    /// Always runs at the baseline width.
    Fixed,
    /// Runs at the next power of two at or above `ceil(n)`.
    PowerOf2,
}

impl Sensitivity {
    pub fn effective_bits(self, n: f64, baseline: u32) -> f64 {
        match self {
            Sensitivity::Serial => n.ceil().max(1.0),
            Sensitivity::Fixed => f64::from(baseline),
            Sensitivity::PowerOf2 => (n.ceil().max(1.0) as u64).next_power_of_two() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorModel {
    pub name: String,
    pub weights: Sensitivity,
    pub activations: Sensitivity,
    pub baseline_bits: u32,
}

const KNOWN: [(&str, Sensitivity, Sensitivity); 6] = [
    ("stripes", Sensitivity::Fixed, Sensitivity::Serial),
    ("loom", Sensitivity::Serial, Sensitivity::Serial),
    ("bismo", Sensitivity::Serial, Sensitivity::Serial),
    ("bitfusion", Sensitivity::PowerOf2, Sensitivity::PowerOf2),
    ("unpu", Sensitivity::Serial, Sensitivity::Fixed),
    ("bit-tactical", Sensitivity::Fixed, Sensitivity::Serial),
];

impl AcceleratorModel {
    pub fn new(name: impl Into<String>, weights: Sensitivity, activations: Sensitivity) -> Self {
        Self {
            name: name.into(),
            weights,
            activations,
            baseline_bits: BASELINE_BITS,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        KNOWN
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(n, w, a)| Self::new(n, w, a))
            .ok_or_else(|| Error::UnknownAccelerator {
                name: name.to_string(),
                known: Self::known_names().join(", "),
            })
    }

    pub fn known_names() -> Vec<&'static str> {
        KNOWN.iter().map(|(n, _, _)| *n).collect()
    }

    pub fn all() -> Vec<Self> {
        KNOWN.iter().map(|&(n, w, a)| Self::new(n, w, a)).collect()
    }

    fn sensitivity(&self, role: Role) -> Sensitivity {
        match role {
            Role::Weights => self.weights,
            Role::Activations => self.activations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorEstimate {
    pub name: String,
    pub speedup: f64,
    pub memory_ratio: f64,
}

/// `(speedup, memory ratio)` relative to running every operand at the
/// model's baseline width. Operands without a group run at the baseline.
pub fn accelerator_estimate(
    facts: &[GroupCostFacts],
    bits: &BitAssignment,
    accel: &AcceleratorModel,
) -> Result<(f64, f64)> {
    let base = f64::from(accel.baseline_bits);
    let eff = |role: Role, n: Option<f64>| -> f64 {
        n.map_or(base, |n| {
            accel
                .sensitivity(role)
                .effective_bits(n, accel.baseline_bits)
        })
    };
    let units = work_units(facts, bits)?;
    let (mut macs, mut time) = (0.0, 0.0);
    for u in &units {
        if u.macs == 0.0 {
            continue;
        }
        let s = (base / eff(Role::Weights, u.weight_bits))
            * (base / eff(Role::Activations, u.act_bits));
        macs += u.macs;
        time += u.macs / s;
    }
    let speedup = if macs > 0.0 { macs / time } else { 1.0 };

    let (mut stored, mut baseline) = (0.0, 0.0);
    for f in facts {
        let e = f.element_count as f64;
        stored += e * eff(f.role, Some(bits[&f.group_id]));
        baseline += e * base;
    }
    let memory_ratio = if baseline > 0.0 {
        stored / baseline
    } else {
        1.0
    };
    Ok((speedup, memory_ratio))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub note: String,
    pub bits: BitAssignment,
    pub batch_size: usize,
    pub weight_footprint_bits: f64,
    pub weight_footprint_bytes: f64,
    pub activation_footprint_bits: f64,
    pub activation_peak_bits: f64,
    pub total_footprint_bits: f64,
    pub total_macs: u64,
    pub bit_ops: f64,
    /// `bit_ops` divided by the uniform-8-bit value.
    pub relative_bit_ops: f64,
    pub accelerators: Vec<AcceleratorEstimate>,
}

pub fn cost_report(
    facts: &[GroupCostFacts],
    bits: &BitAssignment,
    batch_size: usize,
    accelerators: &[AcceleratorModel],
) -> Result<CostReport> {
    let (w, _) = role_footprint(facts, bits, batch_size, Role::Weights)?;
    let (a_total, a_peak) = role_footprint(facts, bits, batch_size, Role::Activations)?;
    let ops = bit_ops(facts, bits)?;
    let uniform: BitAssignment = facts.iter().map(|f| (f.group_id.clone(), 8.0)).collect();
    let base_ops = bit_ops(facts, &uniform)?;
    let accelerators = accelerators
        .iter()
        .map(|m| {
            accelerator_estimate(facts, bits, m).map(|(speedup, memory_ratio)| {
                AcceleratorEstimate {
                    name: m.name.clone(),
                    speedup,
                    memory_ratio,
                }
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostReport {
        note: PROXY_NOTE.to_string(),
        bits: facts
            .iter()
            .map(|f| (f.group_id.clone(), bits[&f.group_id]))
            .collect(),
        batch_size,
        weight_footprint_bits: w,
        weight_footprint_bytes: w / 8.0,
        activation_footprint_bits: a_total,
        activation_peak_bits: a_peak,
        total_footprint_bits: w + a_total,
        total_macs: total_macs(facts),
        bit_ops: ops,
        relative_bit_ops: if base_ops > 0.0 { ops / base_ops } else { 1.0 },
        accelerators,
    })
}

impl CostReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Cost estimate (batch size {})", self.batch_size);
        let _ = writeln!(s, "note: {}", self.note);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>10}", "group", "bits");
        for (g, n) in &self.bits {
            let _ = writeln!(s, "{g:<24} {n:>10.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "weight footprint        {:.0} bits ({:.1} bytes)",
            self.weight_footprint_bits, self.weight_footprint_bytes
        );
        let _ = writeln!(
            s,
            "activation footprint    {:.0} bits total, {:.0} bits peak layer",
            self.activation_footprint_bits, self.activation_peak_bits
        );
        let _ = writeln!(
            s,
            "total footprint         {:.0} bits",
            self.total_footprint_bits
        );
        let _ = writeln!(s, "MACs per sample         {}", self.total_macs);
        let _ = writeln!(
            s,
            "bit-ops                 {:.0} ({:.4} of uniform 8-bit)",
            self.bit_ops, self.relative_bit_ops
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10}",
            "accelerator", "speedup", "memory"
        );
        for a in &self.accelerators {
            let _ = writeln!(
                s,
                "{:<14} {:>10.4} {:>10.4}",
                a.name, a.speedup, a.memory_ratio
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(id: &str, role: Role, layer: usize, elements: u64, macs: u64) -> GroupCostFacts {
        GroupCostFacts {
            group_id: id.into(),
            role,
            layer,
            per_sample_elements: elements,
            element_count: elements,
            mac_count: macs,
            batch_size: 1,
        }
    }

    fn assign(pairs: &[(&str, f64)]) -> BitAssignment {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn thousand_weights_at_four_bits() {
        let facts = [fact("w", Role::Weights, 0, 1000, 1000)];
        let bits = footprint(&facts, &assign(&[("w", 4.0)]), 1, FootprintMode::Total).unwrap();
        assert_eq!(bits, 4000.0);
        assert_eq!(bits / 8.0, 500.0);
    }

    #[test]
    fn missing_group_is_an_error() {
        let facts = [fact("w", Role::Weights, 0, 10, 10)];
        assert!(matches!(
            footprint(&facts, &BitAssignment::new(), 1, FootprintMode::Total),
            Err(Error::MissingGroup(_))
        ));
    }

    #[test]
    fn peak_takes_largest_activation() {
        let facts = [
            fact("w", Role::Weights, 0, 10, 0),
            fact("a0", Role::Activations, 0, 100, 0),
            fact("a1", Role::Activations, 1, 30, 0),
        ];
        let b = assign(&[("w", 2.0), ("a0", 1.0), ("a1", 4.0)]);
        assert_eq!(
            footprint(&facts, &b, 1, FootprintMode::PeakActivation).unwrap(),
            140.0
        );
        assert_eq!(
            footprint(&facts, &b, 2, FootprintMode::Total).unwrap(),
            20.0 + 200.0 + 240.0
        );
    }

    #[test]
    fn bit_ops_formula() {
        let facts = [
            fact("w", Role::Weights, 0, 10, 100),
            fact("a", Role::Activations, 0, 10, 100),
        ];
        assert_eq!(
            bit_ops(&facts, &assign(&[("w", 4.0), ("a", 4.0)])).unwrap(),
            1600.0
        );
        assert_eq!(
            bit_ops(&facts, &assign(&[("w", 4.0), ("a", 2.0)])).unwrap(),
            800.0
        );
        assert_eq!(
            bit_ops(&facts, &assign(&[("w", 8.0), ("a", 8.0)])).unwrap(),
            6400.0
        );
    }

    #[test]
    fn stripes_speedup_two() {
        let facts = [
            fact("w", Role::Weights, 0, 10, 100),
            fact("a", Role::Activations, 0, 10, 100),
        ];
        let m = AcceleratorModel::named("stripes").unwrap();
        let (s, _) = accelerator_estimate(&facts, &assign(&[("w", 3.0), ("a", 4.0)]), &m).unwrap();
        assert_eq!(s, 2.0);
    }

    #[test]
    fn power_of_two_rounds_up() {
        assert_eq!(Sensitivity::PowerOf2.effective_bits(5.0, 8), 8.0);
        assert_eq!(Sensitivity::PowerOf2.effective_bits(2.2, 8), 4.0);
        assert_eq!(Sensitivity::Serial.effective_bits(2.2, 8), 3.0);
        let facts = [
            fact("w", Role::Weights, 0, 10, 100),
            fact("a", Role::Activations, 0, 10, 100),
        ];
        let m = AcceleratorModel::named("bitfusion").unwrap();
        let (s, mem) =
            accelerator_estimate(&facts, &assign(&[("w", 5.0), ("a", 5.0)]), &m).unwrap();
        assert_eq!((s, mem), (1.0, 1.0));
    }

    #[test]
    fn uniform_eight_is_identity_for_every_model() {
        let facts = [
            fact("w0", Role::Weights, 0, 12, 60),
            fact("a0", Role::Activations, 0, 7, 60),
            fact("w1", Role::Weights, 2, 5, 9),
        ];
        let b = assign(&[("w0", 8.0), ("a0", 8.0), ("w1", 8.0)]);
        for m in AcceleratorModel::all() {
            assert_eq!(
                accelerator_estimate(&facts, &b, &m).unwrap(),
                (1.0, 1.0),
                "{}",
                m.name
            );
        }
    }

    #[test]
    fn unknown_model_lists_known() {
        let err = AcceleratorModel::named("tpu").unwrap_err().to_string();
        assert!(
            err.contains("stripes") && err.contains("bitfusion"),
            "{err}"
        );
    }

    #[test]
    fn report_totals() {
        let facts = [
            fact("w", Role::Weights, 0, 1000, 500),
            fact("a", Role::Activations, 0, 50, 500),
        ];
        let r = cost_report(
            &facts,
            &assign(&[("w", 4.0), ("a", 8.0)]),
            1,
            &AcceleratorModel::all(),
        )
        .unwrap();
        assert_eq!(r.weight_footprint_bytes, 500.0);
        assert_eq!(r.total_footprint_bits, 4400.0);
        assert_eq!(r.total_macs, 500);
        assert_eq!(r.relative_bit_ops, 0.5);
        assert!(r.render_text().contains("proxies"));
    }
}
