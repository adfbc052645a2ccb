//! Uniform min/max fake quantization with learnable real-valued bitlengths.
//!
//! For an integer bitlength `n` a value `v` in `[l_min, l_max]` maps to the
//! nearest point of the grid `l_min + k * scale`, `scale = (l_max - l_min) /
//! (2^n - 1)`. A real bitlength `n = b + alpha` linearly interpolates
//! between the `b`-bit and `(b+1)`-bit grids, which makes the output
//! differentiable in `n`. The backward pass is straight-through for the
//! values and exact (the slope of the interpolation) for `n`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Layer, Model};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Lower clip on the effective bitlength.
pub const N_MIN: f64 = 1.0;
/// Upper clamp on the effective bitlength.
pub const N_MAX: f64 = 16.0;
/// Initial bitlength of every group.
pub const N_INIT: f64 = 8.0;

/// Largest integer bitlength whose grid is exactly representable in f64.
const N_INT_LIMIT: u32 = 53;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weights,
    Activations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeSource {
    BatchDynamic,
    TensorStatic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeStats {
    pub l_min: f64,
    pub l_max: f64,
    pub source: RangeSource,
}

impl RangeStats {
    pub fn new(l_min: f64, l_max: f64) -> Self {
        Self {
            l_min,
            l_max,
            source: RangeSource::TensorStatic,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.l_min == self.l_max
    }
}

fn source_for(role: Role) -> RangeSource {
    match role {
        Role::Activations => RangeSource::BatchDynamic,
        Role::Weights => RangeSource::TensorStatic,
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Exact min and max over every element of `values`.
pub fn range_of(values: &Tensor, role: Role) -> Result<RangeStats> {
    if values.is_empty() {
        return Err(Error::Empty("range_of"));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("range_of".into()));
    }
    let (l_min, l_max) = min_max(values.data());
    Ok(RangeStats {
        l_min,
        l_max,
        source: source_for(role),
    })
}

/// Smallest representable difference at `n` bits.
pub fn scale(stats: &RangeStats, n: u32) -> Result<f64> {
    check_int_bits(n)?;
    if stats.is_degenerate() {
        return Err(Error::DegenerateRange(stats.l_min));
    }
    Ok((stats.l_max - stats.l_min) / levels(n))
}

fn check_int_bits(n: u32) -> Result<()> {
    if !(1..=N_INT_LIMIT).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "integer bitlength must be in 1..={N_INT_LIMIT}, got {n}"
        )));
    }
    Ok(())
}

fn levels(n: u32) -> f64 {
    ((1u64 << n) - 1) as f64
}

/// One element of `Q_i`. Ties round half to even; the top grid index
/// returns `l_max` itself so both endpoints are exact.
#[inline]
fn grid_point(v: f64, l_min: f64, l_max: f64, levels: f64) -> f64 {
    let step = (l_max - l_min) / levels;
    let k = ((v - l_min) / step).round_ties_even().clamp(0.0, levels);
    if k == levels {
        l_max
    } else {
        l_min + k * step
    }
}

/// `Q_i(V, n)`. A degenerate range returns the input unchanged.
pub fn quantize_integer(values: &Tensor, stats: &RangeStats, n: u32) -> Result<Tensor> {
    check_int_bits(n)?;
    if !values.all_finite() {
        return Err(Error::NonFinite("quantize_integer input".into()));
    }
    if stats.is_degenerate() {
        return Ok(values.clone());
    }
    let lv = levels(n);
    let data = values
        .data()
        .iter()
        .map(|&v| grid_point(v, stats.l_min, stats.l_max, lv))
        .collect();
    Tensor::new(values.shape().to_vec(), data)
}

/// Splits a clipped real bitlength into its integer floor and fraction.
fn split_bits(n: f64) -> (u32, f64) {
    let clipped = n.clamp(N_MIN, N_MAX);
    let b = clipped.floor();
    (b as u32, clipped - b)
}

/// `Q_r(V, n)` for real `n`, clipped into `[N_MIN, N_MAX]`.
pub fn quantize_fractional(values: &Tensor, stats: &RangeStats, n: f64) -> Result<Tensor> {
    if !n.is_finite() {
        return Err(Error::NonFinite("quantize_fractional bitlength".into()));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("quantize_fractional input".into()));
    }
    if stats.is_degenerate() {
        return Ok(values.clone());
    }
    let (b, alpha) = split_bits(n);
    let (lo, hi) = (levels(b), levels(b + 1));
    let data = values
        .data()
        .iter()
        .map(|&v| {
            let qb = grid_point(v, stats.l_min, stats.l_max, lo);
            if alpha == 0.0 {
                qb
            } else {
                let qn = grid_point(v, stats.l_min, stats.l_max, hi);
                qb + alpha * (qn - qb)
            }
        })
        .collect();
    Tensor::new(values.shape().to_vec(), data)
}

/// How a quantized tensor is split into cells that each own one bitlength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Whole,
    /// One cell per index along this axis.
    Axis(usize),
}

impl Partition {
    fn cells(&self, shape: &[usize]) -> Result<usize> {
        match *self {
            Partition::Whole => Ok(1),
            Partition::Axis(a) if a < shape.len() => Ok(shape[a]),
            Partition::Axis(a) => Err(Error::InvalidArgument(format!(
                "partition axis {a} out of range for shape {shape:?}"
            ))),
        }
    }

    fn cell_of(&self, shape: &[usize]) -> impl Fn(usize) -> usize {
        let (inner, count) = match *self {
            Partition::Whole => (1, 1),
            Partition::Axis(a) => (shape[a + 1..].iter().product::<usize>(), shape[a]),
        };
        move |i| (i / inner) % count
    }
}

/// Straight-through backward rule for [`fake_quantize`].
#[derive(Debug)]
struct FakeQuantRule {
    partition: Partition,
    /// `Q_i(v, b+1) - Q_i(v, b)` per element.
    slope: Vec<f64>,
    /// Unclipped bitlength of each cell.
    raw_bits: Vec<f64>,
}

impl CustomOp for FakeQuantRule {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        // dQ/dV = 1
        out.push(needs[0].then(|| upstream.to_vec()));
        if needs[1..].iter().any(|&n| n) {
            let cell_of = self.partition.cell_of(inputs[0].shape());
            let mut per_cell = vec![0.0; self.raw_bits.len()];
            for (i, (g, s)) in upstream.iter().zip(&self.slope).enumerate() {
                per_cell[cell_of(i)] += g * s;
            }
            for (c, g) in per_cell.into_iter().enumerate() {
                let n = self.raw_bits[c];
                let blocked = (n <= N_MIN && g > 0.0) || (n >= N_MAX && g < 0.0);
                out.push(Some(vec![if blocked { 0.0 } else { g }]));
            }
        } else {
            out.extend(std::iter::repeat_with(|| None).take(inputs.len() - 1));
        }
        out
    }
}

/// Records `Q_r(x, n_c)` on the tape, one scalar bitlength per partition
/// cell. Ranges are taken from the current values of each cell and are
/// constants for the backward pass.
pub fn fake_quantize(
    tape: &mut Tape,
    x: Var,
    bits: &[Var],
    partition: Partition,
    role: Role,
) -> Result<Var> {
    let input = tape.value(x);
    let shape = input.shape().to_vec();
    let cells = partition.cells(&shape)?;
    if bits.len() != cells {
        return Err(Error::Shape {
            op: "fake_quantize",
            lhs: shape,
            rhs: vec![bits.len()],
        });
    }
    if !input.all_finite() {
        return Err(Error::NonFinite(format!("fake_quantize input ({role:?})")));
    }
    let mut raw_bits = Vec::with_capacity(cells);
    for &b in bits {
        let n = tape.value(b);
        if !n.is_scalar() || !n.item().is_finite() {
            return Err(Error::NonFinite("fake_quantize bitlength".into()));
        }
        raw_bits.push(n.item());
    }
    let cell_of = partition.cell_of(&shape);
    let data = input.data();
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); cells];
    for (i, &v) in data.iter().enumerate() {
        let r = &mut ranges[cell_of(i)];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    let split: Vec<(f64, f64, f64)> = raw_bits
        .iter()
        .map(|&n| {
            let (b, alpha) = split_bits(n);
            (levels(b), levels(b + 1), alpha)
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    let mut slope = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        let c = cell_of(i);
        let (lo, hi) = ranges[c];
        if lo == hi {
            out.push(v);
            slope.push(0.0);
            continue;
        }
        let (lb, lb1, alpha) = split[c];
        let qb = grid_point(v, lo, hi, lb);
        let qn = grid_point(v, lo, hi, lb1);
        out.push(if alpha == 0.0 {
            qb
        } else {
            qb + alpha * (qn - qb)
        });
        slope.push(qn - qb);
    }
    let value = Tensor::new(shape, out)?;
    let mut inputs = Vec::with_capacity(bits.len() + 1);
    inputs.push(x);
    inputs.extend_from_slice(bits);
    Ok(tape.custom(
        &inputs,
        value,
        Box::new(FakeQuantRule {
            partition,
            slope,
            raw_bits,
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Tensor,
    Channel,
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Granularity::Tensor),
            "channel" => Ok(Granularity::Channel),
            other => Err(Error::Config(format!(
                "granularity must be `tensor` or `channel`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleSelection {
    Weights,
    Activations,
    Both,
}

impl RoleSelection {
    fn includes(self, role: Role) -> bool {
        matches!(
            (self, role),
            (RoleSelection::Both, _)
                | (RoleSelection::Weights, Role::Weights)
                | (RoleSelection::Activations, Role::Activations)
        )
    }
}

/// A set of values sharing one learned bitlength and one loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGroup {
    pub id: String,
    /// Index into [`Model::layers`].
    pub layer: usize,
    pub role: Role,
    /// Output channel for per-channel weight groups.
    pub cell: Option<usize>,
    pub bits: ParamId,
    pub lambda: f64,
}

/// Whether the forward pass uses the learned real bitlengths or their
/// ceilings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitMode {
    Learned,
    Integer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub granularity: Granularity,
    pub roles: RoleSelection,
    pub groups: Vec<QuantGroup>,
}

impl QuantPlan {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, id: &str) -> Option<&QuantGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn activation_group(&self, layer: usize) -> Option<&QuantGroup> {
        self.groups
            .iter()
            .find(|g| g.layer == layer && g.role == Role::Activations)
    }

    /// Weight groups of a layer ordered by cell.
    pub fn weight_groups(&self, layer: usize) -> Vec<&QuantGroup> {
        self.groups
            .iter()
            .filter(|g| g.layer == layer && g.role == Role::Weights)
            .collect()
    }

    pub fn set_lambdas(&mut self, lambdas: &BTreeMap<String, f64>) -> Result<()> {
        for g in &mut self.groups {
            let l = *lambdas
                .get(&g.id)
                .ok_or_else(|| Error::MissingGroup(g.id.clone()))?;
            if l.is_nan() || l < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda for `{}` must be >= 0, got {l}",
                    g.id
                )));
            }
            g.lambda = l;
        }
        Ok(())
    }

    /// Current real bitlength of every group.
    pub fn bits(&self, store: &ParamStore) -> BTreeMap<String, f64> {
        self.groups
            .iter()
            .map(|g| (g.id.clone(), store.bits(g.bits)))
            .collect()
    }

    /// Arithmetic mean of the bitlengths of one role, `None` when the role
    /// has no groups.
    pub fn mean_bits(&self, store: &ParamStore, role: Role) -> Option<f64> {
        let v: Vec<f64> = self
            .groups
            .iter()
            .filter(|g| g.role == role)
            .map(|g| store.bits(g.bits))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_all_bits(&self, store: &ParamStore) -> f64 {
        self.groups.iter().map(|g| store.bits(g.bits)).sum::<f64>() / self.groups.len() as f64
    }

    /// Applies `fake_quantize` to a layer input when the layer has an
    /// activation group.
    pub(crate) fn quantize_activation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
        mode: BitMode,
    ) -> Result<Var> {
        match self.activation_group(layer) {
            Some(g) => {
                let b = bit_var(tape, store, g.bits, mode);
                fake_quantize(tape, x, &[b], Partition::Whole, Role::Activations)
            }
            None => Ok(x),
        }
    }

    pub(crate) fn quantize_weight(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        w: Var,
        channel_axis: usize,
        mode: BitMode,
    ) -> Result<Var> {
        let groups = self.weight_groups(layer);
        if groups.is_empty() {
            return Ok(w);
        }
        let bits: Vec<Var> = groups
            .iter()
            .map(|g| bit_var(tape, store, g.bits, mode))
            .collect();
        let partition = if groups[0].cell.is_some() {
            Partition::Axis(channel_axis)
        } else {
            Partition::Whole
        };
        fake_quantize(tape, w, &bits, partition, Role::Weights)
    }
}

fn bit_var(tape: &mut Tape, store: &ParamStore, id: ParamId, mode: BitMode) -> Var {
    match mode {
        BitMode::Learned => tape.param(store, id),
        BitMode::Integer => tape.constant(Tensor::scalar(store.bits(id).ceil())),
    }
}

/// Creates bitlength parameters for every linear/conv weight tensor and
/// every linear/conv input activation, first and last layers included.
/// Per-channel granularity splits weights by output channel; activations
/// always form one group per layer.
pub fn attach_quantization(
    model: &mut Model,
    granularity: Granularity,
    roles: RoleSelection,
) -> Result<QuantPlan> {
    if model.is_quantized() {
        return Err(Error::AlreadyQuantized);
    }
    let sites: Vec<(usize, String, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Linear {
                name, out_features, ..
            } => Some((i, name.clone(), *out_features)),
            Layer::Conv2d {
                name, out_channels, ..
            } => Some((i, name.clone(), *out_channels)),
            _ => None,
        })
        .collect();
    let mut groups = Vec::new();
    for (layer, name, out_channels) in sites {
        if roles.includes(Role::Weights) {
            let cells: Vec<Option<usize>> = match granularity {
                Granularity::Tensor => vec![None],
                Granularity::Channel => (0..out_channels).map(Some).collect(),
            };
            for cell in cells {
                let id = match cell {
                    None => format!("{name}.w"),
                    Some(c) => format!("{name}.w[{c}]"),
                };
                let bits = model.params_mut().add(
                    format!("{id}.bits"),
                    Tensor::scalar(N_INIT),
                    ParamKind::Bitlength,
                )?;
                groups.push(QuantGroup {
                    id,
                    layer,
                    role: Role::Weights,
                    cell,
                    bits,
                    lambda: 0.0,
                });
            }
        }
        if roles.includes(Role::Activations) {
            let id = format!("{name}.a");
            let bits = model.params_mut().add(
                format!("{id}.bits"),
                Tensor::scalar(N_INIT),
                ParamKind::Bitlength,
            )?;
            groups.push(QuantGroup {
                id,
                layer,
                role: Role::Activations,
                cell: None,
                bits,
                lambda: 0.0,
            });
        }
    }
    model.mark_quantized();
    Ok(QuantPlan {
        granularity,
        roles,
        groups,
    })
}
