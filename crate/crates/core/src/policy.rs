//! Period-0 control vector plus one network per later period, with
//! constraint heads applied on top of raw network outputs.

use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use crate::autodiff::{validate_groups, Activation, AutodiffError, BoundNetwork, DenseNetwork, Graph, NodeId, Tensor};

/// Positive slack kept between sigmoid-box outputs and the box edges.
pub const BOX_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("period {t} outside 0..{horizon}")]
    Period { t: usize, horizon: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("invalid policy layout: {0}")]
    Layout(String),
    #[error("corrupt stack snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Where a softmax group takes its total from.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupScale {
    Constant(f64),
    /// A column of the current state.
    State(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSpec {
    Unconstrained,
    /// `lo + (hi - lo) * sigmoid(raw)`, kept strictly inside the box.
    SigmoidBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Softmax per group, each group summing to its scale.
    GroupedSoftmax {
        groups: Arc<[Vec<usize>]>,
        scales: Vec<GroupScale>,
    },
}

impl HeadSpec {
    fn validate(&self, width: usize, state_dim: usize) -> Result<(), PolicyError> {
        match self {
            HeadSpec::Unconstrained => Ok(()),
            HeadSpec::SigmoidBox { lo, hi } => {
                if lo.len() != width || hi.len() != width {
                    return Err(PolicyError::Layout(format!("box bounds must have {width} entries")));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(PolicyError::Layout("box needs lo < hi".into()));
                }
                Ok(())
            }
            HeadSpec::GroupedSoftmax { groups, scales } => {
                validate_groups(groups, width)?;
                if scales.len() != groups.len() {
                    return Err(PolicyError::Layout(format!(
                        "{} groups but {} scales",
                        groups.len(),
                        scales.len()
                    )));
                }
                for s in scales {
                    match *s {
                        GroupScale::Constant(c) if !(c > 0.0 && c.is_finite()) => {
                            return Err(PolicyError::Layout(format!("group scale {c} must be positive")))
                        }
                        GroupScale::State(col) if col >= state_dim => {
                            return Err(PolicyError::Layout(format!("scale column {col} outside state")))
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
        }
    }

    /// Map raw outputs `[r, width]` to feasible controls.
    pub fn apply(&self, g: &mut Graph, raw: NodeId, state: NodeId) -> Result<NodeId, AutodiffError> {
        match self {
            HeadSpec::Unconstrained => Ok(raw),
            HeadSpec::SigmoidBox { lo, hi } => {
                let s = g.sigmoid(raw);
                let s = g.scale(s, 1.0 - 2.0 * BOX_FLOOR);
                let s = g.offset(s, BOX_FLOOR);
                let width: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
                let w = g.input(Tensor::row(&width));
                let s = g.mul(s, w)?;
                if lo.iter().all(|&l| l == 0.0) {
                    Ok(s)
                } else {
                    let l = g.input(Tensor::row(lo));
                    g.add(s, l)
                }
            }
            HeadSpec::GroupedSoftmax { groups, scales } => {
                let scale_node = if scales.iter().all(|s| matches!(s, GroupScale::Constant(_))) {
                    let row: Vec<f64> = scales
                        .iter()
                        .map(|s| match s {
                            GroupScale::Constant(c) => *c,
                            GroupScale::State(_) => unreachable!(),
                        })
                        .collect();
                    g.input(Tensor::row(&row))
                } else {
                    let rows = g.value(state).rows();
                    let mut parts = Vec::with_capacity(scales.len());
                    for s in scales {
                        parts.push(match *s {
                            GroupScale::Constant(c) => g.input(Tensor::filled(rows, 1, c)),
                            GroupScale::State(col) => g.slice_cols(state, col, 1)?,
                        });
                    }
                    g.concat_cols(&parts)?
                };
                g.grouped_softmax(raw, scale_node, groups.clone())
            }
        }
    }
}

/// Feature transform from state to network input: take `len` columns from
/// `start`, optionally take logs, then `(x - shift) / scale` per column.
#[derive(Clone, Debug, PartialEq)]
pub struct InputMap {
    pub start: usize,
    pub len: usize,
    pub log: bool,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputMap {
    pub fn identity(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            log: false,
            shift: vec![0.0; len],
            scale: vec![1.0; len],
        }
    }

    pub fn apply(&self, g: &mut Graph, state: NodeId) -> Result<NodeId, AutodiffError> {
        let cols = g.value(state).cols();
        let mut x = if self.start == 0 && self.len == cols {
            state
        } else {
            g.slice_cols(state, self.start, self.len)?
        };
        if self.log {
            x = g.ln(x);
        }
        if self.shift.iter().any(|&s| s != 0.0) {
            let s = g.input(Tensor::row(&self.shift));
            x = g.sub(x, s)?;
        }
        if self.scale.iter().any(|&s| s != 1.0) {
            let s = g.input(Tensor::row(&self.scale));
            x = g.div(x, s)?;
        }
        Ok(x)
    }
}

/// Shape of a problem's policy: control widths, heads, input transform and
/// network architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim0: usize,
    pub control_dim: usize,
    pub head0: HeadSpec,
    pub head: HeadSpec,
    pub input: InputMap,
    pub hidden: Vec<usize>,
    /// Raw (pre-head) initial period-0 control.
    pub c0_init: Vec<f64>,
    /// Optional initial bias of every network's output layer.
    pub output_bias: Option<Vec<f64>>,
}

impl PolicyLayout {
    pub fn default_hidden(state_dim: usize) -> Vec<usize> {
        let w = (4 * state_dim).max(32);
        vec![w, w]
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.horizon == 0 {
            return Err(PolicyError::Layout("horizon must be at least 1".into()));
        }
        self.head0.validate(self.control_dim0, self.state_dim)?;
        self.head.validate(self.control_dim, self.state_dim)?;
        if self.input.shift.len() != self.input.len
            || self.input.scale.len() != self.input.len
            || self.input.start + self.input.len > self.state_dim
            || self.input.len == 0
        {
            return Err(PolicyError::Layout("input map does not fit the state".into()));
        }
        if self.c0_init.len() != self.control_dim0 {
            return Err(PolicyError::Layout(format!(
                "c0 has {} entries, control dimension is {}",
                self.c0_init.len(),
                self.control_dim0
            )));
        }
        if let Some(b) = &self.output_bias {
            if b.len() != self.control_dim {
                return Err(PolicyError::Layout("output bias width mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn control_dim_at(&self, t: usize) -> usize {
        if t == 0 {
            self.control_dim0
        } else {
            self.control_dim
        }
    }
}

/// Graph handles for one stack, as produced by [`PolicyStack::bind`].
pub struct StackBinding {
    c0: Option<NodeId>,
    nets: Vec<Option<BoundNetwork>>,
}

impl StackBinding {
    pub fn c0(&self) -> Option<NodeId> {
        self.c0
    }

    pub fn network(&self, t: usize) -> Option<&BoundNetwork> {
        self.nets.get(t.checked_sub(1)?).and_then(|b| b.as_ref())
    }
}

pub const STACK_MAGIC: &[u8; 4] = b"MMCS";
pub const STACK_VERSION: u32 = 1;

/// The full control parameter: raw `c0` and networks for periods `1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStack {
    layout: Arc<PolicyLayout>,
    c0: Vec<f64>,
    nets: Vec<DenseNetwork>,
}

impl PolicyStack {
    pub fn init(layout: PolicyLayout, rng: &mut dyn RngCore) -> Result<Self, PolicyError> {
        layout.validate()?;
        let nets = (1..layout.horizon)
            .map(|_| {
                let mut net = DenseNetwork::init(
                    layout.input.len,
                    &layout.hidden,
                    layout.control_dim,
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )?;
                if let Some(bias) = &layout.output_bias {
                    let mut flat = net.flatten();
                    let n = flat.len();
                    flat[n - bias.len()..].copy_from_slice(bias);
                    net.set_flat(&flat)?;
                }
                Ok(net)
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        Ok(Self {
            c0: layout.c0_init.clone(),
            layout: Arc::new(layout),
            nets,
        })
    }

    /// Stack from explicit parts; networks are checked against the layout.
    pub fn from_parts(layout: PolicyLayout, c0: Vec<f64>, nets: Vec<DenseNetwork>) -> Result<Self, PolicyError> {
        layout.validate()?;
        if c0.len() != layout.control_dim0 || c0.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Layout("c0 must be finite with the period-0 width".into()));
        }
        if nets.len() != layout.horizon - 1 {
            return Err(PolicyError::Layout(format!(
                "expected {} networks, got {}",
                layout.horizon - 1,
                nets.len()
            )));
        }
        for n in &nets {
            if n.input_width() != layout.input.len || n.output_width() != layout.control_dim {
                return Err(PolicyError::Layout("network widths do not match the layout".into()));
            }
        }
        Ok(Self {
            layout: Arc::new(layout),
            c0,
            nets,
        })
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    pub fn c0(&self) -> &[f64] {
        &self.c0
    }

    pub fn network(&self, t: usize) -> Option<&DenseNetwork> {
        self.nets.get(t.checked_sub(1)?)
    }

    fn check_period(&self, t: usize) -> Result<(), PolicyError> {
        if t >= self.layout.horizon {
            return Err(PolicyError::Period {
                t,
                horizon: self.layout.horizon,
            });
        }
        Ok(())
    }

    /// Detached copy of period `t`'s parameters (`c0` for `t = 0`).
    pub fn clone_period(&self, t: usize) -> Result<Vec<f64>, PolicyError> {
        self.check_period(t)?;
        Ok(if t == 0 {
            self.c0.clone()
        } else {
            self.nets[t - 1].flatten()
        })
    }

    pub fn restore_period(&mut self, t: usize, params: &[f64]) -> Result<(), PolicyError> {
        self.check_period(t)?;
        let expected = self.period_len(t)?;
        if params.len() != expected {
            return Err(PolicyError::Length {
                expected,
                got: params.len(),
            });
        }
        if t == 0 {
            self.c0.copy_from_slice(params);
        } else {
            self.nets[t - 1].set_flat(params)?;
        }
        Ok(())
    }

    pub fn period_len(&self, t: usize) -> Result<usize, PolicyError> {
        self.check_period(t)?;
        Ok(if t == 0 {
            self.c0.len()
        } else {
            self.nets[t - 1].num_params()
        })
    }

    /// Record the parameters needed for periods `from..T` in `g`. Only
    /// period `trainable` (if any) gets gradient-tracking parameters.
    pub fn bind(&self, g: &mut Graph, from: usize, trainable: Option<usize>) -> StackBinding {
        let c0 = (from == 0).then(|| {
            let v = Tensor::row(&self.c0);
            if trainable == Some(0) {
                g.param(v)
            } else {
                g.input(v)
            }
        });
        let nets = self
            .nets
            .iter()
            .enumerate()
            .map(|(i, net)| {
                let t = i + 1;
                (t >= from).then(|| net.bind(g, trainable == Some(t)))
            })
            .collect();
        StackBinding { c0, nets }
    }

    /// Controls for period `t` given states `[r, n_s]`.
    pub fn control(
        &self,
        g: &mut Graph,
        binding: &StackBinding,
        t: usize,
        state: NodeId,
    ) -> Result<NodeId, PolicyError> {
        self.check_period(t)?;
        let unbound = || PolicyError::Layout(format!("period {t} was not bound"));
        if t == 0 {
            let c0 = binding.c0.ok_or_else(unbound)?;
            let rows = g.value(state).rows();
            let raw = g.broadcast_rows(c0, rows)?;
            Ok(self.layout.head0.apply(g, raw, state)?)
        } else {
            let bound = binding.network(t).ok_or_else(unbound)?;
            let x = self.layout.input.apply(g, state)?;
            let raw = self.nets[t - 1].forward(g, bound, x)?;
            Ok(self.layout.head.apply(g, raw, state)?)
        }
    }

    /// Controls for period `t` at the given states, without gradients.
    pub fn evaluate(&self, t: usize, states: &Tensor) -> Result<Tensor, PolicyError> {
        self.check_period(t)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, t, None);
        let s = g.input(states.clone());
        let c = self.control(&mut g, &b, t, s)?;
        Ok(g.value(c).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STACK_MAGIC);
        out.extend_from_slice(&STACK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layout.horizon as u32).to_le_bytes());
        out.extend_from_slice(&(self.c0.len() as u32).to_le_bytes());
        for v in &self.c0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nets {
            n.write_snapshot(&mut out);
        }
        out
    }

    pub fn from_bytes(layout: PolicyLayout, bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Snapshot(m.to_string());
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8], PolicyError> {
            if r.len() < n {
                return Err(bad("unexpected end of data"));
            }
            let (h, t) = r.split_at(n);
            r = t;
            Ok(h)
        };
        if take(4)? != STACK_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != STACK_VERSION {
            return Err(PolicyError::Snapshot(format!("unsupported version {version}")));
        }
        let horizon = u32_at(take(4)?) as usize;
        if horizon != layout.horizon {
            return Err(PolicyError::Snapshot(format!(
                "snapshot horizon {horizon} differs from problem horizon {}",
                layout.horizon
            )));
        }
        let n0 = u32_at(take(4)?) as usize;
        let c0 = take(n0.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut nets = Vec::with_capacity(horizon.saturating_sub(1));
        for _ in 1..horizon {
            nets.push(DenseNetwork::read_snapshot(&mut r)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Self::from_parts(layout, c0, nets)
    }

    /// Stable 64-bit FNV-1a hash of the serialized stack.
    pub fn fingerprint(&self) -> u64 {
        self.to_bytes().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn box_layout() -> PolicyLayout {
        PolicyLayout {
            horizon: 4,
            state_dim: 3,
            control_dim0: 2,
            control_dim: 2,
            head0: HeadSpec::SigmoidBox {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            head: HeadSpec::SigmoidBox {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            input: InputMap::identity(0, 3),
            hidden: vec![8, 8],
            c0_init: vec![0.0, 0.0],
            output_bias: None,
        }
    }

    fn random_states(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn period_zero_ignores_state() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let stack = PolicyStack::init(box_layout(), &mut rng).unwrap();
        let a = stack.evaluate(0, &random_states(&mut rng, 1, 3)).unwrap();
        let b = stack.evaluate(0, &random_states(&mut rng, 1, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn out_of_range_period_is_an_error() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let stack = PolicyStack::init(box_layout(), &mut rng).unwrap();
        assert!(matches!(
            stack.evaluate(4, &Tensor::zeros(1, 3)),
            Err(PolicyError::Period { t: 4, .. })
        ));
    }

    #[test]
    fn clone_restore_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut stack = PolicyStack::init(box_layout(), &mut rng).unwrap();
        let states = random_states(&mut rng, 100, 3);
        let before = stack.evaluate(2, &states).unwrap();
        let saved = stack.clone_period(2).unwrap();
        stack.restore_period(2, &saved).unwrap();
        assert_eq!(stack.evaluate(2, &states).unwrap(), before);

        let perturbed: Vec<f64> = saved.iter().map(|v| v + 0.3).collect();
        stack.restore_period(2, &perturbed).unwrap();
        assert_ne!(stack.evaluate(2, &states).unwrap(), before);
        stack.restore_period(2, &saved).unwrap();
        assert_eq!(stack.evaluate(2, &states).unwrap(), before);

        assert!(matches!(
            stack.restore_period(2, &saved[1..]),
            Err(PolicyError::Length { .. })
        ));
    }

    #[test]
    fn mutating_one_period_leaves_others_untouched() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let mut stack = PolicyStack::init(box_layout(), &mut rng).unwrap();
        let states = random_states(&mut rng, 20, 3);
        let outs: Vec<Tensor> = (0..4).map(|t| stack.evaluate(t, &states).unwrap()).collect();
        let p: Vec<f64> = stack.clone_period(1).unwrap().iter().map(|v| v * 1.5 + 0.1).collect();
        stack.restore_period(1, &p).unwrap();
        for t in [0, 2, 3] {
            assert_eq!(stack.evaluate(t, &states).unwrap(), outs[t]);
        }
    }

    #[test]
    fn stack_snapshot_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let stack = PolicyStack::init(box_layout(), &mut rng).unwrap();
        let bytes = stack.to_bytes();
        let back = PolicyStack::from_bytes(box_layout(), &bytes).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.fingerprint(), stack.fingerprint());
        assert!(PolicyStack::from_bytes(box_layout(), &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn state_scaled_softmax_groups_sum_to_state_columns() {
        let groups: Arc<[Vec<usize>]> = vec![vec![0, 1], vec![2, 3, 4]].into();
        let layout = PolicyLayout {
            horizon: 2,
            state_dim: 2,
            control_dim0: 5,
            control_dim: 5,
            head0: HeadSpec::GroupedSoftmax {
                groups: groups.clone(),
                scales: vec![GroupScale::Constant(1.0), GroupScale::State(1)],
            },
            head: HeadSpec::GroupedSoftmax {
                groups,
                scales: vec![GroupScale::Constant(1.0), GroupScale::State(1)],
            },
            input: InputMap::identity(0, 2),
            hidden: vec![4],
            c0_init: vec![0.0; 5],
            output_bias: None,
        };
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let stack = PolicyStack::init(layout, &mut rng).unwrap();
        let states = Tensor::matrix(2, 2, vec![0.0, 7.0, 1.0, 0.5]).unwrap();
        let c = stack.evaluate(1, &states).unwrap();
        for r in 0..2 {
            let row = c.row_slice(r);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            let s = states.get(r, 1);
            assert!((row[2] + row[3] + row[4] - s).abs() < 1e-12 * s.max(1.0));
        }
    }
}
