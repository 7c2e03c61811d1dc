use std::sync::Arc;

use rand::{Rng, RngCore};

use super::graph::{sigmoid, validate_groups, Graph, NodeId, SOFTMAX_FLOOR};
use super::tensor::{gemm, Tensor};
use super::AutodiffError;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MMCC";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// Unit-scale softmax within each group of output columns.
    GroupedSoftmax(Arc<[Vec<usize>]>),
}

impl Activation {
    fn tag(&self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::GroupedSoftmax(_) => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weights: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self, AutodiffError> {
        let (out, _) = weights
            .dims()
            .ok_or_else(|| AutodiffError::Shape("layer weights must be a matrix".into()))?;
        if bias.len() != out {
            return Err(AutodiffError::Shape(format!(
                "bias length {} does not match {out} outputs",
                bias.len()
            )));
        }
        if let Activation::GroupedSoftmax(groups) = &activation {
            validate_groups(groups, out)?;
        }
        let bias = Tensor::matrix(1, out, bias.into_data())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Result<Self, AutodiffError> {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(
            Tensor::matrix(outputs, inputs, w)?,
            Tensor::zeros(1, outputs),
            activation,
        )
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Graph handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub params: Vec<(NodeId, NodeId)>,
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, AutodiffError> {
        if layers.is_empty() {
            return Err(AutodiffError::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(AutodiffError::Config(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fully connected net `input -> hidden... -> output`.
    pub fn init(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut dyn RngCore,
    ) -> Result<Self, AutodiffError> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    output_act.clone()
                } else {
                    hidden_act.clone()
                };
                DenseLayer::init(widths[i], widths[i + 1], act, rng)
            })
            .collect::<Result<_, _>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters as one vector: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<(), AutodiffError> {
        if params.len() != self.num_params() {
            return Err(AutodiffError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.data_mut().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Record the parameters in `graph`. With `trainable = false` they are
    /// constants and no gradient is computed for them.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundNetwork {
        let params = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (graph.param(l.weights.clone()), graph.param(l.bias.clone()))
                } else {
                    (graph.input(l.weights.clone()), graph.input(l.bias.clone()))
                }
            })
            .collect();
        BoundNetwork { params }
    }

    pub fn forward(&self, graph: &mut Graph, bound: &BoundNetwork, x: NodeId) -> Result<NodeId, AutodiffError> {
        let mut h = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&bound.params) {
            let z = graph.linear(h, w, b)?;
            h = match &layer.activation {
                Activation::Identity => z,
                Activation::Relu => graph.relu(z),
                Activation::Sigmoid => graph.sigmoid(z),
                Activation::GroupedSoftmax(groups) => {
                    let ones = graph.input(Tensor::filled(1, groups.len(), 1.0));
                    graph.grouped_softmax(z, ones, groups.clone())?
                }
            };
        }
        Ok(h)
    }

    /// Gradient of the bound parameters, flattened like [`Self::flatten`].
    /// Parameters the output does not depend on get zeros.
    pub fn gradient_flat(&self, grads: &super::Gradients, bound: &BoundNetwork) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (l, &(w, b)) in self.layers.iter().zip(&bound.params) {
            match grads.get(w) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, l.weights.len())),
            }
            match grads.get(b) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, l.bias.len())),
            }
        }
        out
    }

    /// Forward pass on plain values, without recording anything.
    /// Bit-identical to [`Self::forward`].
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let (rows, cols) = x
            .dims()
            .ok_or_else(|| AutodiffError::Shape("input must be a matrix".into()))?;
        if cols != self.input_width() {
            return Err(AutodiffError::Dimension {
                node: "network input".into(),
                detail: format!("width {cols}, expected {}", self.input_width()),
            });
        }
        let mut h = x.data().to_vec();
        for l in &self.layers {
            let (inw, outw) = (l.inputs(), l.outputs());
            let mut z = Vec::with_capacity(rows * outw);
            for _ in 0..rows {
                z.extend_from_slice(l.bias.data());
            }
            gemm(
                rows,
                inw,
                outw,
                &h,
                (inw as isize, 1),
                l.weights.data(),
                (1, inw as isize),
                &mut z,
                true,
            );
            match &l.activation {
                Activation::Identity => {}
                Activation::Relu => z.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                }),
                Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
                Activation::GroupedSoftmax(groups) => {
                    for r in 0..rows {
                        let row = &mut z[r * outw..(r + 1) * outw];
                        softmax_groups_in_place(row, groups);
                    }
                }
            }
            h = z;
        }
        Tensor::matrix(rows, self.output_width(), h)
    }

    pub fn write_snapshot(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
            out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
            for v in l.weights.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(l.activation.tag());
            if let Activation::GroupedSoftmax(groups) = &l.activation {
                out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
                for g in groups.iter() {
                    out.extend_from_slice(&(g.len() as u32).to_le_bytes());
                    for &c in g {
                        out.extend_from_slice(&(c as u32).to_le_bytes());
                    }
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_snapshot(&mut out);
        out
    }

    /// Parse one snapshot from the front of `reader`, advancing it.
    pub fn read_snapshot(reader: &mut &[u8]) -> Result<Self, AutodiffError> {
        if take(reader, 4)? != SNAPSHOT_MAGIC {
            return Err(AutodiffError::Snapshot("bad magic".into()));
        }
        let version = read_u32(reader)?;
        if version != SNAPSHOT_VERSION {
            return Err(AutodiffError::Snapshot(format!("unsupported version {version}")));
        }
        let n = read_u32(reader)? as usize;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rows = read_u32(reader)? as usize;
            let cols = read_u32(reader)? as usize;
            let w = read_f64s(reader, rows * cols)?;
            let b = read_f64s(reader, rows)?;
            let act = match take(reader, 1)?[0] {
                0 => Activation::Identity,
                1 => Activation::Relu,
                2 => Activation::Sigmoid,
                3 => {
                    let ng = read_u32(reader)? as usize;
                    let mut groups = Vec::with_capacity(ng.min(1024));
                    for _ in 0..ng {
                        let len = read_u32(reader)? as usize;
                        let g = (0..len)
                            .map(|_| read_u32(reader).map(|c| c as usize))
                            .collect::<Result<Vec<_>, _>>()?;
                        groups.push(g);
                    }
                    Activation::GroupedSoftmax(groups.into())
                }
                t => return Err(AutodiffError::Snapshot(format!("unknown activation tag {t}"))),
            };
            layers.push(DenseLayer::new(
                Tensor::matrix(rows, cols, w)?,
                Tensor::matrix(1, rows, b)?,
                act,
            )?);
        }
        Self::new(layers)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let mut reader = bytes;
        let net = Self::read_snapshot(&mut reader)?;
        if !reader.is_empty() {
            return Err(AutodiffError::Snapshot(format!("{} trailing bytes", reader.len())));
        }
        Ok(net)
    }
}

fn softmax_groups_in_place(row: &mut [f64], groups: &[Vec<usize>]) {
    for g in groups {
        let m = g.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = g.iter().map(|&c| (row[c] - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let floor = SOFTMAX_FLOOR / g.len() as f64;
        for (&c, &ei) in g.iter().zip(&e) {
            row[c] = (1.0 - SOFTMAX_FLOOR) * (ei / s) + floor;
        }
    }
}

pub(crate) fn take<'a>(reader: &mut &'a [u8], n: usize) -> Result<&'a [u8], AutodiffError> {
    if reader.len() < n {
        return Err(AutodiffError::Snapshot("unexpected end of data".into()));
    }
    let (head, rest) = reader.split_at(n);
    *reader = rest;
    Ok(head)
}

pub(crate) fn read_u32(reader: &mut &[u8]) -> Result<u32, AutodiffError> {
    Ok(u32::from_le_bytes(take(reader, 4)?.try_into().unwrap()))
}

pub(crate) fn read_f64s(reader: &mut &[u8], n: usize) -> Result<Vec<f64>, AutodiffError> {
    let bytes = take(
        reader,
        n.checked_mul(8)
            .ok_or_else(|| AutodiffError::Snapshot("length overflow".into()))?,
    )?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
