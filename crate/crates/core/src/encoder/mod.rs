//! A small trainable instantiation of a genotype: stem convolution, stacked
//! normal/reduction cells, global average pooling, and the two projection
//! heads. Gradients are computed by an explicit reverse pass over the traced
//! forward computation; the optimizer is classic momentum SGD.
//!
//! Cell k consumes the outputs of cells k-2 and k-1 (the stem for the first
//! cells), each passed through a 1x1 preprocessing convolution onto the
//! cell's operation width; the output concatenates all intermediate nodes.
//! Reduction cells double the operation width and apply stride 2 to every
//! operation whose source is one of the two cell inputs. Convolutions carry
//! no bias, so a path cut off by zero operations contributes exactly zero
//! gradient to its parameters.

pub mod loss_grad;
pub mod ops;
pub mod params;

use crate::contrastive::{Embedding, MemoryBank};
use crate::data::{Image, Minibatch};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::space::{Genotype, OperationKind};
use loss_grad::contrastive_loss_grad;
use ndarray::{s, Array2, Array3, Array4, Axis, Ix1, Ix2, Ix3, Ix4};
use params::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Where the two reduction cells sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionPlacement {
    /// floor(L/3) and floor(2L/3).
    Thirds,
    /// floor(L/2) and floor(2L/3).
    Halves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of stacked cells (L >= 3).
    pub layers: usize,
    /// Initial operation width (C).
    pub channels: usize,
    /// Input resolution; must be divisible by 4 so two reductions stay even.
    pub input_size: usize,
    /// Projection dimension p of both heads.
    pub embed_dim: usize,
    /// Views per sample (M); fixes the view head input width M * p.
    pub views: usize,
    pub reduction_placement: ReductionPlacement,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::config("layers", "need at least 3 cells"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "need at least one channel"));
        }
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return Err(Error::config(
                "input_size",
                "input resolution must be >= 8 and divisible by 4",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "projection dimension must be positive"));
        }
        if self.views == 0 {
            return Err(Error::config("views", "need at least one view"));
        }
        Ok(())
    }

    pub fn reduction_cells(&self) -> BTreeSet<usize> {
        let l = self.layers;
        match self.reduction_placement {
            ReductionPlacement::Thirds => BTreeSet::from([l / 3, 2 * l / 3]),
            ReductionPlacement::Halves => BTreeSet::from([l / 2, 2 * l / 3]),
        }
    }
}

#[derive(Debug, Clone)]
enum OpInstance {
    SepConv {
        dw: ParamId,
        pw: ParamId,
        dilation: usize,
        stride: usize,
    },
    MaxPool {
        stride: usize,
    },
    AvgPool {
        stride: usize,
    },
    Identity {
        stride: usize,
    },
}

#[derive(Debug, Clone)]
struct EdgeInstance {
    src: usize,
    dst: usize,
    op: OpInstance,
}

#[derive(Debug, Clone)]
struct CellInstance {
    reduction: bool,
    op_channels: usize,
    pre0: ParamId,
    pre0_stride: usize,
    pre1: ParamId,
    /// Indices into the per-batch output list (0 = stem, k+1 = cell k).
    in0_idx: usize,
    in1_idx: usize,
    edges: Vec<EdgeInstance>,
}

enum OpTrace {
    SepConv {
        post_relu: Array4<f64>,
        post_dw: Array4<f64>,
    },
    MaxPool {
        argmax: Array4<u32>,
    },
    AvgPool,
    Identity,
}

struct CellTrace {
    pre0_out: Array4<f64>,
    pre1_out: Array4<f64>,
    nodes: Vec<Array4<f64>>,
    edges: Vec<OpTrace>,
}

/// Saved activations of one encoder pass.
pub struct EncodeTrace {
    input: Array4<f64>,
    outputs: Vec<Array4<f64>>,
    cells: Vec<CellTrace>,
}

/// Everything the backward pass needs from one full forward pass.
pub struct ForwardPass {
    trace: EncodeTrace,
    features: Array2<f64>,
    /// g-projections of all rows: K originals, then K*M views anchor-major.
    g_out: Array2<f64>,
    head_input: Array2<f64>,
    pub z: Array2<f64>,
    pub views: Array3<f64>,
    pub z_t: Array2<f64>,
}

/// Batch embeddings in the contrastive module's types.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub ids: Vec<u64>,
    pub z: Vec<Embedding>,
    pub z_t: Vec<Embedding>,
    pub views: Vec<Vec<Embedding>>,
}

#[derive(Debug)]
pub struct BackwardOutcome {
    /// Mean blended loss over anchors.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// Fresh original-path embeddings, for staging memory-bank updates.
    pub fresh: Vec<(u64, Embedding)>,
}

pub struct MiniNetwork {
    genotype: Genotype,
    config: EncoderConfig,
    stem: ParamId,
    cells: Vec<CellInstance>,
    g_w: ParamId,
    g_b: ParamId,
    l_w: ParamId,
    l_b: ParamId,
    feature_dim: usize,
    params: ParamStore,
}

impl MiniNetwork {
    /// Deterministically initialize a network for one genotype. Fails when a
    /// reduction would hit an odd spatial size.
    pub fn build(genotype: Genotype, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = genotype.n_intermediate();
        let reductions = config.reduction_cells();
        let mut rng = stream_rng(seed, STREAM_INIT);
        let mut params = ParamStore::new();
        let c = config.channels;
        let stem = params.add_uniform("stem.w", &[c, 3, 3, 3], 3 * 9, &mut rng);

        let mut cells = Vec::with_capacity(config.layers);
        let (mut ch_pp, mut ch_p) = (c, c);
        let (mut hw_pp, mut hw_p) = (config.input_size, config.input_size);
        let mut c_op = c;
        for k in 0..config.layers {
            let reduction = reductions.contains(&k);
            if reduction {
                if hw_p % 2 != 0 {
                    return Err(Error::Infeasible(format!(
                        "reduction cell {k} sees odd spatial size {hw_p}"
                    )));
                }
                c_op *= 2;
            }
            if hw_pp % hw_p != 0 || !(1..=2).contains(&(hw_pp / hw_p)) {
                return Err(Error::Infeasible(format!(
                    "cell {k} inputs disagree on spatial size ({hw_pp} vs {hw_p})"
                )));
            }
            let pre0_stride = hw_pp / hw_p;
            let pre0 = params.add_uniform(
                format!("cell{k}.pre0.w"),
                &[c_op, ch_pp, 1, 1],
                ch_pp,
                &mut rng,
            );
            let pre1 = params.add_uniform(
                format!("cell{k}.pre1.w"),
                &[c_op, ch_p, 1, 1],
                ch_p,
                &mut rng,
            );
            let graph = if reduction {
                genotype.reduction().decode()
            } else {
                genotype.normal().decode()
            };
            let mut edges = Vec::with_capacity(graph.edges().len());
            for e in graph.edges() {
                let stride = if reduction && e.src < 2 { 2 } else { 1 };
                let sep = |params: &mut ParamStore,
                           rng: &mut rand_chacha::ChaCha8Rng,
                           kernel: usize,
                           dilation: usize| {
                    let dw = params.add_uniform(
                        format!("cell{k}.edge{}_{}.dw", e.src, e.dst),
                        &[c_op, kernel, kernel],
                        kernel * kernel,
                        rng,
                    );
                    let pw = params.add_uniform(
                        format!("cell{k}.edge{}_{}.pw", e.src, e.dst),
                        &[c_op, c_op, 1, 1],
                        c_op,
                        rng,
                    );
                    OpInstance::SepConv {
                        dw,
                        pw,
                        dilation,
                        stride,
                    }
                };
                let op = match e.op {
                    OperationKind::SepConv3x3 => sep(&mut params, &mut rng, 3, 1),
                    OperationKind::SepConv5x5 => sep(&mut params, &mut rng, 5, 1),
                    OperationKind::DilConv3x3 => sep(&mut params, &mut rng, 3, 2),
                    OperationKind::DilConv5x5 => sep(&mut params, &mut rng, 5, 2),
                    OperationKind::MaxPool3x3 => OpInstance::MaxPool { stride },
                    OperationKind::AvgPool3x3 => OpInstance::AvgPool { stride },
                    OperationKind::Identity => OpInstance::Identity { stride },
                    OperationKind::Zero => unreachable!("decode drops zero edges"),
                };
                edges.push(EdgeInstance {
                    src: e.src,
                    dst: e.dst,
                    op,
                });
            }
            cells.push(CellInstance {
                reduction,
                op_channels: c_op,
                pre0,
                pre0_stride,
                pre1,
                in0_idx: k.saturating_sub(1),
                in1_idx: k,
                edges,
            });
            let out_ch = n * c_op;
            ch_pp = ch_p;
            ch_p = out_ch;
            hw_pp = hw_p;
            if reduction {
                hw_p /= 2;
            }
        }

        let p = config.embed_dim;
        let feature_dim = ch_p;
        let g_w = params.add_uniform("g_head.w", &[p, feature_dim], feature_dim, &mut rng);
        let g_b = params.add_uniform("g_head.b", &[p], feature_dim, &mut rng);
        let l_in = config.views * p;
        let l_w = params.add_uniform("l_head.w", &[p, l_in], l_in, &mut rng);
        let l_b = params.add_uniform("l_head.b", &[p], l_in, &mut rng);

        Ok(MiniNetwork {
            genotype,
            config,
            stem,
            cells,
            g_w,
            g_b,
            l_w,
            l_b,
            feature_dim,
            params,
        })
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save_params(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load_params(&mut self, path: &std::path::Path) -> Result<()> {
        self.params.load(path)
    }

    fn v4(&self, id: ParamId) -> ndarray::ArrayView4<'_, f64> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-d parameter")
    }

    fn v3(&self, id: ParamId) -> ndarray::ArrayView3<'_, f64> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-d parameter")
    }

    fn v2(&self, id: ParamId) -> ndarray::ArrayView2<'_, f64> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    fn v1(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.params
            .value(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }

    fn op_forward(&self, op: &OpInstance, src: &Array4<f64>) -> (Array4<f64>, OpTrace) {
        match *op {
            OpInstance::SepConv {
                dw,
                pw,
                dilation,
                stride,
            } => {
                let post_relu = ops::relu_forward(src);
                let post_dw =
                    ops::depthwise_forward(&post_relu, &self.v3(dw).to_owned(), stride, dilation);
                let out = ops::conv2d_forward(&post_dw, &self.v4(pw).to_owned(), 1, 1);
                (out, OpTrace::SepConv { post_relu, post_dw })
            }
            OpInstance::MaxPool { stride } => {
                let (out, argmax) = ops::maxpool3_forward(src, stride);
                (out, OpTrace::MaxPool { argmax })
            }
            OpInstance::AvgPool { stride } => {
                (ops::avgpool3_forward(src, stride), OpTrace::AvgPool)
            }
            OpInstance::Identity { stride } => {
                (ops::subsample_forward(src, stride), OpTrace::Identity)
            }
        }
    }

    /// Encoder forward over a stacked image batch; returns pooled features
    /// and the trace for the backward pass.
    pub fn encode(&self, x: &Array4<f64>) -> Result<(Array2<f64>, EncodeTrace)> {
        let (batch, ch, h, w) = x.dim();
        if ch != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::ShapeMismatch {
                what: "encoder input".into(),
                expected: format!("[*, 3, {0}, {0}]", self.config.input_size),
                got: format!("[{batch}, {ch}, {h}, {w}]"),
            });
        }
        let stem_out = ops::conv2d_forward(x, &self.v4(self.stem).to_owned(), 1, 1);
        let mut outputs = vec![stem_out];
        let mut cell_traces = Vec::with_capacity(self.cells.len());
        let n = self.genotype.n_intermediate();
        for (k, cell) in self.cells.iter().enumerate() {
            let pre0_out = ops::conv2d_forward(
                &outputs[cell.in0_idx],
                &self.v4(cell.pre0).to_owned(),
                cell.pre0_stride,
                1,
            );
            let pre1_out = ops::conv2d_forward(
                &outputs[cell.in1_idx],
                &self.v4(cell.pre1).to_owned(),
                1,
                1,
            );
            let in_hw = pre1_out.dim().2;
            let out_hw = if cell.reduction { in_hw / 2 } else { in_hw };
            let mut nodes =
                vec![Array4::<f64>::zeros((batch, cell.op_channels, out_hw, out_hw)); n];
            let mut edge_traces = Vec::with_capacity(cell.edges.len());
            for edge in &cell.edges {
                let (out, trace) = {
                    let src_val = match edge.src {
                        0 => &pre0_out,
                        1 => &pre1_out,
                        j => &nodes[j - 2],
                    };
                    self.op_forward(&edge.op, src_val)
                };
                nodes[edge.dst - 2] += &out;
                edge_traces.push(trace);
            }
            let views: Vec<_> = nodes.iter().map(|t| t.view()).collect();
            let cell_out = ndarray::concatenate(Axis(1), &views).expect("same node shapes");
            if cell_out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFault(format!(
                    "non-finite activation in cell {k}"
                )));
            }
            cell_traces.push(CellTrace {
                pre0_out,
                pre1_out,
                nodes,
                edges: edge_traces,
            });
            outputs.push(cell_out);
        }
        let features = ops::global_avg_pool(outputs.last().unwrap());
        Ok((
            features,
            EncodeTrace {
                input: x.clone(),
                outputs,
                cells: cell_traces,
            },
        ))
    }

    fn op_backward(
        params: &mut ParamStore,
        op: &OpInstance,
        trace: &OpTrace,
        src: &Array4<f64>,
        upstream: &Array4<f64>,
    ) -> Array4<f64> {
        match (op, trace) {
            (
                OpInstance::SepConv {
                    dw,
                    pw,
                    dilation,
                    stride,
                    ..
                },
                OpTrace::SepConv { post_relu, post_dw },
            ) => {
                let pw_w = params
                    .value(*pw)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let (d_post_dw, d_pw) = ops::conv2d_backward(post_dw, &pw_w, upstream, 1, 1);
                *params.grad_mut(*pw) += &d_pw.into_dyn();
                let dw_w = params
                    .value(*dw)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned();
                let (d_post_relu, d_dw) =
                    ops::depthwise_backward(post_relu, &dw_w, &d_post_dw, *stride, *dilation);
                *params.grad_mut(*dw) += &d_dw.into_dyn();
                ops::relu_backward(src, &d_post_relu)
            }
            (OpInstance::MaxPool { .. }, OpTrace::MaxPool { argmax }) => {
                ops::maxpool3_backward(src.dim(), argmax, upstream)
            }
            (OpInstance::AvgPool { stride }, OpTrace::AvgPool) => {
                ops::avgpool3_backward(src.dim(), upstream, *stride)
            }
            (OpInstance::Identity { stride }, OpTrace::Identity) => {
                ops::subsample_backward(src.dim(), upstream, *stride)
            }
            _ => unreachable!("trace kind matches op kind"),
        }
    }

    /// Reverse pass from pooled-feature gradients down to every parameter.
    /// Accumulates into the parameter store's gradient buffers.
    pub fn encode_backward(&mut self, trace: &EncodeTrace, d_features: &Array2<f64>) {
        let last_dim = trace.outputs.last().unwrap().dim();
        let mut d_outputs: Vec<Array4<f64>> = trace
            .outputs
            .iter()
            .map(|t| Array4::zeros(t.dim()))
            .collect();
        *d_outputs.last_mut().unwrap() = ops::global_avg_pool_backward(last_dim, d_features);

        let Self {
            ref cells,
            ref mut params,
            ..
        } = *self;

        for (k, cell) in cells.iter().enumerate().rev() {
            let tr = &trace.cells[k];
            let grad_out = std::mem::replace(
                &mut d_outputs[k + 1],
                Array4::zeros((0, 0, 0, 0)),
            );
            let c = cell.op_channels;
            let mut d_nodes: Vec<Array4<f64>> = (0..tr.nodes.len())
                .map(|j| grad_out.slice(s![.., j * c..(j + 1) * c, .., ..]).to_owned())
                .collect();
            let mut d_pre0 = Array4::<f64>::zeros(tr.pre0_out.dim());
            let mut d_pre1 = Array4::<f64>::zeros(tr.pre1_out.dim());

            // Descending destination order: a node's gradient is complete
            // before any edge into it is processed.
            for (edge, etrace) in cell.edges.iter().zip(&tr.edges).rev() {
                let src_val = match edge.src {
                    0 => &tr.pre0_out,
                    1 => &tr.pre1_out,
                    j => &tr.nodes[j - 2],
                };
                let d_src = {
                    let upstream = &d_nodes[edge.dst - 2];
                    Self::op_backward(params, &edge.op, etrace, src_val, upstream)
                };
                match edge.src {
                    0 => d_pre0 += &d_src,
                    1 => d_pre1 += &d_src,
                    j => d_nodes[j - 2] += &d_src,
                }
            }

            let pre1_w = params
                .value(cell.pre1)
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let (d_in1, d_pre1_w) =
                ops::conv2d_backward(&trace.outputs[cell.in1_idx], &pre1_w, &d_pre1, 1, 1);
            *params.grad_mut(cell.pre1) += &d_pre1_w.into_dyn();
            d_outputs[cell.in1_idx] += &d_in1;

            let pre0_w = params
                .value(cell.pre0)
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let (d_in0, d_pre0_w) = ops::conv2d_backward(
                &trace.outputs[cell.in0_idx],
                &pre0_w,
                &d_pre0,
                cell.pre0_stride,
                1,
            );
            *params.grad_mut(cell.pre0) += &d_pre0_w.into_dyn();
            d_outputs[cell.in0_idx] += &d_in0;
        }

        let stem_w = params
            .value(self.stem)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (_, d_stem) = ops::conv2d_backward(&trace.input, &stem_w, &d_outputs[0], 1, 1);
        *params.grad_mut(self.stem) += &d_stem.into_dyn();
    }

    /// Stack a minibatch into one [K(1+M), 3, S, S] tensor: originals first,
    /// then views anchor-major.
    fn stack_minibatch(&self, mb: &Minibatch) -> Result<Array4<f64>> {
        let k = mb.k();
        let m = mb.m();
        if m != self.config.views {
            return Err(Error::config(
                "views",
                format!("batch has {m} views, network was built for {}", self.config.views),
            ));
        }
        let s_len = self.config.input_size;
        let total = k * (1 + m);
        let mut x = Array4::<f64>::zeros((total, 3, s_len, s_len));
        let copy_into = |x: &mut Array4<f64>, row: usize, image: &Image| -> Result<()> {
            if image.height() != s_len || image.width() != s_len {
                return Err(Error::ShapeMismatch {
                    what: "minibatch image".into(),
                    expected: format!("{s_len}x{s_len}"),
                    got: format!("{}x{}", image.height(), image.width()),
                });
            }
            x.slice_mut(s![row, .., .., ..]).assign(image.pixels());
            Ok(())
        };
        for (i, vs) in mb.view_sets().iter().enumerate() {
            copy_into(&mut x, i, &vs.original)?;
            for (v, view) in vs.views.iter().enumerate() {
                copy_into(&mut x, k + i * m + v, view)?;
            }
        }
        Ok(x)
    }

    /// Full forward pass: encode all originals and views, g-project
    /// everything, and fuse each anchor's view projections through the view
    /// head.
    pub fn forward_minibatch(&self, mb: &Minibatch) -> Result<ForwardPass> {
        let k = mb.k();
        let m = mb.m();
        let p = self.config.embed_dim;
        let x = self.stack_minibatch(mb)?;
        let (features, trace) = self.encode(&x)?;
        let g_out = ops::linear_forward(&features, &self.v2(self.g_w).to_owned(), &self.v1(self.g_b).to_owned());
        if g_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFault("non-finite projection".into()));
        }
        let z = g_out.slice(s![..k, ..]).to_owned();
        let views = g_out
            .slice(s![k.., ..])
            .to_owned()
            .into_shape_with_order((k, m, p))
            .expect("view rows reshape");
        let head_input = views
            .to_shape((k, m * p))
            .expect("contiguous reshape")
            .to_owned();
        let z_t = ops::linear_forward(
            &head_input,
            &self.v2(self.l_w).to_owned(),
            &self.v1(self.l_b).to_owned(),
        );
        if z_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFault("non-finite view projection".into()));
        }
        Ok(ForwardPass {
            trace,
            features,
            g_out,
            head_input,
            z,
            views,
            z_t,
        })
    }

    /// The embeddings of one minibatch in the contrastive module's types.
    pub fn forward_embeddings(&self, mb: &Minibatch) -> Result<BatchEmbeddings> {
        let fwd = self.forward_minibatch(mb)?;
        let ids: Vec<u64> = mb.view_sets().iter().map(|vs| vs.sample_id).collect();
        let row = |a: ndarray::ArrayView1<f64>| Embedding::new(a.to_vec());
        let z = (0..mb.k())
            .map(|i| row(fwd.z.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let z_t = (0..mb.k())
            .map(|i| row(fwd.z_t.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let views = (0..mb.k())
            .map(|i| {
                (0..mb.m())
                    .map(|v| row(fwd.views.slice(s![i, v, ..])))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchEmbeddings { ids, z, z_t, views })
    }

    /// Bank rows for the batch: the cached entry, or the anchor's fresh z on
    /// first sight (constant with respect to parameters either way).
    fn bank_rows(fwd: &ForwardPass, ids: &[u64], bank: &MemoryBank) -> Result<Array2<f64>> {
        let (k, p) = fwd.z.dim();
        if bank.dim() != p {
            return Err(Error::ShapeMismatch {
                what: "memory bank".into(),
                expected: p.to_string(),
                got: bank.dim().to_string(),
            });
        }
        let mut r = Array2::<f64>::zeros((k, p));
        for (i, id) in ids.iter().enumerate() {
            match bank.get(*id) {
                Some(entry) => {
                    for (j, v) in entry.iter().enumerate() {
                        r[[i, j]] = *v;
                    }
                }
                None => r.row_mut(i).assign(&fwd.z.row(i)),
            }
        }
        Ok(r)
    }

    /// Forward-only loss, computed through the contrastive module's loss
    /// functions; leaves the bank untouched. Used for scoring and as the
    /// value function of finite-difference checks.
    pub fn loss_batch(
        &self,
        mb: &Minibatch,
        bank: &MemoryBank,
        tau: f64,
        lambda: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_minibatch(mb)?;
        let ids: Vec<u64> = mb.view_sets().iter().map(|vs| vs.sample_id).collect();
        let r = Self::bank_rows(&fwd, &ids, bank)?;
        let k = mb.k();
        let m = mb.m();
        let to_emb = |a: ndarray::ArrayView1<f64>| Embedding::new(a.to_vec());
        let mut per_anchor = Vec::with_capacity(k);
        for i in 0..k {
            let mut negatives = Vec::with_capacity(m * (k - 1));
            for j in 0..k {
                if j == i {
                    continue;
                }
                for v in 0..m {
                    negatives.push(to_emb(fwd.views.slice(s![j, v, ..]))?);
                }
            }
            let loss = crate::contrastive::final_loss(
                &to_emb(r.row(i))?,
                &to_emb(fwd.z.row(i))?,
                &to_emb(fwd.z_t.row(i))?,
                &negatives,
                tau,
                lambda,
            )?;
            per_anchor.push(loss);
        }
        let mean = per_anchor.iter().sum::<f64>() / k as f64;
        Ok((mean, per_anchor))
    }

    /// Forward, loss, and a full gradient accumulation pass. Gradient buffers
    /// are zeroed first; the bank is read but not written (callers stage the
    /// returned fresh embeddings).
    pub fn backward_batch(
        &mut self,
        mb: &Minibatch,
        bank: &MemoryBank,
        tau: f64,
        lambda: f64,
    ) -> Result<BackwardOutcome> {
        let fwd = self.forward_minibatch(mb)?;
        let ids: Vec<u64> = mb.view_sets().iter().map(|vs| vs.sample_id).collect();
        let r = Self::bank_rows(&fwd, &ids, bank)?;
        let lg = contrastive_loss_grad(&fwd.z, &fwd.views, &fwd.z_t, &r, tau, lambda)?;

        self.params.zero_grads();
        let k = mb.k();
        let m = mb.m();
        let p = self.config.embed_dim;

        // View head: z_t = l(head_input).
        let l_w = self.v2(self.l_w).to_owned();
        let (d_head_input, d_lw, d_lb) = ops::linear_backward(&fwd.head_input, &l_w, &lg.d_zt);
        *self.params.grad_mut(self.l_w) += &d_lw.into_dyn();
        *self.params.grad_mut(self.l_b) += &d_lb.into_dyn();

        // Total gradient on the g-projections: originals from the loss,
        // views from the loss (negative usage) plus the view head.
        let d_views_total = &lg.d_views
            + &d_head_input
                .into_shape_with_order((k, m, p))
                .expect("head input reshape");
        let mut d_g_out = Array2::<f64>::zeros(fwd.g_out.dim());
        d_g_out.slice_mut(s![..k, ..]).assign(&lg.d_z);
        d_g_out.slice_mut(s![k.., ..]).assign(
            &d_views_total
                .to_shape((k * m, p))
                .expect("contiguous reshape"),
        );

        let g_w = self.v2(self.g_w).to_owned();
        let (d_features, d_gw, d_gb) = ops::linear_backward(&fwd.features, &g_w, &d_g_out);
        *self.params.grad_mut(self.g_w) += &d_gw.into_dyn();
        *self.params.grad_mut(self.g_b) += &d_gb.into_dyn();

        self.encode_backward(&fwd.trace, &d_features);

        let fresh = ids
            .iter()
            .enumerate()
            .map(|(i, id)| Ok((*id, Embedding::new(fwd.z.row(i).to_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BackwardOutcome {
            loss: lg.loss,
            per_anchor: lg.per_anchor,
            fresh,
        })
    }

    /// Classic momentum SGD over every parameter.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        self.params.sgd_step(lr, momentum);
        self.params.assert_finite()
    }
}
