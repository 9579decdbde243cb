//! Neural Markov random field over candidate labels.
//!
//! Every candidate label of every coarse pixel is a node. Neighbour edges join
//! labels of different pixels inside the same non-overlapping `M×M` window;
//! self edges join the labels of one pixel. Layers alternate between the two
//! edge types. Messages are multi-head attention whose logits include terms
//! indexed by the relative pixel offset inside the window.

use std::sync::Arc;

use candle_core::{DType, Tensor, D};

use crate::config::{ModelConfig, SelfEdges};
use crate::features::FeaturePyramid;
use crate::nn::{
    batched_matmul, index_tensor, masked_softmax, sinusoidal, softmax_dim, tensor_from, to_f32_vec, Init, LayerNorm, Linear, Mlp,
    Scope,
};
use crate::observed::LabelFeatureEncoder;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub b: usize,
    pub i: usize,
    pub j: usize,
    pub s: usize,
}

/// Node layout of one label grid `(B, h, w, k)` partitioned into windows.
///
/// Internally nodes are kept window-major, `(B·windows, M²·k, ·)`, ordered by
/// pixel then label, with padding slots for windows that overhang the grid.
#[derive(Debug, Clone)]
pub struct MrfGraph {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub window: usize,
    pub self_edges: bool,
    windows_y: usize,
    windows_x: usize,
    to_window_index: Tensor,
    to_grid_index: Tensor,
    neighbor_mask: Tensor,
    self_mask: Tensor,
    relative_index: Tensor,
}

impl MrfGraph {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        k: usize,
        window: usize,
        self_edges: bool,
        dtype: DType,
    ) -> Result<Self> {
        if window == 0 || k == 0 {
            return Err(Error::InvalidArgument("window and k must be positive".into()));
        }
        let dev = candle_core::Device::Cpu;
        let wy = height.div_ceil(window);
        let wx = width.div_ceil(window);
        let groups = batch * wy * wx;
        let p = window * window;
        let n = p * k;
        let zero_row = batch * height * width * k;

        let mut to_window = vec![zero_row as u32; groups * n];
        let mut to_grid = vec![0u32; zero_row];
        let mut valid = vec![false; groups * p];
        for b in 0..batch {
            for i in 0..height {
                for j in 0..width {
                    let g = (b * wy + i / window) * wx + j / window;
                    let pix = (i % window) * window + j % window;
                    valid[g * p + pix] = true;
                    for s in 0..k {
                        let grid = ((b * height + i) * width + j) * k + s;
                        let win = g * n + pix * k + s;
                        to_window[win] = grid as u32;
                        to_grid[grid] = win as u32;
                    }
                }
            }
        }
        let mut nmask = vec![0.0; groups * n * n];
        for g in 0..groups {
            for a in 0..n {
                for c in 0..n {
                    if valid[g * p + c / k] && a / k != c / k {
                        nmask[(g * n + a) * n + c] = 1.0;
                    }
                }
            }
        }
        let mut smask = vec![1.0; k * k];
        for s in 0..k {
            smask[s * k + s] = 0.0;
        }
        let span = 2 * window - 1;
        let mut rel = Vec::with_capacity(p * p);
        for a in 0..p {
            for c in 0..p {
                let di = (c / window) as isize - (a / window) as isize + window as isize - 1;
                let dj = (c % window) as isize - (a % window) as isize + window as isize - 1;
                rel.push((di as usize * span + dj as usize) as u32);
            }
        }
        Ok(Self {
            batch,
            height,
            width,
            k,
            window,
            self_edges,
            windows_y: wy,
            windows_x: wx,
            to_window_index: index_tensor(to_window, groups * n, &dev)?,
            to_grid_index: index_tensor(to_grid, zero_row, &dev)?,
            neighbor_mask: tensor_from(nmask, (groups, 1, n, n), dtype, &dev)?,
            self_mask: tensor_from(smask, (1, 1, k, k), dtype, &dev)?,
            relative_index: index_tensor(rel, p * p, &dev)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.batch * self.height * self.width * self.k
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_y * self.windows_x
    }

    pub fn window_nodes(&self) -> usize {
        self.window * self.window * self.k
    }

    pub fn window_pixels(&self) -> usize {
        self.window * self.window
    }

    /// Number of distinct relative offsets inside a window.
    pub fn num_offsets(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    /// Relative-offset id per `(query pixel, key pixel)` of a window,
    /// flattened `(M², M²)`.
    pub fn relative_index(&self) -> &Tensor {
        &self.relative_index
    }

    pub fn neighbor_mask(&self) -> &Tensor {
        &self.neighbor_mask
    }

    pub fn self_mask(&self) -> &Tensor {
        &self.self_mask
    }

    pub fn neighbor_partners(&self, n: NodeId) -> Vec<NodeId> {
        let (wi, wj) = (n.i / self.window, n.j / self.window);
        let mut out = Vec::new();
        for i in wi * self.window..((wi + 1) * self.window).min(self.height) {
            for j in wj * self.window..((wj + 1) * self.window).min(self.width) {
                if (i, j) == (n.i, n.j) {
                    continue;
                }
                for s in 0..self.k {
                    out.push(NodeId { b: n.b, i, j, s });
                }
            }
        }
        out
    }

    pub fn self_partners(&self, n: NodeId) -> Vec<NodeId> {
        if !self.self_edges {
            return Vec::new();
        }
        (0..self.k).filter(|&s| s != n.s).map(|s| NodeId { s, ..n }).collect()
    }

    /// Directed edge counts over the whole graph.
    pub fn neighbor_edge_count(&self) -> usize {
        self.nodes().map(|n| self.neighbor_partners(n).len()).sum()
    }

    pub fn self_edge_count(&self) -> usize {
        self.nodes().map(|n| self.self_partners(n).len()).sum()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).map(move |m| NodeId {
            b: m / (self.height * self.width * self.k),
            i: (m / (self.width * self.k)) % self.height,
            j: (m / self.k) % self.width,
            s: m % self.k,
        })
    }

    /// `(B, h, w, k, C)` → `(windows, M²·k, C)`; padding slots are zero.
    pub fn to_window(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.dims().last().unwrap();
        let rows = x.reshape((self.num_nodes(), c))?;
        let rows = Tensor::cat(&[rows, Tensor::zeros((1, c), x.dtype(), x.device())?], 0)?;
        Ok(rows
            .index_select(&self.to_window_index, 0)?
            .reshape((self.num_windows(), self.window_nodes(), c))?)
    }

    /// Inverse of [`MrfGraph::to_window`], dropping padding slots.
    pub fn to_grid(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.dims().last().unwrap();
        let rows = x.reshape((self.num_windows() * self.window_nodes(), c))?;
        Ok(rows
            .index_select(&self.to_grid_index, 0)?
            .reshape((self.batch, self.height, self.width, self.k, c))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Neighbor,
    SelfLabel,
}

/// Attention message function. Query, key and value are computed from the
/// normalised node feature concatenated with an encoding of its disparity.
#[derive(Debug, Clone)]
pub struct LabelAttention {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    /// Offset-indexed vectors added against keys, queries and values.
    pub pos_query: Option<Tensor>,
    pub pos_key: Option<Tensor>,
    pub pos_value: Option<Tensor>,
    /// Learned per-head scalar bias per offset, used when the adaptive terms
    /// are disabled.
    pub fixed_bias: Option<Tensor>,
    pub heads: usize,
    pub encoding_dim: usize,
}

impl LabelAttention {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig, kind: EdgeKind, window: usize) -> Result<Self> {
        let d = cfg.embed_dim;
        let offsets = (2 * window - 1) * (2 * window - 1);
        let mut pos_query = None;
        let mut pos_key = None;
        let mut pos_value = None;
        let mut fixed_bias = None;
        if kind == EdgeKind::Neighbor {
            if cfg.adaptive_bias {
                pos_query = Some(scope.param("pos_query", &[offsets, d], Init::Normal(0.02))?);
                pos_key = Some(scope.param("pos_key", &[offsets, d], Init::Normal(0.02))?);
            } else {
                fixed_bias = Some(scope.param("fixed_bias", &[cfg.heads, offsets], Init::Normal(0.02))?);
            }
            if cfg.position_aggregation {
                pos_value = Some(scope.param("pos_value", &[offsets, d], Init::Normal(0.02))?);
            }
        }
        Ok(Self {
            norm: LayerNorm::new(&mut scope.sub("norm"), d)?,
            qkv: Linear::new(&mut scope.sub("qkv"), d + cfg.disparity_encoding_dim, 3 * d)?,
            out: Linear::new(&mut scope.sub("out"), d, d)?,
            pos_query,
            pos_key,
            pos_value,
            fixed_bias,
            heads: cfg.heads,
            encoding_dim: cfg.disparity_encoding_dim,
        })
    }

    /// Splits `(G, n, H·dh)` into `(G, H, n, dh)`.
    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (g, n, d) = t.dims3()?;
        Ok(t.reshape((g, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn qkv(&self, mu: &Tensor, encoding: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = mu.dims()[2];
        let x = Tensor::cat(&[self.norm.forward(mu)?, encoding.clone()], D::Minus1)?;
        let qkv = self.qkv.forward(&x)?;
        Ok((
            self.split_heads(&qkv.narrow(D::Minus1, 0, d)?)?,
            self.split_heads(&qkv.narrow(D::Minus1, d, d)?)?,
            self.split_heads(&qkv.narrow(D::Minus1, 2 * d, d)?)?,
        ))
    }

    fn merge_heads(t: &Tensor) -> Result<Tensor> {
        let (g, h, n, dh) = t.dims4()?;
        Ok(t.transpose(1, 2)?.reshape((g, n, h * dh))?)
    }

    /// Offset table `(R, D)` gathered to `(H, P_query, P_key, dh)`.
    fn gather_offsets(&self, table: &Tensor, graph: &MrfGraph) -> Result<Tensor> {
        let p = graph.window_pixels();
        let d = table.dims()[1];
        Ok(table
            .index_select(graph.relative_index(), 0)?
            .reshape((p, p, self.heads, d / self.heads))?
            .permute((2, 0, 1, 3))?
            .contiguous()?)
    }

    /// Neighbour messages on window-major nodes `(G, M²·k, D)`.
    pub fn neighbor_message(&self, graph: &MrfGraph, mu: &Tensor, encoding: &Tensor) -> Result<Tensor> {
        let (g, n, _) = mu.dims3()?;
        let p = graph.window_pixels();
        let k = graph.k;
        let (q, kk, v) = self.qkv(mu, encoding)?;
        let dh = q.dims()[3];
        let h = self.heads;
        let mut logits = q.matmul(&kk.transpose(2, 3)?.contiguous()?)?;
        let qp = q.reshape((g, h, p, k, dh))?;
        if let Some(table) = &self.pos_key {
            // q_a · r(a→c), per query pixel against every key pixel.
            let rk = self.gather_offsets(table, graph)?.transpose(2, 3)?.unsqueeze(0)?;
            let t = batched_matmul(&qp, &rk)?;
            let t = t.unsqueeze(5)?.broadcast_as((g, h, p, k, p, k))?.reshape((g, h, n, n))?;
            logits = (logits + t)?;
        }
        if let Some(table) = &self.pos_query {
            // k_c · r(a→c), per key pixel against every query pixel.
            let rq = self.gather_offsets(table, graph)?.permute((0, 2, 3, 1))?.unsqueeze(0)?;
            let kp = kk.reshape((g, h, p, k, dh))?;
            let t = batched_matmul(&kp, &rq)?.permute((0, 1, 4, 2, 3))?;
            let t = t.unsqueeze(3)?.broadcast_as((g, h, p, k, p, k))?.reshape((g, h, n, n))?;
            logits = (logits + t)?;
        }
        logits = (logits / (dh as f64).sqrt())?;
        if let Some(bias) = &self.fixed_bias {
            let b = bias
                .index_select(graph.relative_index(), 1)?
                .reshape((1, h, p, 1, p, 1))?
                .broadcast_as((1, h, p, k, p, k))?
                .reshape((1, h, n, n))?;
            logits = logits.broadcast_add(&b)?;
        }
        let alpha = masked_softmax(&logits, graph.neighbor_mask())?;
        let mut msg = alpha.matmul(&v)?;
        if let Some(table) = &self.pos_value {
            let rv = self.gather_offsets(table, graph)?.unsqueeze(0)?;
            let per_pixel = alpha.reshape((g, h, p, k, p, k))?.sum(D::Minus1)?;
            let t = batched_matmul(&per_pixel, &rv)?.reshape((g, h, n, dh))?;
            msg = (msg + t)?;
        }
        self.out.forward(&Self::merge_heads(&msg)?)
    }

    /// Self messages among the `k` labels of each pixel. Input is
    /// window-major `(G, M²·k, D)`.
    pub fn self_message(&self, graph: &MrfGraph, mu: &Tensor, encoding: &Tensor) -> Result<Tensor> {
        let (g, n, d) = mu.dims3()?;
        let k = graph.k;
        let pix = g * n / k;
        let mu = mu.reshape((pix, k, d))?;
        let enc = encoding.reshape((pix, k, self.encoding_dim))?;
        let (q, kk, v) = self.qkv(&mu, &enc)?;
        let dh = q.dims()[3];
        let logits = (q.matmul(&kk.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let alpha = masked_softmax(&logits, graph.self_mask())?;
        let msg = Self::merge_heads(&alpha.matmul(&v)?)?;
        Ok(self.out.forward(&msg)?.reshape((g, n, d))?)
    }
}

/// One round of message passing followed by a per-node MLP update, both
/// residual.
#[derive(Debug, Clone)]
pub struct MessagePassingLayer {
    pub kind: EdgeKind,
    pub attention: Option<Arc<LabelAttention>>,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl MessagePassingLayer {
    pub fn forward(&self, graph: &MrfGraph, mu: &Tensor, encoding: &Tensor) -> Result<Tensor> {
        let hat = match (&self.attention, self.kind) {
            (Some(a), EdgeKind::Neighbor) => (mu + a.neighbor_message(graph, mu, encoding)?)?,
            (Some(a), EdgeKind::SelfLabel) => (mu + a.self_message(graph, mu, encoding)?)?,
            (None, _) => mu.clone(),
        };
        let upd = self.mlp.forward(&self.norm.forward(&hat)?)?;
        Ok((hat + upd)?)
    }
}

/// Builds the alternating stack: even layers neighbour edges, odd layers self
/// edges (or a plain MLP update when self edges are disabled).
pub fn build_layers(
    scope: &mut Scope<'_>,
    cfg: &ModelConfig,
    count: usize,
    window: usize,
    self_edges: SelfEdges,
    alternate: bool,
) -> Result<Vec<MessagePassingLayer>> {
    let d = cfg.embed_dim;
    let mut layers = Vec::with_capacity(count);
    for l in 0..count {
        let kind = if alternate && l % 2 == 1 {
            EdgeKind::SelfLabel
        } else {
            EdgeKind::Neighbor
        };
        let attention = match (kind, self_edges) {
            (EdgeKind::Neighbor, _) => Some(LabelAttention::new(
                &mut scope.sub(format!("layer{l}.attention")),
                cfg,
                kind,
                window,
            )?),
            (EdgeKind::SelfLabel, SelfEdges::Off) => None,
            (EdgeKind::SelfLabel, SelfEdges::On) => Some(LabelAttention::new(
                &mut scope.sub(format!("layer{l}.attention")),
                cfg,
                kind,
                window,
            )?),
            (EdgeKind::SelfLabel, SelfEdges::Shared) => {
                let prev: &MessagePassingLayer = &layers[l - 1];
                let shared = prev.attention.as_ref().unwrap();
                Some(LabelAttention {
                    pos_query: None,
                    pos_key: None,
                    pos_value: None,
                    fixed_bias: None,
                    ..(**shared).clone()
                })
            }
        };
        layers.push(MessagePassingLayer {
            kind,
            attention: attention.map(Arc::new),
            norm: LayerNorm::new(&mut scope.sub(format!("layer{l}.norm")), d)?,
            mlp: Mlp::new(&mut scope.sub(format!("layer{l}.mlp")), d, cfg.mlp_ratio * d, d)?,
        });
    }
    Ok(layers)
}

/// Full-resolution labelling: `k` hypotheses per pixel with probabilities.
#[derive(Debug, Clone)]
pub struct DisparityField {
    /// `(B, k, H, W)`.
    pub hypotheses: Tensor,
    /// `(B, k, H, W)`, summing to one over `k`.
    pub probabilities: Tensor,
}

impl DisparityField {
    /// Most probable hypothesis per pixel, `(B·H·W)` row-major. Ties go to
    /// the lower disparity.
    pub fn winner_takes_all(&self) -> Result<Vec<f32>> {
        let (b, k, h, w) = self.hypotheses.dims4()?;
        let hyp = to_f32_vec(&self.hypotheses)?;
        let prob = to_f32_vec(&self.probabilities)?;
        Ok(winner_takes_all(&hyp, &prob, b, k, h * w))
    }
}

/// `hyp` and `prob` are `(B, k, N)` flattened.
pub fn winner_takes_all(hyp: &[f32], prob: &[f32], batch: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(batch * n);
    for b in 0..batch {
        for m in 0..n {
            let mut best = 0;
            for s in 1..k {
                let a = (b * k + s) * n + m;
                let c = (b * k + best) * n + m;
                if prob[a] > prob[c] || (prob[a] == prob[c] && hyp[a] < hyp[c]) {
                    best = s;
                }
            }
            out.push(hyp[(b * k + best) * n + m]);
        }
    }
    out
}

/// `(B, h, w, k)` → `(B, k, h·f, w·f)` by replication.
pub fn upsample_labels(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, k) = x.dims4()?;
    Ok(x.permute((0, 3, 1, 2))?
        .reshape((b, k, h, 1, w, 1))?
        .broadcast_as((b, k, h, factor, w, factor))?
        .reshape((b, k, h * factor, w * factor))?)
}

/// `(B, h, w, k, f·f)` → `(B, k, h·f, w·f)` with each vector filling one
/// `f×f` block row-major.
pub fn unfold_blocks(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, k, _) = x.dims5()?;
    Ok(x.reshape((b, h, w, k, factor, factor))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, k, h * factor, w * factor))?)
}

#[derive(Debug, Clone)]
pub struct NmrfInference {
    pub encoder: LabelFeatureEncoder,
    pub layers: Vec<MessagePassingLayer>,
    pub decoder: Mlp,
    window: usize,
    self_edges: SelfEdges,
    encoding_dim: usize,
}

impl NmrfInference {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            encoder: LabelFeatureEncoder::new(&mut scope.sub("observed"), cfg, 8)?,
            layers: build_layers(
                &mut scope.sub("mrf"),
                cfg,
                cfg.inference_layers,
                cfg.inference_window,
                cfg.self_edges,
                true,
            )?,
            decoder: Mlp::new(&mut scope.sub("decoder"), d, d, 128)?,
            window: cfg.inference_window,
            self_edges: cfg.self_edges,
            encoding_dim: cfg.disparity_encoding_dim,
        })
    }

    pub fn graph(&self, batch: usize, height: usize, width: usize, k: usize, dtype: DType) -> Result<MrfGraph> {
        MrfGraph::new(batch, height, width, k, self.window, self.self_edges != SelfEdges::Off, dtype)
    }

    /// `candidates`: `(B, h, w, k)` full-resolution disparities on the
    /// coarse grid. They are treated as constants.
    pub fn forward(&self, pyramid: &FeaturePyramid, candidates: &Tensor) -> Result<DisparityField> {
        let cand = candidates.detach();
        let (b, h, w, k) = cand.dims4()?;
        let graph = self.graph(b, h, w, k, cand.dtype())?;
        let mu = self.encoder.forward(&pyramid.coarse_left, &pyramid.coarse_right, &cand)?;
        let node_feats = run_layers(&self.layers, &graph, &mu, &cand, self.encoding_dim)?;
        let out = self.decoder.forward(&node_feats)?;
        let offsets = unfold_blocks(&out.narrow(D::Minus1, 0, 64)?, 8)?;
        let logits = unfold_blocks(&out.narrow(D::Minus1, 64, 64)?, 8)?;
        Ok(DisparityField {
            hypotheses: (upsample_labels(&cand, 8)? + offsets)?,
            probabilities: softmax_dim(&logits, 1)?,
        })
    }
}

/// Runs a layer stack on grid features `(B, h, w, k, D)` with label
/// disparities `(B, h, w, k)` and returns grid features.
pub fn run_layers(
    layers: &[MessagePassingLayer],
    graph: &MrfGraph,
    features: &Tensor,
    disparities: &Tensor,
    encoding_dim: usize,
) -> Result<Tensor> {
    let z = graph.to_window(&disparities.unsqueeze(D::Minus1)?)?.squeeze(D::Minus1)?;
    let encoding = sinusoidal(&z, encoding_dim)?;
    let mut x = graph.to_window(features)?;
    for layer in layers {
        x = layer.forward(graph, &x, &encoding)?;
    }
    graph.to_grid(&x)
}
