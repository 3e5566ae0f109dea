//! End-to-end model: parameter store, forward composition, and the manual
//! reverse pass that assembles gradients for every learnable array.
//!
//! Forward: temporal aggregation → per-proposal ROI pooling + spatial max
//! pooling → graph convolution over the learned edge matrix → global average
//! descriptor fusion → shared MLP scores. Ablation flags bypass the graph,
//! drop the descriptor, or omit the forced self attention.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    global_avg_pool, roi_pool, spatial_max_pool, temporal_aggregate, FeatureGrid, NodeFeatures,
    Proposal,
};
use crate::graph::{gcn_backward, gcn_forward_with, EdgeMatrix, EdgeParams, GcnTape, GcnWeights};
use crate::loss::{mined_loss, mined_loss_backward, LossBreakdown};
use crate::scoring::{
    fuse_global, score_nodes, score_nodes_backward, MlpParams, MlpTape, ScoreVector,
};

/// Everything that fixes parameter shapes and forward structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Proposals per sample after padding.
    pub n: usize,
    /// Grid channels; also the node feature and GCN width.
    pub c: usize,
    /// Output width of the edge projections Gamma and Gamma'.
    pub d: usize,
    /// ROI pooling bins per side.
    pub r: usize,
    /// Grid temporal extent.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Scoring MLP hidden sizes.
    pub hidden1: usize,
    pub hidden2: usize,
    /// Bypass the interaction graph: score pooled features directly.
    pub no_graph: bool,
    /// Score from node features alone, without the tiled descriptor.
    pub no_global_descriptor: bool,
    /// Omit the identity added to the softmaxed edge matrix.
    pub no_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 40,
            c: 16,
            d: 16,
            r: 7,
            t: 2,
            h: 12,
            w: 12,
            hidden1: 128,
            hidden2: 32,
            no_graph: false,
            no_global_descriptor: false,
            no_self_attention: false,
        }
    }
}

impl ModelConfig {
    /// MLP input width: 2C with the global descriptor, C without.
    pub fn mlp_in_dim(&self) -> usize {
        if self.no_global_descriptor {
            self.c
        } else {
            2 * self.c
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n > 0
            && self.c > 0
            && self.d > 0
            && self.r > 0
            && self.t > 0
            && self.h > 0
            && self.w > 0
            && self.hidden1 > 0
            && self.hidden2 > 0;
        if !all_positive {
            return Err(Error::Config(
                "all model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable 64-bit hash of every shape-determining field. Embedded in
    /// weight files to catch silent dimension mismatches.
    pub fn hash(&self) -> u64 {
        let canonical = format!(
            "n={};c={};d={};r={};t={};h={};w={};h1={};h2={};ng={};ngd={};nsa={}",
            self.n,
            self.c,
            self.d,
            self.r,
            self.t,
            self.h,
            self.w,
            self.hidden1,
            self.hidden2,
            self.no_graph as u8,
            self.no_global_descriptor as u8,
            self.no_self_attention as u8
        );
        fnv1a64(canonical.as_bytes())
    }
}

/// FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// All learnable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Temporal conv kernel (T, C, C).
    pub temporal_conv: Array3<f64>,
    pub edge: EdgeParams,
    pub gcn: GcnWeights,
    pub mlp: MlpParams,
}

impl ModelParams {
    /// Glorot-uniform matrices, zero biases, from a seeded generator. Draw
    /// order follows the named-array order, so a seed pins every weight.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = (cfg.t * cfg.c + cfg.c) as f64;
        let s = (6.0 / fan).sqrt();
        let temporal_conv =
            Array3::from_shape_fn((cfg.t, cfg.c, cfg.c), |_| rng.random_range(-s..s));
        let edge = EdgeParams::glorot(cfg.c, cfg.d, &mut rng);
        let gcn = GcnWeights::glorot(cfg.c, &mut rng);
        let mlp = MlpParams::glorot(cfg.mlp_in_dim(), cfg.hidden1, cfg.hidden2, &mut rng);
        Self {
            temporal_conv,
            edge,
            gcn,
            mlp,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            temporal_conv: Array3::zeros((cfg.t, cfg.c, cfg.c)),
            edge: EdgeParams::zeros(cfg.c, cfg.d),
            gcn: GcnWeights::zeros(cfg.c),
            mlp: MlpParams::zeros(cfg.mlp_in_dim(), cfg.hidden1, cfg.hidden2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            temporal_conv: Array3::zeros(self.temporal_conv.dim()),
            edge: EdgeParams {
                gamma: Array2::zeros(self.edge.gamma.dim()),
                gamma_prime: Array2::zeros(self.edge.gamma_prime.dim()),
                phi: Array1::zeros(self.edge.phi.len()),
            },
            gcn: GcnWeights {
                layers: [
                    Array2::zeros(self.gcn.layers[0].dim()),
                    Array2::zeros(self.gcn.layers[1].dim()),
                    Array2::zeros(self.gcn.layers[2].dim()),
                ],
            },
            mlp: MlpParams {
                w1: Array2::zeros(self.mlp.w1.dim()),
                b1: Array1::zeros(self.mlp.b1.len()),
                w2: Array2::zeros(self.mlp.w2.dim()),
                b2: Array1::zeros(self.mlp.b2.len()),
                w3: Array2::zeros(self.mlp.w3.dim()),
                b3: Array1::zeros(self.mlp.b3.len()),
            },
        }
    }

    /// Named views of every array: (name, shape, flat row-major values).
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::with_capacity(13);
        out.push((
            "temporal_conv".to_string(),
            self.temporal_conv.shape().to_vec(),
            self.temporal_conv.iter().copied().collect(),
        ));
        out.push((
            "edge.gamma".to_string(),
            self.edge.gamma.shape().to_vec(),
            self.edge.gamma.iter().copied().collect(),
        ));
        out.push((
            "edge.gamma_prime".to_string(),
            self.edge.gamma_prime.shape().to_vec(),
            self.edge.gamma_prime.iter().copied().collect(),
        ));
        out.push((
            "edge.phi".to_string(),
            vec![self.edge.phi.len()],
            self.edge.phi.to_vec(),
        ));
        for (i, w) in self.gcn.layers.iter().enumerate() {
            out.push((
                format!("gcn.w{}", i + 1),
                w.shape().to_vec(),
                w.iter().copied().collect(),
            ));
        }
        for (name, w) in [("mlp.w1", &self.mlp.w1), ("mlp.w2", &self.mlp.w2), ("mlp.w3", &self.mlp.w3)] {
            out.push((
                name.to_string(),
                w.shape().to_vec(),
                w.iter().copied().collect(),
            ));
        }
        for (name, b) in [("mlp.b1", &self.mlp.b1), ("mlp.b2", &self.mlp.b2), ("mlp.b3", &self.mlp.b3)] {
            out.push((name.to_string(), vec![b.len()], b.to_vec()));
        }
        out
    }

    /// Rebuild from named arrays; shapes must match the configuration.
    pub fn from_named_arrays(
        cfg: &ModelConfig,
        arrays: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let mut params = Self::zeros(cfg);
        let expected = params.named_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((name, shape, values), (exp_name, exp_shape, _)) in arrays.iter().zip(&expected) {
            if name != exp_name {
                return Err(Error::Format(format!(
                    "parameter '{}' out of order, expected '{}'",
                    name, exp_name
                )));
            }
            if shape != exp_shape {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name, shape, exp_shape
                )));
            }
            if values.len() != shape.iter().product::<usize>() {
                return Err(Error::Format(format!(
                    "parameter '{}' has {} values for shape {:?}",
                    name,
                    values.len(),
                    shape
                )));
            }
            params.assign_named(name, values);
        }
        Ok(params)
    }

    fn assign_named(&mut self, name: &str, values: &[f64]) {
        let dst: Vec<&mut f64> = match name {
            "temporal_conv" => self.temporal_conv.iter_mut().collect(),
            "edge.gamma" => self.edge.gamma.iter_mut().collect(),
            "edge.gamma_prime" => self.edge.gamma_prime.iter_mut().collect(),
            "edge.phi" => self.edge.phi.iter_mut().collect(),
            "gcn.w1" => self.gcn.layers[0].iter_mut().collect(),
            "gcn.w2" => self.gcn.layers[1].iter_mut().collect(),
            "gcn.w3" => self.gcn.layers[2].iter_mut().collect(),
            "mlp.w1" => self.mlp.w1.iter_mut().collect(),
            "mlp.w2" => self.mlp.w2.iter_mut().collect(),
            "mlp.w3" => self.mlp.w3.iter_mut().collect(),
            "mlp.b1" => self.mlp.b1.iter_mut().collect(),
            "mlp.b2" => self.mlp.b2.iter_mut().collect(),
            "mlp.b3" => self.mlp.b3.iter_mut().collect(),
            _ => unreachable!("unknown parameter name {name}"),
        };
        for (d, &v) in dst.into_iter().zip(values) {
            *d = v;
        }
    }

    /// Apply `f` to every (name, array-as-mut-slice-like) pair, visiting the
    /// same order as [`Self::named_arrays`].
    pub fn for_each_array_mut(&mut self, mut f: impl FnMut(&str, &mut dyn Iterator<Item = &mut f64>)) {
        f("temporal_conv", &mut self.temporal_conv.iter_mut());
        f("edge.gamma", &mut self.edge.gamma.iter_mut());
        f("edge.gamma_prime", &mut self.edge.gamma_prime.iter_mut());
        f("edge.phi", &mut self.edge.phi.iter_mut());
        f("gcn.w1", &mut self.gcn.layers[0].iter_mut());
        f("gcn.w2", &mut self.gcn.layers[1].iter_mut());
        f("gcn.w3", &mut self.gcn.layers[2].iter_mut());
        f("mlp.w1", &mut self.mlp.w1.iter_mut());
        f("mlp.w2", &mut self.mlp.w2.iter_mut());
        f("mlp.w3", &mut self.mlp.w3.iter_mut());
        f("mlp.b1", &mut self.mlp.b1.iter_mut());
        f("mlp.b2", &mut self.mlp.b2.iter_mut());
        f("mlp.b3", &mut self.mlp.b3.iter_mut());
    }

    /// In-place `self += scale * other`, matching arrays pairwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        fn axpy<'a>(
            dst: impl Iterator<Item = &'a mut f64>,
            src: impl Iterator<Item = &'a f64>,
            scale: f64,
        ) {
            for (d, s) in dst.zip(src) {
                *d += scale * s;
            }
        }
        axpy(self.temporal_conv.iter_mut(), other.temporal_conv.iter(), scale);
        axpy(self.edge.gamma.iter_mut(), other.edge.gamma.iter(), scale);
        axpy(self.edge.gamma_prime.iter_mut(), other.edge.gamma_prime.iter(), scale);
        axpy(self.edge.phi.iter_mut(), other.edge.phi.iter(), scale);
        for l in 0..3 {
            axpy(self.gcn.layers[l].iter_mut(), other.gcn.layers[l].iter(), scale);
        }
        axpy(self.mlp.w1.iter_mut(), other.mlp.w1.iter(), scale);
        axpy(self.mlp.b1.iter_mut(), other.mlp.b1.iter(), scale);
        axpy(self.mlp.w2.iter_mut(), other.mlp.w2.iter(), scale);
        axpy(self.mlp.b2.iter_mut(), other.mlp.b2.iter(), scale);
        axpy(self.mlp.w3.iter_mut(), other.mlp.w3.iter(), scale);
        axpy(self.mlp.b3.iter_mut(), other.mlp.b3.iter(), scale);
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_array_mut(|_, it| {
            for v in it {
                *v *= factor;
            }
        });
    }
}

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams;

/// Saved intermediates of one forward pass.
pub struct ForwardTape {
    pub grid: FeatureGrid,
    pub aggregated: FeatureGrid,
    /// Per node and channel: the (h, w) grid cell the pooled value came from.
    pub pool_argmax: Vec<Vec<(usize, usize)>>,
    pub node_features: NodeFeatures,
    pub gcn: Option<GcnTape>,
    pub descriptor: Option<Array1<f64>>,
    pub mlp: MlpTape,
    pub scores: ScoreVector,
}

/// Run the full pipeline on one sample.
pub fn forward(
    grid: &FeatureGrid,
    proposals: &[Proposal],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(ScoreVector, Option<EdgeMatrix>, ForwardTape)> {
    let (t, h, w, c) = grid.dims();
    if (t, h, w, c) != (cfg.t, cfg.h, cfg.w, cfg.c) {
        return Err(Error::Shape {
            op: "forward(grid)",
            expected: format!("{}x{}x{}x{}", cfg.t, cfg.h, cfg.w, cfg.c),
            got: format!("{}x{}x{}x{}", t, h, w, c),
        });
    }
    if proposals.len() != cfg.n {
        return Err(Error::Shape {
            op: "forward(proposals)",
            expected: format!("{} proposals", cfg.n),
            got: format!("{}", proposals.len()),
        });
    }

    let aggregated = temporal_aggregate(grid, &params.temporal_conv)?;

    let mut vectors = Array2::zeros((cfg.n, cfg.c));
    let mut pool_argmax = Vec::with_capacity(cfg.n);
    for (i, prop) in proposals.iter().enumerate() {
        let pooled = roi_pool(&aggregated, &prop.bbox, cfg.r)?;
        let (v, spatial_argmax) = spatial_max_pool(&pooled.features.view());
        // compose the two argmax layers down to grid cells
        let cells: Vec<(usize, usize)> = spatial_argmax
            .iter()
            .enumerate()
            .map(|(ch, &(by, bx))| pooled.argmax[(by, bx, ch)])
            .collect();
        pool_argmax.push(cells);
        vectors.row_mut(i).assign(&v);
    }
    let node_features = NodeFeatures::new(vectors)?;

    let (updated, edge, gcn_tape) = if cfg.no_graph {
        (node_features.matrix().clone(), None, None)
    } else {
        let (u, e, tape) = gcn_forward_with(
            &node_features,
            &params.edge,
            &params.gcn,
            !cfg.no_self_attention,
        )?;
        (u, Some(e), Some(tape))
    };

    let (fused, descriptor) = if cfg.no_global_descriptor {
        (updated, None)
    } else {
        let d = global_avg_pool(grid);
        (fuse_global(&updated, &d)?, Some(d))
    };

    let (scores, mlp_tape) = score_nodes(&fused, &params.mlp)?;
    let tape = ForwardTape {
        grid: grid.clone(),
        aggregated,
        pool_argmax,
        node_features,
        gcn: gcn_tape,
        descriptor,
        mlp: mlp_tape,
        scores: scores.clone(),
    };
    Ok((scores, edge, tape))
}

/// Mined loss plus exact analytic gradients for every parameter.
pub fn backward(
    tape: &ForwardTape,
    labels: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let breakdown = mined_loss(&tape.scores, labels)?;
    let d_scores = mined_loss_backward(&breakdown, &tape.scores, labels);
    let grads = backward_from_scores(tape, &d_scores, params, cfg);
    Ok((breakdown, grads))
}

/// Reverse pass from a score cotangent (used by both the loss backward and
/// the gradient checker).
pub fn backward_from_scores(
    tape: &ForwardTape,
    d_scores: &Array1<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> ModelGrads {
    let mut grads = params.zeros_like();

    let mlp_grads = score_nodes_backward(&tape.mlp, &params.mlp, d_scores);
    grads.mlp.w1 = mlp_grads.d_w1;
    grads.mlp.b1 = mlp_grads.d_b1;
    grads.mlp.w2 = mlp_grads.d_w2;
    grads.mlp.b2 = mlp_grads.d_b2;
    grads.mlp.w3 = mlp_grads.d_w3;
    grads.mlp.b3 = mlp_grads.d_b3;

    // Split the fused cotangent; the descriptor half ends at the input grid
    // and carries no parameter gradient.
    let d_updated = if cfg.no_global_descriptor {
        mlp_grads.d_input
    } else {
        mlp_grads.d_input.slice(ndarray::s![.., ..cfg.c]).to_owned()
    };

    let d_nodes = match &tape.gcn {
        Some(gcn_tape) => {
            let g = gcn_backward(gcn_tape, &params.edge, &params.gcn, &d_updated);
            grads.edge.gamma = g.d_gamma;
            grads.edge.gamma_prime = g.d_gamma_prime;
            grads.edge.phi = g.d_phi;
            grads.gcn.layers = g.d_layers;
            g.d_v
        }
        None => d_updated,
    };

    // Route node-feature cotangents through the recorded argmax cells onto
    // the aggregated grid, then into the temporal kernel.
    let (_, h, w, _) = tape.aggregated.dims();
    let mut d_aggregated = ndarray::Array4::zeros((1, h, w, cfg.c));
    for (i, cells) in tape.pool_argmax.iter().enumerate() {
        for (ch, &(hy, wx)) in cells.iter().enumerate() {
            d_aggregated[(0, hy, wx, ch)] += d_nodes[(i, ch)];
        }
    }
    let (_, d_kernel) =
        crate::geometry::temporal_aggregate_backward(&tape.grid, &params.temporal_conv, &d_aggregated);
    grads.temporal_conv = d_kernel;

    grads
}
