//! Learned directional interaction edges and stacked graph convolution.
//!
//! Edge strengths come from pairwise interaction scores between node
//! features: `IS[i][j] = phi . (Gamma^T v_i || Gamma'^T v_j)`. A row-wise
//! softmax plus an identity matrix (forced self attention) yields the edge
//! matrix E, which is computed once per sample and shared by all three
//! graph convolution layers `V' = relu(E V W)`.
//!
//! Softmax rows subtract the row max before exponentiating, and the
//! denominator sums the exponentials in value order, so the edge matrix is
//! bit-exactly equivariant under node permutations.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::NodeFeatures;

/// Parameters of the edge scorer: Gamma, Gamma' (C×d) and phi (2d).
///
/// No bias terms; all three maps are pure linear.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub gamma: Array2<f64>,
    pub gamma_prime: Array2<f64>,
    pub phi: Array1<f64>,
}

impl EdgeParams {
    pub fn glorot<R: Rng>(c: usize, d: usize, rng: &mut R) -> Self {
        Self {
            gamma: glorot_matrix(c, d, rng),
            gamma_prime: glorot_matrix(c, d, rng),
            phi: glorot_vector(2 * d, 1, rng),
        }
    }

    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            gamma: Array2::zeros((c, d)),
            gamma_prime: Array2::zeros((c, d)),
            phi: Array1::zeros(2 * d),
        }
    }

    pub fn c(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn d(&self) -> usize {
        self.gamma.ncols()
    }
}

/// Glorot-uniform draw: U(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot_matrix<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-s..s))
}

pub(crate) fn glorot_vector<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array1<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array1::from_shape_fn(fan_in, |_| rng.random_range(-s..s))
}

/// N×N directional edge weights: row-wise softmax of the interaction scores
/// plus, unless self attention was removed, an identity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    e: Array2<f64>,
    self_attention: bool,
}

impl EdgeMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.e
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    /// True when the identity matrix was added (the default formulation).
    pub fn has_self_attention(&self) -> bool {
        self.self_attention
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.e.rows().into_iter().map(|r| r.sum()).collect()
    }
}

/// Pairwise interaction scores `IS[i][j] = phi . (Gamma^T v_i || Gamma'^T v_j)`.
///
/// Generally asymmetric: how much node j affects node i is not how much i
/// affects j.
pub fn interaction_scores(v: &NodeFeatures, p: &EdgeParams) -> Result<Array2<f64>> {
    check_edge_dims(v.matrix(), p)?;
    let (source, target) = interaction_terms(v.matrix(), p);
    let n = v.n();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| source[i] + target[j]))
}

/// Per-node contributions of the score: `source[i] = phi_a . Gamma^T v_i`,
/// `target[j] = phi_b . Gamma'^T v_j`, with phi = (phi_a || phi_b).
fn interaction_terms(v: &Array2<f64>, p: &EdgeParams) -> (Array1<f64>, Array1<f64>) {
    let d = p.d();
    let phi_a = p.phi.slice(ndarray::s![..d]);
    let phi_b = p.phi.slice(ndarray::s![d..]);
    let source = v.dot(&p.gamma).dot(&phi_a);
    let target = v.dot(&p.gamma_prime).dot(&phi_b);
    (source, target)
}

fn check_edge_dims(v: &Array2<f64>, p: &EdgeParams) -> Result<()> {
    if v.ncols() != p.c() || p.gamma_prime.dim() != p.gamma.dim() || p.phi.len() != 2 * p.d() {
        return Err(Error::Shape {
            op: "interaction_scores",
            expected: format!("v N×{c}, gamma {c}×d, gamma' {c}×d, phi 2d", c = p.c()),
            got: format!(
                "v {:?}, gamma {:?}, gamma' {:?}, phi {}",
                v.dim(),
                p.gamma.dim(),
                p.gamma_prime.dim(),
                p.phi.len()
            ),
        });
    }
    Ok(())
}

/// Row-wise stable softmax of the score matrix plus identity.
pub fn edge_matrix(is_mat: &Array2<f64>) -> EdgeMatrix {
    edge_matrix_with(is_mat, true)
}

/// As [`edge_matrix`], with the forced self attention (the added identity)
/// switchable for the ablation.
pub fn edge_matrix_with(is_mat: &Array2<f64>, self_attention: bool) -> EdgeMatrix {
    let mut e = row_softmax(is_mat);
    if self_attention {
        for i in 0..e.nrows() {
            e[(i, i)] += 1.0;
        }
    }
    EdgeMatrix { e, self_attention }
}

/// Row softmax with the row max subtracted before exponentiating. The
/// denominator sums the exponentials in value order (not index order) so the
/// result is invariant to how the nodes happen to be numbered.
fn row_softmax(is_mat: &Array2<f64>) -> Array2<f64> {
    let n = is_mat.nrows();
    let mut out = Array2::zeros((n, n));
    let mut sorted = vec![0.0f64; n];
    for i in 0..n {
        let row = is_mat.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (j, &x) in row.iter().enumerate() {
            out[(i, j)] = (x - max).exp();
        }
        sorted.copy_from_slice(out.row(i).as_slice().expect("contiguous row"));
        sorted.sort_by(|a, b| a.total_cmp(b));
        let denom: f64 = sorted.iter().sum();
        for j in 0..n {
            out[(i, j)] /= denom;
        }
    }
    out
}

/// The three shared-E graph convolution weight matrices, each C×C.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights {
    pub layers: [Array2<f64>; 3],
}

impl GcnWeights {
    pub fn glorot<R: Rng>(c: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                glorot_matrix(c, c, rng),
                glorot_matrix(c, c, rng),
                glorot_matrix(c, c, rng),
            ],
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            layers: [
                Array2::zeros((c, c)),
                Array2::zeros((c, c)),
                Array2::zeros((c, c)),
            ],
        }
    }

    pub fn c(&self) -> usize {
        self.layers[0].nrows()
    }
}

/// One graph convolution layer: `relu(E V W)`.
pub fn graph_conv_layer(e: &EdgeMatrix, v: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if e.n() != v.nrows() || v.ncols() != w.nrows() {
        return Err(Error::Shape {
            op: "graph_conv_layer",
            expected: format!("E {n}×{n}, V {n}×C, W C×C'", n = e.n()),
            got: format!("E {:?}, V {:?}, W {:?}", e.e.dim(), v.dim(), w.dim()),
        });
    }
    let z = e.e.dot(v).dot(w);
    Ok(z.mapv(relu))
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Saved intermediates of one convolution layer.
#[derive(Debug, Clone)]
pub struct GcnLayerTape {
    /// Layer input X_l (N×C).
    pub input: Array2<f64>,
    /// Propagated features E·X_l.
    pub propagated: Array2<f64>,
    /// Pre-activation (E·X_l)·W_l.
    pub preact: Array2<f64>,
}

/// Everything the backward pass needs. The edge matrix is stored exactly
/// once: it is computed from the pre-GCN node features and shared by all
/// three layers.
#[derive(Debug, Clone)]
pub struct GcnTape {
    pub v: Array2<f64>,
    /// V·Gamma.
    pub source_proj: Array2<f64>,
    /// V·Gamma'.
    pub target_proj: Array2<f64>,
    /// Row softmax of IS (without the identity).
    pub softmax: Array2<f64>,
    pub edge: EdgeMatrix,
    pub layers: [GcnLayerTape; 3],
    pub output: Array2<f64>,
}

/// Gradients of a scalar loss with respect to the GCN inputs and parameters.
#[derive(Debug, Clone)]
pub struct GcnGrads {
    pub d_v: Array2<f64>,
    pub d_gamma: Array2<f64>,
    pub d_gamma_prime: Array2<f64>,
    pub d_phi: Array1<f64>,
    pub d_layers: [Array2<f64>; 3],
}

/// Full forward pass: scores → edge matrix (once) → three shared-E layers.
pub fn gcn_forward(
    v: &NodeFeatures,
    p: &EdgeParams,
    g: &GcnWeights,
) -> Result<(Array2<f64>, EdgeMatrix, GcnTape)> {
    gcn_forward_with(v, p, g, true)
}

pub fn gcn_forward_with(
    v: &NodeFeatures,
    p: &EdgeParams,
    g: &GcnWeights,
    self_attention: bool,
) -> Result<(Array2<f64>, EdgeMatrix, GcnTape)> {
    check_edge_dims(v.matrix(), p)?;
    if g.c() != v.c() {
        return Err(Error::Shape {
            op: "gcn_forward",
            expected: format!("W {c}×{c}", c = v.c()),
            got: format!("W {:?}", g.layers[0].dim()),
        });
    }
    let vm = v.matrix();
    let is_mat = interaction_scores(v, p)?;
    let softmax = row_softmax(&is_mat);
    let mut e = softmax.clone();
    if self_attention {
        for i in 0..e.nrows() {
            e[(i, i)] += 1.0;
        }
    }
    let edge = EdgeMatrix { e, self_attention };

    let mut x = vm.clone();
    let mut layers: Vec<GcnLayerTape> = Vec::with_capacity(3);
    for w in &g.layers {
        let propagated = edge.e.dot(&x);
        let preact = propagated.dot(w);
        let next = preact.mapv(relu);
        layers.push(GcnLayerTape {
            input: x,
            propagated,
            preact,
        });
        x = next;
    }
    let layers: [GcnLayerTape; 3] = layers.try_into().expect("exactly 3 layers");

    let tape = GcnTape {
        v: vm.clone(),
        source_proj: vm.dot(&p.gamma),
        target_proj: vm.dot(&p.gamma_prime),
        softmax,
        edge: edge.clone(),
        layers,
        output: x.clone(),
    };
    Ok((x, edge, tape))
}

/// Reverse pass through the three layers and through the edge softmax into
/// Gamma, Gamma', phi, and the node features.
pub fn gcn_backward(
    tape: &GcnTape,
    p: &EdgeParams,
    g: &GcnWeights,
    d_output: &Array2<f64>,
) -> GcnGrads {
    let n = tape.v.nrows();
    let e = tape.edge.matrix();

    let mut d_x = d_output.clone();
    let mut d_edge: Array2<f64> = Array2::zeros((n, n));
    let mut d_layers: [Array2<f64>; 3] = [
        Array2::zeros(g.layers[0].dim()),
        Array2::zeros(g.layers[1].dim()),
        Array2::zeros(g.layers[2].dim()),
    ];
    for l in (0..3).rev() {
        let layer = &tape.layers[l];
        // relu subgradient: 0 at exactly 0
        let d_z = &d_x * &layer.preact.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
        d_layers[l] = layer.propagated.t().dot(&d_z);
        let d_propagated = d_z.dot(&g.layers[l].t());
        d_edge = d_edge + d_propagated.dot(&layer.input.t());
        d_x = e.t().dot(&d_propagated);
    }
    let d_v_layers = d_x;

    // Through E = softmax(IS) (+ I): the identity is constant.
    let s = &tape.softmax;
    let mut d_is = Array2::zeros((n, n));
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..n {
            dot += d_edge[(i, j)] * s[(i, j)];
        }
        for j in 0..n {
            d_is[(i, j)] = s[(i, j)] * (d_edge[(i, j)] - dot);
        }
    }
    // IS[i][j] = source[i] + target[j]
    let d_source: Array1<f64> = d_is.rows().into_iter().map(|r| r.sum()).collect();
    let d_target: Array1<f64> = d_is.columns().into_iter().map(|c| c.sum()).collect();

    let d = p.d();
    let phi_a = p.phi.slice(ndarray::s![..d]).to_owned();
    let phi_b = p.phi.slice(ndarray::s![d..]).to_owned();

    // source = (V·Gamma)·phi_a, target = (V·Gamma')·phi_b
    let d_source_proj = outer(&d_source, &phi_a);
    let d_target_proj = outer(&d_target, &phi_b);
    let d_phi_a = tape.source_proj.t().dot(&d_source);
    let d_phi_b = tape.target_proj.t().dot(&d_target);
    let mut d_phi = Array1::zeros(2 * d);
    d_phi.slice_mut(ndarray::s![..d]).assign(&d_phi_a);
    d_phi.slice_mut(ndarray::s![d..]).assign(&d_phi_b);

    let d_gamma = tape.v.t().dot(&d_source_proj);
    let d_gamma_prime = tape.v.t().dot(&d_target_proj);
    let d_v = d_v_layers + d_source_proj.dot(&p.gamma.t()) + d_target_proj.dot(&p.gamma_prime.t());

    GcnGrads {
        d_v,
        d_gamma,
        d_gamma_prime,
        d_phi,
        d_layers,
    }
}

fn outer(col: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (col.len(), row.len());
    Array2::from_shape_fn((n, m), |(i, j)| col[i] * row[j])
}
