//! Global-context fusion and the shared scoring MLP.
//!
//! The global descriptor is tiled and concatenated after each node's updated
//! features (node features first, descriptor second — fixed for weight-file
//! portability), then a shared two-hidden-layer MLP with ReLU activations and
//! a sigmoid output produces one importance score per node.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::glorot_matrix;

/// Shared MLP parameters for shape `in_dim -> h1 -> h2 -> 1`.
///
/// `in_dim` is 2C with the global descriptor, C without it.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl MlpParams {
    pub fn glorot<R: Rng>(in_dim: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot_matrix(in_dim, h1, rng),
            b1: Array1::zeros(h1),
            w2: glorot_matrix(h1, h2, rng),
            b2: Array1::zeros(h2),
            w3: glorot_matrix(h2, 1, rng),
            b3: Array1::zeros(1),
        }
    }

    pub fn zeros(in_dim: usize, h1: usize, h2: usize) -> Self {
        Self {
            w1: Array2::zeros((in_dim, h1)),
            b1: Array1::zeros(h1),
            w2: Array2::zeros((h1, h2)),
            b2: Array1::zeros(h2),
            w3: Array2::zeros((h2, 1)),
            b3: Array1::zeros(1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }
}

/// Per-node importance scores, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Array1<f64>,
}

impl ScoreVector {
    /// Wraps raw sigmoid outputs, clamping away from exact 0 and 1 so the
    /// open-interval invariant holds even at saturation.
    pub fn from_sigmoid(raw: Array1<f64>) -> Self {
        const LO: f64 = 1e-15;
        const HI: f64 = 1.0 - 1e-15;
        Self {
            scores: raw.mapv(|s| s.clamp(LO, HI)),
        }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Concatenate the tiled global descriptor after each node row: Y = [U | D].
pub fn fuse_global(u: &Array2<f64>, d: &Array1<f64>) -> Result<Array2<f64>> {
    let (n, c) = u.dim();
    if d.len() != c {
        return Err(Error::Shape {
            op: "fuse_global",
            expected: format!("descriptor of length {}", c),
            got: format!("length {}", d.len()),
        });
    }
    Ok(Array2::from_shape_fn((n, 2 * c), |(i, j)| {
        if j < c {
            u[(i, j)]
        } else {
            d[j - c]
        }
    }))
}

/// Intermediates saved by [`score_nodes`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub input: Array2<f64>,
    pub preact1: Array2<f64>,
    pub hidden1: Array2<f64>,
    pub preact2: Array2<f64>,
    pub hidden2: Array2<f64>,
    pub raw_scores: Array1<f64>,
}

/// Gradients for the MLP parameters plus the input rows.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_w1: Array2<f64>,
    pub d_b1: Array1<f64>,
    pub d_w2: Array2<f64>,
    pub d_b2: Array1<f64>,
    pub d_w3: Array2<f64>,
    pub d_b3: Array1<f64>,
    pub d_input: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Apply the shared MLP row-wise and squash with a sigmoid.
pub fn score_nodes(y: &Array2<f64>, m: &MlpParams) -> Result<(ScoreVector, MlpTape)> {
    if y.ncols() != m.in_dim() {
        return Err(Error::Shape {
            op: "score_nodes",
            expected: format!("rows of width {}", m.in_dim()),
            got: format!("width {}", y.ncols()),
        });
    }
    let preact1 = y.dot(&m.w1) + &m.b1;
    let hidden1 = preact1.mapv(|z| z.max(0.0));
    let preact2 = hidden1.dot(&m.w2) + &m.b2;
    let hidden2 = preact2.mapv(|z| z.max(0.0));
    let out = hidden2.dot(&m.w3) + &m.b3;
    let raw_scores: Array1<f64> = out.column(0).mapv(sigmoid);
    let tape = MlpTape {
        input: y.clone(),
        preact1,
        hidden1,
        preact2,
        hidden2,
        raw_scores: raw_scores.clone(),
    };
    Ok((ScoreVector::from_sigmoid(raw_scores), tape))
}

/// Reverse pass of [`score_nodes`]. `d_scores` is the cotangent of the
/// sigmoid outputs.
pub fn score_nodes_backward(tape: &MlpTape, m: &MlpParams, d_scores: &Array1<f64>) -> MlpGrads {
    let n = tape.input.nrows();
    // sigmoid' = s (1 - s)
    let d_out = Array2::from_shape_fn((n, 1), |(i, _)| {
        let s = tape.raw_scores[i];
        d_scores[i] * s * (1.0 - s)
    });
    let d_w3 = tape.hidden2.t().dot(&d_out);
    let d_b3 = d_out.sum_axis(ndarray::Axis(0));
    let d_hidden2 = d_out.dot(&m.w3.t());
    let d_preact2 = &d_hidden2 * &tape.preact2.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
    let d_w2 = tape.hidden1.t().dot(&d_preact2);
    let d_b2 = d_preact2.sum_axis(ndarray::Axis(0));
    let d_hidden1 = d_preact2.dot(&m.w2.t());
    let d_preact1 = &d_hidden1 * &tape.preact1.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
    let d_w1 = tape.input.t().dot(&d_preact1);
    let d_b1 = d_preact1.sum_axis(ndarray::Axis(0));
    let d_input = d_preact1.dot(&m.w1.t());
    MlpGrads {
        d_w1,
        d_b1,
        d_w2,
        d_b2,
        d_w3,
        d_b3,
        d_input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_with_zero_descriptor() {
        let u = array![[1.0, 2.0], [3.0, 4.0]];
        let d = Array1::zeros(2);
        let y = fuse_global(&u, &d).unwrap();
        assert_eq!(y, array![[1.0, 2.0, 0.0, 0.0], [3.0, 4.0, 0.0, 0.0]]);
    }

    #[test]
    fn fuse_single_row() {
        let u = array![[1.0, -1.0, 0.5]];
        let d = array![9.0, 8.0, 7.0];
        let y = fuse_global(&u, &d).unwrap();
        assert_eq!(y.dim(), (1, 6));
        assert_eq!(y, array![[1.0, -1.0, 0.5, 9.0, 8.0, 7.0]]);
    }

    #[test]
    fn fuse_matches_loop_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let d = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let y = fuse_global(&u, &d).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(y[(i, j)], u[(i, j)]);
                assert_eq!(y[(i, 4 + j)], d[j]);
            }
        }
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let u = Array2::<f64>::zeros((2, 3));
        let d = Array1::<f64>::zeros(4);
        assert!(fuse_global(&u, &d).is_err());
    }

    #[test]
    fn zero_mlp_scores_half() {
        let m = MlpParams::zeros(6, 4, 3);
        let y = Array2::from_elem((5, 6), 1.7);
        let (scores, _) = score_nodes(&y, &m).unwrap();
        assert!(scores.values().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn duplicate_rows_share_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpParams::glorot(4, 8, 3, &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = Array2::from_shape_fn((3, 4), |(_, j)| row[j]);
        let (scores, _) = score_nodes(&y, &m).unwrap();
        assert_eq!(scores.values()[0], scores.values()[1]);
        assert_eq!(scores.values()[1], scores.values()[2]);
    }

    #[test]
    fn mlp_matches_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MlpParams::glorot(4, 5, 3, &mut rng);
        let y = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let (scores, _) = score_nodes(&y, &m).unwrap();
        for i in 0..3 {
            let mut h1 = vec![0.0; 5];
            for k in 0..5 {
                let mut acc = m.b1[k];
                for j in 0..4 {
                    acc += y[(i, j)] * m.w1[(j, k)];
                }
                h1[k] = acc.max(0.0);
            }
            let mut h2 = vec![0.0; 3];
            for k in 0..3 {
                let mut acc = m.b2[k];
                for j in 0..5 {
                    acc += h1[j] * m.w2[(j, k)];
                }
                h2[k] = acc.max(0.0);
            }
            let mut o = m.b3[0];
            for j in 0..3 {
                o += h2[j] * m.w3[(j, 0)];
            }
            let expect = 1.0 / (1.0 + (-o).exp());
            assert!((scores.values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_stay_in_open_interval() {
        let mut m = MlpParams::zeros(2, 2, 2);
        m.b3[0] = 1000.0;
        let y = Array2::zeros((3, 2));
        let (scores, _) = score_nodes(&y, &m).unwrap();
        assert!(scores.values().iter().all(|&s| s > 0.0 && s < 1.0));
        m.b3[0] = -1000.0;
        let (scores, _) = score_nodes(&y, &m).unwrap();
        assert!(scores.values().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn row_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpParams::glorot(4, 5, 3, &mut rng);
        let y = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let (base, _) = score_nodes(&y, &m).unwrap();
        let mut y2 = y.clone();
        for j in 0..4 {
            y2[(2, j)] = rng.random_range(-1.0..1.0);
        }
        let (perturbed, _) = score_nodes(&y2, &m).unwrap();
        for i in [0usize, 1, 3] {
            assert_eq!(base.values()[i], perturbed.values()[i]);
        }
        assert_ne!(base.values()[2], perturbed.values()[2]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpParams::glorot(4, 5, 3, &mut rng);
        let y = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let weights = Array1::from_shape_fn(3, |i| 0.5 + i as f64);
        let loss = |y: &Array2<f64>, m: &MlpParams| -> f64 {
            let (s, _) = score_nodes(y, m).unwrap();
            s.values().dot(&weights)
        };
        let (_, tape) = score_nodes(&y, &m).unwrap();
        let grads = score_nodes_backward(&tape, &m, &weights);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in 0..3 {
            for j in 0..4 {
                let mut yp = y.clone();
                yp[(i, j)] += h;
                let mut ym = y.clone();
                ym[(i, j)] -= h;
                let fd = (loss(&yp, &m) - loss(&ym, &m)) / (2.0 * h);
                assert!(rel(fd, grads.d_input[(i, j)]) < 1e-4);
            }
        }
        for j in 0..5 {
            let mut mp = m.clone();
            mp.b1[j] += h;
            let mut mm = m.clone();
            mm.b1[j] -= h;
            let fd = (loss(&y, &mp) - loss(&y, &mm)) / (2.0 * h);
            assert!(rel(fd, grads.d_b1[j]) < 1e-4);
        }
        for i in 0..4 {
            for j in 0..5 {
                let mut mp = m.clone();
                mp.w1[(i, j)] += h;
                let mut mm = m.clone();
                mm.w1[(i, j)] -= h;
                let fd = (loss(&y, &mp) - loss(&y, &mm)) / (2.0 * h);
                assert!(rel(fd, grads.d_w1[(i, j)]) < 1e-4);
            }
        }
        for i in 0..3 {
            let mut mp = m.clone();
            mp.w3[(i, 0)] += h;
            let mut mm = m.clone();
            mm.w3[(i, 0)] -= h;
            let fd = (loss(&y, &mp) - loss(&y, &mm)) / (2.0 * h);
            assert!(rel(fd, grads.d_w3[(i, 0)]) < 1e-4);
        }
    }
}
