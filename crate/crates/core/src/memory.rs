//! FIR memory blocks: tapped-delay forward in naive and matrix form,
//! block-diagonal batching over sentences, the backward pass with
//! diagonal-tied tap gradients, and a first-order IIR block kept as a
//! comparison baseline.
//!
//! Convention: activations are time-major, a D×T matrix whose columns are
//! the time steps h_1..h_T of one sequence. The memory matrix applies on
//! the right, H̃ = f(H·M). History before the start of a sequence is zero.

use crate::error::{Error, Result};
use crate::linalg::{relu, Matrix};

/// Dense materialization cap: above this sequence length the banded
/// product is used instead of a T×T dense matrix.
pub const DENSE_CAP: usize = 512;

/// Activation applied on top of the filtered sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => relu(x),
        }
    }
}

/// Learnable tap vector a_0..a_N of one memory block. Order N means N+1 taps.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoeffs {
    taps: Vec<f64>,
}

impl FilterCoeffs {
    pub fn new(taps: Vec<f64>) -> Self {
        assert!(!taps.is_empty(), "a filter has at least the a_0 tap");
        assert!(taps.iter().all(|t| t.is_finite()), "taps must be finite");
        FilterCoeffs { taps }
    }

    /// Identity filter of the given order: a = [1, 0, .., 0].
    pub fn identity(order: usize) -> Self {
        let mut taps = vec![0.0; order + 1];
        taps[0] = 1.0;
        FilterCoeffs { taps }
    }

    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }
}

/// Upper-banded Toeplitz T×T matrix with M[t][t+i] = a_i, realizing the
/// FIR convolution over one sequence as a right-multiplication.
#[derive(Debug, Clone)]
pub struct MemoryMatrix {
    taps: FilterCoeffs,
    length: usize,
}

/// Builds the memory matrix for a sequence of length `t_len`.
pub fn build_memory_matrix(taps: &FilterCoeffs, t_len: usize) -> Result<MemoryMatrix> {
    if t_len == 0 {
        return Err(Error::Empty("memory matrix length"));
    }
    Ok(MemoryMatrix {
        taps: taps.clone(),
        length: t_len,
    })
}

impl MemoryMatrix {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn taps(&self) -> &FilterCoeffs {
        &self.taps
    }

    /// Dense T×T materialization of the band.
    pub fn to_dense(&self) -> Matrix {
        let t_len = self.length;
        let taps = self.taps.taps();
        Matrix::from_fn(t_len, t_len, |row, col| {
            if col >= row && col - row < taps.len() {
                taps[col - row]
            } else {
                0.0
            }
        })
    }

    /// Z = H·M without materializing M; column t of Z is
    /// sum_i a_i · h_{t-i} with the band truncated at the sequence start.
    pub fn apply_banded(&self, h: &Matrix) -> Matrix {
        let (d, t_len) = h.shape();
        debug_assert_eq!(t_len, self.length);
        let taps = self.taps.taps();
        let mut z = Matrix::zeros(d, t_len);
        for row in 0..d {
            let h_row = h.row(row);
            let z_row = z.row_mut(row);
            for t in 0..t_len {
                let mut acc = 0.0;
                for (i, &a) in taps.iter().enumerate().take(t + 1) {
                    acc += a * h_row[t - i];
                }
                z_row[t] = acc;
            }
        }
        z
    }

    /// Z = H·M, dense product below `DENSE_CAP`, banded above.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.length {
            return Err(Error::Shape {
                op: "memory apply",
                lhs: h.shape(),
                rhs: (self.length, self.length),
            });
        }
        if self.length <= DENSE_CAP {
            h.matmul(&self.to_dense())
        } else {
            Ok(self.apply_banded(h))
        }
    }

    /// dH = G·Mᵀ, band-aware.
    pub fn apply_transposed(&self, g: &Matrix) -> Result<Matrix> {
        if g.cols() != self.length {
            return Err(Error::Shape {
                op: "memory apply_transposed",
                lhs: g.shape(),
                rhs: (self.length, self.length),
            });
        }
        let (d, t_len) = g.shape();
        let taps = self.taps.taps();
        let mut out = Matrix::zeros(d, t_len);
        for row in 0..d {
            let g_row = g.row(row);
            let o_row = out.row_mut(row);
            for s in 0..t_len {
                let mut acc = 0.0;
                for (i, &a) in taps.iter().enumerate().take(t_len - s) {
                    acc += a * g_row[s + i];
                }
                o_row[s] = acc;
            }
        }
        Ok(out)
    }
}

/// One memory matrix per sentence, all sharing the same taps. Memory never
/// crosses a block boundary.
#[derive(Debug, Clone)]
pub struct BlockDiagMemory {
    taps: FilterCoeffs,
    lengths: Vec<usize>,
    total_length: usize,
}

/// Assembles the block-diagonal batched memory matrix for the given
/// sentence lengths.
pub fn build_block_diagonal(taps: &FilterCoeffs, lengths: &[usize]) -> Result<BlockDiagMemory> {
    if lengths.is_empty() {
        return Err(Error::Empty("block-diagonal lengths"));
    }
    if lengths.contains(&0) {
        return Err(Error::Empty("zero-length sentence in batch"));
    }
    Ok(BlockDiagMemory {
        taps: taps.clone(),
        lengths: lengths.to_vec(),
        total_length: lengths.iter().sum(),
    })
}

impl BlockDiagMemory {
    pub fn total_length(&self) -> usize {
        self.total_length
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn blocks(&self) -> Result<Vec<MemoryMatrix>> {
        self.lengths
            .iter()
            .map(|&t| build_memory_matrix(&self.taps, t))
            .collect()
    }

    /// Dense materialization of the full block-diagonal matrix.
    pub fn to_dense(&self) -> Matrix {
        let n = self.total_length;
        let mut out = Matrix::zeros(n, n);
        let mut offset = 0;
        for &t_len in &self.lengths {
            let block = MemoryMatrix {
                taps: self.taps.clone(),
                length: t_len,
            }
            .to_dense();
            for i in 0..t_len {
                for j in 0..t_len {
                    out.set(offset + i, offset + j, block.get(i, j));
                }
            }
            offset += t_len;
        }
        out
    }

    /// Z = H̄·M̄ over the horizontally concatenated batch.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.total_length {
            return Err(Error::Shape {
                op: "block-diagonal apply",
                lhs: h.shape(),
                rhs: (self.total_length, self.total_length),
            });
        }
        let d = h.rows();
        let mut z = Matrix::zeros(d, self.total_length);
        let mut offset = 0;
        for &t_len in &self.lengths {
            let block = MemoryMatrix {
                taps: self.taps.clone(),
                length: t_len,
            };
            let h_k = columns(h, offset, t_len);
            let z_k = block.apply(&h_k)?;
            write_columns(&mut z, offset, &z_k);
            offset += t_len;
        }
        Ok(z)
    }

    /// Backward through Z = H̄·M̄: dH = G·M̄ᵀ and diagonal-tied tap
    /// gradients summed over all blocks in a fixed per-sentence order.
    pub fn backward(&self, h: &Matrix, g_pre: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if h.shape() != g_pre.shape() || h.cols() != self.total_length {
            return Err(Error::Shape {
                op: "block-diagonal backward",
                lhs: h.shape(),
                rhs: g_pre.shape(),
            });
        }
        let d = h.rows();
        let mut dh = Matrix::zeros(d, self.total_length);
        let mut dtaps = vec![0.0; self.taps.order() + 1];
        let mut offset = 0;
        for &t_len in &self.lengths {
            let block = MemoryMatrix {
                taps: self.taps.clone(),
                length: t_len,
            };
            let h_k = columns(h, offset, t_len);
            let g_k = columns(g_pre, offset, t_len);
            let (dh_k, dtaps_k) = fir_backward(&h_k, &g_k, &block)?;
            write_columns(&mut dh, offset, &dh_k);
            for (acc, v) in dtaps.iter_mut().zip(&dtaps_k) {
                *acc += v;
            }
            offset += t_len;
        }
        Ok((dh, dtaps))
    }
}

fn columns(m: &Matrix, start: usize, count: usize) -> Matrix {
    Matrix::from_fn(m.rows(), count, |i, j| m.get(i, start + j))
}

fn write_columns(dst: &mut Matrix, start: usize, src: &Matrix) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst.set(i, start + j, src.get(i, j));
        }
    }
}

/// Tapped-delay forward: column t of the result is
/// act(sum_{i=0}^{min(N,t)} a_i·h_{t-i}). The reference loop the matrix
/// path is checked against.
pub fn fir_forward_naive(h: &Matrix, taps: &FilterCoeffs, act: Activation) -> Result<Matrix> {
    if h.cols() == 0 || h.rows() == 0 {
        return Err(Error::Empty("fir_forward input"));
    }
    let (d, t_len) = h.shape();
    let a = taps.taps();
    let mut out = Matrix::zeros(d, t_len);
    for t in 0..t_len {
        for row in 0..d {
            let mut acc = 0.0;
            for (i, &tap) in a.iter().enumerate().take(t + 1) {
                acc += tap * h.get(row, t - i);
            }
            out.set(row, t, acc);
        }
    }
    Ok(act.apply(&out))
}

/// Matrix-form forward H̃ = act(H·M).
pub fn fir_forward_matrix(h: &Matrix, m: &MemoryMatrix, act: Activation) -> Result<Matrix> {
    let z = m.apply(h)?;
    Ok(act.apply(&z))
}

/// Backward through Z = H·M. `g_pre` is dL/dZ (activation derivative
/// already applied by the caller). Returns dH = G·Mᵀ and the tap
/// gradients dTaps[i] = sum_{t>=i} <h_{t-i}, g_t>, i.e. dL/dM summed
/// along the i-th superdiagonal.
pub fn fir_backward(
    h: &Matrix,
    g_pre: &Matrix,
    m: &MemoryMatrix,
) -> Result<(Matrix, Vec<f64>)> {
    if h.shape() != g_pre.shape() {
        return Err(Error::Shape {
            op: "fir_backward",
            lhs: h.shape(),
            rhs: g_pre.shape(),
        });
    }
    let dh = m.apply_transposed(g_pre)?;
    let (d, t_len) = h.shape();
    let order = m.taps().order();
    let mut dtaps = vec![0.0; order + 1];
    for (i, slot) in dtaps.iter_mut().enumerate() {
        let mut acc = 0.0;
        for t in i..t_len {
            for row in 0..d {
                acc += h.get(row, t - i) * g_pre.get(row, t);
            }
        }
        *slot = acc;
    }
    Ok((dh, dtaps))
}

/// First-order IIR comparison block: h̃_t = act(h_t + W·h̃_{t-1}),
/// h̃_0 = 0. The RNN-style recurrence the FIR block replaces.
pub fn iir_forward(h: &Matrix, w: &Matrix, act: Activation) -> Result<Matrix> {
    let (d, t_len) = h.shape();
    if w.shape() != (d, d) {
        return Err(Error::Shape {
            op: "iir_forward",
            lhs: h.shape(),
            rhs: w.shape(),
        });
    }
    let mut out = Matrix::zeros(d, t_len);
    let mut state = vec![0.0; d];
    for t in 0..t_len {
        let mut col = vec![0.0; d];
        for i in 0..d {
            let mut acc = h.get(i, t);
            for (j, &s) in state.iter().enumerate() {
                acc += w.get(i, j) * s;
            }
            col[i] = acc;
        }
        for (i, &v) in col.iter().enumerate() {
            let v = match act {
                Activation::Identity => v,
                Activation::Relu => v.max(0.0),
            };
            out.set(i, t, v);
            state[i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_matrix(values: &[f64]) -> Matrix {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Matrix {
        Matrix::from_fn(d, t, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn naive_identity_filter_passes_through() {
        let h = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]);
        let taps = FilterCoeffs::new(vec![1.0]);
        let out = fir_forward_naive(&h, &taps, Activation::Identity).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn naive_hand_case() {
        let h = row_matrix(&[1.0, 2.0, 3.0]);
        let taps = FilterCoeffs::new(vec![0.5, 0.25]);
        let out = fir_forward_naive(&h, &taps, Activation::Relu).unwrap();
        assert_eq!(out, row_matrix(&[0.5, 1.25, 2.0]));
    }

    #[test]
    fn naive_zero_taps_zero_output() {
        let h = row_matrix(&[1.0, -2.0, 3.0]);
        let taps = FilterCoeffs::new(vec![0.0, 0.0]);
        for act in [Activation::Identity, Activation::Relu] {
            let out = fir_forward_naive(&h, &taps, act).unwrap();
            assert_eq!(out, Matrix::zeros(1, 3));
        }
    }

    #[test]
    fn memory_matrix_layouts() {
        let m = build_memory_matrix(&FilterCoeffs::new(vec![2.0]), 3).unwrap();
        let mut expect = Matrix::identity(3);
        expect.scale(2.0);
        assert_eq!(m.to_dense(), expect);

        let m = build_memory_matrix(&FilterCoeffs::new(vec![0.5, 0.25]), 3).unwrap();
        let expect = Matrix::from_rows(&[
            vec![0.5, 0.25, 0.0],
            vec![0.0, 0.5, 0.25],
            vec![0.0, 0.0, 0.5],
        ]);
        assert_eq!(m.to_dense(), expect);

        // T=1: the band truncates to just a_0, whatever the order.
        let m = build_memory_matrix(&FilterCoeffs::new(vec![0.7, 0.3, 0.1]), 1).unwrap();
        assert_eq!(m.to_dense(), Matrix::from_vec(1, 1, vec![0.7]));

        assert!(build_memory_matrix(&FilterCoeffs::identity(2), 0).is_err());
    }

    #[test]
    fn matrix_path_hand_case() {
        let h = row_matrix(&[1.0, 2.0, 3.0]);
        let m = build_memory_matrix(&FilterCoeffs::new(vec![0.5, 0.25]), 3).unwrap();
        let out = fir_forward_matrix(&h, &m, Activation::Relu).unwrap();
        assert!(out.max_abs_diff(&row_matrix(&[0.5, 1.25, 2.0])) < 1e-12);
    }

    #[test]
    fn matrix_path_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_matrix(&mut rng, 4, 6);
        let m = build_memory_matrix(&FilterCoeffs::new(vec![1.0]), 6).unwrap();
        let out = fir_forward_matrix(&h, &m, Activation::Identity).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn matrix_path_matches_naive_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_matrix(&mut rng, 4, 7);
        let taps = FilterCoeffs::new((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = build_memory_matrix(&taps, 7).unwrap();
        let naive = fir_forward_naive(&h, &taps, Activation::Relu).unwrap();
        let mat = fir_forward_matrix(&h, &m, Activation::Relu).unwrap();
        assert!(mat.max_abs_diff(&naive) < 1e-10);
    }

    #[test]
    fn banded_product_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 23;
        let h = random_matrix(&mut rng, 3, t);
        let taps = FilterCoeffs::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = build_memory_matrix(&taps, t).unwrap();
        let dense = h.matmul(&m.to_dense()).unwrap();
        let banded = m.apply_banded(&h);
        assert!(dense.max_abs_diff(&banded) < 1e-12);
    }

    #[test]
    fn block_diagonal_assembly() {
        let taps = FilterCoeffs::new(vec![0.5, 0.25]);
        let bd = build_block_diagonal(&taps, &[2, 3]).unwrap();
        let dense = bd.to_dense();
        let expect = Matrix::from_rows(&[
            vec![0.5, 0.25, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.25, 0.0],
            vec![0.0, 0.0, 0.0, 0.5, 0.25],
            vec![0.0, 0.0, 0.0, 0.0, 0.5],
        ]);
        assert_eq!(dense, expect);

        let single = build_block_diagonal(&taps, &[1]).unwrap();
        assert_eq!(single.to_dense(), Matrix::from_vec(1, 1, vec![0.5]));

        let eye = build_block_diagonal(&FilterCoeffs::new(vec![3.0]), &[1, 1]).unwrap();
        let mut expect = Matrix::identity(2);
        expect.scale(3.0);
        assert_eq!(eye.to_dense(), expect);

        assert!(build_block_diagonal(&taps, &[]).is_err());
        assert!(build_block_diagonal(&taps, &[2, 0]).is_err());
    }

    #[test]
    fn block_diagonal_matches_per_sentence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let taps = FilterCoeffs::new(vec![0.4, -0.2, 0.7]);
        let lengths = [3usize, 5, 2];
        let total: usize = lengths.iter().sum();
        let h = random_matrix(&mut rng, 4, total);
        let bd = build_block_diagonal(&taps, &lengths).unwrap();
        let batched = bd.apply(&h).unwrap();

        let mut offset = 0;
        for &t_len in &lengths {
            let h_k = Matrix::from_fn(4, t_len, |i, j| h.get(i, offset + j));
            let m = build_memory_matrix(&taps, t_len).unwrap();
            let z_k = m.apply(&h_k).unwrap();
            for i in 0..4 {
                for j in 0..t_len {
                    assert!((batched.get(i, offset + j) - z_k.get(i, j)).abs() < 1e-12);
                }
            }
            offset += t_len;
        }
    }

    #[test]
    fn backward_zero_gradient() {
        let h = row_matrix(&[1.0, 2.0, 3.0]);
        let g = Matrix::zeros(1, 3);
        let m = build_memory_matrix(&FilterCoeffs::new(vec![0.5, 0.25]), 3).unwrap();
        let (dh, dtaps) = fir_backward(&h, &g, &m).unwrap();
        assert_eq!(dh, Matrix::zeros(1, 3));
        assert_eq!(dtaps, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_order_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = random_matrix(&mut rng, 2, 4);
        let g = random_matrix(&mut rng, 2, 4);
        let a0 = 0.3;
        let m = build_memory_matrix(&FilterCoeffs::new(vec![a0]), 4).unwrap();
        let (dh, dtaps) = fir_backward(&h, &g, &m).unwrap();
        let mut expect_dh = g.clone();
        expect_dh.scale(a0);
        assert!(dh.max_abs_diff(&expect_dh) < 1e-12);
        let dot: f64 = h.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        assert!((dtaps[0] - dot).abs() < 1e-12);
    }

    // Finite-difference oracle for the tap gradient: loss = sum(Z) with
    // Z = H·M, perturb each tap centrally.
    #[test]
    fn backward_taps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (d, t) = (3, 5);
        let h = random_matrix(&mut rng, d, t);
        let g = random_matrix(&mut rng, d, t);
        let taps = FilterCoeffs::new(vec![0.6, -0.3, 0.2]);
        let m = build_memory_matrix(&taps, t).unwrap();
        let (dh, dtaps) = fir_backward(&h, &g, &m).unwrap();

        // loss(taps, h) = <G, H·M>, linear in both, so central differences
        // are exact up to roundoff.
        let loss = |taps: &FilterCoeffs, h: &Matrix| -> f64 {
            let m = build_memory_matrix(taps, t).unwrap();
            let z = m.apply(h).unwrap();
            z.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
        };
        let step = 1e-5;
        for i in 0..taps.taps().len() {
            let mut plus = taps.clone();
            plus.taps_mut()[i] += step;
            let mut minus = taps.clone();
            minus.taps_mut()[i] -= step;
            let fd = (loss(&plus, &h) - loss(&minus, &h)) / (2.0 * step);
            let rel = (dtaps[i] - fd).abs() / dtaps[i].abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-6, "tap {i}: analytic {} vs fd {fd}", dtaps[i]);
        }
        for r in 0..d {
            for c in 0..t {
                let mut hp = h.clone();
                hp.set(r, c, h.get(r, c) + step);
                let mut hm = h.clone();
                hm.set(r, c, h.get(r, c) - step);
                let fd = (loss(&taps, &hp) - loss(&taps, &hm)) / (2.0 * step);
                let rel = (dh.get(r, c) - fd).abs() / dh.get(r, c).abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-6);
            }
        }
    }

    #[test]
    fn iir_zero_weight_is_plain_activation() {
        let h = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let w = Matrix::zeros(2, 2);
        let out = iir_forward(&h, &w, Activation::Relu).unwrap();
        assert_eq!(out, relu(&h));
    }

    #[test]
    fn iir_hand_recurrence() {
        let h = row_matrix(&[1.0, 1.0, 1.0]);
        let w = Matrix::from_vec(1, 1, vec![0.5]);
        let out = iir_forward(&h, &w, Activation::Identity).unwrap();
        assert!(out.max_abs_diff(&row_matrix(&[1.0, 1.5, 1.75])) < 1e-12);
    }

    #[test]
    fn iir_first_column_ignores_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 3);
        let out = iir_forward(&h, &w, Activation::Relu).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(i, 0), h.get(i, 0).max(0.0));
        }
        assert!(iir_forward(&h, &Matrix::zeros(2, 3), Activation::Relu).is_err());
    }

    #[test]
    fn iir_unbounded_memory_vs_fir_locality() {
        // Scalar w=1, identity activation: a bump at column t reaches every
        // later column of the IIR output, while an order-N FIR bump dies
        // after N steps.
        let t_len = 12;
        let bump_at = 3;
        let base = Matrix::zeros(1, t_len);
        let mut bumped = base.clone();
        bumped.set(0, bump_at, 1.0);

        let w = Matrix::from_vec(1, 1, vec![1.0]);
        let iir_base = iir_forward(&base, &w, Activation::Identity).unwrap();
        let iir_bump = iir_forward(&bumped, &w, Activation::Identity).unwrap();
        for t in bump_at..t_len {
            assert!((iir_bump.get(0, t) - iir_base.get(0, t)).abs() > 0.5);
        }

        let taps = FilterCoeffs::new(vec![0.5, 0.4, 0.3]);
        let fir_base = fir_forward_naive(&base, &taps, Activation::Identity).unwrap();
        let fir_bump = fir_forward_naive(&bumped, &taps, Activation::Identity).unwrap();
        for t in 0..t_len {
            let changed = (fir_bump.get(0, t) - fir_base.get(0, t)).abs() > 0.0;
            let in_window = t >= bump_at && t <= bump_at + taps.order();
            assert_eq!(changed, in_window, "column {t}");
        }
    }

    proptest! {
        // Matrix path vs naive loop on random shapes.
        #[test]
        fn equivalence_matrix_vs_naive(
            d in 1usize..6,
            t in 1usize..20,
            order in 0usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, d, t);
            let taps = FilterCoeffs::new((0..=order).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let m = build_memory_matrix(&taps, t).unwrap();
            for act in [Activation::Identity, Activation::Relu] {
                let naive = fir_forward_naive(&h, &taps, act).unwrap();
                let mat = fir_forward_matrix(&h, &m, act).unwrap();
                prop_assert!(mat.max_abs_diff(&naive) < 1e-10);
            }
        }

        // Perturbing column t changes only columns t..t+N of the output.
        #[test]
        fn fir_causality_and_locality(
            t in 3usize..20,
            order in 0usize..5,
            col in 0usize..20,
            seed in 0u64..1000,
        ) {
            let col = col % t;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, 2, t);
            let taps = FilterCoeffs::new((0..=order).map(|_| rng.gen_range(0.1..1.0)).collect());
            let mut h2 = h.clone();
            h2.set(0, col, h.get(0, col) + 1.0);
            let a = fir_forward_naive(&h, &taps, Activation::Identity).unwrap();
            let b = fir_forward_naive(&h2, &taps, Activation::Identity).unwrap();
            for tt in 0..t {
                let delta = (0..2).map(|r| (a.get(r, tt) - b.get(r, tt)).abs()).fold(0.0, f64::max);
                if tt < col || tt > col + order {
                    prop_assert!(delta == 0.0, "column {tt} moved");
                }
            }
        }
    }
}
