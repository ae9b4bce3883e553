//! Fourier positional encoding, the dual position embedding, the center
//! offset prediction head, and the two offset losses.
//!
//! The dual embedding superposes encodings of the original and the
//! center-shifted coordinates: `E = Fourier(C) + Fourier(C + O)`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::init::xavier;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Guard below which a vector is treated as zero-length in the direction
/// loss (its voxel is skipped rather than divided by ~0).
pub const DIR_EPS: f64 = 1e-8;

/// Fourier feature layout: for each of the 3 axes and each band `b`, one
/// `(sin, cos)` pair at frequency `base_scale * 2^b`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FourierSpec {
    pub num_bands: usize,
    pub base_scale: f64,
}

impl FourierSpec {
    pub fn new(num_bands: usize, base_scale: f64) -> Result<Self> {
        if num_bands == 0 {
            return Err(Error::InvalidConfig("num_bands must be >= 1".into()));
        }
        if !(base_scale.is_finite() && base_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "base_scale must be finite and positive".into(),
            ));
        }
        Ok(FourierSpec {
            num_bands,
            base_scale,
        })
    }

    /// Base scale chosen so the lowest frequency completes one period over
    /// `extent` meters.
    pub fn for_extent(num_bands: usize, extent: f64) -> Result<Self> {
        FourierSpec::new(num_bands, 2.0 * std::f64::consts::PI / extent)
    }

    pub fn embed_dim(&self) -> usize {
        6 * self.num_bands
    }

    pub fn frequency(&self, band: usize) -> f64 {
        self.base_scale * (1u64 << band) as f64
    }

    pub(crate) fn encode_unchecked(&self, coords: &Matrix) -> Matrix {
        debug_assert_eq!(coords.cols(), 3);
        let b = self.num_bands;
        let mut out = Matrix::zeros(coords.rows(), 6 * b);
        for i in 0..coords.rows() {
            let c = coords.row(i);
            let row = out.row_mut(i);
            for axis in 0..3 {
                for band in 0..b {
                    let arg = self.frequency(band) * c[axis];
                    let base = (axis * b + band) * 2;
                    row[base] = arg.sin();
                    row[base + 1] = arg.cos();
                }
            }
        }
        out
    }

    /// Gradient of the encoding with respect to the coordinates.
    pub(crate) fn encode_backward(&self, coords: &Matrix, grad_out: &Matrix) -> Matrix {
        let b = self.num_bands;
        let mut d = Matrix::zeros(coords.rows(), 3);
        for i in 0..coords.rows() {
            let c = coords.row(i);
            let g = grad_out.row(i);
            let drow = d.row_mut(i);
            for axis in 0..3 {
                let mut acc = 0.0;
                for band in 0..b {
                    let f = self.frequency(band);
                    let arg = f * c[axis];
                    let base = (axis * b + band) * 2;
                    acc += f * (g[base] * arg.cos() - g[base + 1] * arg.sin());
                }
                drow[axis] = acc;
            }
        }
        d
    }
}

/// Encode `coords` (M x 3) as Fourier features (M x 6B).
pub fn fourier_encode(coords: &Matrix, spec: &FourierSpec) -> Result<Matrix> {
    if coords.cols() != 3 {
        return Err(Error::ShapeMismatch {
            context: "fourier_encode",
            expected: "M x 3".into(),
            got: format!("{} x {}", coords.rows(), coords.cols()),
        });
    }
    if !coords.is_finite() {
        return Err(Error::NonFinite {
            context: "fourier_encode",
        });
    }
    Ok(spec.encode_unchecked(coords))
}

/// Dual position embedding on plain values: `Fourier(C) + Fourier(C + O)`.
pub fn dual_position_embedding(
    coords: &Matrix,
    offsets: &Matrix,
    spec: &FourierSpec,
) -> Result<Matrix> {
    if coords.shape() != offsets.shape() {
        return Err(Error::ShapeMismatch {
            context: "dual_position_embedding",
            expected: format!("{} x {}", coords.rows(), coords.cols()),
            got: format!("{} x {}", offsets.rows(), offsets.cols()),
        });
    }
    let shifted = coords.zip_map(offsets, |c, o| c + o);
    let mut e = fourier_encode(coords, spec)?;
    e.axpy(1.0, &fourier_encode(&shifted, spec)?);
    Ok(e)
}

/// Two-layer MLP that maps `concat(F, C)` (M x (D+3)) to offsets (M x 3).
#[derive(Debug, Clone)]
pub struct OffsetHead {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub struct OffsetHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl OffsetHead {
    pub fn new(feat_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        OffsetHead {
            w1: xavier(feat_dim + 3, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: xavier(hidden, 3, rng),
            b2: Matrix::zeros(1, 3),
        }
    }

    pub fn param_names(prefix: &str) -> Vec<String> {
        ["w1", "b1", "w2", "b2"]
            .iter()
            .map(|s| format!("{prefix}.{s}"))
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, g: &mut Graph) -> OffsetHeadVars {
        OffsetHeadVars {
            w1: g.leaf(self.w1.clone()),
            b1: g.leaf(self.b1.clone()),
            w2: g.leaf(self.w2.clone()),
            b2: g.leaf(self.b2.clone()),
        }
    }
}

impl OffsetHeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// `O = head(concat(F, C))`, differentiable in the head parameters and `F`.
pub fn predict_offsets(g: &mut Graph, head: &OffsetHeadVars, feats: Var, coords: Var) -> Var {
    let x = g.concat_cols(feats, coords);
    let h = g.matmul(x, head.w1);
    let h = g.add_row(h, head.b1);
    let h = g.gelu(h);
    let o = g.matmul(h, head.w2);
    g.add_row(o, head.b2)
}

/// Dual position embedding on the tape; gradients flow through `offsets`.
pub fn dual_position_embedding_var(
    g: &mut Graph,
    coords: &Matrix,
    offsets: Var,
    spec: &FourierSpec,
) -> Var {
    let c = g.leaf(coords.clone());
    let shifted = g.add(c, offsets);
    let centered = g.fourier_enc(shifted, *spec);
    let original = g.leaf(spec.encode_unchecked(coords));
    g.add(original, centered)
}

/// Center regression loss: mean over foreground voxels of `||o_i - o*_i||_2`.
pub fn loss_reg(offsets: &Matrix, gt_offsets: &Matrix, fg_mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..offsets.rows() {
        if !fg_mask[i] {
            continue;
        }
        let d: f64 = offsets
            .row(i)
            .iter()
            .zip(gt_offsets.row(i))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        sum += d.sqrt();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Direction loss: mean over foreground voxels of the negative cosine
/// between predicted and ground-truth offsets. Voxels where either norm is
/// below [`DIR_EPS`] are skipped from the mean.
pub fn loss_dir(offsets: &Matrix, gt_offsets: &Matrix, fg_mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..offsets.rows() {
        if !fg_mask[i] {
            continue;
        }
        let o = offsets.row(i);
        let t = gt_offsets.row(i);
        let no = o.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nt = t.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if no < DIR_EPS || nt < DIR_EPS {
            continue;
        }
        let dot: f64 = o.iter().zip(t).map(|(&a, &b)| a * b).sum();
        sum -= dot / (no * nt);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Tape version of [`loss_reg`]. Foreground rows are selected from the
/// current mask; returns a scalar Var.
pub fn loss_reg_var(g: &mut Graph, offsets: Var, gt_offsets: &Matrix, fg_mask: &[bool]) -> Var {
    let fg_rows: Vec<usize> = (0..gt_offsets.rows()).filter(|&i| fg_mask[i]).collect();
    if fg_rows.is_empty() {
        return g.leaf(Matrix::scalar(0.0));
    }
    let o = g.gather_rows(offsets, &fg_rows);
    let gt = {
        let mut m = Matrix::zeros(fg_rows.len(), 3);
        for (r, &i) in fg_rows.iter().enumerate() {
            m.row_mut(r).copy_from_slice(gt_offsets.row(i));
        }
        g.leaf(m)
    };
    let diff = g.sub(o, gt);
    let norms = g.row_norm(diff);
    g.mean(norms)
}

/// Tape version of [`loss_dir`]. The skip set is decided from the current
/// forward values of `offsets`.
pub fn loss_dir_var(g: &mut Graph, offsets: Var, gt_offsets: &Matrix, fg_mask: &[bool]) -> Var {
    let ovals = g.value(offsets).clone();
    let mut rows = Vec::new();
    for i in 0..gt_offsets.rows() {
        if !fg_mask[i] {
            continue;
        }
        let no = ovals.row(i).iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nt = gt_offsets
            .row(i)
            .iter()
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        if no >= DIR_EPS && nt >= DIR_EPS {
            rows.push(i);
        }
    }
    if rows.is_empty() {
        return g.leaf(Matrix::scalar(0.0));
    }
    let o = g.gather_rows(offsets, &rows);
    let mut tvals = Matrix::zeros(rows.len(), 3);
    let mut tnorms = Matrix::zeros(rows.len(), 1);
    for (r, &i) in rows.iter().enumerate() {
        tvals.row_mut(r).copy_from_slice(gt_offsets.row(i));
        let n = gt_offsets
            .row(i)
            .iter()
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        tnorms.set(r, 0, n);
    }
    let t = g.leaf(tvals);
    let tn = g.leaf(tnorms);
    let prod = g.mul(o, t);
    let dots = g.sum_cols(prod);
    let on = g.row_norm(o);
    let denom = g.mul(on, tn);
    let cos = g.div(dots, denom);
    let m = g.mean(cos);
    g.neg(m)
}
