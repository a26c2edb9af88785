//! Gradient preconditioners: the SVD-based geometry-adaptive transform, its
//! row-scaling approximation, Meta-SGD (plain and positive), and the dense
//! block-diagonal operator they induce.

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::linalg::{svd, SvdResult, UnfoldedGrad};
use crate::tensor::Tensor;

/// `½·log(1 + exp(2x))`, evaluated as `max(x, 0) + ½·log1p(exp(-2|x|))`.
pub fn sp(x: f64) -> f64 {
    x.max(0.0) + 0.5 * (-2.0 * x.abs()).exp().ln_1p()
}

/// Inverse of [`sp`]: `½·log(exp(2y) - 1)`.
pub fn sp_inv(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(GapError::Domain(format!("sp_inv needs y > 0, got {y}")));
    }
    Ok(y + 0.5 * (-(-2.0 * y).exp_m1()).ln())
}

/// `1 / (1 + exp(-2x))`, the derivative of [`sp`].
pub fn sigmoid2(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-2.0 * x).exp())
    } else {
        let e = (2.0 * x).exp();
        e / (1.0 + e)
    }
}

/// Raw parameter value whose [`sp`] is exactly one (to rounding).
pub fn unit_raw() -> f64 {
    sp_inv(1.0).expect("1 is in the domain")
}

/// Per-layer meta-parameters `m`; the singular-value scales are `Sp(m_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GapMeta {
    pub m: Tensor,
}

impl GapMeta {
    pub fn new(m: Vec<f64>) -> Self {
        Self { m: Tensor::vector(m) }
    }

    /// Meta-parameters of the identity preconditioner for `rows` rows.
    pub fn identity(rows: usize) -> Self {
        Self::new(vec![unit_raw(); rows])
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.m.data().iter().map(|&v| sp(v)).collect()
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if self.len() != rows {
            return Err(GapError::Dimension(format!(
                "{} meta-parameters for a {rows}-row gradient",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Which preconditioner the inner loop applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondKind {
    /// Plain gradient descent (MAML).
    Identity,
    /// SVD-based geometry-adaptive preconditioner.
    Gap,
    /// Row scaling by `Sp(m)`, no SVD.
    ApproxGap,
    /// Elementwise learned rates `a ⊙ g`.
    MetaSgd,
    /// Elementwise positive rates `Sp(a) ⊙ g`.
    MetaSgdPd,
}

impl PrecondKind {
    pub const ALL: [PrecondKind; 5] = [
        PrecondKind::Identity,
        PrecondKind::Gap,
        PrecondKind::ApproxGap,
        PrecondKind::MetaSgd,
        PrecondKind::MetaSgdPd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PrecondKind::Identity => "MAML",
            PrecondKind::Gap => "GAP",
            PrecondKind::ApproxGap => "ApproxGAP",
            PrecondKind::MetaSgd => "Meta-SGD",
            PrecondKind::MetaSgdPd => "Meta-SGD(PD)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PrecondKind::Identity => "identity",
            PrecondKind::Gap => "gap",
            PrecondKind::ApproxGap => "approx_gap",
            PrecondKind::MetaSgd => "meta_sgd",
            PrecondKind::MetaSgdPd => "meta_sgd_pd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.key() == s)
    }

    pub fn has_meta_params(self) -> bool {
        self != PrecondKind::Identity
    }
}

/// Which weight matrices receive the preconditioner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Hidden-to-hidden weights only; input and output layers use raw
    /// gradients.
    #[default]
    Hidden,
    /// Every weight matrix.
    All,
}

impl LayerSelection {
    pub fn mask(self, num_layers: usize) -> Vec<bool> {
        match self {
            LayerSelection::All => vec![true; num_layers],
            LayerSelection::Hidden => (0..num_layers)
                .map(|i| i > 0 && i + 1 < num_layers)
                .collect(),
        }
    }
}

/// `U·(diag(Sp(m))·Σ)·Vᵀ` in the oriented layout of `g`.
pub fn gap_transform(g: &UnfoldedGrad, meta: &GapMeta) -> Result<Tensor> {
    meta.check_rows(g.rows())?;
    let res = svd(&g.matrix)?;
    Ok(gap_transform_with(&res, meta))
}

/// [`gap_transform`] from an existing decomposition.
pub fn gap_transform_with(res: &SvdResult, meta: &GapMeta) -> Tensor {
    let scaled: Vec<f64> = res
        .sigma
        .data()
        .iter()
        .zip(meta.scales())
        .map(|(s, k)| s * k)
        .collect();
    res.reconstruct_with(&scaled)
}

/// Row `i` scaled by `Sp(m_i)`.
pub fn approx_gap_transform(g: &Tensor, meta: &GapMeta) -> Result<Tensor> {
    if g.rank() != 2 {
        return Err(GapError::Dimension(format!("expected a matrix, got {:?}", g.shape())));
    }
    meta.check_rows(g.rows())?;
    let scales = Tensor::vector(meta.scales());
    g.mul(&scales.repeat_cols(g.cols())?)
}

/// `a ⊙ g`, or `Sp(a) ⊙ g` when `positive` is set.
pub fn meta_sgd_transform(g: &Tensor, a: &Tensor, positive: bool) -> Result<Tensor> {
    if positive {
        g.mul(&a.map(sp))
    } else {
        g.mul(a)
    }
}

/// The preconditioner `blkdiag(D, …, D)` with `D = U·diag(Sp(m))·Uᵀ`,
/// acting on column-stacked `m x n` matrices.
#[derive(Clone, Debug)]
pub struct PGap {
    pub d: Tensor,
    pub blocks: usize,
}

pub fn build_p_gap(u: &Tensor, meta: &GapMeta, n: usize) -> Result<PGap> {
    if u.rank() != 2 || u.rows() != u.cols() {
        return Err(GapError::Dimension(format!("U must be square, got {:?}", u.shape())));
    }
    meta.check_rows(u.rows())?;
    let scaled = u.mul(&Tensor::vector(meta.scales()).repeat_rows(u.rows())?)?;
    let d = scaled.matmul(&u.transpose()?)?;
    Ok(PGap { d, blocks: n })
}

impl PGap {
    pub fn block_size(&self) -> usize {
        self.d.rows()
    }

    /// Applies the block-diagonal operator to `vec(G)`, `G` stacked column
    /// by column.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.block_size();
        if x.len() != m * self.blocks {
            return Err(GapError::Dimension(format!(
                "operator of size {} applied to length {}",
                m * self.blocks,
                x.len()
            )));
        }
        let mut out = vec![0.0; x.len()];
        for (xb, ob) in x.chunks(m).zip(out.chunks_mut(m)) {
            for (i, o) in ob.iter_mut().enumerate() {
                *o = self.d.row(i).iter().zip(xb).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Dense `mn x mn` matrix of the operator.
    pub fn dense(&self) -> Tensor {
        let m = self.block_size();
        let size = m * self.blocks;
        let mut data = vec![0.0; size * size];
        for b in 0..self.blocks {
            for i in 0..m {
                for j in 0..m {
                    data[(b * m + i) * size + b * m + j] = self.d.at(i, j);
                }
            }
        }
        Tensor::from_parts(vec![size, size], data)
    }
}

/// Column-stacking vectorisation of a matrix.
pub fn vec_columns(g: &Tensor) -> Vec<f64> {
    let (m, n) = (g.rows(), g.cols());
    (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).map(|(i, j)| g.at(i, j)).collect()
}
