//! Loss kernels over class-distribution matrices.
//!
//! Rows are items (points or clusters), columns are classes. Logs are
//! natural; probabilities are clamped at [`PROB_EPS`] before taking a log.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

pub const PROB_EPS: f64 = 1e-12;
const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target class {class} out of range for {classes} classes (row {row})")]
    ClassOutOfRange { row: usize, class: usize, classes: usize },
    #[error("divisor must be positive, got {0}")]
    Divisor(f64),
    #[error("row {row} is not a probability distribution")]
    NotNormalized { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

fn check_finite(m: ArrayView2<f64>, what: &'static str) -> Result<(), LossError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

fn check_mask(mask: &[bool], rows: usize) -> Result<(), LossError> {
    if mask.len() != rows {
        return Err(LossError::Shape(format!("mask has {} entries for {rows} rows", mask.len())));
    }
    Ok(())
}

fn check_divisor(d: f64) -> Result<(), LossError> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(LossError::Divisor(d))
    }
}

fn check_distribution(m: ArrayView2<f64>) -> Result<(), LossError> {
    for (row, r) in m.outer_iter().enumerate() {
        let ok = r.iter().all(|&v| (0.0..=1.0).contains(&v)) && (r.sum() - 1.0).abs() <= NORM_TOL;
        if !ok {
            return Err(LossError::NotNormalized { row });
        }
    }
    Ok(())
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(m: ArrayView2<f64>) -> Result<Array2<f64>, LossError> {
    check_finite(m, "logits")?;
    let mut out = m.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(out)
}

/// Supervision for [`masked_cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Distribution(ArrayView2<'a, f64>),
}

impl Target<'_> {
    fn check(&self, rows: usize, cols: usize) -> Result<(), LossError> {
        match self {
            Target::Classes(c) => {
                if c.len() != rows {
                    return Err(LossError::Shape(format!("{} targets for {rows} rows", c.len())));
                }
                if let Some((row, &class)) = c.iter().enumerate().find(|(_, &c)| c >= cols) {
                    return Err(LossError::ClassOutOfRange {
                        row,
                        class,
                        classes: cols,
                    });
                }
            }
            Target::Distribution(t) => {
                if t.dim() != (rows, cols) {
                    return Err(LossError::Shape(format!("target {:?} vs prediction {:?}", t.dim(), (rows, cols))));
                }
                check_finite(*t, "target")?;
            }
        }
        Ok(())
    }

    /// Weight of class `c` in row `i`.
    fn weight(&self, i: usize, c: usize) -> f64 {
        match self {
            Target::Classes(t) => {
                if t[i] == c {
                    1.0
                } else {
                    0.0
                }
            }
            Target::Distribution(t) => t[[i, c]],
        }
    }
}

/// `−(1/divisor) · Σ_{i: mask_i} Σ_c t_ic · ln max(p_ic, ε)`.
pub fn masked_cross_entropy(
    pred: ArrayView2<f64>,
    target: Target,
    mask: &[bool],
    divisor: f64,
) -> Result<f64, LossError> {
    let (rows, cols) = pred.dim();
    check_mask(mask, rows)?;
    check_divisor(divisor)?;
    check_finite(pred, "prediction")?;
    target.check(rows, cols)?;
    let mut sum = 0.0;
    for i in (0..rows).filter(|&i| mask[i]) {
        match target {
            Target::Classes(t) => sum -= pred[[i, t[i]]].max(PROB_EPS).ln(),
            Target::Distribution(_) => {
                for c in 0..cols {
                    let w = target.weight(i, c);
                    if w != 0.0 {
                        sum -= w * pred[[i, c]].max(PROB_EPS).ln();
                    }
                }
            }
        }
    }
    Ok(sum / divisor)
}

/// Gradient of [`masked_cross_entropy`] with respect to `pred`. Entries below
/// the clamp have zero gradient.
pub fn masked_cross_entropy_grad(
    pred: ArrayView2<f64>,
    target: Target,
    mask: &[bool],
    divisor: f64,
) -> Result<Array2<f64>, LossError> {
    let (rows, cols) = pred.dim();
    check_mask(mask, rows)?;
    check_divisor(divisor)?;
    target.check(rows, cols)?;
    let mut g = Array2::zeros((rows, cols));
    for i in (0..rows).filter(|&i| mask[i]) {
        for c in 0..cols {
            let w = target.weight(i, c);
            let p = pred[[i, c]];
            if w != 0.0 && p > PROB_EPS {
                g[[i, c]] = -w / (divisor * p);
            }
        }
    }
    Ok(g)
}

fn kl_to_mid(a: ArrayView1<f64>, m: &Array1<f64>) -> f64 {
    a.iter()
        .zip(m)
        .filter(|(&ai, _)| ai > 0.0)
        .map(|(&ai, &mi)| ai * (ai / mi).ln())
        .sum()
}

/// Jensen–Shannon divergence of two distributions, in `[0, ln 2]`.
pub fn js_row(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    let m: Array1<f64> = (&p + &q) * 0.5;
    let v = 0.5 * kl_to_mid(p, &m) + 0.5 * kl_to_mid(q, &m);
    v.max(0.0)
}

/// `(1/divisor) · Σ_{i: common_i} JS(p_i ‖ q_i)`.
pub fn js_divergence(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    common: &[bool],
    divisor: f64,
) -> Result<f64, LossError> {
    if p.dim() != q.dim() {
        return Err(LossError::Shape(format!("{:?} vs {:?}", p.dim(), q.dim())));
    }
    check_mask(common, p.nrows())?;
    check_divisor(divisor)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let sum: f64 = (0..p.nrows())
        .filter(|&i| common[i])
        .map(|i| js_row(p.row(i), q.row(i)))
        .sum();
    Ok(sum / divisor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// `W'_A · enc`.
    pub redistributed: Array2<f64>,
    /// Row-stochastic `N × N` score matrix.
    pub scores: Array2<f64>,
}

/// Scores `softmax_rows((enc·w1)(enc·w2)ᵀ)` and redistributes `enc` by them.
pub fn attention_redistribute(
    enc: ArrayView2<f64>,
    w1: ArrayView2<f64>,
    w2: ArrayView2<f64>,
) -> Result<Attention, LossError> {
    let c = enc.ncols();
    if w1.nrows() != c || w2.nrows() != c || w1.ncols() != w2.ncols() {
        return Err(LossError::Shape(format!(
            "enc {:?}, w1 {:?}, w2 {:?}",
            enc.dim(),
            w1.dim(),
            w2.dim()
        )));
    }
    check_finite(enc, "encoding")?;
    let mid1 = enc.dot(&w1);
    let mid2 = enc.dot(&w2);
    let scores = softmax_rows(mid1.dot(&mid2.t()).view())?;
    let redistributed = scores.dot(&enc);
    Ok(Attention {
        redistributed,
        scores,
    })
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<(), LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("membership"));
    }
    Ok(())
}

/// `1 − 2·Σ p·g / (Σ p² + Σ g²)`; zero when both are all-zero.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    check_pair(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().map(|p| p * p).sum::<f64>() + gt.iter().map(|g| g * g).sum::<f64>();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / denom)
}

/// Gradient of [`dice_loss`] with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>, LossError> {
    check_pair(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().map(|p| p * p).sum::<f64>() + gt.iter().map(|g| g * g).sum::<f64>();
    if denom == 0.0 {
        return Ok(vec![0.0; pred.len()]);
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| -2.0 * (g * denom - 2.0 * p * inter) / (denom * denom))
        .collect())
}

/// `⟨grad, direction⟩`, the derivative along `direction`.
pub fn directional_derivative<'a>(
    grad: impl IntoIterator<Item = &'a f64>,
    direction: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    grad.into_iter().zip(direction).map(|(g, d)| g * d).sum()
}

/// The six terms of the segmentation objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegmentationLosses {
    pub cls: f64,
    pub clus: f64,
    pub js_aug: f64,
    pub js_rec: f64,
    pub att: f64,
    pub wsl: f64,
}

impl SegmentationLosses {
    pub fn total(&self) -> Result<f64, LossError> {
        let parts = [self.cls, self.clus, self.js_aug, self.js_rec, self.att, self.wsl];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("loss component"));
        }
        Ok(parts.iter().sum())
    }
}

pub fn total_segmentation_loss(parts: &SegmentationLosses) -> Result<f64, LossError> {
    parts.total()
}

/// Detection objective: the segmentation total plus the Dice term.
pub fn detection_loss(segmentation: f64, dice: f64) -> Result<f64, LossError> {
    if !segmentation.is_finite() || !dice.is_finite() {
        return Err(LossError::NonFinite("loss component"));
    }
    Ok(segmentation + dice)
}

/// Mean of each column over the rows, as a `1 × C` matrix.
pub fn column_means(m: ArrayView2<f64>) -> Array2<f64> {
    m.mean_axis(Axis(0))
        .map(|r| r.insert_axis(Axis(0)))
        .unwrap_or_else(|| Array2::zeros((0, m.ncols())))
}

/// Reads a `rows cols` header followed by row-major values.
pub fn parse_matrix(text: &str) -> Result<Array2<f64>, String> {
    let mut tok = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace);
    let mut dim = || -> Result<usize, String> {
        let t = tok.next().ok_or("missing 'rows cols' header")?;
        t.parse().map_err(|_| format!("invalid dimension {t:?}"))
    };
    let (rows, cols) = (dim()?, dim()?);
    let values = tok
        .map(|t| t.parse::<f64>().map_err(|_| format!("invalid number {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    Array2::from_shape_vec((rows, cols), values).map_err(|_| format!("expected {} values for a {rows}x{cols} matrix", rows * cols))
}
