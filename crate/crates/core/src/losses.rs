//! Training objectives.
//!
//! Both reconstruction terms are L1 pixel regressions averaged over the
//! selected tokens' pixel components. The contrastive term is a per-token
//! InfoNCE over cosine similarities with a temperature. Every loss returns its
//! value together with the gradient w.r.t. the online-side input; momentum-side
//! inputs are treated as constants.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::masking::{intersect, TokenMask};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossFlags {
    pub rec1: bool,
    pub rec2: bool,
    pub con: bool,
}

impl LossFlags {
    pub const ALL: LossFlags = LossFlags {
        rec1: true,
        rec2: true,
        con: true,
    };

    /// The four objective combinations of the loss-term ablation, in table order:
    /// `{rec1}`, `{rec1, rec2}`, `{rec1, con}`, `{rec1, rec2, con}`.
    pub const ABLATION_ROWS: [LossFlags; 4] = [
        LossFlags {
            rec1: true,
            rec2: false,
            con: false,
        },
        LossFlags {
            rec1: true,
            rec2: true,
            con: false,
        },
        LossFlags {
            rec1: true,
            rec2: false,
            con: true,
        },
        LossFlags::ALL,
    ];

    pub fn any(&self) -> bool {
        self.rec1 || self.rec2 || self.con
    }
}

impl fmt::Display for LossFlags {
    /// Comma-separated active terms, e.g. `rec1,con`; `none` when empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.rec1, "rec1"), (self.rec2, "rec2"), (self.con, "con")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for LossFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = LossFlags {
            rec1: false,
            rec2: false,
            con: false,
        };
        if s.trim() == "none" {
            return Ok(flags);
        }
        for part in s.split(',').map(str::trim) {
            match part {
                "rec1" => flags.rec1 = true,
                "rec2" => flags.rec2 = true,
                "con" => flags.con = true,
                other => return Err(Error::config(format!("unknown loss term '{other}'"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rec1: f64,
    pub rec2: f64,
    pub con: f64,
    pub lambda: f64,
    pub total: f64,
    /// Set when `M1 ∩ M2` was empty for the whole batch and `rec2` fell back to 0.
    pub empty_intersection: bool,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rec1, self.rec2, self.con, self.total].iter().all(|v| v.is_finite())
    }
}

/// Combines component losses; inactive terms are reported as 0.
pub fn total_loss(rec1: f64, rec2: f64, con: f64, lambda: f64, flags: LossFlags) -> LossBreakdown {
    let rec1 = if flags.rec1 { rec1 } else { 0.0 };
    let rec2 = if flags.rec2 { rec2 } else { 0.0 };
    let con = if flags.con { con } else { 0.0 };
    LossBreakdown {
        rec1,
        rec2,
        con,
        lambda,
        total: rec1 + rec2 + lambda * con,
        empty_intersection: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyScope {
    /// Keys are all tokens of the query's own image (`K = t`).
    SameImage,
    /// Keys are all tokens of every image in the batch (`K = n * t`).
    Batch,
}

impl fmt::Display for KeyScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyScope::SameImage => "same_image",
            KeyScope::Batch => "batch",
        })
    }
}

impl FromStr for KeyScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_image" => Ok(KeyScope::SameImage),
            "batch" => Ok(KeyScope::Batch),
            other => Err(Error::config(format!("unknown key_scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub key_scope: KeyScope,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            key_scope: KeyScope::SameImage,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("temperature tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// A loss value with the gradient of that value w.r.t. the online-side input.
#[derive(Debug, Clone)]
pub struct Scored<G> {
    pub value: f64,
    pub grad: G,
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean |pred − target| over every pixel component of the tokens selected by
/// `masks` (one index list per image). Returns `None` when nothing is selected.
fn masked_l1(pred: &Array3<f64>, target: &Array3<f64>, selected: &[Vec<usize>]) -> Option<Scored<Array3<f64>>> {
    let d = pred.dim().2;
    let count: usize = selected.iter().map(Vec::len).sum();
    if count == 0 {
        return None;
    }
    let denom = (count * d) as f64;
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut sum = 0.0;
    for (b, idxs) in selected.iter().enumerate() {
        for &j in idxs {
            let p = pred.slice(s![b, j, ..]);
            let t = target.slice(s![b, j, ..]);
            let mut g = grad.slice_mut(s![b, j, ..]);
            for ((gv, pv), tv) in g.iter_mut().zip(p.iter()).zip(t.iter()) {
                let diff = pv - tv;
                sum += diff.abs();
                *gv = if diff > 0.0 {
                    1.0 / denom
                } else if diff < 0.0 {
                    -1.0 / denom
                } else {
                    0.0
                };
            }
        }
    }
    Some(Scored {
        value: sum / denom,
        grad,
    })
}

fn check_masks(masks: &[TokenMask], n: usize, t: usize) -> Result<()> {
    if masks.len() != n {
        return Err(Error::shape(format!("{} masks for a batch of {n}", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != t) {
        return Err(Error::shape(format!(
            "mask grid {}x{} does not cover {t} tokens",
            m.grid_h(),
            m.grid_w()
        )));
    }
    Ok(())
}

/// L1 reconstruction against the original pixels over the online mask `M1`.
pub fn loss_rec1(pred: &Array3<f64>, target: &Array3<f64>, m1: &[TokenMask]) -> Result<Scored<Array3<f64>>> {
    check_same_shape(pred, target)?;
    let (n, t, _) = pred.dim();
    check_masks(m1, n, t)?;
    let selected: Vec<Vec<usize>> = m1.iter().map(TokenMask::masked_indices).collect();
    masked_l1(pred, target, &selected).ok_or_else(|| Error::EmptyMask("online mask M1 selects no tokens".into()))
}

#[derive(Debug, Clone)]
pub struct Rec2 {
    pub value: f64,
    pub grad: Array3<f64>,
    pub empty_intersection: bool,
}

/// L1 between the online reconstruction and the (constant) momentum
/// reconstruction over `M1 ∩ M2`. An empty intersection yields 0 with the
/// flag set.
pub fn loss_rec2(online: &Array3<f64>, momentum: &Array3<f64>, m1: &[TokenMask], m2: &[TokenMask]) -> Result<Rec2> {
    check_same_shape(online, momentum)?;
    let (n, t, _) = online.dim();
    check_masks(m1, n, t)?;
    check_masks(m2, n, t)?;
    let selected = m1
        .iter()
        .zip(m2)
        .map(|(a, b)| intersect(a, b).map(|m| m.masked_indices()))
        .collect::<Result<Vec<_>>>()?;
    Ok(match masked_l1(online, momentum, &selected) {
        Some(s) => Rec2 {
            value: s.value,
            grad: s.grad,
            empty_intersection: false,
        },
        None => Rec2 {
            value: 0.0,
            grad: Array3::zeros(online.raw_dim()),
            empty_intersection: true,
        },
    })
}

#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_queries: Array2<f64>,
    /// Gradient w.r.t. the keys as if they were not detached. Training discards
    /// it (stop-gradient); it exists so the detachment can be audited.
    pub grad_keys_undetached: Array2<f64>,
}

fn normalize_rows(x: ArrayView2<'_, f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        // Non-finite norms pass through so the caller sees a non-finite loss.
        if norm == 0.0 {
            return Err(Error::ZeroNorm(format!("{what} row {i}")));
        }
        row /= norm;
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Mean cross-entropy of each query's positive key among all keys, with
/// logits `cos(q, k) / tau`. `positives[i]` is the key index of query `i`.
pub fn info_nce(queries: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, positives: &[usize], tau: f64) -> Result<InfoNce> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::shape(format!(
            "query dim {} vs key dim {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    if keys.nrows() < 2 {
        return Err(Error::config(format!("InfoNCE needs at least 2 keys, got {}", keys.nrows())));
    }
    if positives.len() != queries.nrows() {
        return Err(Error::shape(format!(
            "{} positive indices for {} queries",
            positives.len(),
            queries.nrows()
        )));
    }
    if let Some(p) = positives.iter().find(|p| **p >= keys.nrows()) {
        return Err(Error::shape(format!("positive index {p} out of {} keys", keys.nrows())));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let nq = queries.nrows();
    if nq == 0 {
        return Ok(InfoNce {
            loss: 0.0,
            grad_queries: Array2::zeros(queries.raw_dim()),
            grad_keys_undetached: Array2::zeros(keys.raw_dim()),
        });
    }
    let (qn, qnorm) = normalize_rows(queries, "query")?;
    let (kn, knorm) = normalize_rows(keys, "key")?;

    let mut dlogits = qn.dot(&kn.t()) / tau;
    let mut loss = 0.0;
    for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[positives[i]];
        // softmax − onehot, scaled for the mean
        row.mapv_inplace(|v| (v - lse).exp() / nq as f64);
        row[positives[i]] -= 1.0 / nq as f64;
    }
    loss /= nq as f64;

    let dqn = dlogits.dot(&kn) / tau;
    let dkn = dlogits.t().dot(&qn) / tau;
    let project = |dn: Array2<f64>, unit: &Array2<f64>, norms: &[f64]| -> Array2<f64> {
        let mut out = dn;
        for ((mut g, u), n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
            let radial = g.dot(&u);
            g.scaled_add(-radial, &u);
            g /= *n;
        }
        out
    };
    Ok(InfoNce {
        loss,
        grad_queries: project(dqn, &qn, &qnorm),
        grad_keys_undetached: project(dkn, &kn, &knorm),
    })
}

#[derive(Debug, Clone)]
pub struct Contrastive {
    pub value: f64,
    /// `(n * t, D)`, zero on rows that are not queries.
    pub grad_queries: Array2<f64>,
    pub grad_keys_undetached: Array2<f64>,
    /// Candidate keys per query.
    pub k: usize,
}

/// Batch-level InfoNCE. Queries are the online embeddings at tokens in `M1`;
/// keys are the momentum embeddings of every token within `cfg.key_scope`; the
/// positive key sits at the query's own (image, token) index. The result is
/// the mean over all queries in the batch.
pub fn contrastive_loss(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    m1: &[TokenMask],
    cfg: &ContrastiveConfig,
) -> Result<Contrastive> {
    cfg.validate()?;
    if queries.dim() != keys.dim() {
        return Err(Error::shape(format!("queries {:?} vs keys {:?}", queries.dim(), keys.dim())));
    }
    let n = m1.len();
    if n == 0 || queries.nrows() % n != 0 {
        return Err(Error::shape(format!("{} rows for {n} masks", queries.nrows())));
    }
    let t = queries.nrows() / n;
    check_masks(m1, n, t)?;
    let total_queries: usize = m1.iter().map(TokenMask::masked_count).sum();
    if total_queries == 0 {
        return Err(Error::EmptyMask("online mask M1 selects no query tokens".into()));
    }
    let mut grad_q = Array2::zeros(queries.raw_dim());
    let mut grad_k = Array2::zeros(keys.raw_dim());
    let gather = |rows: &[usize]| -> Array2<f64> { queries.select(Axis(0), rows) };

    let value = match cfg.key_scope {
        KeyScope::SameImage => {
            let mut value = 0.0;
            for (b, mask) in m1.iter().enumerate() {
                let idx = mask.masked_indices();
                if idx.is_empty() {
                    continue;
                }
                let rows: Vec<usize> = idx.iter().map(|j| b * t + j).collect();
                let q = gather(&rows);
                let k = keys.slice(s![b * t..(b + 1) * t, ..]);
                let out = info_nce(q.view(), k, &idx, cfg.tau)?;
                let weight = idx.len() as f64 / total_queries as f64;
                value += weight * out.loss;
                for (r, &row) in rows.iter().enumerate() {
                    grad_q.row_mut(row).scaled_add(weight, &out.grad_queries.row(r));
                }
                grad_k
                    .slice_mut(s![b * t..(b + 1) * t, ..])
                    .scaled_add(weight, &out.grad_keys_undetached);
            }
            value
        }
        KeyScope::Batch => {
            let rows: Vec<usize> = m1
                .iter()
                .enumerate()
                .flat_map(|(b, m)| m.masked_indices().into_iter().map(move |j| b * t + j))
                .collect();
            let q = gather(&rows);
            let out = info_nce(q.view(), keys.view(), &rows, cfg.tau)?;
            for (r, &row) in rows.iter().enumerate() {
                grad_q.row_mut(row).assign(&out.grad_queries.row(r));
            }
            grad_k = out.grad_keys_undetached;
            out.loss
        }
    };
    Ok(Contrastive {
        value,
        grad_queries: grad_q,
        grad_keys_undetached: grad_k,
        k: match cfg.key_scope {
            KeyScope::SameImage => t,
            KeyScope::Batch => n * t,
        },
    })
}
