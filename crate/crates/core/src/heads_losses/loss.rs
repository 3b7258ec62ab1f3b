use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const KOLEO_EPS: f64 = 1e-8;

/// Per-image prototype distributions consumed by the image and patch losses.
#[derive(Debug, Clone)]
pub struct PrototypeScores {
    /// `N_g × K` student log-probabilities on the (masked) global crops.
    pub student_global: Array2<f64>,
    /// `N_l × K` student log-probabilities on the local crops.
    pub student_local: Array2<f64>,
    /// `N_g × K` teacher probabilities on the unmasked global crops.
    pub teacher_global: Array2<f64>,
    /// `N_g × N_p × K` student patch log-probabilities.
    pub patch_student: Array3<f64>,
    /// `N_g × N_p × K` teacher patch probabilities.
    pub patch_teacher: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_image: f64,
    pub w_patch: f64,
    pub w_koleo: f64,
    pub w_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_image: 1.0,
            w_patch: 1.0,
            w_koleo: 0.1,
            w_sup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_image, self.w_patch, self.w_koleo, self.w_sup];
        ensure!(w.iter().all(|v| *v >= 0.0 && v.is_finite()), Config, "loss weights must be finite and ≥ 0");
        ensure!(w.iter().any(|v| *v > 0.0), Config, "at least one loss weight must be > 0");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub image_loss: f64,
    pub patch_loss: f64,
    pub koleo_loss: f64,
    pub sup_loss: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub image_loss: f64,
    pub patch_loss: f64,
    pub koleo_loss: f64,
    pub sup_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.image_loss, self.patch_loss, self.koleo_loss, self.sup_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn hybrid_total_loss(c: LossComponents, w: &LossWeights) -> LossReport {
    LossReport {
        image_loss: c.image_loss,
        patch_loss: c.patch_loss,
        koleo_loss: c.koleo_loss,
        sup_loss: c.sup_loss,
        total: w.w_image * c.image_loss + w.w_patch * c.patch_loss + w.w_koleo * c.koleo_loss + w.w_sup * c.sup_loss,
    }
}

fn check_distribution_rows<'a>(rows: impl Iterator<Item = ArrayView1<'a, f64>>, what: &str) -> Result<()> {
    for (i, r) in rows.enumerate() {
        let s = r.sum();
        if !((s - 1.0).abs() <= 1e-6) || r.iter().any(|v| *v < 0.0) {
            return Err(Error::Invariant(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

fn cross_entropy(p: ArrayView1<f64>, logq: ArrayView1<f64>) -> f64 {
    -compensated_sum(p.iter().zip(logq.iter()).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b }))
}

/// Image loss value and its gradients w.r.t. the student log-probabilities.
#[derive(Debug, Clone)]
pub struct ImageLossGrad {
    pub loss: f64,
    pub d_global: Array2<f64>,
    pub d_local: Array2<f64>,
}

/// Global alignment plus local-global alignment for one image.
pub fn image_level_loss_grad(
    student_global: &Array2<f64>,
    student_local: &Array2<f64>,
    teacher_global: &Array2<f64>,
) -> Result<ImageLossGrad> {
    let (n_g, k) = teacher_global.dim();
    let n_l = student_local.nrows();
    ensure!(n_g >= 1, Param, "image loss needs at least one global crop");
    ensure!(
        student_global.dim() == (n_g, k),
        Param,
        "student_global is {:?}, teacher_global is {:?}",
        student_global.dim(),
        (n_g, k)
    );
    ensure!(
        n_l == 0 || student_local.ncols() == k,
        Param,
        "student_local has {} columns, expected {k}",
        student_local.ncols()
    );
    check_distribution_rows(teacher_global.rows().into_iter(), "teacher_global")?;
    let denom = n_g as f64 * (1 + n_l) as f64;
    let norm = 1.0 / denom;
    let teacher_sum = teacher_global.sum_axis(Axis(0));
    let loss = compensated_sum(
        (0..n_g)
            .map(|i| cross_entropy(teacher_global.row(i), student_global.row(i)))
            .chain((0..n_l).map(|n| cross_entropy(teacher_sum.view(), student_local.row(n)))),
    );
    let d_global = teacher_global.mapv(|p| -p * norm);
    let mut d_local = Array2::zeros((n_l, k));
    for mut row in d_local.rows_mut() {
        row.assign(&teacher_sum.mapv(|p| -p * norm));
    }
    Ok(ImageLossGrad {
        loss: loss / denom,
        d_global,
        d_local,
    })
}

pub fn image_level_loss(scores: &PrototypeScores, n_g: usize, n_l: usize) -> Result<f64> {
    ensure!(
        scores.teacher_global.nrows() == n_g && scores.student_local.nrows() == n_l,
        Param,
        "scores have {} global / {} local rows, expected {n_g} / {n_l}",
        scores.teacher_global.nrows(),
        scores.student_local.nrows()
    );
    Ok(image_level_loss_grad(&scores.student_global, &scores.student_local, &scores.teacher_global)?.loss)
}

/// Patch loss over pre-gathered masked rows. Row `r` belongs to crop
/// `crop_of_row[r] < n_crops`. Returns the loss and its gradient w.r.t.
/// `student_rows`.
pub fn masked_patch_loss_grad(
    student_rows: &Array2<f64>,
    teacher_rows: &Array2<f64>,
    crop_of_row: &[usize],
    n_crops: usize,
) -> Result<(f64, Array2<f64>)> {
    ensure!(
        student_rows.dim() == teacher_rows.dim(),
        Param,
        "patch student {:?} vs teacher {:?}",
        student_rows.dim(),
        teacher_rows.dim()
    );
    ensure!(crop_of_row.len() == student_rows.nrows(), Param, "crop index length mismatch");
    ensure!(crop_of_row.iter().all(|&c| c < n_crops), Param, "crop index out of range");
    let mut grad = Array2::zeros(student_rows.dim());
    if crop_of_row.is_empty() {
        return Ok((0.0, grad));
    }
    check_distribution_rows(teacher_rows.rows().into_iter(), "patch_teacher")?;
    let mut counts = vec![0usize; n_crops];
    for &c in crop_of_row {
        counts[c] += 1;
    }
    let mut loss = 0.0;
    for (r, &c) in crop_of_row.iter().enumerate() {
        let w = 1.0 / (n_crops as f64 * counts[c] as f64);
        loss += w * cross_entropy(teacher_rows.row(r), student_rows.row(r));
        grad.row_mut(r).assign(&teacher_rows.row(r).mapv(|p| -p * w));
    }
    Ok((loss, grad))
}

/// Masked-token loss: per crop, mean teacher-weighted cross-entropy over its
/// masked positions, averaged over crops.
pub fn patch_level_loss(
    patch_student: &Array3<f64>,
    patch_teacher: &Array3<f64>,
    masks: &[Vec<bool>],
) -> Result<f64> {
    let (n_g, n_p, k) = patch_student.dim();
    ensure!(patch_teacher.dim() == (n_g, n_p, k), Param, "patch teacher/student shape mismatch");
    ensure!(
        masks.len() == n_g && masks.iter().all(|m| m.len() == n_p),
        Param,
        "masks must be {n_g}×{n_p}"
    );
    let mut crop_of_row = Vec::new();
    let mut s = Vec::new();
    let mut t = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        for (j, &on) in m.iter().enumerate() {
            if on {
                crop_of_row.push(i);
                s.extend(patch_student.slice(ndarray::s![i, j, ..]).iter());
                t.extend(patch_teacher.slice(ndarray::s![i, j, ..]).iter());
            }
        }
    }
    let rows = crop_of_row.len();
    let s = Array2::from_shape_vec((rows, k), s).expect("gathered rows");
    let t = Array2::from_shape_vec((rows, k), t).expect("gathered rows");
    Ok(masked_patch_loss_grad(&s, &t, &crop_of_row, n_g)?.0)
}

/// Nearest-neighbour entropy regularizer and its gradient w.r.t. the
/// unnormalized embeddings.
pub fn koleo_loss_grad(x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (b, d) = x.dim();
    ensure!(b >= 2, Param, "koleo needs at least two rows, got {b}");
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut y = x.clone();
    for (mut r, n) in y.rows_mut().into_iter().zip(&norms) {
        r.mapv_inplace(|v| v / n);
    }
    let mut dy = Array2::<f64>::zeros((b, d));
    let mut loss = 0.0;
    for i in 0..b {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..b {
            if j == i {
                continue;
            }
            let diff = &y.row(i) - &y.row(j);
            let dist = diff.dot(&diff).sqrt();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        let (j, dist) = best;
        loss -= (dist + KOLEO_EPS).ln() / b as f64;
        if dist > 0.0 {
            let coef = -1.0 / (b as f64 * (dist + KOLEO_EPS) * dist);
            let diff = &y.row(i) - &y.row(j);
            dy.row_mut(i).scaled_add(coef, &diff);
            dy.row_mut(j).scaled_add(-coef, &diff);
        }
    }
    let mut dx = dy;
    for ((mut g, yr), n) in dx.rows_mut().into_iter().zip(y.rows()).zip(&norms) {
        let dot = g.dot(&yr);
        g.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - dot * yv) / n);
    }
    Ok((loss, dx))
}

pub fn koleo_loss(cls_embeddings: &Array2<f64>) -> Result<f64> {
    Ok(koleo_loss_grad(cls_embeddings)?.0)
}

#[derive(Debug, Clone)]
pub struct SupervisedGrad {
    pub loss: f64,
    pub d_cls: Array2<f64>,
    pub d_prototypes: Array2<f64>,
}

/// `max(z,0) - z·y + log(1 + exp(-|z|))`
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Masked multi-label BCE between crop embeddings and the prototype bank.
pub fn supervised_prototype_loss_grad(
    cls_global: &Array2<f64>,
    prototypes: &Array2<f64>,
    y: &Array2<f64>,
    n: &Array2<f64>,
) -> Result<SupervisedGrad> {
    let (n_g, d) = cls_global.dim();
    let n_c = prototypes.nrows();
    ensure!(prototypes.ncols() == d, Param, "prototype dim {} vs embedding dim {d}", prototypes.ncols());
    ensure!(y.dim() == (n_g, n_c), Param, "y is {:?}, expected {:?}", y.dim(), (n_g, n_c));
    ensure!(n.dim() == (n_g, n_c), Param, "n is {:?}, expected {:?}", n.dim(), (n_g, n_c));
    let mut d_cls = Array2::zeros((n_g, d));
    let mut d_prototypes = Array2::zeros((n_c, d));
    if n_g == 0 {
        return Ok(SupervisedGrad {
            loss: 0.0,
            d_cls,
            d_prototypes,
        });
    }
    let z = cls_global.dot(&prototypes.t());
    let mut dz = Array2::<f64>::zeros((n_g, n_c));
    let mut loss = 0.0;
    for i in 0..n_g {
        let s: f64 = n.row(i).sum();
        if s == 0.0 {
            continue;
        }
        let w = 1.0 / (n_g as f64 * s);
        for j in 0..n_c {
            let nij = n[[i, j]];
            if nij == 0.0 {
                continue;
            }
            loss += w * nij * bce_with_logit(z[[i, j]], y[[i, j]]);
            dz[[i, j]] = w * nij * (sigmoid(z[[i, j]]) - y[[i, j]]);
        }
    }
    d_cls += &dz.dot(prototypes);
    d_prototypes += &dz.t().dot(cls_global);
    Ok(SupervisedGrad {
        loss,
        d_cls,
        d_prototypes,
    })
}

pub fn supervised_prototype_loss(
    cls_global: &Array2<f64>,
    prototypes: &Array2<f64>,
    y: &Array2<f64>,
    n: &Array2<f64>,
) -> Result<f64> {
    Ok(supervised_prototype_loss_grad(cls_global, prototypes, y, n)?.loss)
}
