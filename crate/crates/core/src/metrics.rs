//! Fidelity and diversity of generated sets (FID, improved precision and
//! recall) and segmentation quality (Dice, AJI).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabeledMask;

/// Negative eigenvalues smaller than this (relative to the largest
/// magnitude, floored at 1) are rounding noise and clamp to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `rows x dim` feature vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
    pub source: FeatureSource,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], source: FeatureSource) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("FeatureSet", "rows differ in length"));
        }
        let data: Vec<f64> = rows.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature set has non-finite entries".into()));
        }
        Ok(FeatureSet { dim, data, source })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(f: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = f.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 feature vectors, got {m}")));
    }
    let x = DMatrix::from_row_slice(m, f.dim, &f.data);
    let mean = x.row_mean().transpose();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (m as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::InvalidInput(format!("{what} is not positive semi-definite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Frechet distance between two Gaussians.
pub fn fid(mu_r: &DVector<f64>, cov_r: &DMatrix<f64>, mu_g: &DVector<f64>, cov_g: &DMatrix<f64>) -> Result<f64> {
    let d = mu_r.len();
    if mu_g.len() != d || cov_r.shape() != (d, d) || cov_g.shape() != (d, d) {
        return Err(Error::shape("fid", "mean and covariance dimensions disagree"));
    }
    let er = psd_eigen(cov_r, "real covariance")?;
    let root_r = &er.eigenvectors
        * DMatrix::from_diagonal(&er.eigenvalues.map(f64::sqrt))
        * er.eigenvectors.transpose();
    let cov_g = (cov_g + cov_g.transpose()) * 0.5;
    let inner = &root_r * &cov_g * &root_r;
    let ei = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu_r - mu_g;
    let tr_r = er.eigenvalues.sum();
    Ok(diff.dot(&diff) + tr_r + cov_g.trace() - 2.0 * tr_sqrt)
}

pub fn fid_from_features(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    let (mr, cr) = gaussian_stats(real)?;
    let (mg, cg) = gaussian_stats(gen)?;
    fid(&mr, &cr, &mg, &cg)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest neighbour in
/// the same set, self excluded.
pub fn knn_radii(f: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    let n = f.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidInput(format!("k-NN radius needs at least {} points, got {n}", k + 1)));
    }
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(f.row(i), f.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect())
}

/// Fraction of `query` points inside the union of k-NN balls of `support`.
fn coverage(support: &FeatureSet, query: &FeatureSet, k: usize) -> Result<f64> {
    let radii = knn_radii(support, k)?;
    let inside = (0..query.len())
        .filter(|&q| (0..support.len()).any(|s| sq_dist(query.row(q), support.row(s)) <= radii[s]))
        .count();
    Ok(inside as f64 / query.len() as f64)
}

/// `(precision, recall)` from k-NN manifold estimates.
pub fn improved_precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim != gen.dim {
        return Err(Error::shape("improved_precision_recall", "feature widths differ"));
    }
    Ok((coverage(real, gen, k)?, coverage(gen, real, k)?))
}

fn same_shape(a: &LabeledMask, b: &LabeledMask, op: &'static str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

/// Dice in percent, macro-averaged over foreground classes present in
/// either mask. Two masks with no foreground score 100.
pub fn dice(pred: &LabeledMask, gt: &LabeledMask) -> Result<f64> {
    same_shape(pred, gt, "dice")?;
    let (p, g) = (pred.semantic(), gt.semantic());
    let mut counts: BTreeMap<u8, [usize; 3]> = BTreeMap::new();
    for (&a, &b) in p.iter().zip(&g) {
        if a > 0 {
            counts.entry(a).or_default()[0] += 1;
        }
        if b > 0 {
            counts.entry(b).or_default()[1] += 1;
        }
        if a > 0 && a == b {
            counts.entry(a).or_default()[2] += 1;
        }
    }
    if counts.is_empty() {
        return Ok(100.0);
    }
    let total: f64 = counts.values().map(|[x, y, i]| 2.0 * *i as f64 / (x + y) as f64).sum();
    Ok(100.0 * total / counts.len() as f64)
}

/// Aggregated Jaccard index in percent. Each ground-truth instance takes
/// the prediction of largest IoU (lowest id on ties); predictions never
/// chosen add their area to the denominator. Two empty masks score 100.
pub fn aji(pred: &LabeledMask, gt: &LabeledMask) -> Result<f64> {
    same_shape(pred, gt, "aji")?;
    let mut area_p: BTreeMap<u32, usize> = BTreeMap::new();
    let mut area_g: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&a, &b) in pred.ids().iter().zip(gt.ids()) {
        if a > 0 {
            *area_p.entry(a).or_default() += 1;
        }
        if b > 0 {
            *area_g.entry(b).or_default() += 1;
        }
        if a > 0 && b > 0 {
            *inter.entry((b, a)).or_default() += 1;
        }
    }
    let (mut num, mut den) = (0usize, 0usize);
    let mut used = std::collections::BTreeSet::new();
    for (&gid, &ga) in &area_g {
        let mut best: Option<(f64, u32, usize)> = None;
        for (&(g2, pid), &i) in inter.range((gid, 0)..=(gid, u32::MAX)) {
            debug_assert_eq!(g2, gid);
            let iou = i as f64 / (ga + area_p[&pid] - i) as f64;
            if best.is_none_or(|(b, _, _)| iou > b) {
                best = Some((iou, pid, i));
            }
        }
        match best {
            Some((_, pid, i)) => {
                num += i;
                den += ga + area_p[&pid] - i;
                used.insert(pid);
            }
            None => den += ga,
        }
    }
    den += area_p.iter().filter(|(id, _)| !used.contains(id)).map(|(_, a)| a).sum::<usize>();
    if den == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * num as f64 / den as f64)
}

/// Mean of per-image Dice and AJI over aligned prediction/ground-truth pairs.
pub fn segmentation_scores(pairs: &[(LabeledMask, LabeledMask)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no mask pairs to score".into()));
    }
    let (mut d, mut a) = (0.0, 0.0);
    for (p, g) in pairs {
        d += dice(p, g)?;
        a += aji(p, g)?;
    }
    Ok((d / pairs.len() as f64, a / pairs.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ir: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aji: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: Option<f64>, lo: f64, hi: f64, name: &str| match v {
            Some(x) if !(lo..=hi).contains(&x) => Err(Error::InvalidInput(format!("{name} = {x} outside [{lo}, {hi}]"))),
            _ => Ok(()),
        };
        unit(self.ip, 0.0, 1.0, "ip")?;
        unit(self.ir, 0.0, 1.0, "ir")?;
        unit(self.dice, 0.0, 100.0, "dice")?;
        unit(self.aji, 0.0, 100.0, "aji")?;
        unit(self.fid, -1e-8, f64::INFINITY, "fid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(sem: &[u8], w: usize) -> LabeledMask {
        LabeledMask::from_semantic(sem.len() / w, w, sem).unwrap()
    }

    #[test]
    fn hand_covariance() {
        let f = FeatureSet::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]], FeatureSource::Real).unwrap();
        let (m, c) = gaussian_stats(&f).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
        assert_eq!(c.as_slice(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_d_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = fid(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_hand_case() {
        let p = mask(&[1, 1, 1, 0], 4);
        let g = mask(&[1, 1, 0, 0], 4);
        assert!((dice(&p, &g).unwrap() - 80.0).abs() < 1e-12);
        assert_eq!(dice(&g, &g).unwrap(), 100.0);
    }

    #[test]
    fn report_omits_missing_fields() {
        let r = MetricsReport { fid: Some(3.0), ..Default::default() };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"fid":3.0}"#);
    }
}
