//! Training objective: KL divergence plus negated correlation coefficient
//! between a predicted map `S` and a ground-truth density `G`.
//!
//! All functions take `[H, W]` tensors and stay inside the autograd graph,
//! so gradients flow back to `S`.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Floor inside logarithms and variance denominators.
pub const EPS: f64 = 1e-7;

/// Continuous fixation density for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    data: Array2<f32>,
}

impl GroundTruthMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition("ground-truth map must be finite and nonnegative".into()));
        }
        if data.iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate("ground-truth map is all zeros".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(v, self.data.dim(), device)?.to_dtype(dtype)?)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Scales a nonnegative map to unit sum.
pub fn normalize_to_distribution(map: &Tensor) -> Result<Tensor> {
    let min = scalar(&map.min_all()?)?;
    if !(min >= 0.0) {
        return Err(Error::Precondition(format!("map has negative or non-finite entries (min {min})")));
    }
    let sum = map.sum_all()?;
    let total = scalar(&sum)?;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!("map sum {total} cannot be normalised")));
    }
    Ok(map.broadcast_div(&sum)?)
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<()> {
    if s.dims() != g.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", s.dims(), g.dims())));
    }
    Ok(())
}

/// `KL(G || S)` between the two maps after normalisation. Both distributions
/// are smoothed with [`EPS`] per entry and renormalised, which keeps the
/// value finite and exactly zero when `S` is proportional to `G`.
pub fn kl_loss(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(s, g)?;
    let s = normalize_to_distribution(s)?;
    let g = normalize_to_distribution(g)?.to_dtype(s.dtype())?;
    let n = s.elem_count() as f64;
    let sp = (s + EPS)?;
    let gp = (g + EPS)?;
    let log_ratio = (gp.log()? - sp.log()?)?;
    Ok(((gp * log_ratio)?.sum_all()? / (1.0 + n * EPS))?)
}

/// How zero-variance operands are handled by [`cc_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceGuard {
    /// Zero variance is an error.
    Strict,
    /// [`EPS`] is added to the denominator.
    Epsilon,
}

struct Moments {
    cov: Tensor,
    var_s: Tensor,
    var_g: Tensor,
}

fn moments(s: &Tensor, g: &Tensor) -> Result<Moments> {
    let sc = s.broadcast_sub(&s.mean_all()?)?;
    let gc = g.broadcast_sub(&g.mean_all()?)?;
    Ok(Moments { cov: (&sc * &gc)?.mean_all()?, var_s: sc.sqr()?.mean_all()?, var_g: gc.sqr()?.mean_all()? })
}

fn is_flat(var: f64, t: &Tensor) -> Result<bool> {
    let scale = scalar(&t.abs()?.max_all()?)?;
    Ok(var <= (1e-6 * scale).powi(2) || var == 0.0)
}

/// `true` when `g` has (numerically) zero variance.
pub fn has_zero_variance(g: &Tensor) -> Result<bool> {
    let gc = g.broadcast_sub(&g.mean_all()?)?;
    is_flat(scalar(&gc.sqr()?.mean_all()?)?, g)
}

/// Negated Pearson correlation, population moments.
pub fn cc_loss(s: &Tensor, g: &Tensor, guard: VarianceGuard) -> Result<Tensor> {
    check_pair(s, g)?;
    let g = g.to_dtype(s.dtype())?;
    let m = moments(s, &g)?;
    let denom = match guard {
        VarianceGuard::Strict => {
            if is_flat(scalar(&m.var_s)?, s)? || is_flat(scalar(&m.var_g)?, &g)? {
                return Err(Error::Degenerate("correlation of a constant map".into()));
            }
            (m.var_s * m.var_g)?.sqrt()?
        }
        VarianceGuard::Epsilon => ((m.var_s * m.var_g)?.sqrt()? + EPS)?,
    };
    Ok((m.cov / denom)?.neg()?)
}

/// `kl_loss + cc_loss` with strict variance handling.
pub fn total_loss(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    Ok((kl_loss(s, g)? + cc_loss(s, g, VarianceGuard::Strict)?)?)
}

/// Loss terms of one training sample.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub kl: f64,
    /// `None` when the correlation term was skipped for a flat target.
    pub cc: Option<f64>,
}

/// Training objective: a flat target drops the correlation term (with a
/// warning) and the prediction's variance is guarded by [`EPS`].
pub fn training_loss(s: &Tensor, g: &Tensor) -> Result<LossTerms> {
    let kl = kl_loss(s, g)?;
    let kl_value = scalar(&kl)?;
    if has_zero_variance(g)? {
        log::warn!("ground-truth map has zero variance; correlation term skipped");
        return Ok(LossTerms { total: kl, kl: kl_value, cc: None });
    }
    let cc = cc_loss(s, g, VarianceGuard::Epsilon)?;
    let cc_value = scalar(&cc)?;
    Ok(LossTerms { total: (kl + cc)?, kl: kl_value, cc: Some(cc_value) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (h, w), &Device::Cpu).unwrap()
    }

    fn val(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn normalisation_follows_sum_rule() {
        let d = normalize_to_distribution(&t(&[1.0, 3.0], 1, 2)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(d[0], vec![0.25, 0.75]);
        let u = normalize_to_distribution(&t(&[2.0; 6], 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let one = normalize_to_distribution(&t(&[0.0, 0.0, 5.0, 0.0], 2, 2)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(one, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(normalize_to_distribution(&t(&[0.0; 4], 2, 2)), Err(Error::Degenerate(_))));
        assert!(normalize_to_distribution(&t(&[1.0, -1.0, 1.0, 1.0], 2, 2)).is_err());
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruthMap::new(Array2::zeros((2, 2))).is_err());
        assert!(GroundTruthMap::new(Array2::from_elem((2, 2), -1.0)).is_err());
        assert!(GroundTruthMap::new(Array2::from_elem((2, 2), 1.0)).is_ok());
    }

    #[test]
    fn kl_of_identical_maps_is_zero() {
        let g = t(&[0.1, 0.5, 0.0, 2.0, 0.3, 0.7], 2, 3);
        assert!(val(kl_loss(&g, &g).unwrap()).abs() < 1e-12);
        // proportional prediction is also a perfect match
        assert!(val(kl_loss(&(&g * 3.0).unwrap(), &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_one_hot_truth_against_uniform_prediction_is_log_n() {
        let n = 16;
        let mut g = vec![0.0; n];
        g[5] = 1.0;
        let v = val(kl_loss(&t(&[1.0; 16], 4, 4), &t(&g, 4, 4)).unwrap());
        // direct sum over the hit pixel and the n-1 empty ones
        let (e, q) = (EPS, 1.0 / n as f64);
        let hit = (1.0 + e) * ((1.0 + e) / (q + e)).ln();
        let empty = (n - 1) as f64 * e * (e / (q + e)).ln();
        let oracle = (hit + empty) / (1.0 + n as f64 * e);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - (n as f64).ln()).abs() < 1e-4);
    }

    #[test]
    fn kl_uniform_truth_against_one_hot_prediction_is_bounded_by_eps() {
        let n = 4usize;
        let v = val(kl_loss(&t(&[0.0, 1.0, 0.0, 0.0], 2, 2), &t(&[1.0; 4], 2, 2)).unwrap());
        let e = EPS;
        let q = 1.0 / n as f64;
        let oracle = (3.0 * (q + e) * ((q + e) / e).ln() + (q + e) * ((q + e) / (1.0 + e)).ln()) / (1.0 + n as f64 * e);
        assert!((v - oracle).abs() < 1e-9);
        assert!(v > 10.0 && v < -(EPS.ln()));
    }

    #[test]
    fn cc_identities() {
        let g = t(&[0.1, 0.5, 0.0, 2.0, 0.3, 0.7], 2, 3);
        assert!((val(cc_loss(&g, &g, VarianceGuard::Strict).unwrap()) + 1.0).abs() < 1e-12);
        let affine = g.affine(2.5, 0.3).unwrap();
        assert!((val(cc_loss(&affine, &g, VarianceGuard::Strict).unwrap()) + 1.0).abs() < 1e-12);
        let anti = g.affine(-1.0, 2.0).unwrap();
        assert!((val(cc_loss(&anti, &g, VarianceGuard::Strict).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cc_of_flat_map_is_degenerate_unless_guarded() {
        let g = t(&[0.1, 0.5, 0.0, 2.0], 2, 2);
        let flat = t(&[0.3; 4], 2, 2);
        assert!(matches!(cc_loss(&flat, &g, VarianceGuard::Strict), Err(Error::Degenerate(_))));
        let guarded = val(cc_loss(&flat, &g, VarianceGuard::Epsilon).unwrap());
        assert!(guarded.is_finite());
    }

    #[test]
    fn total_is_sum_of_terms() {
        let s = t(&[0.2, 0.4, 0.9, 0.1], 2, 2);
        let g = t(&[0.1, 0.5, 0.7, 0.0], 2, 2);
        let total = val(total_loss(&s, &g).unwrap());
        let parts = val(kl_loss(&s, &g).unwrap()) + val(cc_loss(&s, &g, VarianceGuard::Strict).unwrap());
        assert_eq!(total, parts);
        assert!((val(total_loss(&g, &g).unwrap()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_loss_skips_cc_for_flat_target() {
        let s = t(&[0.2, 0.4, 0.9, 0.1], 2, 2);
        let g = t(&[0.5; 4], 2, 2);
        let terms = training_loss(&s, &g).unwrap();
        assert!(terms.cc.is_none());
        assert_eq!(val(terms.total), terms.kl);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(kl_loss(&t(&[1.0; 4], 2, 2), &t(&[1.0; 6], 2, 3)).is_err());
    }
}
