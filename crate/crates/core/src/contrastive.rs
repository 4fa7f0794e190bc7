//! Symmetric InfoNCE over a batch of (video, report) embedding pairs.
//!
//! With `S[i][j] = cos(t_i, v_j)` and temperature `τ`:
//!
//! ```text
//! L_v2r = 1/B Σ_j [ logsumexp_i(S[i][j]/τ) − S[j][j]/τ ]   (video j against every report)
//! L_r2v = 1/B Σ_i [ logsumexp_j(S[i][j]/τ) − S[i][i]/τ ]   (report i against every video)
//! L     = (L_v2r + L_r2v) / 2
//! ```
//!
//! Gradients flow through the cosine normalisation to the raw embeddings and
//! to `log τ`.

use crate::encoders::{TEMPERATURE_MAX, TEMPERATURE_MIN};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::math::{self, Mat64, COSINE_EPS};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    /// B × D video (or study) embeddings.
    pub videos: Mat64,
    /// B × D report embeddings.
    pub reports: Mat64,
    pub tau: f64,
}

impl BatchEmbeddings {
    pub fn new(videos: Mat64, reports: Mat64, tau: f64) -> Result<Self> {
        let b = BatchEmbeddings {
            videos,
            reports,
            tau,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn batch_size(&self) -> usize {
        self.videos.rows()
    }

    fn validate(&self) -> Result<()> {
        if self.videos.rows() != self.reports.rows() {
            return Err(Error::dim(self.videos.rows(), self.reports.rows(), "batch rows"));
        }
        if self.videos.cols() != self.reports.cols() {
            return Err(Error::dim(self.videos.cols(), self.reports.cols(), "embedding dim"));
        }
        if self.videos.rows() < 2 {
            return Err(Error::InvalidInput(
                "contrastive batch needs at least 2 pairs".into(),
            ));
        }
        if !(self.tau >= TEMPERATURE_MIN && self.tau <= TEMPERATURE_MAX) {
            return Err(Error::InvalidInput(format!(
                "temperature {} outside [{TEMPERATURE_MIN}, {TEMPERATURE_MAX}]",
                self.tau
            )));
        }
        if !self.videos.is_finite() || !self.reports.is_finite() {
            return Err(Error::InvalidInput("non-finite embeddings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_videos: Mat64,
    pub d_reports: Mat64,
    pub d_log_tau: f64,
}

/// `S[i][j] = cos(report_i, video_j)`.
pub fn similarity_matrix(videos: &Mat64, reports: &Mat64) -> Result<Mat64> {
    if videos.rows() != reports.rows() || videos.cols() != reports.cols() {
        return Err(Error::dim(
            videos.rows() * videos.cols(),
            reports.rows() * reports.cols(),
            "similarity_matrix shapes",
        ));
    }
    Ok(similarities(videos, reports))
}

/// Raw dot products `t_i·v_j`, row norms of both sides, and the cosine
/// matrix built from them (bit-identical to `math::cosine`).
struct Similarity {
    dots: Mat64,
    t_norm: Vec<f64>,
    v_norm: Vec<f64>,
    cos: Mat64,
}

fn similarity_parts(videos: &Mat64, reports: &Mat64) -> Similarity {
    let b = videos.rows();
    let t_norm: Vec<f64> = reports.iter_rows().map(math::norm).collect();
    let v_norm: Vec<f64> = videos.iter_rows().map(math::norm).collect();
    let mut dots = Mat64::zeros(reports.rows(), b);
    let mut cos = Mat64::zeros(reports.rows(), b);
    for i in 0..reports.rows() {
        let t = reports.row(i);
        for j in 0..b {
            let p = math::dot(t, videos.row(j));
            dots.set(i, j, p);
            cos.set(i, j, p / (t_norm[i] * v_norm[j] + COSINE_EPS));
        }
    }
    Similarity {
        dots,
        t_norm,
        v_norm,
        cos,
    }
}

fn similarities(videos: &Mat64, reports: &Mat64) -> Mat64 {
    similarity_parts(videos, reports).cos
}

/// Loss value only, at an explicit `log τ`. Shared by the gradient checker.
fn loss_value(videos: &Mat64, reports: &Mat64, log_tau: f64) -> f64 {
    let s = similarities(videos, reports);
    let b = s.rows();
    let inv_tau = (-log_tau).exp();
    let mut row_buf = vec![0.0; b];
    let mut col_buf = vec![0.0; b];
    let (mut v2r, mut r2v) = (0.0, 0.0);
    for k in 0..b {
        for m in 0..b {
            row_buf[m] = s.get(k, m) * inv_tau;
            col_buf[m] = s.get(m, k) * inv_tau;
        }
        let diag = s.get(k, k) * inv_tau;
        r2v += math::lse(&row_buf) - diag;
        v2r += math::lse(&col_buf) - diag;
    }
    (v2r + r2v) / (2.0 * b as f64)
}

pub fn contrastive_loss(batch: &BatchEmbeddings) -> Result<LossGrad> {
    batch.validate()?;
    let (videos, reports) = (&batch.videos, &batch.reports);
    let b = batch.batch_size();
    let d = videos.cols();
    let inv_tau = 1.0 / batch.tau;
    let Similarity {
        dots,
        t_norm,
        v_norm,
        cos: s,
    } = similarity_parts(videos, reports);

    // Row softmax (report i over videos) and column softmax (video j over reports).
    let mut row_p = Mat64::zeros(b, b);
    let mut col_p = Mat64::zeros(b, b);
    let mut buf = vec![0.0; b];
    let (mut v2r, mut r2v) = (0.0, 0.0);
    for k in 0..b {
        buf.copy_from_slice(s.row(k));
        buf.iter_mut().for_each(|x| *x *= inv_tau);
        r2v += math::lse(&buf) - s.get(k, k) * inv_tau;
        math::softmax_in_place(&mut buf, 1.0);
        row_p.row_mut(k).copy_from_slice(&buf);

        for m in 0..b {
            buf[m] = s.get(m, k) * inv_tau;
        }
        v2r += math::lse(&buf) - s.get(k, k) * inv_tau;
        math::softmax_in_place(&mut buf, 1.0);
        for m in 0..b {
            col_p.set(m, k, buf[m]);
        }
    }
    let loss = (v2r + r2v) / (2.0 * b as f64);

    // dL/dS.
    let scale = inv_tau / (2.0 * b as f64);
    let mut g = Mat64::zeros(b, b);
    let mut d_log_tau = 0.0;
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 2.0 } else { 0.0 };
            let gij = scale * (row_p.get(i, j) + col_p.get(i, j) - delta);
            g.set(i, j, gij);
            d_log_tau -= gij * s.get(i, j);
        }
    }

    // Back through the cosine: S_ij = p / (‖t_i‖‖v_j‖ + ε), p = t_i·v_j.
    let mut d_reports = Mat64::zeros(b, d);
    let mut d_videos = Mat64::zeros(b, d);
    for i in 0..b {
        let t = reports.row(i);
        for j in 0..b {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            let v = videos.row(j);
            let denom = t_norm[i] * v_norm[j] + COSINE_EPS;
            let p = dots.get(i, j);
            let a = gij / denom;
            let c = gij * p / (denom * denom);
            let ct = if t_norm[i] > 0.0 { c * v_norm[j] / t_norm[i] } else { 0.0 };
            let cv = if v_norm[j] > 0.0 { c * t_norm[i] / v_norm[j] } else { 0.0 };
            let dt = d_reports.row_mut(i);
            for k in 0..d {
                dt[k] += a * v[k] - ct * t[k];
            }
            let dv = d_videos.row_mut(j);
            for k in 0..d {
                dv[k] += a * t[k] - cv * v[k];
            }
        }
    }

    if !loss.is_finite() || !d_log_tau.is_finite() || !d_videos.is_finite() || !d_reports.is_finite() {
        return Err(Error::InvalidInput("non-finite loss or gradient".into()));
    }
    Ok(LossGrad {
        loss,
        d_videos,
        d_reports,
        d_log_tau,
    })
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss value in double-double precision.
fn loss_value_dd(videos: &[Dd], reports: &[Dd], b: usize, d: usize, log_tau: Dd) -> Dd {
    let dot = |x: &[Dd], y: &[Dd]| x.iter().zip(y).fold(Dd::ZERO, |acc, (a, c)| acc + *a * *c);
    let norms = |m: &[Dd]| -> Vec<Dd> { m.chunks_exact(d).map(|r| dot(r, r).sqrt()).collect() };
    let (vn, tn) = (norms(videos), norms(reports));
    let inv_tau = (-log_tau).exp();
    let mut logits = vec![Dd::ZERO; b * b];
    for i in 0..b {
        for j in 0..b {
            let p = dot(&reports[i * d..(i + 1) * d], &videos[j * d..(j + 1) * d]);
            logits[i * b + j] = p / (tn[i] * vn[j] + Dd::new(COSINE_EPS)) * inv_tau;
        }
    }
    let lse = |xs: &mut dyn Iterator<Item = Dd>| {
        let xs: Vec<Dd> = xs.collect();
        let max = xs.iter().copied().fold(xs[0], |m, x| if x.hi > m.hi { x } else { m });
        max + xs.iter().fold(Dd::ZERO, |acc, &x| acc + (x - max).exp()).ln()
    };
    let mut total = Dd::ZERO;
    for k in 0..b {
        let diag = logits[k * b + k];
        total = total + lse(&mut (0..b).map(|m| logits[k * b + m])) - diag;
        total = total + lse(&mut (0..b).map(|m| logits[m * b + k])) - diag;
    }
    total / (2.0 * b as f64)
}

/// Arithmetic used to evaluate the loss inside finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdPrecision {
    /// Plain f64; round-off of ~1e-16·|L| / eps limits accuracy on small gradients.
    F64,
    /// Double-double; only the O(eps²) truncation error remains.
    DoubleDouble,
}

/// Per-block maximum relative errors from [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub videos: f64,
    pub reports: f64,
    pub log_tau: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.videos.max(self.reports).max(self.log_tau)
    }
}

/// Maximum relative error between the analytic gradient and central finite
/// differences over every coordinate of both embedding matrices and `log τ`.
pub fn grad_check(batch: &BatchEmbeddings, eps: f64) -> Result<f64> {
    Ok(grad_check_with(batch, eps, FdPrecision::DoubleDouble)?.max())
}

pub fn grad_check_with(
    batch: &BatchEmbeddings,
    eps: f64,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = contrastive_loss(batch)?;
    let (b, d) = (batch.batch_size(), batch.videos.cols());
    let log_tau = batch.tau.ln();

    let mut videos: Vec<Dd> = batch.videos.as_slice().iter().map(|&x| Dd::new(x)).collect();
    let mut reports: Vec<Dd> = batch.reports.as_slice().iter().map(|&x| Dd::new(x)).collect();
    let step = Dd::new(eps);
    let loss = |v: &[Dd], r: &[Dd], lt: Dd| -> Dd {
        match precision {
            FdPrecision::DoubleDouble => loss_value_dd(v, r, b, d, lt),
            FdPrecision::F64 => {
                let m = |xs: &[Dd]| Mat64::from_vec_unchecked(b, d, xs.iter().map(|x| x.to_f64()).collect());
                Dd::new(loss_value(&m(v), &m(r), lt.to_f64()))
            }
        }
    };
    let central = |plus: Dd, minus: Dd| ((plus - minus) / (2.0 * eps)).to_f64();
    let lt = Dd::new(log_tau);

    let mut report = GradCheckReport {
        videos: 0.0,
        reports: 0.0,
        log_tau: 0.0,
    };
    for k in 0..videos.len() {
        let x = videos[k];
        videos[k] = x + step;
        let plus = loss(&videos, &reports, lt);
        videos[k] = x - step;
        let minus = loss(&videos, &reports, lt);
        videos[k] = x;
        let err = relative_error(analytic.d_videos.as_slice()[k], central(plus, minus));
        report.videos = report.videos.max(err);
    }
    for k in 0..reports.len() {
        let x = reports[k];
        reports[k] = x + step;
        let plus = loss(&videos, &reports, lt);
        reports[k] = x - step;
        let minus = loss(&videos, &reports, lt);
        reports[k] = x;
        let err = relative_error(analytic.d_reports.as_slice()[k], central(plus, minus));
        report.reports = report.reports.max(err);
    }
    let plus = loss(&videos, &reports, lt + step);
    let minus = loss(&videos, &reports, lt - step);
    report.log_tau = relative_error(analytic.d_log_tau, central(plus, minus));
    Ok(report)
}

/// Temperature used for randomly generated gradient-check batches.
pub const GRADCHECK_TAU: f64 = 0.5;

/// Random batch for gradient checking: standard normal entries.
pub fn random_batch(batch: usize, dim: usize, seed: u64) -> Result<BatchEmbeddings> {
    let mut rng = Rng::new(seed);
    let mut draw = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<_>>();
    let videos = Mat64::new(batch, dim, draw(batch * dim))?;
    let reports = Mat64::new(batch, dim, draw(batch * dim))?;
    BatchEmbeddings::new(videos, reports, GRADCHECK_TAU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn batch(v: Vec<Vec<f64>>, t: Vec<Vec<f64>>, tau: f64) -> BatchEmbeddings {
        BatchEmbeddings::new(Mat64::from_rows(&v).unwrap(), Mat64::from_rows(&t).unwrap(), tau)
            .unwrap()
    }

    #[test]
    fn similarity_examples() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch(eye.clone(), eye.clone(), 1.0);
        let s = similarity_matrix(&b.videos, &b.reports).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.get(i, j) - want).abs() < 1e-11);
            }
        }
        assert!(similarity_matrix(&b.videos, &Mat64::zeros(3, 2)).is_err());
    }

    /// Identical videos with reports all at the same angle to them: every
    /// similarity is equal, so both softmaxes are uniform.
    fn uniform_batch(b: usize, tau: f64) -> BatchEmbeddings {
        let d = b + 1;
        let mut v = vec![0.0; d];
        v[0] = 1.5;
        let reports: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                let mut t = vec![0.0; d];
                t[0] = 1.0;
                t[i + 1] = 1.0;
                t
            })
            .collect();
        batch(vec![v; b], reports, tau)
    }

    #[test]
    fn uniform_similarities_give_ln_b() {
        let out = contrastive_loss(&uniform_batch(64, 0.07)).unwrap();
        assert!((out.loss - 64f64.ln()).abs() < 1e-7);
        assert!((out.loss - 4.1588831).abs() < 1e-7);
        let out = contrastive_loss(&uniform_batch(5, 1.0)).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_videos_alone_do_not_force_ln_b() {
        // Only the report→video softmax is uniform here; video→report is not.
        let mut rng = Rng::new(1);
        let v = vec![vec![0.3, -0.2, 0.9]; 8];
        let t: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let out = contrastive_loss(&batch(v, t, 0.5)).unwrap();
        assert!(out.loss > 8f64.ln());
    }

    #[test]
    fn identity_similarities_at_unit_temperature() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = contrastive_loss(&batch(eye.clone(), eye, 1.0)).unwrap();
        // −log(e / (e + 1)) = ln(1 + e⁻¹)
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((out.loss - expected).abs() < 1e-11);
        assert!((out.loss - 0.3132617).abs() < 1e-6);
    }

    #[test]
    fn rejects_degenerate_batches() {
        let one = vec![vec![1.0, 0.0]];
        let b = BatchEmbeddings {
            videos: Mat64::from_rows(&one).unwrap(),
            reports: Mat64::from_rows(&one).unwrap(),
            tau: 1.0,
        };
        assert!(contrastive_loss(&b).is_err());
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(BatchEmbeddings::new(
            Mat64::from_rows(&two).unwrap(),
            Mat64::from_rows(&two).unwrap(),
            1e-3
        )
        .is_err());
    }

    #[test]
    fn perfect_alignment_at_min_temperature() {
        let d = 8;
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|k| if k == i { 2.0 } else { 0.0 }).collect())
            .collect();
        let out = contrastive_loss(&batch(rows.clone(), rows, TEMPERATURE_MIN)).unwrap();
        assert!(out.loss < 0.01);
    }

    #[test]
    fn gradcheck_random_batches() {
        for seed in 0..20 {
            let b = random_batch(8, 16, seed).unwrap();
            let err = grad_check(&b, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradcheck_uniform_similarities() {
        let b = uniform_batch(6, 0.3);
        let report = grad_check_with(&b, 1e-5, FdPrecision::DoubleDouble).unwrap();
        assert!(report.log_tau < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_is_stable_across_step_sizes() {
        let b = random_batch(8, 16, 99).unwrap();
        // Plain f64: shrinking eps must not blow up through cancellation.
        let coarse = grad_check_with(&b, 1e-4, FdPrecision::F64).unwrap().max();
        let fine = grad_check_with(&b, 1e-5, FdPrecision::F64).unwrap().max();
        assert!(fine <= 10.0 * coarse && coarse <= 10.0 * fine, "{coarse} vs {fine}");
        // Double-double: pure O(eps²) truncation, so the finer step is more accurate.
        let coarse = grad_check(&b, 1e-4).unwrap();
        let fine = grad_check(&b, 1e-5).unwrap();
        assert!(fine < coarse && coarse < 1e-5, "{coarse} vs {fine}");
        assert!(grad_check(&b, 1e-2).is_err());
    }

    proptest! {
        #[test]
        fn loss_symmetric_and_nonnegative(seed in any::<u64>(), bsz in 2usize..10, dim in 1usize..8) {
            let b = random_batch(bsz, dim, seed).unwrap();
            let swapped = BatchEmbeddings::new(b.reports.clone(), b.videos.clone(), b.tau).unwrap();
            let l1 = contrastive_loss(&b).unwrap();
            let l2 = contrastive_loss(&swapped).unwrap();
            prop_assert!((l1.loss - l2.loss).abs() < 1e-12);
            prop_assert!(l1.loss >= 0.0);
        }

        #[test]
        fn loss_invariant_to_row_scaling(seed in any::<u64>(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
            let b = random_batch(6, 5, seed).unwrap();
            let mut v = b.videos.clone();
            for (i, s) in scales.iter().enumerate() {
                v.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            let scaled = BatchEmbeddings::new(v, b.reports.clone(), b.tau).unwrap();
            prop_assert!((contrastive_loss(&b).unwrap().loss - contrastive_loss(&scaled).unwrap().loss).abs() < 1e-9);
        }

        #[test]
        fn gradients_finite(seed in any::<u64>()) {
            let b = random_batch(5, 4, seed).unwrap();
            let g = contrastive_loss(&b).unwrap();
            prop_assert!(g.d_videos.is_finite() && g.d_reports.is_finite() && g.d_log_tau.is_finite());
        }
    }
}
