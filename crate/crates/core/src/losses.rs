//! Loss terms on probability tensors.
//!
//! All functions take `B x K` probability tensors (rows sum to one) and
//! return differentiable tensors. Logs and cosine norms use `EPS` as a guard:
//! probabilities are clamped from below before the log, norms are clamped
//! before the division.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::error::{Error, Result};

pub const EPS: f64 = 1e-8;

/// Trade-off and filter parameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Weight of the offset refinement term (before modulation).
    pub beta: f64,
    /// Focal focusing exponent.
    pub tau: f64,
    /// Confidence threshold of the filter.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 1.0,
            tau: 0.0,
            kappa: 0.4,
        }
    }
}

fn safe_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(EPS)?.log()?)
}

fn labels_tensor(labels: &[usize], probs: &Tensor) -> Result<Tensor> {
    let (b, k) = probs.dims2()?;
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
    }
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    Ok(Tensor::from_vec(idx, (b, 1), probs.device())?)
}

/// `p_y` per sample.
fn label_probs(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx = labels_tensor(labels, probs)?;
    Ok(probs.gather(&idx, 1)?.squeeze(1)?)
}

/// `-log p_y` per sample (length `B`).
pub fn cross_entropy_per_sample(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(safe_log(&label_probs(probs, labels)?)?.neg()?)
}

pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(probs, labels)?.mean_all()?)
}

/// `(1 - p_y)^tau * (-log p_y)` per sample.
pub fn focal_loss_per_sample(probs: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    if tau < 0.0 {
        return Err(Error::invalid("focal tau must be non-negative"));
    }
    let py = label_probs(probs, labels)?;
    let ce = safe_log(&py)?.neg()?;
    if tau == 0.0 {
        return Ok(ce);
    }
    // clamp keeps powf well defined when rounding pushes p_y above one
    let modulator = py.affine(-1.0, 1.0)?.maximum(0.0)?.powf(tau)?;
    Ok((modulator * ce)?)
}

/// Batch mean of the focal loss over source samples.
pub fn focal_loss(probs: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    Ok(focal_loss_per_sample(probs, labels, tau)?.mean_all()?)
}

/// `-E_s[log q_s] - E_t[log q_t]` from the probability each item assigns to
/// its own domain.
pub fn domain_adversarial_loss(q_source: &Tensor, q_target: &Tensor) -> Result<Tensor> {
    if q_source.elem_count() == 0 || q_target.elem_count() == 0 {
        return Err(Error::invalid("domain loss needs items from both domains"));
    }
    let s = safe_log(q_source)?.mean_all()?;
    let t = safe_log(q_target)?.mean_all()?;
    Ok((s + t)?.neg()?)
}

/// Domain loss from discriminator logits (column 0 = source, 1 = target).
pub fn domain_loss_from_logits(source_logits: &Tensor, target_logits: &Tensor) -> Result<Tensor> {
    if source_logits.elem_count() == 0 || target_logits.elem_count() == 0 {
        return Err(Error::invalid("domain loss needs items from both domains"));
    }
    let qs = candle_nn::ops::softmax(source_logits, D::Minus1)?.narrow(1, 0, 1)?;
    let qt = candle_nn::ops::softmax(target_logits, D::Minus1)?.narrow(1, 1, 1)?;
    domain_adversarial_loss(&qs, &qt)
}

fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / (na * nb)?.maximum(EPS)?)?)
}

/// `-mean_i [cos(g_i, T_i) + cos(g_i, I_i)]`; lies in `[-2, 2]`.
pub fn skd_loss(enhanced: &Tensor, text_emb: &Tensor, image_emb: &Tensor) -> Result<Tensor> {
    if enhanced.dims() != text_emb.dims() || enhanced.dims() != image_emb.dims() {
        return Err(Error::invalid(format!(
            "distillation inputs disagree: {:?} / {:?} / {:?}",
            enhanced.dims(),
            text_emb.dims(),
            image_emb.dims()
        )));
    }
    let s = (cosine_rows(enhanced, text_emb)? + cosine_rows(enhanced, image_emb)?)?;
    Ok(s.mean_all()?.neg()?)
}

/// `sum_i p(i) log(p(i) / q(i))` per row.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let ratio = (safe_log(p)? - safe_log(q)?)?;
    Ok((p * ratio)?.sum(D::Minus1)?)
}

/// Row indices whose maximum probability exceeds `kappa`.
pub fn confidence_filter(probs: &Tensor, kappa: f64) -> Result<Vec<usize>> {
    let maxes = probs
        .max(D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    Ok(maxes
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > kappa)
        .map(|(i, _)| i)
        .collect())
}

fn filtered_mean(per_row: &Tensor, keep: &[usize]) -> Result<Option<Tensor>> {
    if keep.is_empty() {
        return Ok(None);
    }
    let idx: Vec<u32> = keep.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, keep.len(), per_row.device())?;
    Ok(Some(per_row.index_select(&idx, 0)?.mean_all()?))
}

/// Which KL direction the offset loss uses for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Omega {
    /// `ω = 1`: confident clean rows, `KL(p || p̃)`.
    Clean,
    /// `ω = 0`: confident perturbed rows, `KL(p̃ || p)`.
    Perturbed,
}

impl Omega {
    /// Bernoulli(0.5) draw.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        if rng.random_bool(0.5) {
            Omega::Clean
        } else {
            Omega::Perturbed
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Omega::Clean => 1.0,
            Omega::Perturbed => 0.0,
        }
    }
}

/// Offset refinement loss for one batch with an explicit `ω`.
///
/// Gradients flow through both `p` and `p̃`. When the selected filter is empty
/// the result is a zero scalar.
pub fn offset_refinement_loss_with(
    p: &Tensor,
    p_tilde: &Tensor,
    kappa: f64,
    omega: Omega,
) -> Result<Tensor> {
    if p.dims() != p_tilde.dims() {
        return Err(Error::invalid(
            "clean and perturbed probabilities differ in shape",
        ));
    }
    let term = match omega {
        Omega::Clean => filtered_mean(&kl_divergence(p, p_tilde)?, &confidence_filter(p, kappa)?)?,
        Omega::Perturbed => filtered_mean(
            &kl_divergence(p_tilde, p)?,
            &confidence_filter(p_tilde, kappa)?,
        )?,
    };
    match term {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), p.dtype(), p.device())?),
    }
}

/// Offset refinement loss drawing `ω` from `rng`.
pub fn offset_refinement_loss<R: Rng>(
    p: &Tensor,
    p_tilde: &Tensor,
    kappa: f64,
    rng: &mut R,
) -> Result<(Tensor, Omega)> {
    let omega = Omega::draw(rng);
    Ok((
        offset_refinement_loss_with(p, p_tilde, kappa, omega)?,
        omega,
    ))
}

/// Scalar components of one step, for bookkeeping and finiteness checks.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ComponentValues {
    pub focal: f64,
    pub dom: f64,
    pub skd: Option<f64>,
    pub offset: Option<f64>,
}

/// Combined objective of a step.
pub struct Objective {
    /// Tensor to back-propagate. `dom` enters with a plus sign because its
    /// path into `F` passes through gradient reversal: `D` descends on it
    /// while `F` ascends.
    pub backward: Tensor,
    /// `focal - dom + alpha*skd + mu*beta*offset`, the value minimized by `F, C`.
    pub loss_for_fc: f64,
    /// `dom`, the value minimized by `D`.
    pub loss_for_d: f64,
    pub components: ComponentValues,
}

/// Loss tensors produced by one step's forward pass.
pub struct Components<'a> {
    pub focal: &'a Tensor,
    pub dom: &'a Tensor,
    pub skd: Option<&'a Tensor>,
    pub offset: Option<&'a Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn total_objective(
    c: Components<'_>,
    alpha: f64,
    beta: f64,
    mu: f64,
    batch_ids: &[String],
) -> Result<Objective> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu = {mu} outside [0, 1]")));
    }
    let check = |name: &'static str, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                component: name,
                batch_ids: batch_ids.to_vec(),
            })
        }
    };
    let focal = check("focal", scalar(c.focal)?)?;
    let dom = check("dom", scalar(c.dom)?)?;
    let skd = c
        .skd
        .map(|t| scalar(t).and_then(|v| check("skd", v)))
        .transpose()?;
    let offset = c
        .offset
        .map(|t| scalar(t).and_then(|v| check("offset", v)))
        .transpose()?;

    let mut backward = (c.focal + c.dom)?;
    let mut loss_for_fc = focal - dom;
    if let (Some(t), Some(v)) = (c.skd, skd) {
        if alpha != 0.0 {
            backward = (backward + t.affine(alpha, 0.0)?)?;
        }
        loss_for_fc += alpha * v;
    }
    if let (Some(t), Some(v)) = (c.offset, offset) {
        let w = mu * beta;
        if w != 0.0 {
            backward = (backward + t.affine(w, 0.0)?)?;
        }
        loss_for_fc += w * v;
    }
    Ok(Objective {
        backward,
        loss_for_fc,
        loss_for_d: dom,
        components: ComponentValues {
            focal,
            dom,
            skd,
            offset,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), k), &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(
            s(&cross_entropy(&t2(&[&[0.0, 1.0, 0.0]]), &[1]).unwrap()),
            0.0
        );
        let u = t2(&[&[0.25; 4], &[0.25; 4]]);
        assert!((s(&cross_entropy(&u, &[0, 3]).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let h = t2(&[&[0.5, 0.3, 0.2]]);
        assert!((s(&cross_entropy(&h, &[0]).unwrap()) - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = t2(&[&[1.0, 0.0]]);
        let v = s(&cross_entropy(&p, &[1]).unwrap());
        assert!((v - (-EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        assert!(cross_entropy(&t2(&[&[0.5, 0.5]]), &[2]).is_err());
        assert!(cross_entropy(&t2(&[&[0.5, 0.5]]), &[0, 1]).is_err());
    }

    #[test]
    fn focal_closed_forms() {
        let p = t2(&[&[0.5, 0.5]]);
        assert!((s(&focal_loss(&p, &[0], 2.0).unwrap()) - 0.25 * 2f64.ln()).abs() < 1e-4);
        assert!((s(&focal_loss(&p, &[0], 2.0).unwrap()) - 0.1733).abs() < 1e-4);
        let sure = t2(&[&[1.0, 0.0]]);
        for tau in [0.0, 0.5, 2.0, 5.0] {
            assert_eq!(s(&focal_loss(&sure, &[0], tau).unwrap()), 0.0);
        }
        let q = t2(&[&[0.2, 0.7, 0.1]]);
        assert_eq!(
            s(&focal_loss(&q, &[1], 0.0).unwrap()),
            s(&cross_entropy(&q, &[1]).unwrap())
        );
        assert!(focal_loss(&q, &[1], -1.0).is_err());
    }

    #[test]
    fn focal_shrinks_confident_samples() {
        for py in [0.9, 0.95, 0.99] {
            let p = t2(&[&[py, 1.0 - py]]);
            assert!(
                s(&focal_loss(&p, &[0], 5.0).unwrap()) <= s(&focal_loss(&p, &[0], 0.0).unwrap())
            );
        }
    }

    #[test]
    fn domain_loss_endpoints() {
        let half = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        assert!(
            (s(&domain_adversarial_loss(&half, &half).unwrap()) - 2.0 * 2f64.ln()).abs() < 1e-4
        );
        let sure = Tensor::new(&[1.0 - 1e-6f64, 1.0 - 1e-6], &Device::Cpu).unwrap();
        assert!(s(&domain_adversarial_loss(&sure, &sure).unwrap()) < 1e-5);
        let empty = Tensor::zeros(0, DType::F64, &Device::Cpu).unwrap();
        assert!(domain_adversarial_loss(&empty, &half).is_err());
    }

    #[test]
    fn domain_loss_ignores_order() {
        let a = Tensor::new(&[0.9f64, 0.2, 0.6], &Device::Cpu).unwrap();
        let b = Tensor::new(&[0.6f64, 0.9, 0.2], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.3f64, 0.7], &Device::Cpu).unwrap();
        assert!(
            (s(&domain_adversarial_loss(&a, &t).unwrap())
                - s(&domain_adversarial_loss(&b, &t).unwrap()))
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn skd_endpoints() {
        let e = t2(&[&[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8]]);
        assert!((s(&skd_loss(&e, &e, &e).unwrap()) + 2.0).abs() < 1e-12);
        let ortho = t2(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert!(s(&skd_loss(&e, &ortho, &ortho).unwrap()).abs() < 1e-12);
        assert!((s(&skd_loss(&e, &e, &ortho).unwrap()) + 1.0).abs() < 1e-12);
        let zero = t2(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(s(&skd_loss(&zero, &e, &e).unwrap()), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        let p = t2(&[&[0.5, 0.5]]);
        let q = t2(&[&[0.9, 0.1]]);
        let expect = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
        let v = kl_divergence(&p, &q).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - expect).abs() < 1e-9);
        assert!((v - 0.5108).abs() < 1e-3);
        assert_eq!(
            kl_divergence(&p, &p).unwrap().to_vec1::<f64>().unwrap()[0],
            0.0
        );
    }

    #[test]
    fn filter_threshold_is_strict() {
        let p = t2(&[&[0.39, 0.31, 0.30], &[0.41, 0.30, 0.29], &[0.4, 0.3, 0.3]]);
        assert_eq!(confidence_filter(&p, 0.4).unwrap(), vec![1]);
        assert_eq!(confidence_filter(&p, 0.0).unwrap(), vec![0, 1, 2]);
        assert!(confidence_filter(&p, 1.0).unwrap().is_empty());
    }

    #[test]
    fn offset_loss_branches() {
        let p = t2(&[&[0.8, 0.2], &[0.55, 0.45], &[0.3, 0.7]]);
        let q = t2(&[&[0.6, 0.4], &[0.35, 0.65], &[0.5, 0.5]]);
        assert_eq!(
            s(&offset_refinement_loss_with(&p, &p, 0.4, Omega::Clean).unwrap()),
            0.0
        );
        assert_eq!(
            s(&offset_refinement_loss_with(&p, &p, 0.4, Omega::Perturbed).unwrap()),
            0.0
        );

        let kl = kl_divergence(&p, &q).unwrap().to_vec1::<f64>().unwrap();
        let expect = kl.iter().sum::<f64>() / 3.0;
        assert!(
            (s(&offset_refinement_loss_with(&p, &q, 0.4, Omega::Clean).unwrap()) - expect).abs()
                < 1e-12
        );

        // only rows 0 and 1 of p̃ clear 0.6
        let klr = kl_divergence(&q, &p).unwrap().to_vec1::<f64>().unwrap();
        let expect = (klr[1]) / 1.0;
        assert!(
            (s(&offset_refinement_loss_with(&p, &q, 0.6, Omega::Perturbed).unwrap()) - expect)
                .abs()
                < 1e-12
        );

        assert_eq!(
            s(&offset_refinement_loss_with(&p, &q, 0.99, Omega::Clean).unwrap()),
            0.0
        );
    }

    #[test]
    fn offset_loss_reproducible_under_seed() {
        use rand::SeedableRng;
        let p = t2(&[&[0.8, 0.2], &[0.55, 0.45]]);
        let q = t2(&[&[0.6, 0.4], &[0.35, 0.65]]);
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            (0..10)
                .map(|_| {
                    let (l, w) = offset_refinement_loss(&p, &q, 0.4, &mut rng).unwrap();
                    (s(&l).to_bits(), w)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn objective_bookkeeping() {
        let scalar_t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let (f, d, k, o) = (scalar_t(1.5), scalar_t(0.7), scalar_t(-1.2), scalar_t(0.4));
        let obj = total_objective(
            Components {
                focal: &f,
                dom: &d,
                skd: Some(&k),
                offset: Some(&o),
            },
            0.0,
            0.0,
            1.0,
            &[],
        )
        .unwrap();
        assert!((obj.loss_for_fc - 0.8).abs() < 1e-12);
        assert_eq!(obj.loss_for_d, 0.7);

        let obj = total_objective(
            Components {
                focal: &f,
                dom: &d,
                skd: Some(&k),
                offset: Some(&o),
            },
            0.3,
            1.0,
            0.0,
            &[],
        )
        .unwrap();
        assert!((obj.loss_for_fc - (1.5 - 0.7 + 0.3 * -1.2)).abs() < 1e-12);
        assert!((s(&obj.backward) - (1.5 + 0.7 + 0.3 * -1.2)).abs() < 1e-12);

        let nan = scalar_t(f64::NAN);
        let err = total_objective(
            Components {
                focal: &f,
                dom: &d,
                skd: None,
                offset: Some(&nan),
            },
            0.3,
            1.0,
            0.5,
            &["s1".into()],
        );
        assert!(matches!(
            err,
            Err(Error::NonFinite {
                component: "offset",
                ..
            })
        ));
    }
}
