//! Training objectives as differentiable scalars.
//!
//! Every loss returns a [`Loss`]: the graph node to differentiate plus a
//! [`LossValue`] breakdown for logging. Batch reductions are means.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use stepback_autodiff::{grad, Var};

use crate::error::{Error, Result};
use crate::model::{Bound, Mode, Model};

pub const DEFAULT_GP_WEIGHT: f64 = 10.0;
pub const AUX_SPEAKER_WEIGHT: f64 = 1.0;

/// One named term of a loss and the weight it enters the total with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// A scalar loss and its weighted terms; `value = Σ weight · component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<Component>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        LossValue {
            value,
            components: vec![Component {
                name: name.into(),
                weight: 1.0,
                value,
            }],
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.value).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.components.iter().all(|c| c.value.is_finite())
    }
}

/// A differentiable loss and its logged breakdown.
#[derive(Clone)]
pub struct Loss {
    pub total: Var,
    pub value: LossValue,
}

impl Loss {
    /// A loss with one component named `name`.
    pub fn single(name: &str, total: Var) -> Self {
        let value = LossValue::single(name, total.item());
        Loss { total, value }
    }

    /// `Σ weight · term`, keeping every term's own breakdown as one component.
    fn weighted(terms: Vec<(&str, f64, Var)>) -> Self {
        let mut total: Option<Var> = None;
        let mut components = Vec::with_capacity(terms.len());
        for (name, weight, term) in terms {
            components.push(Component {
                name: name.into(),
                weight,
                value: term.item(),
            });
            let scaled = if weight == 1.0 { term } else { term.scale(weight) };
            total = Some(match total {
                Some(t) => t.add(&scaled),
                None => scaled,
            });
        }
        let total = total.expect("at least one term");
        Loss {
            value: LossValue {
                value: total.item(),
                components,
            },
            total,
        }
    }
}

/// Mean absolute error between two equally shaped batches.
pub fn reconstruction_loss(y: &Var, x: &Var) -> Result<Loss> {
    if y.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "reconstruction of shape {:?} against target {:?}",
            y.shape(),
            x.shape()
        )));
    }
    Ok(Loss::single("mae", y.sub(x).abs().mean_all()))
}

/// Mean negative log-probability of `labels` under `log_probs [B, N]`.
pub fn classifier_loss(log_probs: &Var, labels: &[usize]) -> Result<Loss> {
    nll(log_probs, labels, "nll")
}

/// The conversion branch's identity term: the same negative log-likelihood,
/// evaluated on the classifier's view of the converted batch and the target ids.
pub fn conversion_identity_loss(log_probs_converted: &Var, targets: &[usize]) -> Result<Loss> {
    nll(log_probs_converted, targets, "nll")
}

fn nll(log_probs: &Var, labels: &[usize], name: &str) -> Result<Loss> {
    let [b, n] = match *log_probs.shape() {
        [b, n] => [b, n],
        _ => {
            return Err(Error::Shape(format!(
                "expected [batch, speakers] log-probabilities, got {:?}",
                log_probs.shape()
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Lookup(format!("label {l} outside [0, {n})")));
    }
    let mut pick = Array2::<f64>::zeros((b, n));
    for (row, &l) in labels.iter().enumerate() {
        pick[[row, l]] = -1.0 / b as f64;
    }
    Ok(Loss::single(name, log_probs.mul_const(&pick.into_dyn()).sum_all()))
}

/// `−λ·l_upp + l_low`.
pub fn stepback_loss(l_upp: &Loss, l_low: &Loss, lambda: f64) -> Result<Loss> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Validation(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if !l_upp.value.is_finite() || !l_low.value.is_finite() {
        return Err(Error::Validation("stepback terms must be finite".into()));
    }
    Ok(Loss::weighted(vec![
        ("l_upp", -lambda, l_upp.total.clone()),
        ("l_low", 1.0, l_low.total.clone()),
    ]))
}

/// Plain-number form of [`stepback_loss`].
pub fn stepback_value(l_upp: f64, l_low: f64, lambda: f64) -> f64 {
    -lambda * l_upp + l_low
}

/// A critic scores `[B, bins, T]` batches: `[B]` realness and optionally `[B, N]` speaker logits.
pub trait Critic {
    fn critique(&mut self, x: &Var) -> Result<(Var, Option<Var>)>;
}

/// The model's discriminator as a [`Critic`].
pub struct ModelCritic<'a, 'r> {
    pub model: &'a Model,
    pub params: &'a Bound,
    pub mode: Mode<'r>,
}

impl Critic for ModelCritic<'_, '_> {
    fn critique(&mut self, x: &Var) -> Result<(Var, Option<Var>)> {
        let c = self.model.discriminate(self.params, x, &mut self.mode)?;
        Ok((c.realness, Some(c.speaker_logits)))
    }
}

fn check_pair(real: &Var, fake: &Var) -> Result<()> {
    if real.shape() != fake.shape() || real.ndim() < 1 || real.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

/// `mean((‖∇D(x̂)‖₂ − 1)²)` over per-sample uniform interpolates `x̂ = real + α(fake − real)`.
pub fn gradient_penalty<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &mut C,
    real: &Var,
    fake: &Var,
    rng: &mut R,
) -> Result<Var> {
    check_pair(real, fake)?;
    let b = real.shape()[0];
    let mut alpha_shape = vec![1; real.ndim()];
    alpha_shape[0] = b;
    let alpha = ArrayD::from_shape_fn(IxDyn(&alpha_shape), |_| rng.random::<f64>());
    let interp = real.value() + &(&alpha * &(fake.value() - real.value()));
    let x_hat = Var::parameter(interp);
    let (score, _) = critic.critique(&x_hat)?;
    let g = grad(&score.sum_all(), &[x_hat], true).remove(0);
    let axes: Vec<usize> = (1..g.ndim()).collect();
    // sqrt(s + ε) − sqrt(ε) is the norm up to 1e-10 and has a finite slope at zero.
    let eps = 1e-20;
    let norm = g
        .square()
        .sum_keepdim(&axes)
        .add_scalar(eps)
        .sqrt()
        .add_scalar(-eps.sqrt());
    Ok(norm.add_scalar(-1.0).square().mean_all())
}

fn aux_term(logits: Option<Var>, labels: Option<&[usize]>) -> Result<Option<Var>> {
    match (logits, labels) {
        (Some(l), Some(labels)) => Ok(Some(nll(&l.log_softmax(1), labels, "aux")?.total)),
        _ => Ok(None),
    }
}

/// Critic objective on a real batch and a generated batch (treated as data).
///
/// Components: `wasserstein = mean D(fake) − mean D(real)`, `gp`, and `aux`
/// (speaker classification of the real batch) when the critic has a speaker head.
pub fn discriminator_loss<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &mut C,
    real: &Var,
    fake: &Var,
    real_labels: Option<&[usize]>,
    gp_weight: f64,
    rng: &mut R,
) -> Result<Loss> {
    check_pair(real, fake)?;
    let fake = fake.detach();
    let (d_real, logits_real) = critic.critique(real)?;
    let (d_fake, _) = critic.critique(&fake)?;
    let w = d_fake.mean_all().sub(&d_real.mean_all());
    let gp = gradient_penalty(critic, real, &fake, rng)?;
    let mut terms = vec![("wasserstein", 1.0, w), ("gp", gp_weight, gp)];
    if let Some(aux) = aux_term(logits_real, real_labels)? {
        terms.push(("aux", AUX_SPEAKER_WEIGHT, aux));
    }
    Ok(Loss::weighted(terms))
}

/// Generator objective: `adv = −mean D(fake)` plus `aux` (speaker
/// classification of the fakes as their target identities).
pub fn generator_loss<C: Critic + ?Sized>(
    critic: &mut C,
    fake: &Var,
    target_labels: Option<&[usize]>,
) -> Result<Loss> {
    let (d_fake, logits) = critic.critique(fake)?;
    let mut terms = vec![("adv", 1.0, d_fake.mean_all().neg())];
    if let Some(aux) = aux_term(logits, target_labels)? {
        terms.push(("aux", AUX_SPEAKER_WEIGHT, aux));
    }
    Ok(Loss::weighted(terms))
}

/// Both WGAN-GP objectives for one pair of batches.
pub fn wgan_gp_losses<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &mut C,
    real: &Var,
    fake: &Var,
    real_labels: Option<&[usize]>,
    target_labels: Option<&[usize]>,
    gp_weight: f64,
    rng: &mut R,
) -> Result<(Loss, Loss)> {
    let d = discriminator_loss(critic, real, fake, real_labels, gp_weight, rng)?;
    let g = generator_loss(critic, fake, target_labels)?;
    Ok((d, g))
}
