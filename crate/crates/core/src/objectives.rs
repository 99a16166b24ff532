//! SFT, DPO (+ auxiliary SFT) and GRPO losses over per-token log-probs,
//! with closed-form gradients. Every function returns a loss to minimize.

use std::fmt::Debug;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::ObjectiveError;

/// Floating-point type the objectives are evaluated in.
pub trait Scalar: Float + FromPrimitive + Debug + Send + Sync + 'static {}

impl<T: Float + FromPrimitive + Debug + Send + Sync + 'static> Scalar for T {}

fn cast<S: Scalar>(x: usize) -> S {
    S::from_usize(x).expect("count fits the scalar type")
}

/// Token log-probs of one rendered trajectory. `loss_mask` is true on the
/// assistant's own thought and action tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence<S> {
    pub token_logprobs: Vec<S>,
    pub loss_mask: Vec<bool>,
}

impl<S: Scalar> ScoredSequence<S> {
    pub fn new(token_logprobs: Vec<S>, loss_mask: Vec<bool>) -> Result<Self, ObjectiveError> {
        let seq = Self { token_logprobs, loss_mask };
        seq.validate()?;
        Ok(seq)
    }

    /// Every token trainable.
    pub fn unmasked(token_logprobs: Vec<S>) -> Result<Self, ObjectiveError> {
        let mask = vec![true; token_logprobs.len()];
        Self::new(token_logprobs, mask)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.token_logprobs.len() != self.loss_mask.len() {
            return Err(ObjectiveError::InvalidInput(format!(
                "{} log-probs but {} mask entries",
                self.token_logprobs.len(),
                self.loss_mask.len()
            )));
        }
        if let Some(bad) = self.token_logprobs.iter().find(|x| !x.is_finite() || **x > S::zero()) {
            return Err(ObjectiveError::InvalidInput(format!("log-prob {bad:?} is not a finite value <= 0")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    fn masked(&self) -> impl Iterator<Item = S> + '_ {
        self.token_logprobs
            .iter()
            .zip(&self.loss_mask)
            .filter(|(_, m)| **m)
            .map(|(lp, _)| *lp)
    }

    /// Gradient vector that is `value` on masked-in tokens and zero elsewhere.
    fn fill(&self, value: S) -> Vec<S> {
        self.loss_mask
            .iter()
            .map(|m| if *m { value } else { S::zero() })
            .collect()
    }
}

/// Sum of masked-in token log-probs.
pub fn sequence_logprob<S: Scalar>(seq: &ScoredSequence<S>) -> S {
    seq.masked().fold(S::zero(), |acc, x| acc + x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair<S> {
    pub policy_pos: ScoredSequence<S>,
    pub policy_neg: ScoredSequence<S>,
    pub ref_pos: ScoredSequence<S>,
    pub ref_neg: ScoredSequence<S>,
}

impl<S: Scalar> PreferencePair<S> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for s in [&self.policy_pos, &self.policy_neg, &self.ref_pos, &self.ref_neg] {
            s.validate()?;
        }
        if self.policy_pos.len() != self.ref_pos.len() || self.policy_neg.len() != self.ref_neg.len() {
            return Err(ObjectiveError::InvalidInput("policy and reference lengths differ".into()));
        }
        Ok(())
    }
}

/// Policy and reference scores of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair<S> {
    pub policy: ScoredSequence<S>,
    pub reference: ScoredSequence<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup<S> {
    pub rewards: Vec<S>,
    pub sequences: Vec<ScoredPair<S>>,
}

impl<S: Scalar> ScoredGroup<S> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.rewards.len() != self.sequences.len() {
            return Err(ObjectiveError::InvalidInput(format!(
                "{} rewards for {} sequences",
                self.rewards.len(),
                self.sequences.len()
            )));
        }
        if self.rewards.len() < 2 {
            return Err(ObjectiveError::GroupTooSmall(self.rewards.len()));
        }
        for p in &self.sequences {
            p.policy.validate()?;
            p.reference.validate()?;
            if p.policy.len() != p.reference.len() {
                return Err(ObjectiveError::InvalidInput("policy and reference lengths differ".into()));
            }
            if p.policy.masked_count() == 0 {
                return Err(ObjectiveError::EmptyMask);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveHyperparams<S> {
    pub beta: S,
    pub lambda: S,
    pub beta_kl: S,
    /// Divide GRPO advantages by the group's standard deviation.
    pub normalize_std: bool,
}

impl<S: Scalar> Default for ObjectiveHyperparams<S> {
    fn default() -> Self {
        Self {
            beta: S::from_f64(0.1).expect("representable"),
            lambda: S::one(),
            beta_kl: S::from_f64(0.01).expect("representable"),
            normalize_std: false,
        }
    }
}

impl<S: Scalar> ObjectiveHyperparams<S> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        check_beta(self.beta)?;
        check_non_negative("lambda", self.lambda)?;
        check_non_negative("beta_kl", self.beta_kl)
    }
}

fn check_beta<S: Scalar>(beta: S) -> Result<(), ObjectiveError> {
    if beta.is_finite() && beta > S::zero() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidInput(format!("beta must be positive, got {beta:?}")))
    }
}

fn check_non_negative<S: Scalar>(name: &str, v: S) -> Result<(), ObjectiveError> {
    if v.is_finite() && v >= S::zero() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidInput(format!("{name} must be non-negative, got {v:?}")))
    }
}

/// `-ln(sigmoid(x))`, evaluated without overflow for large `|x|`.
pub fn neg_log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Negative mean log-prob over all masked-in tokens of the batch.
pub fn sft_loss<S: Scalar>(batch: &[ScoredSequence<S>]) -> Result<S, ObjectiveError> {
    let total = sft_token_count(batch)?;
    let sum = batch.iter().map(sequence_logprob).fold(S::zero(), |a, b| a + b);
    Ok(-sum / cast(total))
}

fn sft_token_count<S: Scalar>(batch: &[ScoredSequence<S>]) -> Result<usize, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0;
    for seq in batch {
        seq.validate()?;
        match seq.masked_count() {
            0 => return Err(ObjectiveError::EmptyMask),
            n => total += n,
        }
    }
    Ok(total)
}

fn dpo_inner<S: Scalar>(pair: &PreferencePair<S>, beta: S) -> S {
    let policy = sequence_logprob(&pair.policy_pos) - sequence_logprob(&pair.policy_neg);
    let reference = sequence_logprob(&pair.ref_pos) - sequence_logprob(&pair.ref_neg);
    beta * (policy - reference)
}

pub fn dpo_loss<S: Scalar>(pair: &PreferencePair<S>, beta: S) -> Result<S, ObjectiveError> {
    check_beta(beta)?;
    pair.validate()?;
    Ok(neg_log_sigmoid(dpo_inner(pair, beta)))
}

/// DPO plus `lambda` times the SFT loss of the preferred trajectory.
pub fn po_loss<S: Scalar>(pair: &PreferencePair<S>, beta: S, lambda: S) -> Result<S, ObjectiveError> {
    check_non_negative("lambda", lambda)?;
    let dpo = dpo_loss(pair, beta)?;
    if lambda == S::zero() {
        return Ok(dpo);
    }
    Ok(dpo + lambda * sft_loss(std::slice::from_ref(&pair.policy_pos))?)
}

/// Rewards minus the group mean.
pub fn grpo_advantages<S: Scalar>(rewards: &[S]) -> Result<Vec<S>, ObjectiveError> {
    grpo_advantages_with(rewards, false)
}

/// Like [`grpo_advantages`], optionally scaled by the group's population
/// standard deviation. A group with identical rewards yields zeros.
pub fn grpo_advantages_with<S: Scalar>(rewards: &[S], normalize_std: bool) -> Result<Vec<S>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ObjectiveError::InvalidInput(format!("reward {bad:?} is not finite")));
    }
    let n: S = cast(rewards.len());
    let mean = rewards.iter().fold(S::zero(), |a, b| a + *b) / n;
    // Second pass removes the rounding left in the first mean.
    let residual = rewards.iter().fold(S::zero(), |a, r| a + (*r - mean)) / n;
    let mean = mean + residual;
    let mut adv: Vec<S> = rewards.iter().map(|r| *r - mean).collect();
    if normalize_std {
        let var = adv.iter().fold(S::zero(), |a, x| a + *x * *x) / n;
        let std = var.sqrt();
        for a in &mut adv {
            *a = if std > S::zero() { *a / std } else { S::zero() };
        }
    }
    Ok(adv)
}

/// Mean over masked-in tokens of `policy - reference`.
pub fn kl_estimate<S: Scalar>(pair: &ScoredPair<S>) -> S {
    let m = pair.policy.masked_count();
    if m == 0 {
        return S::zero();
    }
    let diff = pair
        .policy
        .token_logprobs
        .iter()
        .zip(&pair.reference.token_logprobs)
        .zip(&pair.policy.loss_mask)
        .filter(|(_, mask)| **mask)
        .fold(S::zero(), |acc, ((p, r), _)| acc + (*p - *r));
    diff / cast(m)
}

pub fn grpo_loss<S: Scalar>(groups: &[ScoredGroup<S>], beta_kl: S) -> Result<S, ObjectiveError> {
    grpo_loss_with(groups, beta_kl, false)
}

pub fn grpo_loss_with<S: Scalar>(groups: &[ScoredGroup<S>], beta_kl: S, normalize_std: bool) -> Result<S, ObjectiveError> {
    check_non_negative("beta_kl", beta_kl)?;
    if groups.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = S::zero();
    let mut n = 0usize;
    for g in groups {
        g.validate()?;
        let adv = grpo_advantages_with(&g.rewards, normalize_std)?;
        for (a, pair) in adv.into_iter().zip(&g.sequences) {
            total = total + a * sequence_logprob(&pair.policy) - beta_kl * kl_estimate(pair);
            n += 1;
        }
    }
    Ok(-total / cast(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sft,
    Dpo,
    Po,
    Grpo,
}

impl FromStr for LossKind {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(Self::Sft),
            "dpo" => Ok(Self::Dpo),
            "po" => Ok(Self::Po),
            "grpo" => Ok(Self::Grpo),
            other => Err(ObjectiveError::UnknownLoss(other.to_string())),
        }
    }
}

/// A loss together with everything it is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective<S> {
    Sft { batch: Vec<ScoredSequence<S>> },
    Dpo { pair: PreferencePair<S>, beta: S },
    Po { pair: PreferencePair<S>, beta: S, lambda: S },
    Grpo { groups: Vec<ScoredGroup<S>>, beta_kl: S, normalize_std: bool },
}

impl<S: Scalar> Objective<S> {
    pub fn kind(&self) -> LossKind {
        match self {
            Self::Sft { .. } => LossKind::Sft,
            Self::Dpo { .. } => LossKind::Dpo,
            Self::Po { .. } => LossKind::Po,
            Self::Grpo { .. } => LossKind::Grpo,
        }
    }

    pub fn loss(&self) -> Result<S, ObjectiveError> {
        match self {
            Self::Sft { batch } => sft_loss(batch),
            Self::Dpo { pair, beta } => dpo_loss(pair, *beta),
            Self::Po { pair, beta, lambda } => po_loss(pair, *beta, *lambda),
            Self::Grpo { groups, beta_kl, normalize_std } => grpo_loss_with(groups, *beta_kl, *normalize_std),
        }
    }

    /// The policy sequences, in the order [`Objective::gradients`] reports them.
    pub fn policy_sequences(&self) -> Vec<&ScoredSequence<S>> {
        match self {
            Self::Sft { batch } => batch.iter().collect(),
            Self::Dpo { pair, .. } | Self::Po { pair, .. } => vec![&pair.policy_pos, &pair.policy_neg],
            Self::Grpo { groups, .. } => groups
                .iter()
                .flat_map(|g| g.sequences.iter().map(|p| &p.policy))
                .collect(),
        }
    }

    pub fn policy_sequences_mut(&mut self) -> Vec<&mut ScoredSequence<S>> {
        match self {
            Self::Sft { batch } => batch.iter_mut().collect(),
            Self::Dpo { pair, .. } | Self::Po { pair, .. } => vec![&mut pair.policy_pos, &mut pair.policy_neg],
            Self::Grpo { groups, .. } => groups
                .iter_mut()
                .flat_map(|g| g.sequences.iter_mut().map(|p| &mut p.policy))
                .collect(),
        }
    }

    /// d(loss)/d(token log-prob) for every policy token; zero on masked-out
    /// tokens. Reference scores are constants.
    pub fn gradients(&self) -> Result<Vec<Vec<S>>, ObjectiveError> {
        self.loss()?;
        match self {
            Self::Sft { batch } => {
                let total: S = cast(sft_token_count(batch)?);
                Ok(batch.iter().map(|s| s.fill(-S::one() / total)).collect())
            }
            Self::Dpo { pair, beta } => Ok(dpo_gradients(pair, *beta)),
            Self::Po { pair, beta, lambda } => {
                let mut g = dpo_gradients(pair, *beta);
                if *lambda != S::zero() {
                    let m: S = cast(pair.policy_pos.masked_count());
                    for (gi, mask) in g[0].iter_mut().zip(&pair.policy_pos.loss_mask) {
                        if *mask {
                            *gi = *gi - *lambda / m;
                        }
                    }
                }
                Ok(g)
            }
            Self::Grpo { groups, beta_kl, normalize_std } => {
                let n: S = cast(groups.iter().map(|g| g.sequences.len()).sum());
                let mut out = Vec::new();
                for g in groups {
                    let adv = grpo_advantages_with(&g.rewards, *normalize_std)?;
                    for (a, pair) in adv.into_iter().zip(&g.sequences) {
                        let m: S = cast(pair.policy.masked_count());
                        out.push(pair.policy.fill(-(a - *beta_kl / m) / n));
                    }
                }
                Ok(out)
            }
        }
    }
}

fn dpo_gradients<S: Scalar>(pair: &PreferencePair<S>, beta: S) -> Vec<Vec<S>> {
    let w = beta * sigmoid(-dpo_inner(pair, beta));
    vec![pair.policy_pos.fill(-w), pair.policy_neg.fill(w)]
}

/// Analytic gradients of the named loss. The name must match the inputs.
pub fn loss_gradients<S: Scalar>(loss_name: &str, inputs: &Objective<S>) -> Result<Vec<Vec<S>>, ObjectiveError> {
    let kind: LossKind = loss_name.parse()?;
    if kind != inputs.kind() {
        return Err(ObjectiveError::InvalidInput(format!(
            "`{loss_name}` requested for {:?} inputs",
            inputs.kind()
        )));
    }
    inputs.gradients()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(lps: &[f64]) -> ScoredSequence<f64> {
        ScoredSequence::unmasked(lps.to_vec()).unwrap()
    }

    fn pair(pos: &[f64], neg: &[f64], rpos: &[f64], rneg: &[f64]) -> PreferencePair<f64> {
        PreferencePair { policy_pos: seq(pos), policy_neg: seq(neg), ref_pos: seq(rpos), ref_neg: seq(rneg) }
    }

    #[test]
    fn sft_examples() {
        assert_eq!(sft_loss(&[seq(&[-0.5; 10])]).unwrap(), 0.5);
        assert_eq!(sft_loss(&[seq(&[0.0; 4])]).unwrap(), 0.0);
        let masked = ScoredSequence::new(vec![-1.0, -100.0, -2.0], vec![true, false, true]).unwrap();
        assert_eq!(sft_loss(&[masked]).unwrap(), sft_loss(&[seq(&[-1.0, -2.0])]).unwrap());
        let empty = ScoredSequence::new(vec![-1.0], vec![false]).unwrap();
        assert_eq!(sft_loss(&[empty]), Err(ObjectiveError::EmptyMask));
        assert_eq!(sft_loss::<f64>(&[]), Err(ObjectiveError::EmptyBatch));
    }

    #[test]
    fn sequence_logprob_examples() {
        let none = ScoredSequence::new(vec![-1.0, -2.0], vec![false, false]).unwrap();
        assert_eq!(sequence_logprob(&none), 0.0);
        assert_eq!(sequence_logprob(&seq(&[-1.0, -2.0])), -3.0);
    }

    #[test]
    fn invalid_sequences_rejected() {
        assert!(ScoredSequence::new(vec![-1.0], vec![true, true]).is_err());
        assert!(ScoredSequence::new(vec![0.5], vec![true]).is_err());
        assert!(ScoredSequence::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn dpo_zero_margin_is_ln2() {
        let p = pair(&[-1.0, -2.0], &[-3.0], &[-1.0, -2.0], &[-3.0]);
        assert!((dpo_loss(&p, 0.1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(dpo_loss(&p, 0.0).is_err());
    }

    #[test]
    fn dpo_is_stable_at_extremes() {
        assert!(neg_log_sigmoid(1000.0f64) >= 0.0);
        assert!(neg_log_sigmoid(1000.0f64) < 1e-300);
        assert_eq!(neg_log_sigmoid(-1000.0f64), 1000.0);
        assert!(neg_log_sigmoid(50.0f32).is_finite());
    }

    #[test]
    fn po_examples() {
        let p = pair(&[-0.5, -0.5], &[-1.0], &[-0.5, -0.5], &[-1.0]);
        assert_eq!(po_loss(&p, 0.1, 0.0).unwrap(), dpo_loss(&p, 0.1).unwrap());
        assert!((po_loss(&p, 0.1, 1.0).unwrap() - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn advantages_examples() {
        assert_eq!(grpo_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap(), vec![0.5, 0.5, -0.5, -0.5]);
        assert_eq!(grpo_advantages(&[0.3, 0.3, 0.3]).unwrap(), vec![0.0; 3]);
        assert_eq!(grpo_advantages(&[1.0]), Err(ObjectiveError::GroupTooSmall(1)));
        let n = grpo_advantages_with(&[1.0, 0.0], true).unwrap();
        assert_eq!(n, vec![1.0, -1.0]);
        assert_eq!(grpo_advantages_with(&[2.0, 2.0], true).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grpo_hand_example() {
        let g = ScoredGroup {
            rewards: vec![1.0, -1.0],
            sequences: vec![
                ScoredPair { policy: seq(&[-1.0, -1.0]), reference: seq(&[-1.0, -1.0]) },
                ScoredPair { policy: seq(&[-2.0, -2.0]), reference: seq(&[-2.0, -2.0]) },
            ],
        };
        assert_eq!(grpo_loss(std::slice::from_ref(&g), 0.0).unwrap(), -1.0);
        // Policy equals reference, so the KL coefficient has no effect.
        assert_eq!(grpo_loss(&[g], 5.0).unwrap(), -1.0);
    }

    #[test]
    fn closed_form_gradients() {
        let p = pair(&[-1.0, -2.0], &[-3.0], &[-1.0, -2.0], &[-3.0]);
        let g = loss_gradients("dpo", &Objective::Dpo { pair: p, beta: 0.4 }).unwrap();
        assert_eq!(g[0], vec![-0.2, -0.2]);
        assert_eq!(g[1], vec![0.2]);
        let batch = vec![seq(&[-1.0, -1.0]), ScoredSequence::new(vec![-1.0, -5.0], vec![true, false]).unwrap()];
        let g = loss_gradients("sft", &Objective::Sft { batch }).unwrap();
        assert_eq!(g, vec![vec![-1.0 / 3.0; 2], vec![-1.0 / 3.0, 0.0]]);
    }

    #[test]
    fn unknown_or_mismatched_loss() {
        let o = Objective::Sft { batch: vec![seq(&[-1.0])] };
        assert_eq!(loss_gradients("ppo", &o), Err(ObjectiveError::UnknownLoss("ppo".into())));
        assert!(matches!(loss_gradients("dpo", &o), Err(ObjectiveError::InvalidInput(_))));
    }
}
