//! Training losses.
//!
//! Every negative log-likelihood is averaged over the predicted tokens of
//! its sentence (including `</s>`) before weighting. Batch-level values are
//! sums over sentences.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bpe::TokenSeq;
use crate::discriminator::StyleClassifier;
use crate::error::{Error, Result};
use crate::model::{rollout_budget, Generated, Seq2Seq};
use crate::params::DropoutPlan;
use crate::style::StyleLabel;
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the SOURCE→TARGET direction in the translation loss.
    pub lambda_forward: f64,
    pub w_disc: f64,
    pub w_cycle: f64,
}

impl LossWeights {
    pub fn semi_supervised() -> Self {
        LossWeights {
            lambda_forward: 0.8,
            w_disc: 1.0,
            w_cycle: 0.6,
        }
    }

    pub fn unsupervised() -> Self {
        LossWeights {
            lambda_forward: 1.0,
            w_disc: 1.0,
            w_cycle: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_forward) {
            return Err(Error::LambdaOutOfRange(self.lambda_forward));
        }
        for (name, w) in [("w_disc", self.w_disc), ("w_cycle", self.w_cycle)] {
            if !w.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
            if w < 0.0 {
                return Err(Error::Negative(name, w));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::semi_supervised()
    }
}

/// Loss components of one batch, each summed over its sentences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trans_fwd: f64,
    pub trans_bwd: f64,
    pub mmi_trans: f64,
    pub disc: f64,
    pub cycle: f64,
    pub total: f64,
    pub n_parallel: usize,
    pub n_unlabeled: usize,
    /// Unlabeled sentences whose rollout was empty and got no cycle term.
    pub n_cycle_skipped: usize,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.trans_fwd += o.trans_fwd;
        self.trans_bwd += o.trans_bwd;
        self.mmi_trans += o.mmi_trans;
        self.disc += o.disc;
        self.cycle += o.cycle;
        self.total += o.total;
        self.n_parallel += o.n_parallel;
        self.n_unlabeled += o.n_unlabeled;
        self.n_cycle_skipped += o.n_cycle_skipped;
    }
}

/// How the parallel term is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Translation {
    /// `λ·NLL(y|x,T) + (1−λ)·NLL(x|y,S)`.
    Mmi,
    /// `NLL(y|x,T)` only.
    Plain,
}

/// A (SOURCE-style, TARGET-style) pair.
pub type PairRef<'a> = (&'a [u32], &'a [u32]);
/// An unlabeled sentence and its style.
pub type UnlabeledRef<'a> = (&'a [u32], StyleLabel);

/// Everything needed to put the total loss on a tape.
pub struct Objective<'a, T, D> {
    pub model: &'a Seq2Seq<T>,
    pub disc: Option<&'a D>,
    pub weights: LossWeights,
    pub translation: Translation,
    pub dropout: DropoutPlan,
}

// dropout stream tags
const TAG_FWD: u64 = 1;
const TAG_BWD: u64 = 2;
const TAG_ROLLOUT: u64 = 3;
const TAG_CYCLE: u64 = 4;

impl<'a, T: Float, D: StyleClassifier<T>> Objective<'a, T, D> {
    pub fn new(model: &'a Seq2Seq<T>, disc: Option<&'a D>, weights: LossWeights) -> Self {
        Objective {
            model,
            disc,
            weights,
            translation: Translation::Mmi,
            dropout: DropoutPlan::off(),
        }
    }

    fn disc_active(&self) -> bool {
        self.disc.is_some() && self.weights.w_disc > 0.0
    }

    fn cycle_active(&self) -> bool {
        self.weights.w_cycle > 0.0
    }

    /// Greedy transfers of unlabeled sentences into the opposite style; the
    /// discriminator and cycle terms share them.
    pub fn rollouts(&self, unlabeled: &[UnlabeledRef]) -> Result<Vec<Generated>> {
        if unlabeled.is_empty() || !(self.disc_active() || self.cycle_active()) {
            return Ok(Vec::new());
        }
        let srcs: Vec<&[u32]> = unlabeled.iter().map(|u| u.0).collect();
        let styles: Vec<StyleLabel> = unlabeled.iter().map(|u| u.1.opposite()).collect();
        let max = self.model.max_len();
        let budgets: Vec<usize> = srcs.iter().map(|s| rollout_budget(s.len(), max)).collect();
        self.model.greedy(&srcs, &styles, &budgets)
    }

    /// Builds the total loss on `g` with generator leaves `gv`.
    pub fn build(&self, g: &mut Graph<T>, gv: &[Var], parallel: &[PairRef], unlabeled: &[UnlabeledRef]) -> Result<(Var, LossBreakdown)> {
        let rollouts = self.rollouts(unlabeled)?;
        self.build_with_rollouts(g, gv, parallel, unlabeled, &rollouts)
    }

    /// As [`Objective::build`] with precomputed rollouts, so the discrete
    /// intermediates can be held fixed.
    pub fn build_with_rollouts(
        &self,
        g: &mut Graph<T>,
        gv: &[Var],
        parallel: &[PairRef],
        unlabeled: &[UnlabeledRef],
        rollouts: &[Generated],
    ) -> Result<(Var, LossBreakdown)> {
        self.weights.validate()?;
        if parallel.is_empty() && unlabeled.is_empty() {
            return Err(Error::Empty("batch: both parallel and unlabeled parts are empty"));
        }
        if let Some(d) = self.disc {
            if self.weights.w_disc > 0.0 && !d.is_frozen() {
                return Err(Error::NotFrozen);
            }
        }
        let m = self.model;
        let mut bd = LossBreakdown {
            n_parallel: parallel.len(),
            n_unlabeled: unlabeled.len(),
            ..LossBreakdown::default()
        };
        let mut terms: Vec<Var> = Vec::new();
        let mut sum_scaled = |g: &mut Graph<T>, rows: Var, w: f64| -> f64 {
            let s = g.sum(rows);
            let value = g.value(s).item().as_f64();
            terms.push(g.scale(s, T::f(w)));
            value
        };

        if !parallel.is_empty() {
            let xs: Vec<&[u32]> = parallel.iter().map(|p| p.0).collect();
            let ys: Vec<&[u32]> = parallel.iter().map(|p| p.1).collect();
            if ys.iter().any(|y| y.is_empty()) || xs.iter().any(|x| x.is_empty()) {
                return Err(Error::Empty("side of a parallel pair"));
            }
            let n = parallel.len();
            let f = m.teacher_forced(g, gv, &xs, &ys, &vec![StyleLabel::Target; n], &mut self.dropout.pass(TAG_FWD))?;
            let fwd = Seq2Seq::row_nll(g, &f, true);
            match self.translation {
                Translation::Plain => {
                    bd.trans_fwd = sum_scaled(g, fwd, 1.0);
                    bd.mmi_trans = bd.trans_fwd;
                }
                Translation::Mmi => {
                    let lambda = self.weights.lambda_forward;
                    bd.trans_fwd = sum_scaled(g, fwd, lambda);
                    let b = m.teacher_forced(g, gv, &ys, &xs, &vec![StyleLabel::Source; n], &mut self.dropout.pass(TAG_BWD))?;
                    let bwd = Seq2Seq::row_nll(g, &b, true);
                    bd.trans_bwd = sum_scaled(g, bwd, 1.0 - lambda);
                    bd.mmi_trans = lambda * bd.trans_fwd + (1.0 - lambda) * bd.trans_bwd;
                }
            }
        }

        if !unlabeled.is_empty() && self.disc_active() {
            let d = self.disc.expect("checked by disc_active");
            let srcs: Vec<&[u32]> = unlabeled.iter().map(|u| u.0).collect();
            let to: Vec<StyleLabel> = unlabeled.iter().map(|u| u.1.opposite()).collect();
            let gens: Vec<&Generated> = rollouts.iter().collect();
            let soft = m.soft_rollout(g, gv, &srcs, &to, &gens, &mut self.dropout.pass(TAG_ROLLOUT))?;
            let dv = d.bind_frozen(g);
            let z = d.soft_logit(g, &dv, soft.probs, soft.width, &soft.lens)?;
            // -log P(to | ·) = softplus(-z) toward TARGET, softplus(z) toward SOURCE
            let sign = to.iter().map(|s| if *s == StyleLabel::Target { -T::one() } else { T::one() }).collect();
            let signed = g.mul_const(z, sign);
            let rows = g.softplus(signed);
            bd.disc = sum_scaled(g, rows, self.weights.w_disc);
        }

        if !unlabeled.is_empty() && self.cycle_active() {
            let keep: Vec<usize> = (0..unlabeled.len()).filter(|&i| !rollouts[i].tokens.is_empty()).collect();
            bd.n_cycle_skipped = unlabeled.len() - keep.len();
            if !keep.is_empty() {
                let srcs: Vec<&[u32]> = keep.iter().map(|&i| rollouts[i].tokens.ids()).collect();
                let tgts: Vec<&[u32]> = keep.iter().map(|&i| unlabeled[i].0).collect();
                let styles: Vec<StyleLabel> = keep.iter().map(|&i| unlabeled[i].1).collect();
                let f = m.teacher_forced(g, gv, &srcs, &tgts, &styles, &mut self.dropout.pass(TAG_CYCLE))?;
                let rows = Seq2Seq::row_nll(g, &f, true);
                bd.cycle = sum_scaled(g, rows, self.weights.w_cycle);
            }
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        bd.total = g.value(total).item().as_f64();
        Ok((total, bd))
    }
}

fn no_grad_loss<T: Float, D: StyleClassifier<T>>(obj: &Objective<T, D>, parallel: &[PairRef], unlabeled: &[UnlabeledRef]) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let gv = obj.model.bind(&mut g, false);
    Ok(obj.build(&mut g, &gv, parallel, unlabeled)?.1)
}

/// `−log P(y | x, c)` per target token.
pub fn translation_loss<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, y: &TokenSeq, c: StyleLabel) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("target sentence"));
    }
    Ok(-model.log_prob(x, y, c)? / (y.len() + 1) as f64)
}

/// `λ·NLL(y | x, T) + (1−λ)·NLL(x | y, S)` for a (SOURCE, TARGET) pair.
pub fn mmi_translation_loss<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, y: &TokenSeq, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let fwd = translation_loss(model, x, y, StyleLabel::Target)?;
    let bwd = translation_loss(model, y, x, StyleLabel::Source)?;
    Ok(lambda * fwd + (1.0 - lambda) * bwd)
}

/// `−log P(opposite style | G(x, opposite style))` on the soft rollout.
pub fn discriminator_loss<T: Float, D: StyleClassifier<T>>(model: &Seq2Seq<T>, disc: &D, x: &TokenSeq, style_of_x: StyleLabel) -> Result<f64> {
    let w = LossWeights {
        lambda_forward: 1.0,
        w_disc: 1.0,
        w_cycle: 0.0,
    };
    Ok(no_grad_loss(&Objective::new(model, Some(disc), w), &[], &[(x.ids(), style_of_x)])?.disc)
}

/// Back-translation reconstruction loss; `None` when the rollout is empty.
pub fn cycle_loss<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, style_of_x: StyleLabel) -> Result<Option<f64>> {
    let w = LossWeights {
        lambda_forward: 1.0,
        w_disc: 0.0,
        w_cycle: 1.0,
    };
    let obj: Objective<T, crate::discriminator::Discriminator<T>> = Objective::new(model, None, w);
    let bd = no_grad_loss(&obj, &[], &[(x.ids(), style_of_x)])?;
    Ok((bd.n_cycle_skipped == 0).then_some(bd.cycle))
}

/// Total loss over a parallel and an unlabeled batch, without gradients.
pub fn total_loss<T: Float, D: StyleClassifier<T>>(
    model: &Seq2Seq<T>,
    disc: Option<&D>,
    weights: LossWeights,
    parallel: &[PairRef],
    unlabeled: &[UnlabeledRef],
) -> Result<LossBreakdown> {
    no_grad_loss(&Objective::new(model, disc, weights), parallel, unlabeled)
}

#[cfg(test)]
mod tests;
