//! Weighted answer cross-entropy, the entropy hinge consistency penalty, the
//! combined batch objective and the attention-matching baseline term.
//!
//! Each term has a plain `f64` evaluator and a graph builder; the builders are
//! what training differentiates, the evaluators serve as reference values.

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs, here and in
/// the metrics.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_SQUINT_LAMBDA: f64 = 0.5;

/// Inputs of one consistency penalty plus the batch weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub h_i: f64,
    pub h_j: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossTerms {
    pub fn new(h_i: f64, h_j: f64, gamma: f64, lambda: f64) -> Result<Self> {
        check_cons_inputs(h_i, h_j, gamma)?;
        if !(lambda >= 0.0) {
            return Err(Error::Usage(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self { h_i, h_j, gamma, lambda })
    }

    /// `lambda * cons_loss(h_i, h_j, gamma)`.
    pub fn weighted(&self) -> f64 {
        self.lambda * self.h_i * (self.gamma - self.h_j).max(0.0)
    }
}

fn check_cons_inputs(h_i: f64, h_j: f64, gamma: f64) -> Result<()> {
    if !(h_i >= 0.0 && h_j >= 0.0) {
        return Err(Error::Usage(format!("entropies must be non-negative, got {h_i} and {h_j}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::Usage(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `weight * -ln(max(p[answer], PROB_FLOOR))`.
pub fn ce_loss(p: &[f64], answer: usize, weight: f64) -> Result<f64> {
    let pa = p
        .get(answer)
        .ok_or_else(|| Error::Usage(format!("answer index {answer} outside {} answers", p.len())))?;
    Ok(-weight * pa.max(PROB_FLOOR).ln())
}

/// `h_i * max(0, gamma - h_j)`.
pub fn cons_loss(h_i: f64, h_j: f64, gamma: f64) -> Result<f64> {
    check_cons_inputs(h_i, h_j, gamma)?;
    Ok(h_i * (gamma - h_j).max(0.0))
}

/// Mean squared difference of two flattened attention maps.
pub fn squint_loss(maps_sub: &[f64], maps_main: &[f64]) -> Result<f64> {
    if maps_sub.len() != maps_main.len() || maps_sub.is_empty() {
        return Err(Error::shape("squint_loss", &[maps_sub.len()], &[maps_main.len()]));
    }
    let ss: f64 = maps_sub.iter().zip(maps_main).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / maps_sub.len() as f64)
}

/// One batch element as seen by the objective.
#[derive(Debug, Clone, Copy)]
pub struct SampleOutput {
    pub probs: Var,
    /// Attention maps, needed only by the attention-matching term.
    pub maps: Option<Var>,
    pub answer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub squint_lambda: f64,
    /// Treat the main-question entropy as a constant inside the penalty.
    pub stop_grad_main: bool,
    /// Multiplies the gradient leaving the hinge. Anything other than 1
    /// corrupts training; it exists so the gradient checker can be shown to
    /// catch a broken backward pass.
    pub hinge_grad_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            squint_lambda: 0.0,
            stop_grad_main: false,
            hinge_grad_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.squint_lambda >= 0.0) {
            return Err(Error::Config("lambda and squint_lambda must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Scalar handles of the batch objective. `cons` and `squint` are pair means
/// before weighting; `total = vqa + lambda * cons + squint_lambda * squint`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub vqa: Var,
    pub cons: Var,
    pub squint: Var,
}

/// `weight * -ln(max(p_a, floor))` on the graph.
pub fn ce_graph<T: Scalar>(g: &mut Graph<T>, probs: Var, answer: usize, weight: f64) -> Result<Var> {
    let n = g.value(probs)?.len();
    if answer >= n {
        return Err(Error::Usage(format!("answer index {answer} outside {n} answers")));
    }
    let pa = g.index(probs, answer)?;
    let pa = g.clamp_min(pa, T::of(PROB_FLOOR))?;
    let ln = g.ln(pa)?;
    g.scale(ln, T::of(-weight))
}

/// `h_i * max(0, gamma - h_j)` on the graph.
pub fn cons_graph<T: Scalar>(g: &mut Graph<T>, h_i: Var, h_j: Var, config: &LossConfig) -> Result<Var> {
    let h_j = if config.stop_grad_main { g.detach(h_j)? } else { h_j };
    let neg = g.scale(h_j, T::of(-1.0))?;
    let margin = g.add_scalar(neg, T::of(config.gamma))?;
    let mut hinge = g.hinge(margin)?;
    if config.hinge_grad_scale != 1.0 {
        hinge = g.grad_scale(hinge, T::of(config.hinge_grad_scale))?;
    }
    g.mul(h_i, hinge)
}

/// Mean squared difference of two attention maps on the graph.
pub fn squint_graph<T: Scalar>(g: &mut Graph<T>, maps_sub: Var, maps_main: Var) -> Result<Var> {
    let d = g.sub(maps_sub, maps_main)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.constant(crate::autodiff::Tensor::scalar(T::zero())));
    }
    let all = g.concat(terms)?;
    g.mean(all)
}

/// Mean weighted cross-entropy over every sample plus `lambda` times the mean
/// penalty over `pairs` of `(sub_position, main_position)`. With
/// `squint_lambda > 0` the mean attention distance over the same pairs is
/// added too. Zero weights skip their term entirely, so `lambda = 0`
/// reproduces the plain cross-entropy objective bit for bit.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    samples: &[SampleOutput],
    pairs: &[(usize, usize)],
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    for &(s, m) in pairs {
        if s >= samples.len() || m >= samples.len() {
            return Err(Error::Usage(format!(
                "pair ({s}, {m}) outside batch of {}",
                samples.len()
            )));
        }
    }
    let ce = samples
        .iter()
        .map(|s| ce_graph(g, s.probs, s.answer, s.weight))
        .collect::<Result<Vec<_>>>()?;
    let vqa = mean_of(g, &ce)?;
    let mut total = vqa;

    let mut cons_terms = Vec::with_capacity(pairs.len());
    for &(s, m) in pairs {
        let (sub, main) = (samples[s], samples[m]);
        let h_i = ce_graph(g, sub.probs, sub.answer, 1.0)?;
        let h_j = ce_graph(g, main.probs, main.answer, 1.0)?;
        cons_terms.push(cons_graph(g, h_i, h_j, config)?);
    }
    let cons = mean_of(g, &cons_terms)?;
    if config.lambda != 0.0 && !pairs.is_empty() {
        let weighted = g.scale(cons, T::of(config.lambda))?;
        total = g.add(total, weighted)?;
    }

    let mut squint_terms = Vec::new();
    if config.squint_lambda != 0.0 {
        for &(s, m) in pairs {
            match (samples[s].maps, samples[m].maps) {
                (Some(a), Some(b)) => squint_terms.push(squint_graph(g, a, b)?),
                _ => return Err(Error::Usage("attention matching needs attention maps".into())),
            }
        }
    }
    let squint = mean_of(g, &squint_terms)?;
    if !squint_terms.is_empty() {
        let weighted = g.scale(squint, T::of(config.squint_lambda))?;
        total = g.add(total, weighted)?;
    }
    Ok(LossVars { total, vqa, cons, squint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use proptest::prelude::*;

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[0.0, 1.0, 0.0], 1, 1.0).unwrap(), 0.0);
        assert!((ce_loss(&[0.2; 5], 3, 1.0).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&[0.25, 0.75], 0, 2.0).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&[0.5, 0.5], 2, 1.0), Err(Error::Usage(_))));
        assert!((ce_loss(&[0.0, 1.0], 0, 1.0).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn cons_examples() {
        assert!((cons_loss(0.5, 0.2, 1.0).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(cons_loss(7.3, 1.2, 1.0).unwrap(), 0.0);
        assert_eq!(cons_loss(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(cons_loss(-0.1, 0.0, 1.0).is_err());
        assert!(cons_loss(0.1, 0.0, 0.0).is_err());
        assert!(LossTerms::new(0.5, 0.2, 1.0, -1.0).is_err());
        assert!((LossTerms::new(0.5, 0.2, 1.0, 0.5).unwrap().weighted() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn squint_examples() {
        let uniform = [0.25; 4];
        let onehot = [1.0, 0.0, 0.0, 0.0];
        assert!((squint_loss(&uniform, &onehot).unwrap() - 0.1875).abs() < 1e-15);
        assert_eq!(squint_loss(&onehot, &onehot).unwrap(), 0.0);
        assert!(matches!(squint_loss(&onehot, &[1.0]), Err(Error::Shape { .. })));
    }

    fn pair_batch(g: &mut Graph<f64>, p_sub: &[f64], p_main: &[f64]) -> Vec<SampleOutput> {
        let a = g.leaf(Tensor::from_vec(&[p_sub.len()], p_sub.to_vec()).unwrap());
        let b = g.leaf(Tensor::from_vec(&[p_main.len()], p_main.to_vec()).unwrap());
        vec![
            SampleOutput { probs: a, maps: None, answer: 0, weight: 1.0 },
            SampleOutput { probs: b, maps: None, answer: 0, weight: 1.0 },
        ]
    }

    #[test]
    fn two_sample_total() {
        let mut g = Graph::new();
        let pm = (-0.2f64).exp();
        let s = pair_batch(&mut g, &[0.5, 0.5], &[pm, 1.0 - pm]);
        let out = total_loss_graph(&mut g, &s, &[(0, 1)], &LossConfig::default()).unwrap();
        let total = g.value(out.total).unwrap().item();
        let oracle = 0.5 * (2f64.ln() + 0.2) + 0.5 * (2f64.ln() * 0.8);
        assert!((total - oracle).abs() < 1e-12);
        assert!((total - 0.72383).abs() < 1e-5);
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let mut g = Graph::new();
        let s = pair_batch(&mut g, &[0.3, 0.7], &[0.9, 0.1]);
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let out = total_loss_graph(&mut g, &s, &[(0, 1)], &cfg).unwrap();
        let plain = (ce_loss(&[0.3, 0.7], 0, 1.0).unwrap() + ce_loss(&[0.9, 0.1], 0, 1.0).unwrap()) / 2.0;
        assert_eq!(g.value(out.total).unwrap().item(), g.value(out.vqa).unwrap().item());
        assert!((g.value(out.total).unwrap().item() - plain).abs() < 1e-15);
        let no_pairs = total_loss_graph(&mut g, &s, &[], &LossConfig::default()).unwrap();
        assert_eq!(g.value(no_pairs.cons).unwrap().item(), 0.0);
    }

    #[test]
    fn out_of_batch_pair_rejected() {
        let mut g = Graph::new();
        let s = pair_batch(&mut g, &[0.3, 0.7], &[0.9, 0.1]);
        let err = total_loss_graph(&mut g, &s, &[(0, 2)], &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn stop_grad_blocks_main_gradient() {
        let cfg = LossConfig { stop_grad_main: true, ..LossConfig::default() };
        let mut g = Graph::<f64>::new();
        let hi = g.leaf(Tensor::scalar(0.5));
        let hj = g.leaf(Tensor::scalar(0.2));
        let c = cons_graph(&mut g, hi, hj, &cfg).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(hj).unwrap().item(), 0.0);
        assert!((grads.wrt(hi).unwrap().item() - 0.8).abs() < 1e-15);

        let mut g = Graph::<f64>::new();
        let hi = g.leaf(Tensor::scalar(0.5));
        let hj = g.leaf(Tensor::scalar(0.2));
        let c = cons_graph(&mut g, hi, hj, &LossConfig::default()).unwrap();
        assert!((g.backward(c).unwrap().wrt(hj).unwrap().item() + 0.5).abs() < 1e-15);
    }

    /// Gradient of the two-sample objective with respect to both distributions.
    fn objective(point: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let s = pair_batch(&mut g, &point[..3], &point[3..]);
        let out = total_loss_graph(&mut g, &s, &[(0, 1)], cfg).unwrap();
        let grads = g.backward(out.total).unwrap();
        let mut grad = grads.wrt(s[0].probs).unwrap().into_data();
        grad.extend(grads.wrt(s[1].probs).unwrap().into_data());
        (g.value(out.total).unwrap().item(), grad)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let point = [0.4, 0.3, 0.3, 0.7, 0.2, 0.1];
        let (_, grad) = objective(&point, &cfg);
        let report = finite_diff_check(|x| objective(x, &cfg).0, &point, &grad, 1e-5, 1e-6);
        assert!(report.pass, "{report:?}");
    }

    proptest! {
        #[test]
        fn cons_monotone(h_i in 0.0f64..5.0, d in 0.0f64..2.0, h_j in 0.0f64..2.0, e in 0.0f64..2.0, gamma in 0.1f64..3.0) {
            let base = cons_loss(h_i, h_j, gamma).unwrap();
            prop_assert!(cons_loss(h_i + d, h_j, gamma).unwrap() >= base);
            prop_assert!(cons_loss(h_i, h_j + e, gamma).unwrap() <= base);
            prop_assert!(base >= 0.0);
            if h_j >= gamma {
                prop_assert_eq!(base, 0.0);
            }
        }

        #[test]
        fn squint_symmetric(a in prop::collection::vec(0.0f64..1.0, 8), b in prop::collection::vec(0.0f64..1.0, 8)) {
            prop_assert_eq!(squint_loss(&a, &b).unwrap(), squint_loss(&b, &a).unwrap());
        }

        #[test]
        fn lambda_scales_penalty_gradient(c in 0.1f64..10.0, q in 0.3f64..0.9, r in 0.5f64..0.95) {
            let point = [q, (1.0 - q) / 2.0, (1.0 - q) / 2.0, r, 1.0 - r, 0.0];
            let at = |lambda| objective(&point, &LossConfig { lambda, ..LossConfig::default() }).1;
            let (g0, g1, gc) = (at(0.0), at(1.0), at(c));
            for k in 0..6 {
                let expected = c * (g1[k] - g0[k]);
                prop_assert!((gc[k] - g0[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }
    }
}
