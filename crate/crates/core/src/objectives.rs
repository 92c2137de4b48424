//! Contrastive and margin losses over cosine similarity, and the
//! energy-based view in which the contrastive loss is a negative
//! log-likelihood with energy `-cos`.
//!
//! Similarity matrices have one row per anchor. Unsupervised rows hold the
//! `B` positives; supervised rows hold the `B` positives followed by the `B`
//! hard negatives, so column `i` is always anchor `i`'s own positive.

use crate::error::{Error, Result};
use crate::tensor::{cosine_values, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub margin: f64,
    pub lambda: f64,
    /// Inverse temperature of the energy model.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_tau(0.05, 0.2, 10.0)
    }
}

impl LossConfig {
    /// `beta` tied to `1 / tau`.
    pub fn with_tau(tau: f64, margin: f64, lambda: f64) -> Self {
        Self {
            tau,
            margin,
            lambda,
            beta: 1.0 / tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0 && self.margin >= 0.0 && self.lambda >= 0.0 && self.beta > 0.0;
        if !ok
            || ![self.tau, self.margin, self.lambda, self.beta]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::Config(format!(
                "need tau > 0, margin >= 0, lambda >= 0, beta > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Graph nodes of a combined supervised loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub contrastive: NodeId,
    /// `None` when the margin term is disabled.
    pub hinge: Option<NodeId>,
    pub sims: NodeId,
}

fn check_pair(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(())
}

/// Mean over rows of `logsumexp(S_i / tau) - S_ii / tau`.
pub fn nt_xent_from_sims(g: &mut Graph, sims: NodeId, tau: f64) -> Result<NodeId> {
    let b = g.shape(sims)[0];
    let logits = g.scale(sims, 1.0 / tau);
    let lse = g.logsumexp_rows(logits)?;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let own = g.pick(logits, &diag)?;
    let terms = g.sub(lse, own)?;
    Ok(g.mean(terms))
}

pub fn nt_xent_unsup(g: &mut Graph, h: NodeId, hpos: NodeId, tau: f64) -> Result<NodeId> {
    check_pair(g, "nt_xent_unsup", h, hpos)?;
    let s = g.cosine_matrix(h, hpos)?;
    nt_xent_from_sims(g, s, tau)
}

/// Anchor rows against positives followed by hard negatives, `[B × 2B]`.
pub fn supervised_sims(g: &mut Graph, h: NodeId, hpos: NodeId, hneg: NodeId) -> Result<NodeId> {
    check_pair(g, "supervised_sims", h, hpos)?;
    check_pair(g, "supervised_sims", h, hneg)?;
    let cands = g.concat_rows(&[hpos, hneg])?;
    g.cosine_matrix(h, cands)
}

pub fn nt_xent_sup(
    g: &mut Graph,
    h: NodeId,
    hpos: NodeId,
    hneg: NodeId,
    tau: f64,
) -> Result<NodeId> {
    let s = supervised_sims(g, h, hpos, hneg)?;
    nt_xent_from_sims(g, s, tau)
}

/// Index of the largest similarity, skipping `exclude`; ties go to the
/// lowest index.
pub fn most_offending(sims: &[f64], exclude: Option<usize>) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in sims.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        if best.is_none_or(|b| s > sims[b]) {
            best = Some(j);
        }
    }
    best.ok_or_else(|| Error::Usage("no candidates left after excluding the positive".into()))
}

/// Per-row hardest candidate (excluding the own positive in column `i`).
pub fn hardest_indices(sims: &Tensor) -> Result<Vec<usize>> {
    (0..sims.rows())
        .map(|i| most_offending(sims.row(i), Some(i)))
        .collect()
}

/// `s_ii - s_{i, hardest}` per row: how far each positive beats its most
/// offending candidate.
pub fn hardest_gaps(sims: &Tensor) -> Result<Vec<f64>> {
    let idx = hardest_indices(sims)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(i, &j)| sims.row(i)[i] - sims.row(i)[j])
        .collect())
}

/// Mean of `relu(m + S[i, hardest_i] - S[i, i])`. The hardest index is chosen
/// from the current values and held fixed for differentiation.
pub fn eh_from_sims(g: &mut Graph, sims: NodeId, margin: f64) -> Result<NodeId> {
    let b = g.shape(sims)[0];
    let idx = hardest_indices(g.value(sims))?;
    let neg_pos: Vec<(usize, usize)> = idx.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    let pos_pos: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let neg = g.pick(sims, &neg_pos)?;
    let pos = g.pick(sims, &pos_pos)?;
    let gap = g.sub(neg, pos)?;
    let margin = g.constant(Tensor::filled(&[b], margin));
    let arg = g.add(gap, margin)?;
    let hinge = g.relu(arg);
    Ok(g.mean(hinge))
}

pub fn eh_loss(
    g: &mut Graph,
    h: NodeId,
    hpos: NodeId,
    hneg: NodeId,
    margin: f64,
) -> Result<NodeId> {
    let s = supervised_sims(g, h, hpos, hneg)?;
    eh_from_sims(g, s, margin)
}

/// `nt_xent_sup + lambda * eh_loss` over one shared similarity matrix. With
/// `lambda == 0` the margin term is skipped and `total` is the contrastive
/// node itself.
pub fn total_loss(
    g: &mut Graph,
    h: NodeId,
    hpos: NodeId,
    hneg: NodeId,
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    let sims = supervised_sims(g, h, hpos, hneg)?;
    let contrastive = nt_xent_from_sims(g, sims, cfg.tau)?;
    if cfg.lambda == 0.0 {
        return Ok(LossParts {
            total: contrastive,
            contrastive,
            hinge: None,
            sims,
        });
    }
    let hinge = eh_from_sims(g, sims, cfg.margin)?;
    let weighted = g.scale(hinge, cfg.lambda);
    let total = g.add(contrastive, weighted)?;
    Ok(LossParts {
        total,
        contrastive,
        hinge: Some(hinge),
        sims,
    })
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One contrastive term on plain values: `logsumexp(s / tau) - s_target / tau`.
pub fn nt_xent_term(sims: &[f64], target: usize, tau: f64) -> Result<f64> {
    if target >= sims.len() {
        return Err(Error::Usage(format!(
            "target {target} out of range for {} candidates",
            sims.len()
        )));
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    Ok(logsumexp(&logits) - logits[target])
}

/// Lower is more compatible.
pub fn energy(fx: &[f64], fy: &[f64]) -> Result<f64> {
    Ok(-cosine_values(fx, fy)?)
}

/// `(1/beta) log Σ exp(-beta E)`.
pub fn free_energy(energies: &[f64], beta: f64) -> Result<f64> {
    if energies.is_empty() {
        return Err(Error::Usage("free energy of an empty set".into()));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let emin = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let rest: f64 = energies.iter().map(|e| (-beta * (e - emin)).exp()).sum();
    Ok(-emin + rest.ln() / beta)
}

/// `-log softmax(-beta E)[target]`.
pub fn ebm_nll(energies: &[f64], target: usize, beta: f64) -> Result<f64> {
    if energies.is_empty() || target >= energies.len() {
        return Err(Error::Usage(format!(
            "target {target} out of range for {} energies",
            energies.len()
        )));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let logits: Vec<f64> = energies.iter().map(|e| -beta * e).collect();
    Ok(logsumexp(&logits) - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Unit vectors in the plane at the given angles.
    fn at_angles(angles: &[f64]) -> Tensor {
        Tensor::from_rows(
            &angles
                .iter()
                .map(|a| vec![a.cos(), a.sin()])
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn unsup_single_row_is_zero() {
        let mut g = Graph::new();
        let h = g.constant(m(&[&[1.0, 2.0, 3.0]]));
        let p = g.constant(m(&[&[-1.0, 0.5, 2.0]]));
        let l = nt_xent_unsup(&mut g, h, p, 0.05).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn unsup_opposed_pairs() {
        let mut g = Graph::new();
        let h = g.constant(m(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let l = nt_xent_unsup(&mut g, h, h, 0.05).unwrap();
        let want = (-40f64).exp().ln_1p();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn sup_closed_forms() {
        // anchor at angle 0; positive with cos 0.9, negative with cos 0.1
        let mut g = Graph::new();
        let h = g.constant(at_angles(&[0.0]));
        let p = g.constant(at_angles(&[0.9f64.acos()]));
        let n = g.constant(at_angles(&[0.1f64.acos()]));
        let l = nt_xent_sup(&mut g, h, p, n, 0.05).unwrap();
        let want = (-16f64).exp().ln_1p();
        assert!(
            (g.value(l).item() - want).abs() < 1e-12,
            "{}",
            g.value(l).item()
        );

        let l = nt_xent_sup(&mut g, h, p, p, 0.05).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn most_offending_contract() {
        assert_eq!(most_offending(&[0.3, 0.8, 0.5], None).unwrap(), 1);
        assert_eq!(most_offending(&[0.7, 0.7], None).unwrap(), 0);
        assert_eq!(most_offending(&[0.9, 0.2, 0.4], Some(0)).unwrap(), 2);
        assert!(matches!(
            most_offending(&[0.9], Some(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn eh_examples() {
        let mut g = Graph::new();
        for (neg, pos, want) in [(0.8, 0.9, 0.1), (0.5, 0.9, 0.0)] {
            let s = g.constant(m(&[&[pos, neg]]));
            let l = eh_from_sims(&mut g, s, 0.2).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-15);
        }
        let s = g.constant(m(&[&[0.9, 0.2, 0.5, 0.1], &[0.0, 0.7, 0.1, 0.3]]));
        let l = eh_from_sims(&mut g, s, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn lambda_zero_is_bit_equal_to_contrastive() {
        let mut g = Graph::new();
        let h = g.constant(m(&[&[1.0, 0.2], &[0.3, -1.0]]));
        let p = g.constant(m(&[&[0.9, 0.5], &[0.1, -0.7]]));
        let n = g.constant(m(&[&[-0.2, 1.0], &[0.8, 0.8]]));
        let cfg = LossConfig::with_tau(0.05, 0.2, 0.0);
        let parts = total_loss(&mut g, h, p, n, &cfg).unwrap();
        let sup = nt_xent_sup(&mut g, h, p, n, 0.05).unwrap();
        assert_eq!(
            g.value(parts.total).item().to_bits(),
            g.value(sup).item().to_bits()
        );

        let parts = total_loss(&mut g, h, p, n, &LossConfig::default()).unwrap();
        let eh = eh_loss(&mut g, h, p, n, 0.2).unwrap();
        let recomposed = g.value(sup).item() + 10.0 * g.value(eh).item();
        assert!((g.value(parts.total).item() - recomposed).abs() < 1e-12);
    }

    #[test]
    fn energy_and_free_energy_closed_forms() {
        assert!(
            (energy(&[1.0, 0.0], &[1.0, 1.0]).unwrap() + std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-15
        );
        assert!((energy(&[2.0, 1.0], &[2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((energy(&[2.0, 1.0], &[-2.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(energy(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        assert_eq!(free_energy(&[0.37], 20.0).unwrap(), -0.37);
        let f = free_energy(&[0.3; 5], 20.0).unwrap();
        assert!((f - (-0.3 + 5f64.ln() / 20.0)).abs() < 1e-14);
        let f = free_energy(&[0.4, -0.2, 0.1], 1e4).unwrap();
        assert!((f - 0.2).abs() < 1e-3);
        assert!(free_energy(&[], 1.0).is_err());

        assert!((ebm_nll(&[0.5, 0.5], 0, 20.0).unwrap() - 2f64.ln()).abs() < 1e-14);
        assert!(ebm_nll(&[-1.0, 0.3, 0.2], 0, 1e3).unwrap() < 1e-12);
        assert!(ebm_nll(&[0.1], 1, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert_eq!(LossConfig::default().beta, 20.0);
        assert!(LossConfig::with_tau(0.0, 0.2, 10.0).validate().is_err());
        assert!(LossConfig::with_tau(0.05, -0.1, 10.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn argmax_and_contrastive_term_are_shift_invariant(
            sims in prop::collection::vec(-1.0f64..1.0, 2..12),
            shift in -0.5f64..0.5,
        ) {
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            prop_assert_eq!(most_offending(&sims, Some(0)).unwrap(), most_offending(&shifted, Some(0)).unwrap());
            let a = nt_xent_term(&sims, 0, 0.05).unwrap();
            let b = nt_xent_term(&shifted, 0, 0.05).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn eh_is_nonnegative_and_zero_iff_margins_hold(
            vals in prop::collection::vec(-1.0f64..1.0, 12),
            margin in 0.0f64..0.5,
        ) {
            let s = Tensor::new(vec![3, 4], vals).unwrap();
            let mut g = Graph::new();
            let n = g.constant(s.clone());
            let node = eh_from_sims(&mut g, n, margin).unwrap();
            let l = g.value(node).item();
            prop_assert!(l >= 0.0);
            let all_hold = hardest_gaps(&s).unwrap().iter().all(|&gap| gap >= margin);
            prop_assert_eq!(l == 0.0, all_hold);
        }
    }
}
