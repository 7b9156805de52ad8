//! Hint-based distillation objective.
//!
//! `l_feat` matches the last layer through its head, `l_hint` sums the
//! per-layer errors over the selected intermediate layers, and
//! `l_kd = l_feat + λ·l_hint`. Every MSE is a mean over all elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_feat: f64,
    pub l_hint: f64,
    pub l_kd: f64,
}

impl LossBreakdown {
    pub fn new(l_feat: f64, l_hint: f64, lambda: f64) -> Self {
        Self {
            l_feat,
            l_hint,
            l_kd: loss_kd(l_feat, l_hint, lambda),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_feat.is_finite() && self.l_hint.is_finite() && self.l_kd.is_finite()
    }

    /// Mean of the components; `l_kd` is recomposed from the means so the
    /// identity with `lambda` holds for the aggregate too.
    pub fn mean(parts: &[LossBreakdown], lambda: f64) -> Self {
        let n = parts.len().max(1) as f64;
        let l_feat = parts.iter().map(|p| p.l_feat).sum::<f64>() / n;
        let l_hint = parts.iter().map(|p| p.l_hint).sum::<f64>() / n;
        Self::new(l_feat, l_hint, lambda)
    }
}

pub fn loss_kd(l_feat: f64, l_hint: f64, lambda: f64) -> f64 {
    l_feat + lambda * l_hint
}

/// MSE between the teacher's last layer and the last head's output.
pub fn loss_feat<T: Element>(
    g: &mut Graph<T>,
    teacher_last: Var,
    head_out_last: Var,
) -> Result<Var> {
    if g.shape(teacher_last) != g.shape(head_out_last) {
        return Err(Error::shape(
            "loss_feat",
            g.shape(teacher_last),
            g.shape(head_out_last),
        ));
    }
    g.mse(teacher_last, head_out_last)
}

/// Sum over `selected` (1-based, each `< num_layers`) of the MSE between
/// `teacher_hidden[l − 1]` and the head output for layer `l`.
pub fn loss_hint<T: Element>(
    g: &mut Graph<T>,
    teacher_hidden: &[Var],
    head_outs: &[(usize, Var)],
    selected: &[usize],
) -> Result<Var> {
    let n = teacher_hidden.len();
    if selected.is_empty() {
        return Err(Error::arg("loss_hint", "empty hint-layer selection"));
    }
    let mut total: Option<Var> = None;
    for &l in selected {
        if l == 0 || l >= n {
            return Err(Error::arg(
                "loss_hint",
                format!("layer {l} is not an intermediate layer of 1..{n}"),
            ));
        }
        let out = head_outs
            .iter()
            .find(|(hl, _)| *hl == l)
            .map(|&(_, v)| v)
            .ok_or(Error::MissingHead(l))?;
        let target = teacher_hidden[l - 1];
        if g.shape(target) != g.shape(out) {
            return Err(Error::shape("loss_hint", g.shape(target), g.shape(out)));
        }
        let e = g.mse(target, out)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    Ok(total.expect("selection is nonempty"))
}

/// `l_feat + λ·l_hint` on the graph; `hint = None` contributes zero.
pub fn loss_kd_graph<T: Element>(
    g: &mut Graph<T>,
    feat: Var,
    hint: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::arg(
            "loss_kd",
            format!("lambda must be ≥ 0, got {lambda}"),
        ));
    }
    match hint {
        Some(h) => {
            let weighted = g.scale(h, T::c(lambda))?;
            g.add(feat, weighted)
        }
        None => Ok(feat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn kd_arithmetic() {
        assert!((loss_kd(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(loss_kd(0.7, 5.0, 0.0), 0.7);
    }

    #[test]
    fn feat_zero_for_identical_and_one_for_unit_gap() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[3, 5], 0.25));
        let l = loss_feat(&mut g, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[4, 2]));
        let o = g.constant(Tensor::full(&[4, 2], 1.0));
        let l = loss_feat(&mut g, z, o).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        assert_eq!(loss_feat(&mut g, a, z).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn hint_sums_over_layers() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let o = g.constant(Tensor::full(&[2, 2], 1.0));
        let teacher = [z, z, z];
        let heads = [(1, o), (2, o)];
        let l = loss_hint(&mut g, &teacher, &heads, &[1, 2]).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l = loss_hint(&mut g, &teacher, &[(1, z)], &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn hint_rejects_last_layer_and_empty_selection() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let teacher = [z, z, z];
        assert!(loss_hint(&mut g, &teacher, &[(3, z)], &[3]).is_err());
        assert!(loss_hint(&mut g, &teacher, &[(1, z)], &[]).is_err());
        assert_eq!(
            loss_hint(&mut g, &teacher, &[(1, z)], &[2])
                .unwrap_err()
                .code(),
            "E_HEAD"
        );
    }
}
