//! Pseudo-bag loss and attention consistency loss.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bag::{AugmentedBag, TokenKind};
use crate::engine::{backward, cross_entropy, forward, Gradients, ModelParams};
use crate::error::{Error, Result};
use crate::rng;

/// What happens to the `n mod m` tokens left after equal slicing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remainder {
    #[default]
    Discard,
    LastBag,
}

/// `m` disjoint index lists into a (masked) token sequence, all inheriting
/// the slide label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBagSet {
    pub parent_slide: String,
    pub label: usize,
    pub bags: Vec<Vec<usize>>,
    pub discarded: Vec<usize>,
}

impl PseudoBagSet {
    pub fn m(&self) -> usize {
        self.bags.len()
    }
}

/// Shuffles `0..n_tokens` and slices it into `m` consecutive blocks of
/// `n_tokens / m`; the tail is discarded.
pub fn partition_pseudo_bags(n_tokens: usize, m: usize, seed: u64) -> Result<PseudoBagSet> {
    partition_pseudo_bags_with(n_tokens, m, seed, Remainder::Discard)
}

pub fn partition_pseudo_bags_with(
    n_tokens: usize,
    m: usize,
    seed: u64,
    remainder: Remainder,
) -> Result<PseudoBagSet> {
    if m == 0 {
        return Err(Error::invalid("number of pseudo-bags must be at least 1"));
    }
    if n_tokens < m {
        return Err(Error::invalid(format!(
            "cannot split {n_tokens} tokens into {m} pseudo-bags"
        )));
    }
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.shuffle(&mut rng::stream(seed, &["pseudo_bags".into()]));
    let size = n_tokens / m;
    let mut bags: Vec<Vec<usize>> = order.chunks(size).take(m).map(<[usize]>::to_vec).collect();
    let mut discarded = order[m * size..].to_vec();
    if remainder == Remainder::LastBag {
        bags.last_mut().unwrap().append(&mut discarded);
    }
    Ok(PseudoBagSet {
        parent_slide: String::new(),
        label: 0,
        bags,
        discarded,
    })
}

/// Partition of a masked bag's tokens, labelled with the slide label.
pub fn pseudo_bags_for(
    bag: &AugmentedBag,
    m: usize,
    seed: u64,
    remainder: Remainder,
) -> Result<PseudoBagSet> {
    let mut set = partition_pseudo_bags_with(bag.len(), m, seed, remainder)?;
    set.parent_slide = bag.slide_id().to_string();
    set.label = bag.label();
    Ok(set)
}

/// Mean cross-entropy over the pseudo-bags and its gradient.
pub fn pseudo_bag_loss(
    params: &ModelParams,
    tokens: &Array2<f64>,
    pbs: &PseudoBagSet,
) -> Result<(f64, Gradients)> {
    if pbs.bags.is_empty() {
        return Err(Error::invalid("pseudo-bag set is empty"));
    }
    let scale = 1.0 / pbs.m() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros(params.dims(), tokens.nrows());
    for (i, idx) in pbs.bags.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::invalid(format!("pseudo-bag {i} is empty")));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= tokens.nrows()) {
            return Err(Error::ShapeMismatch(format!(
                "pseudo-bag index {bad} out of range for {} tokens",
                tokens.nrows()
            )));
        }
        let sub = tokens.select(Axis(0), idx);
        let trace = forward(params, &sub)?;
        loss += cross_entropy(&trace.logits, pbs.label)?;
        let g = backward(params, &trace, pbs.label, scale)?;
        grads.model.add_scaled(&g.model, 1.0);
        for (row, &j) in g.tokens.rows().into_iter().zip(idx) {
            let mut target = grads.tokens.row_mut(j);
            target += &row;
        }
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Sum over segment groups of the population variance of attention.
    #[default]
    WithinGroupVariance,
    /// Sum over ordered cross-segment pairs of `-(a_i - a_j)^2`.
    CrossGroupPairwise,
}

/// Segment ids used by the consistency loss: `None` for group tokens and for
/// unsegmented instances, which take no part in it.
pub fn consistency_ids(bag: &AugmentedBag) -> Vec<Option<u32>> {
    bag.kinds()
        .iter()
        .zip(bag.segments())
        .map(|(k, s)| if *k == TokenKind::Ordinary { *s } else { None })
        .collect()
}

/// Loss and its exact gradient with respect to `attn`.
pub fn consistency_loss(
    attn: &Array1<f64>,
    ids: &[Option<u32>],
    mode: ConsistencyMode,
) -> Result<(f64, Array1<f64>)> {
    if attn.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention weights for {} segment ids",
            attn.len(),
            ids.len()
        )));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some(id) = id {
            groups.entry(*id).or_default().push(i);
        }
    }
    let mut grad = Array1::zeros(attn.len());
    let mut loss = 0.0;
    match mode {
        ConsistencyMode::WithinGroupVariance => {
            for members in groups.values().filter(|m| m.len() >= 2) {
                let n = members.len() as f64;
                let mean = members.iter().map(|&i| attn[i]).sum::<f64>() / n;
                for &i in members {
                    let dev = attn[i] - mean;
                    loss += dev * dev / n;
                    grad[i] = 2.0 * dev / n;
                }
            }
        }
        ConsistencyMode::CrossGroupPairwise => {
            // Σ_{i≠j, s_i≠s_j} -(a_i - a_j)^2, ordered pairs.
            let members: Vec<(usize, u32)> = groups
                .iter()
                .flat_map(|(id, m)| m.iter().map(move |&i| (i, *id)))
                .collect();
            for &(i, si) in &members {
                for &(j, sj) in &members {
                    if si != sj {
                        let diff = attn[i] - attn[j];
                        loss -= diff * diff;
                        grad[i] -= 4.0 * diff;
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

/// `cls + alpha * pseudo + beta * consistency`.
pub fn total_loss(cls: f64, pseudo: f64, consistency: f64, alpha: f64, beta: f64) -> f64 {
    cls + alpha * pseudo + beta * consistency
}
