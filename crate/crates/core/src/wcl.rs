//! Bag-based contrastive batches and the confidence-weighted contrastive loss.
//!
//! For an anchor `j` in bag `B_i`:
//!
//! ```text
//! P = sum_{k in B_i, k != j} c_j c_k exp(cos(x_j, x_k) / T)
//! Q = sum_{m : r_m != r_j}   c_j c_m exp(cos(x_j, x_m) / T)
//! loss_j = -ln(P / (P + Q))
//! ```
//!
//! Batch members from other bags that share the anchor's relation enter
//! neither sum. `include_self` adds the `k = j` term to `P`;
//! `outer_anchor_weight` multiplies each anchor loss by `c_j`. The batch
//! loss is the mean over anchors that have a nonzero positive sum.

use std::collections::HashSet;

use ndarray::Array1;
use rand::seq::index::sample;

use crate::data_model::{Bag, Instance, RelationLabel};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_BATCH_BAGS: usize = 16;
pub const DEFAULT_BAG_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Temperature(value))
        } else {
            Err(Error::Config("temperature must be positive".into()))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(DEFAULT_TEMPERATURE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WclOptions {
    pub temperature: Temperature,
    pub include_self: bool,
    pub outer_anchor_weight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMember {
    pub bag: usize,
    /// Index into [`ContrastiveBatch::relations`].
    pub relation: usize,
    pub confidence: f64,
}

/// `G` bags with pairwise-distinct triplets and no NA bag, plus the
/// flattened member list in bag order.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub bags: Vec<Bag>,
    pub members: Vec<BatchMember>,
    pub relations: Vec<RelationLabel>,
}

impl ContrastiveBatch {
    pub fn new(bags: Vec<Bag>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut relations: Vec<RelationLabel> = Vec::new();
        let mut members = Vec::new();
        for (bi, bag) in bags.iter().enumerate() {
            if bag.is_na() {
                return Err(Error::Data(format!("NA bag {} in contrastive batch", bag.triplet)));
            }
            if bag.is_empty() {
                return Err(Error::Data(format!("empty bag {}", bag.triplet)));
            }
            if !seen.insert(bag.triplet.key()) {
                return Err(Error::Data(format!("duplicate triplet {} in batch", bag.triplet)));
            }
            let rel = match relations.iter().position(|r| *r == bag.triplet.relation) {
                Some(i) => i,
                None => {
                    relations.push(bag.triplet.relation.clone());
                    relations.len() - 1
                }
            };
            for (_, c) in &bag.members {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::Validation(format!("confidence {c} not in [0, 1]")));
                }
                members.push(BatchMember {
                    bag: bi,
                    relation: rel,
                    confidence: *c,
                });
            }
        }
        Ok(ContrastiveBatch {
            bags,
            members,
            relations,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Instances aligned with `members`.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.bags
            .iter()
            .flat_map(|b| b.members.iter().map(|(inst, _)| inst))
    }

    /// Same batch with every confidence replaced by `value`.
    pub fn with_constant_confidence(&self, value: f64) -> Self {
        let mut out = self.clone();
        for bag in &mut out.bags {
            for m in &mut bag.members {
                m.1 = value;
            }
        }
        for m in &mut out.members {
            m.confidence = value;
        }
        out
    }
}

/// Bags usable as contrastive units: non-NA with at least two members.
pub fn eligible_bags(bags: &[Bag]) -> Vec<usize> {
    bags.iter()
        .enumerate()
        .filter(|(_, b)| !b.is_na() && b.len() >= 2)
        .map(|(i, _)| i)
        .collect()
}

/// Samples `g` distinct-triplet eligible bags uniformly without
/// replacement, then `min(bag_size, N_i)` members of each.
pub fn sample_batch(bags: &[Bag], g: usize, bag_size: usize, seed_value: u64) -> Result<ContrastiveBatch> {
    let mut rng = seed::rng(seed_value, &[seed::stream::SAMPLE]);
    sample_batch_with(bags, g, bag_size, &mut rng)
}

pub fn sample_batch_with(bags: &[Bag], g: usize, bag_size: usize, rng: &mut seed::Rng) -> Result<ContrastiveBatch> {
    if g == 0 || bag_size == 0 {
        return Err(Error::Config("batch and bag sizes must be positive".into()));
    }
    let eligible = eligible_bags(bags);
    let mut seen = HashSet::new();
    let distinct: Vec<usize> = eligible
        .into_iter()
        .filter(|&i| seen.insert(bags[i].triplet.key()))
        .collect();
    if distinct.len() < g {
        return Err(Error::InsufficientBags {
            needed: g,
            found: distinct.len(),
        });
    }
    let chosen = sample(rng, distinct.len(), g);
    let mut picked = Vec::with_capacity(g);
    for ci in chosen {
        let bag = &bags[distinct[ci]];
        let take = bag_size.min(bag.len());
        let mut idx = sample(rng, bag.len(), take).into_vec();
        idx.sort_unstable();
        picked.push(Bag {
            triplet: bag.triplet.clone(),
            members: idx.into_iter().map(|i| bag.members[i].clone()).collect(),
        });
    }
    ContrastiveBatch::new(picked)
}

pub fn cosine(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numerical("degenerate representation".into()));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

struct Geometry {
    norms: Vec<f64>,
    cos: Vec<Vec<f64>>,
}

fn geometry(reps: &[Array1<f64>]) -> Result<Geometry> {
    let norms: Vec<f64> = reps.iter().map(|r| r.dot(r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numerical(format!("degenerate representation at member {i}")));
    }
    let n = reps.len();
    let mut cos = vec![vec![0.0; n]; n];
    for i in 0..n {
        cos[i][i] = 1.0;
        for j in i + 1..n {
            let c = reps[i].dot(&reps[j]) / (norms[i] * norms[j]);
            cos[i][j] = c;
            cos[j][i] = c;
        }
    }
    Ok(Geometry { norms, cos })
}

/// Positive and negative terms of one anchor, as (member, weight) lists.
struct AnchorTerms {
    pos: Vec<(usize, f64)>,
    neg: Vec<(usize, f64)>,
    self_term: f64,
}

fn anchor_terms(batch: &ContrastiveBatch, anchor: usize, geo: &Geometry, opts: &WclOptions) -> AnchorTerms {
    let t = opts.temperature.value();
    let a = batch.members[anchor];
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (k, m) in batch.members.iter().enumerate() {
        if k == anchor {
            continue;
        }
        let w = a.confidence * m.confidence * (geo.cos[anchor][k] / t).exp();
        if m.bag == a.bag {
            pos.push((k, w));
        } else if m.relation != a.relation {
            neg.push((k, w));
        }
    }
    let self_term = if opts.include_self {
        a.confidence * a.confidence * (1.0 / t).exp()
    } else {
        0.0
    };
    AnchorTerms { pos, neg, self_term }
}

fn check_reps(batch: &ContrastiveBatch, reps: &[Array1<f64>]) -> Result<()> {
    if reps.len() != batch.len() {
        return Err(Error::Data(format!(
            "{} representations for {} batch members",
            reps.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// Loss of one anchor; `None` when its positive sum is zero (skipped).
pub fn wcl_loss_anchor(batch: &ContrastiveBatch, anchor: usize, reps: &[Array1<f64>], opts: &WclOptions) -> Result<Option<f64>> {
    check_reps(batch, reps)?;
    if anchor >= batch.len() {
        return Err(Error::Data(format!("anchor {anchor} out of range")));
    }
    let geo = geometry(reps)?;
    Ok(anchor_loss(batch, anchor, &geo, opts).map(|(l, _)| l))
}

fn anchor_loss(batch: &ContrastiveBatch, anchor: usize, geo: &Geometry, opts: &WclOptions) -> Option<(f64, AnchorTerms)> {
    let terms = anchor_terms(batch, anchor, geo, opts);
    let p: f64 = terms.self_term + terms.pos.iter().map(|(_, w)| w).sum::<f64>();
    if p == 0.0 {
        return None;
    }
    let q: f64 = terms.neg.iter().map(|(_, w)| w).sum();
    let mut loss = -(p / (p + q)).ln();
    if opts.outer_anchor_weight {
        loss *= batch.members[anchor].confidence;
    }
    Some((loss, terms))
}

/// Adds `coef * d cos(x_i, x_k)` to the gradients of both members.
fn add_cos_grad(grads: &mut [Array1<f64>], reps: &[Array1<f64>], geo: &Geometry, i: usize, k: usize, coef: f64) {
    let (ni, nk) = (geo.norms[i], geo.norms[k]);
    let c = geo.cos[i][k];
    let inv = coef / (ni * nk);
    grads[i].scaled_add(inv, &reps[k]);
    grads[i].scaled_add(-coef * c / (ni * ni), &reps[i]);
    grads[k].scaled_add(inv, &reps[i]);
    grads[k].scaled_add(-coef * c / (nk * nk), &reps[k]);
}

/// Mean anchor loss over the batch and its gradient with respect to every
/// member representation.
pub fn wcl_loss_batch(batch: &ContrastiveBatch, reps: &[Array1<f64>], opts: &WclOptions) -> Result<(f64, Vec<Array1<f64>>)> {
    check_reps(batch, reps)?;
    let geo = geometry(reps)?;
    let t = opts.temperature.value();
    let mut losses = Vec::new();
    let mut all_terms = Vec::new();
    for j in 0..batch.len() {
        match anchor_loss(batch, j, &geo, opts) {
            Some((l, terms)) => {
                losses.push(l);
                all_terms.push((j, terms));
            }
            None => log::warn!("anchor {j} skipped: zero positive weight"),
        }
    }
    if losses.is_empty() {
        return Err(Error::Numerical("no valid anchors".into()));
    }
    let n = losses.len() as f64;
    let loss = losses.iter().sum::<f64>() / n;

    let dim = reps[0].len();
    let mut grads = vec![Array1::zeros(dim); reps.len()];
    for (j, terms) in all_terms {
        let p = terms.self_term + terms.pos.iter().map(|(_, w)| w).sum::<f64>();
        let q: f64 = terms.neg.iter().map(|(_, w)| w).sum();
        let outer = if opts.outer_anchor_weight {
            batch.members[j].confidence
        } else {
            1.0
        };
        let scale = outer / (n * t);
        for &(k, w) in &terms.pos {
            add_cos_grad(&mut grads, reps, &geo, j, k, scale * w * (1.0 / (p + q) - 1.0 / p));
        }
        for &(m, w) in &terms.neg {
            add_cos_grad(&mut grads, reps, &geo, j, m, scale * w / (p + q));
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data_model::{Span, Triplet};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Bag whose members are placeholder instances of a synthetic triplet.
    pub fn toy_bag(id: usize, relation: &str, confidences: &[f64]) -> Bag {
        let inst = Instance {
            tokens: vec![format!("h{id}"), format!("t{id}")],
            head: Span::new(0, 1),
            tail: Span::new(1, 2),
            relation: RelationLabel::new(relation).unwrap(),
            confidence: None,
        };
        Bag {
            triplet: Triplet {
                head_surface: vec![format!("h{id}")],
                relation: RelationLabel::new(relation).unwrap(),
                tail_surface: vec![format!("t{id}")],
            },
            members: confidences.iter().map(|&c| (inst.clone(), c)).collect(),
        }
    }

    fn opts(t: f64) -> WclOptions {
        WclOptions {
            temperature: Temperature::new(t).unwrap(),
            ..Default::default()
        }
    }

    /// Bags as (relation, [(representation, confidence)]).
    pub type Nested = Vec<(usize, Vec<(Vec<f64>, f64)>)>;

    /// Independent evaluator working from the nested bag structure.
    pub fn brute_force(
        bags: &Nested,
        t: f64,
        include_self: bool,
    ) -> f64 {
        fn cos(a: &[f64], b: &[f64]) -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        }
        let mut total = 0.0;
        let mut count = 0;
        for (bi, (rel_i, members)) in bags.iter().enumerate() {
            for (j, (xj, cj)) in members.iter().enumerate() {
                let mut num = 0.0;
                for (k, (xk, ck)) in members.iter().enumerate() {
                    if k == j && !include_self {
                        continue;
                    }
                    num += cj * ck * (cos(xj, xk) / t).exp();
                }
                let mut neg = 0.0;
                for (bm, (rel_m, others)) in bags.iter().enumerate() {
                    if bm == bi || rel_m == rel_i {
                        continue;
                    }
                    for (xm, cm) in others {
                        neg += cj * cm * (cos(xj, xm) / t).exp();
                    }
                }
                if num == 0.0 {
                    continue;
                }
                total += -(num / (num + neg)).ln();
                count += 1;
            }
        }
        total / count as f64
    }

    /// Random batch: returns the batch, its representations and the nested
    /// form used by the brute-force evaluator.
    pub fn random_case(rng: &mut seed::Rng) -> (ContrastiveBatch, Vec<Array1<f64>>, Nested) {
        let g = rng.random_range(1..=4);
        let dim = rng.random_range(2..=6);
        let mut bags = Vec::new();
        let mut reps = Vec::new();
        let mut nested = Vec::new();
        for b in 0..g {
            let rel = rng.random_range(0..3usize);
            let size = rng.random_range(2..=4);
            let confs: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
            let mut members = Vec::new();
            for &c in &confs {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                reps.push(Array1::from(x.clone()));
                members.push((x, c));
            }
            bags.push(toy_bag(b, &format!("r{rel}"), &confs));
            nested.push((rel, members));
        }
        (ContrastiveBatch::new(bags).unwrap(), reps, nested)
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert_eq!(Temperature::default().value(), 0.2);
    }

    #[test]
    fn cosine_cases() {
        let v = array![0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&v, &(-&v)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&array![1.0, 0.0], &array![0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&array![0.0, 0.0], &v.slice(ndarray::s![..2]).to_owned()).is_err());
    }

    #[test]
    fn sampling_contract() {
        let mut bags: Vec<Bag> = (0..20).map(|i| toy_bag(i, &format!("r{}", i % 3), &[0.9; 5])).collect();
        bags.push(toy_bag(99, "NA", &[1.0; 5]));
        bags.push(toy_bag(98, "r0", &[1.0]));
        let batch = sample_batch(&bags, 16, 4, 7).unwrap();
        assert_eq!(batch.bags.len(), 16);
        let keys: HashSet<_> = batch.bags.iter().map(|b| b.triplet.key()).collect();
        assert_eq!(keys.len(), 16);
        assert!(batch.bags.iter().all(|b| !b.is_na() && b.len() == 4));
        let again = sample_batch(&bags, 16, 4, 7).unwrap();
        let ids = |b: &ContrastiveBatch| b.bags.iter().map(|x| x.triplet.key()).collect::<Vec<_>>();
        assert_eq!(ids(&batch), ids(&again));

        let small = vec![toy_bag(0, "r", &[1.0; 3]), toy_bag(1, "s", &[1.0; 3])];
        let b = sample_batch(&small, 2, 4, 0).unwrap();
        assert!(b.bags.iter().all(|x| x.len() == 3));
        match sample_batch(&small, 3, 4, 0) {
            Err(Error::InsufficientBags { needed: 3, found: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchor_hand_value_ln2() {
        // Anchor and positive in bag 0, negative in bag 1; all pairwise cosines 0.
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 1.0]), toy_bag(1, "b", &[1.0])]).unwrap();
        let reps = vec![array![1.0, 0.0, 0.0], array![0.0, 1.0, 0.0], array![0.0, 0.0, 1.0]];
        let l = wcl_loss_anchor(&batch, 0, &reps, &opts(1.0)).unwrap().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn no_negatives_gives_zero() {
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 0.7]), toy_bag(1, "a", &[0.3, 0.2])]).unwrap();
        let reps = vec![array![1.0, 0.2], array![0.1, 1.0], array![-1.0, 0.5], array![0.3, 0.3]];
        for j in 0..4 {
            assert_eq!(wcl_loss_anchor(&batch, j, &reps, &opts(0.2)).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn anchor_confidence_cancels() {
        let mut rng = seed::rng(1, &[]);
        let (batch, reps, _) = random_case(&mut rng);
        let before = wcl_loss_anchor(&batch, 0, &reps, &opts(0.2)).unwrap().unwrap();
        let mut halved = batch.clone();
        halved.members[0].confidence *= 0.5;
        let after = wcl_loss_anchor(&halved, 0, &reps, &opts(0.2)).unwrap().unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_bags_closed_form() {
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 1.0]), toy_bag(1, "b", &[1.0, 1.0])]).unwrap();
        let reps = vec![array![1.0, 0.0], array![1.0, 0.0], array![0.0, 1.0], array![0.0, 1.0]];
        let (l, _) = wcl_loss_batch(&batch, &reps, &opts(1.0)).unwrap();
        let e = 1f64.exp();
        let expected = -(e / (e + 2.0)).ln();
        assert!((l - expected).abs() < 1e-14);
        assert!((l - 0.550).abs() < 2e-3);
    }

    #[test]
    fn skips_zero_confidence_anchors() {
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[0.0, 0.0]), toy_bag(1, "b", &[0.5, 0.5])]).unwrap();
        let reps = vec![array![1.0, 0.0], array![0.5, 0.5], array![0.0, 1.0], array![0.2, 1.0]];
        assert_eq!(wcl_loss_anchor(&batch, 0, &reps, &opts(0.5)).unwrap(), None);
        let (l, _) = wcl_loss_batch(&batch, &reps, &opts(0.5)).unwrap();
        assert!(l.is_finite());
        let dead = ContrastiveBatch::new(vec![toy_bag(0, "a", &[0.0, 0.0]), toy_bag(1, "b", &[0.0, 0.0])]).unwrap();
        let err = wcl_loss_batch(&dead, &reps, &opts(0.5)).unwrap_err();
        assert!(err.to_string().contains("no valid anchors"));
    }

    #[test]
    fn rejects_na_and_duplicate_bags() {
        assert!(ContrastiveBatch::new(vec![toy_bag(0, "NA", &[1.0, 1.0])]).is_err());
        assert!(ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 1.0]), toy_bag(0, "a", &[1.0, 1.0])]).is_err());
    }

    #[test]
    fn matches_brute_force_both_self_modes() {
        let mut rng = seed::rng(42, &[]);
        for _ in 0..50 {
            let (batch, reps, nested) = random_case(&mut rng);
            for include_self in [false, true] {
                let o = WclOptions {
                    include_self,
                    ..opts(0.3)
                };
                let (l, _) = wcl_loss_batch(&batch, &reps, &o).unwrap();
                assert!((l - brute_force(&nested, 0.3, include_self)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(5, &[]);
        for outer in [false, true] {
            for include_self in [false, true] {
                let (batch, reps, _) = random_case(&mut rng);
                let o = WclOptions {
                    temperature: Temperature::new(0.2).unwrap(),
                    include_self,
                    outer_anchor_weight: outer,
                };
                let (_, grads) = wcl_loss_batch(&batch, &reps, &o).unwrap();
                let eps = 1e-6;
                for i in 0..reps.len() {
                    for d in 0..reps[i].len() {
                        let mut plus = reps.clone();
                        plus[i][d] += eps;
                        let mut minus = reps.clone();
                        minus[i][d] -= eps;
                        let fd = (wcl_loss_batch(&batch, &plus, &o).unwrap().0
                            - wcl_loss_batch(&batch, &minus, &o).unwrap().0)
                            / (2.0 * eps);
                        let a = grads[i][d];
                        assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn negative_weight_limit_is_monotone() {
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 1.0]), toy_bag(1, "b", &[1.0])]).unwrap();
        let reps = vec![array![1.0, 0.2], array![0.8, 0.5], array![0.9, 0.1]];
        let mut last = f64::INFINITY;
        for c in [1.0, 0.5, 0.1, 0.01, 0.0] {
            let mut b = batch.clone();
            b.members[2].confidence = c;
            let l = wcl_loss_anchor(&b, 0, &reps, &opts(0.2)).unwrap().unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last.abs() < 1e-15);
    }

    #[test]
    fn two_point_loss_decreases_in_margin() {
        let batch = ContrastiveBatch::new(vec![toy_bag(0, "a", &[1.0, 1.0]), toy_bag(1, "b", &[1.0])]).unwrap();
        let unit = |theta: f64| array![theta.cos(), theta.sin()];
        let mut last = f64::INFINITY;
        // Positive at angle p_theta, negative fixed at pi/2 (cos n = 0).
        for step in 0..=20 {
            let p_theta = std::f64::consts::PI * (1.0 - step as f64 / 20.0);
            let reps = vec![unit(0.0), unit(p_theta), unit(std::f64::consts::FRAC_PI_2)];
            let l = wcl_loss_anchor(&batch, 0, &reps, &opts(0.5)).unwrap().unwrap();
            assert!(l < last);
            last = l;
        }
    }

    proptest! {
        #[test]
        fn non_negative_and_scale_invariant(seed_value in 0u64..10_000, lambda in 0.01f64..1.0) {
            let mut rng = seed::rng(seed_value, &[]);
            let (batch, reps, _) = random_case(&mut rng);
            let o = opts(0.2);
            let scaled = {
                let mut b = batch.clone();
                for m in &mut b.members { m.confidence *= lambda; }
                b
            };
            for j in 0..batch.len() {
                let a = wcl_loss_anchor(&batch, j, &reps, &o).unwrap().unwrap();
                let b = wcl_loss_anchor(&scaled, j, &reps, &o).unwrap().unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
