//! Arithmetic-mean fusion of cached predictions and greedy ensemble
//! selection over the out-of-fold block.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::library::ModelLibrary;
use crate::matrix::{argmax, Matrix};
use crate::metrics::{self, MetricError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    Empty,
    #[error("model id {0} is not in the library")]
    UnknownModel(usize),
    #[error("unsupported hillclimb metric {0:?} (use acc_cv or auc_w)")]
    Hillclimb(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Test,
    Cv,
}

fn block(lib: &ModelLibrary, m: usize, b: Block) -> &Matrix {
    let c = &lib.caches[m];
    match b {
        Block::Test => &c.test_probs,
        Block::Cv => &c.cv_probs,
    }
}

fn check_ids(lib: &ModelLibrary, members: &[usize]) -> Result<()> {
    if members.is_empty() {
        return Err(EnsembleError::Empty);
    }
    match members.iter().find(|&&m| m >= lib.len()) {
        Some(&m) => Err(EnsembleError::UnknownModel(m)),
        None => Ok(()),
    }
}

/// Elementwise mean of the members' cached block. Members are summed in
/// ascending id order so the result does not depend on the given order.
pub fn combine(lib: &ModelLibrary, members: &[usize], b: Block) -> Result<Matrix> {
    check_ids(lib, members)?;
    let mut ids = members.to_vec();
    ids.sort_unstable();
    let mut acc = Accumulator::new(lib, b);
    for m in ids {
        acc.add(lib, m);
    }
    Ok(acc.mean())
}

/// Running sum of member blocks. Members form a multiset.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    block: Block,
    sum: Matrix,
    count: usize,
}

impl Accumulator {
    pub fn new(lib: &ModelLibrary, b: Block) -> Self {
        let rows = match b {
            Block::Test => lib.test_labels().len(),
            Block::Cv => lib.cv_labels().len(),
        };
        Self {
            block: b,
            sum: Matrix::zeros(rows, lib.n_classes()),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, lib: &ModelLibrary, m: usize) {
        let src = block(lib, m, self.block);
        self.sum.as_mut_slice().iter_mut().zip(src.as_slice()).for_each(|(s, x)| *s += x);
        self.count += 1;
    }

    pub fn remove(&mut self, lib: &ModelLibrary, m: usize) {
        let src = block(lib, m, self.block);
        self.sum.as_mut_slice().iter_mut().zip(src.as_slice()).for_each(|(s, x)| *s -= x);
        self.count -= 1;
    }

    pub fn mean(&self) -> Matrix {
        mean_with(&self.sum, self.count, None, 1.0)
    }
}

/// `(sum + sign * extra) / count`, the candidate mean during search.
fn mean_with(sum: &Matrix, count: usize, extra: Option<&Matrix>, sign: f64) -> Matrix {
    let n = count as f64;
    let mut out = sum.clone();
    match extra {
        Some(e) => out
            .as_mut_slice()
            .iter_mut()
            .zip(e.as_slice())
            .for_each(|(s, x)| *s = (*s + sign * x) / n),
        None => out.as_mut_slice().iter_mut().for_each(|s| *s /= n),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perf {
    pub accuracy_test: f64,
    pub auc_weighted_test: f64,
    pub accuracy_cv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    /// Ascending, duplicate-free.
    pub members: Vec<usize>,
    pub combined_test: Matrix,
    pub pred: Vec<usize>,
    pub correct: Vec<bool>,
    pub perf: Perf,
}

impl EnsembleState {
    pub fn n_errors(&self) -> usize {
        self.correct.iter().filter(|c| !**c).count()
    }

    /// Probability of the predicted class for each test instance.
    pub fn confidence(&self, i: usize) -> f64 {
        self.combined_test.get(i, self.pred[i])
    }
}

fn dedup_sorted(members: &[usize]) -> Vec<usize> {
    let mut ids = members.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub fn evaluate(lib: &ModelLibrary, members: &[usize]) -> Result<EnsembleState> {
    check_ids(lib, members)?;
    let members = dedup_sorted(members);
    let test = combine(lib, &members, Block::Test)?;
    let cv = combine(lib, &members, Block::Cv)?;
    state_from_means(lib, members, test, &cv)
}

/// Builds the state from already-combined blocks.
pub fn state_from_means(lib: &ModelLibrary, members: Vec<usize>, test: Matrix, cv: &Matrix) -> Result<EnsembleState> {
    let truth = lib.test_labels();
    let pred = metrics::predicted_labels(&test);
    let correct: Vec<bool> = pred.iter().zip(truth).map(|(p, t)| p == t).collect();
    let cv_pred = metrics::predicted_labels(cv);
    let perf = Perf {
        accuracy_test: metrics::accuracy(&pred, truth, None)?,
        auc_weighted_test: metrics::auc_weighted(&test, truth)?.value,
        accuracy_cv: metrics::accuracy(&cv_pred, lib.cv_labels(), None)?,
    };
    Ok(EnsembleState {
        members,
        combined_test: test,
        pred,
        correct,
        perf,
    })
}

/// Incrementally maintained ensemble: running sums over both blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    members: Vec<usize>,
    test: Accumulator,
    cv: Accumulator,
}

impl Tracker {
    pub fn new(lib: &ModelLibrary, members: &[usize]) -> Result<Self> {
        check_ids(lib, members)?;
        let members = dedup_sorted(members);
        let mut test = Accumulator::new(lib, Block::Test);
        let mut cv = Accumulator::new(lib, Block::Cv);
        for &m in &members {
            test.add(lib, m);
            cv.add(lib, m);
        }
        Ok(Self { members, test, cv })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, m: usize) -> bool {
        self.members.binary_search(&m).is_ok()
    }

    /// Adds or removes `m`. Removing the last member is refused.
    pub fn toggle(&mut self, lib: &ModelLibrary, m: usize) -> Result<bool> {
        if m >= lib.len() {
            return Err(EnsembleError::UnknownModel(m));
        }
        match self.members.binary_search(&m) {
            Ok(pos) => {
                if self.members.len() == 1 {
                    return Err(EnsembleError::Empty);
                }
                self.members.remove(pos);
                self.test.remove(lib, m);
                self.cv.remove(lib, m);
                Ok(false)
            }
            Err(pos) => {
                self.members.insert(pos, m);
                self.test.add(lib, m);
                self.cv.add(lib, m);
                Ok(true)
            }
        }
    }

    pub fn state(&self, lib: &ModelLibrary) -> Result<EnsembleState> {
        state_from_means(lib, self.members.clone(), self.test.mean(), &self.cv.mean())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hillclimb {
    AccCv,
    AucCv,
}

impl Hillclimb {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "acc_cv" | "acc" => Ok(Self::AccCv),
            "auc_w" | "auc_cv" | "auc" => Ok(Self::AucCv),
            _ => Err(EnsembleError::Hillclimb(s.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AccCv => "acc_cv",
            Self::AucCv => "auc_w",
        }
    }

    fn score(self, probs: &Matrix, truth: &[usize]) -> f64 {
        match self {
            Self::AccCv => {
                let hits = probs.iter_rows().zip(truth).filter(|(r, t)| argmax(r) == **t).count();
                hits as f64 / truth.len().max(1) as f64
            }
            Self::AucCv => metrics::auc_weighted(probs, truth).map_or(0.5, |a| a.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectParams {
    pub hillclimb: Hillclimb,
    pub max_size: usize,
    pub bags: usize,
    pub bag_fraction: f64,
    pub seed: u64,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self {
            hillclimb: Hillclimb::AccCv,
            max_size: 10,
            bags: 1,
            bag_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Forward,
    Backward,
    /// Rebuild from empty when the deduplicated result would fall below
    /// the best single model.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub bag: usize,
    pub phase: Phase,
    pub action: Action,
    pub model_id: usize,
    /// Hillclimb value of the multiset after this step.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub hillclimb: Hillclimb,
    pub params: SelectParams,
    pub steps: Vec<Step>,
    pub final_members: Vec<usize>,
    /// Hillclimb value of the deduplicated final members.
    pub final_value: f64,
    /// Averaged membership weight per selected model.
    pub weights: BTreeMap<usize, f64>,
    pub best_single: usize,
    pub best_single_value: f64,
}

impl SelectionTrace {
    /// Members implied by replaying the steps: the support of the fallback
    /// rebuild when present, otherwise the union of each bag's support.
    pub fn replay(&self) -> Vec<usize> {
        let fallback: Vec<&Step> = self.steps.iter().filter(|s| s.phase == Phase::Fallback).collect();
        let mut counts: BTreeMap<(usize, usize), i64> = BTreeMap::new();
        let steps: Vec<&Step> = if fallback.is_empty() {
            self.steps.iter().collect()
        } else {
            fallback
        };
        for s in steps {
            *counts.entry((s.bag, s.model_id)).or_default() += match s.action {
                Action::Add => 1,
                Action::Remove => -1,
            };
        }
        let mut out: Vec<usize> = counts.into_iter().filter(|(_, c)| *c > 0).map(|((_, m), _)| m).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn best_by<F: Fn(usize) -> f64 + Sync>(candidates: &[usize], f: F) -> (usize, f64) {
    let scored: Vec<(usize, f64)> = candidates.par_iter().map(|&m| (m, f(m))).collect();
    // ties go to the lowest id (candidates are ascending)
    let mut best = scored[0];
    for &(m, v) in &scored[1..] {
        if v > best.1 {
            best = (m, v);
        }
    }
    best
}

const IMPROVEMENT: f64 = 1e-12;

/// One sorted-init, forward-with-replacement, backward-pruning run over
/// `pool`. Returns the multiset as model -> count.
fn hillclimb_run(lib: &ModelLibrary, pool: &[usize], params: &SelectParams, bag: usize, steps: &mut Vec<Step>) -> BTreeMap<usize, usize> {
    let truth = lib.cv_labels();
    let h = params.hillclimb;
    let (first, mut current) = best_by(pool, |m| h.score(block(lib, m, Block::Cv), truth));
    let mut acc = Accumulator::new(lib, Block::Cv);
    acc.add(lib, first);
    let mut bag_members = BTreeMap::from([(first, 1usize)]);
    steps.push(Step {
        bag,
        phase: Phase::Init,
        action: Action::Add,
        model_id: first,
        value: current,
    });

    while acc.count() < params.max_size.max(1) {
        let (m, v) = best_by(pool, |m| {
            h.score(&mean_with(&acc.sum, acc.count + 1, Some(block(lib, m, Block::Cv)), 1.0), truth)
        });
        if v <= current + IMPROVEMENT {
            break;
        }
        acc.add(lib, m);
        *bag_members.entry(m).or_default() += 1;
        current = v;
        steps.push(Step {
            bag,
            phase: Phase::Forward,
            action: Action::Add,
            model_id: m,
            value: v,
        });
    }

    while acc.count() > 1 {
        let present: Vec<usize> = bag_members.keys().copied().collect();
        let (m, v) = best_by(&present, |m| {
            h.score(&mean_with(&acc.sum, acc.count - 1, Some(block(lib, m, Block::Cv)), -1.0), truth)
        });
        if v <= current + IMPROVEMENT {
            break;
        }
        acc.remove(lib, m);
        let c = bag_members.get_mut(&m).expect("member present");
        *c -= 1;
        if *c == 0 {
            bag_members.remove(&m);
        }
        current = v;
        steps.push(Step {
            bag,
            phase: Phase::Backward,
            action: Action::Remove,
            model_id: m,
            value: v,
        });
    }
    bag_members
}

/// Hillclimb value of a deduplicated member set, as `evaluate` sees it.
pub fn set_value(lib: &ModelLibrary, members: &[usize], h: Hillclimb) -> Result<f64> {
    Ok(h.score(&combine(lib, members, Block::Cv)?, lib.cv_labels()))
}

/// Greedy ensemble selection on the out-of-fold block.
///
/// Each run seeds with the best single model, adds models with
/// replacement while the metric improves by more than 1e-12 (up to
/// `max_size` picks), then removes members while that improves. With
/// `bags > 1` runs are repeated on random pools of `ceil(bag_fraction * M)`
/// models and membership weights are averaged. The returned members are
/// the deduplicated support; if that set scores below the best single
/// model, the best set seen along the trace is used instead.
pub fn auto_select(lib: &ModelLibrary, params: &SelectParams) -> Result<SelectionTrace> {
    if lib.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let m_total = lib.len();
    let all: Vec<usize> = (0..m_total).collect();
    let h = params.hillclimb;
    let truth = lib.cv_labels();
    let (best_single, best_single_value) = best_by(&all, |m| h.score(block(lib, m, Block::Cv), truth));

    let mut steps = Vec::new();
    let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
    let bags = params.bags.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for bag in 0..bags {
        let pool: Vec<usize> = if bags == 1 {
            all.clone()
        } else {
            let size = ((params.bag_fraction * m_total as f64).ceil() as usize).clamp(1, m_total);
            let mut p = sample(&mut rng, m_total, size).into_vec();
            p.sort_unstable();
            p
        };
        let counts = hillclimb_run(lib, &pool, params, bag, &mut steps);
        let total: usize = counts.values().sum();
        for (m, c) in counts {
            *weights.entry(m).or_default() += c as f64 / total as f64 / bags as f64;
        }
    }

    let mut final_members: Vec<usize> = weights.keys().copied().collect();
    let mut final_value = set_value(lib, &final_members, h)?;
    if final_value < best_single_value {
        // best deduplicated support among the trace prefixes of every bag,
        // plus the global best single model
        let mut candidates: Vec<Vec<usize>> = vec![vec![best_single]];
        let mut running: BTreeMap<(usize, usize), i64> = BTreeMap::new();
        for s in &steps {
            *running.entry((s.bag, s.model_id)).or_default() += match s.action {
                Action::Add => 1,
                Action::Remove => -1,
            };
            let support: Vec<usize> = running
                .iter()
                .filter(|((b, _), c)| *b == s.bag && **c > 0)
                .map(|((_, m), _)| *m)
                .collect();
            candidates.push(support);
        }
        let mut best = (vec![best_single], best_single_value);
        for c in candidates {
            let v = set_value(lib, &c, h)?;
            if v > best.1 || (v == best.1 && c.len() < best.0.len()) {
                best = (c, v);
            }
        }
        log::debug!("selection fell back to {:?} ({:.6})", best.0, best.1);
        for &m in &best.0 {
            steps.push(Step {
                bag: bags,
                phase: Phase::Fallback,
                action: Action::Add,
                model_id: m,
                value: best.1,
            });
        }
        final_members = best.0;
        final_value = best.1;
        let share = 1.0 / final_members.len() as f64;
        weights = final_members.iter().map(|&m| (m, share)).collect();
    }

    Ok(SelectionTrace {
        hillclimb: h,
        params: params.clone(),
        steps,
        final_members,
        final_value,
        weights,
        best_single,
        best_single_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GuardVerdict {
    Ok,
    Violated { delta: f64 },
}

/// Violated when test accuracy falls by more than `tolerance`.
pub fn guard_check(before: &EnsembleState, after: &EnsembleState, tolerance: f64) -> GuardVerdict {
    let drop = before.perf.accuracy_test - after.perf.accuracy_test;
    if after.perf.accuracy_test < before.perf.accuracy_test - tolerance {
        GuardVerdict::Violated { delta: drop }
    } else {
        GuardVerdict::Ok
    }
}

#[cfg(test)]
mod tests;
