//! Sampling pools and the Pass@k / Pass@k^(m) estimators.
//!
//! Both estimators are ratios of integer subset counts over `C(n, k)`. The
//! numerator and denominator are formed exactly in `u128` and divided once,
//! so for small pools the result is bit-identical to counting subsets by
//! enumeration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stackcalc::{run_unit_tests, Example, Problem};
use crate::transformer::{sample_sequence, TransformerModel};

/// Longest reference program is 15 tokens plus `END`; leave headroom.
pub const MAX_NEW_TOKENS: usize = 32;

pub fn binomial(n: u64, k: u64) -> Result<u128> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        // r · (n − i) is divisible by (i + 1) at every step.
        r = r.checked_mul(u128::from(n - i)).ok_or_else(|| Error::invalid(format!("C({n}, {k}) overflows")))? / u128::from(i + 1);
    }
    Ok(r)
}

fn check_pool(n: usize, c: usize, k: usize) -> Result<()> {
    if c > n {
        return Err(Error::invalid(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in [1, n = {n}]")));
    }
    Ok(())
}

/// Probability that a uniform k-subset of a pool with `c` of `n` correct
/// contains at least one correct sample.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    check_pool(n, c, k)?;
    let (n, c, k) = (n as u64, c as u64, k as u64);
    let total = binomial(n, k)?;
    let misses = binomial(n - c, k)?;
    Ok((total - misses) as f64 / total as f64)
}

/// Probability that a uniform k-subset contains at least `m` correct samples.
pub fn pass_at_k_m(n: usize, c: usize, k: usize, m: usize) -> Result<f64> {
    check_pool(n, c, k)?;
    if m == 0 || m > k {
        return Err(Error::invalid(format!("m = {m} must lie in [1, k = {k}]")));
    }
    let (n, c, k) = (n as u64, c as u64, k as u64);
    let total = binomial(n, k)?;
    let mut hits: u128 = 0;
    for j in (m as u64)..=k.min(c) {
        hits += binomial(c, j)? * binomial(n - c, k - j)?;
    }
    Ok(hits as f64 / total as f64)
}

/// Anything that can answer a problem.
pub trait Generator {
    fn generate(&self, problem: &Problem, temperature: f64, seed: u64) -> Result<Vec<usize>>;
}

impl Generator for TransformerModel {
    fn generate(&self, problem: &Problem, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        sample_sequence(self, &problem.context(), temperature, MAX_NEW_TOKENS, seed)
    }
}

/// Answers every problem with its reference program.
pub struct ReferenceGenerator(BTreeMap<u64, Vec<usize>>);

impl ReferenceGenerator {
    pub fn new(examples: &[Example]) -> Self {
        Self(examples.iter().map(|e| (e.id(), e.response.clone())).collect())
    }
}

impl Generator for ReferenceGenerator {
    fn generate(&self, problem: &Problem, _temperature: f64, _seed: u64) -> Result<Vec<usize>> {
        self.0.get(&problem.id).cloned().ok_or_else(|| Error::invalid(format!("no reference for problem {}", problem.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub problem_id: u64,
    pub samples: Vec<Vec<usize>>,
    pub passed: Vec<bool>,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPool {
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub entries: Vec<PoolEntry>,
}

fn sample_seed(seed: u64, temperature: f64, problem: u64, sample: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::SAMPLE, temperature.to_bits(), problem, sample as u64])
}

pub fn build_pool(generator: &dyn Generator, problems: &[Problem], n: usize, temperature: f64, seed: u64) -> Result<EvalPool> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", format!("must be finite and >= 0, got {temperature}")));
    }
    let mut entries = Vec::with_capacity(problems.len());
    for p in problems {
        let mut samples = Vec::with_capacity(n);
        let mut passed = Vec::with_capacity(n);
        for s in 0..n {
            let out = generator.generate(p, temperature, sample_seed(seed, temperature, p.id, s))?;
            passed.push(run_unit_tests(&out, p).all_passed());
            samples.push(out);
        }
        let successes = passed.iter().filter(|&&b| b).count();
        entries.push(PoolEntry { problem_id: p.id, samples, passed, successes });
    }
    Ok(EvalPool { n, temperature, seed, entries })
}

/// Greedy pass flag per problem.
pub fn greedy_passes(generator: &dyn Generator, problems: &[Problem]) -> Result<Vec<bool>> {
    problems.iter().map(|p| Ok(run_unit_tests(&generator.generate(p, 0.0, 0)?, p).all_passed())).collect()
}

/// Which cells to report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGrid {
    /// Pass@k cells. `k = 1` is reported from greedy decoding.
    pub ks: Vec<usize>,
    /// Pass@k^(m) cells as `(k, m)`.
    pub km: Vec<(usize, usize)>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], km: vec![(10, 2), (10, 5), (10, 10)] }
    }
}

impl EvalGrid {
    /// Pass@k for every `k` in `ks` and Pass@k^(m) at the largest `k` for every `m`.
    pub fn from_lists(ks: &[usize], ms: &[usize]) -> Result<Self> {
        let top = *ks.iter().max().ok_or_else(|| Error::config("k", "empty list"))?;
        Ok(Self { ks: ks.to_vec(), km: ms.iter().map(|&m| (top, m)).collect() })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for &k in &self.ks {
            if k == 0 || k > n {
                return Err(Error::config("k", format!("{k} must lie in [1, n = {n}]")));
            }
        }
        for &(k, m) in &self.km {
            if k == 0 || k > n {
                return Err(Error::config("k", format!("{k} must lie in [1, n = {n}]")));
            }
            if m == 0 || m > k {
                return Err(Error::config("m", format!("{m} must lie in [1, k = {k}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub m: usize,
    pub value: f64,
}

impl Cell {
    pub fn metric(&self) -> String {
        if self.m == 1 {
            format!("pass@{}", self.k)
        } else {
            format!("pass@{}^({})", self.k, self.m)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub problem_id: u64,
    pub successes: usize,
    pub greedy_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub temperature: f64,
    pub n: usize,
    pub cells: Vec<Cell>,
    pub per_problem: Vec<ProblemResult>,
}

impl EvalReport {
    pub fn value(&self, k: usize, m: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.k == k && c.m == m).map(|c| c.value)
    }
}

fn mean_over(pool: &EvalPool, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let mut s = 0.0;
    for e in &pool.entries {
        s += f(e.successes)?;
    }
    Ok(s / pool.entries.len() as f64)
}

/// Report cells from a pool and the greedy pass flags for the same problems.
pub fn report_from_pool(pool: &EvalPool, greedy: &[bool], grid: &EvalGrid) -> Result<EvalReport> {
    grid.validate(pool.n)?;
    if pool.entries.is_empty() || greedy.len() != pool.entries.len() {
        return Err(Error::invalid("pool and greedy results must cover the same non-empty problem list"));
    }
    let n = pool.n;
    let mut cells = Vec::new();
    for &k in &grid.ks {
        let value = if k == 1 {
            greedy.iter().filter(|&&g| g).count() as f64 / greedy.len() as f64
        } else {
            mean_over(pool, |c| pass_at_k(n, c, k))?
        };
        cells.push(Cell { k, m: 1, value });
    }
    for &(k, m) in &grid.km {
        cells.push(Cell { k, m, value: mean_over(pool, |c| pass_at_k_m(n, c, k, m))? });
    }
    let per_problem = pool
        .entries
        .iter()
        .zip(greedy)
        .map(|(e, &g)| ProblemResult { problem_id: e.problem_id, successes: e.successes, greedy_pass: g })
        .collect();
    Ok(EvalReport { temperature: pool.temperature, n, cells, per_problem })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub greedy: Vec<bool>,
    pub pools: Vec<EvalPool>,
    pub reports: Vec<EvalReport>,
}

pub fn evaluate(
    generator: &dyn Generator,
    problems: &[Problem],
    grid: &EvalGrid,
    temperatures: &[f64],
    n: usize,
    seed: u64,
) -> Result<Evaluation> {
    grid.validate(n)?;
    if problems.is_empty() {
        return Err(Error::invalid("no problems to evaluate"));
    }
    let greedy = greedy_passes(generator, problems)?;
    let mut pools = Vec::with_capacity(temperatures.len());
    let mut reports = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let pool = build_pool(generator, problems, n, t, seed)?;
        reports.push(report_from_pool(&pool, &greedy, grid)?);
        pools.push(pool);
    }
    Ok(Evaluation { greedy, pools, reports })
}

pub const CSV_HEADER: &str = "temperature,metric,k,m,value";

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for c in &r.cells {
            s.push_str(&format!("{},{},{},{},{:?}\n", r.temperature, c.metric(), c.k, c.m, c.value));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 5).unwrap(), 252);
        assert_eq!(binomial(0, 0).unwrap(), 1);
        assert_eq!(binomial(3, 5).unwrap(), 0);
        assert_eq!(binomial(100, 50).unwrap(), 100891344545564193334812497256);
        assert!(binomial(200, 100).is_err());
    }

    #[test]
    fn listed_values() {
        assert_eq!(pass_at_k(10, 0, 5).unwrap(), 0.0);
        assert_eq!(pass_at_k(10, 10, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(10, 4, 1).unwrap(), 0.4);
        assert_eq!(pass_at_k_m(10, 10, 10, 10).unwrap(), 1.0);
        assert_eq!(pass_at_k_m(10, 5, 10, 5).unwrap(), 1.0);
        assert_eq!(pass_at_k_m(10, 3, 5, 2).unwrap(), 0.5);
        assert_eq!(pass_at_k_m(10, 3, 5, 1).unwrap(), pass_at_k(10, 3, 5).unwrap());
    }

    #[test]
    fn argument_errors() {
        assert!(pass_at_k(10, 3, 11).is_err());
        assert!(pass_at_k(10, 11, 1).is_err());
        assert!(pass_at_k(10, 3, 0).is_err());
        assert!(pass_at_k_m(10, 3, 5, 6).is_err());
        assert!(pass_at_k_m(10, 3, 5, 0).is_err());
        assert!(EvalGrid { ks: vec![11], km: vec![] }.validate(10).is_err());
        assert!(EvalGrid { ks: vec![1], km: vec![(5, 6)] }.validate(10).is_err());
    }

    #[test]
    fn csv_rows() {
        let r = EvalReport { temperature: 0.2, n: 10, cells: vec![Cell { k: 10, m: 5, value: 0.25 }], per_problem: vec![] };
        assert_eq!(reports_csv(&[r]), "temperature,metric,k,m,value\n0.2,pass@10^(5),10,5,0.25\n");
    }
}
