//! Synthetic micro-code task.
//!
//! A problem is an arithmetic expression in prefix notation over `+ - *`,
//! variables `a`..`d` and single-digit constants, evaluated modulo 257. The
//! answer is a stack-machine program computing the same value; five random
//! variable bindings serve as unit tests.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::transformer::Sequence;
use crate::vocab;

pub const MODULUS: u32 = 257;
pub const TESTS_PER_PROBLEM: usize = 5;
pub const MAX_OPS: usize = 7;
pub const MAX_DEPTH: usize = 4;

pub type Binding = [u32; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn apply(self, a: u32, b: u32) -> u32 {
        let m = MODULUS;
        match self {
            BinOp::Add => (a + b) % m,
            BinOp::Sub => (a + m - b) % m,
            BinOp::Mul => (a * b) % m,
        }
    }

    fn prompt_token(self) -> usize {
        match self {
            BinOp::Add => vocab::PLUS,
            BinOp::Sub => vocab::MINUS,
            BinOp::Mul => vocab::TIMES,
        }
    }

    fn program_token(self) -> usize {
        match self {
            BinOp::Add => vocab::ADD,
            BinOp::Sub => vocab::SUB,
            BinOp::Mul => vocab::MUL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(u32),
    Var(usize),
    Op(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, binding: &Binding) -> u32 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => binding[*v] % MODULUS,
            Expr::Op(op, l, r) => op.apply(l.eval(binding), r.eval(binding)),
        }
    }

    pub fn ops(&self) -> usize {
        match self {
            Expr::Op(_, l, r) => 1 + l.ops() + r.ops(),
            _ => 0,
        }
    }

    /// Operator levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Op(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 0,
        }
    }

    pub fn to_prefix(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.write_prefix(&mut out);
        out
    }

    fn write_prefix(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Const(c) => out.push(vocab::DIGIT + *c as usize),
            Expr::Var(v) => out.push(vocab::VAR + v),
            Expr::Op(op, l, r) => {
                out.push(op.prompt_token());
                l.write_prefix(out);
                r.write_prefix(out);
            }
        }
    }

    /// Postfix program terminated by `END`.
    pub fn to_program(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.write_postfix(&mut out);
        out.push(vocab::END);
        out
    }

    fn write_postfix(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Const(c) => out.push(vocab::PUSH + *c as usize),
            Expr::Var(v) => out.push(vocab::LOAD + v),
            Expr::Op(op, l, r) => {
                l.write_postfix(out);
                r.write_postfix(out);
                out.push(op.program_token());
            }
        }
    }

    /// Parses a complete prefix token sequence.
    pub fn parse_prefix(tokens: &[usize]) -> Option<Expr> {
        fn go(tokens: &[usize], pos: &mut usize) -> Option<Expr> {
            let t = *tokens.get(*pos)?;
            *pos += 1;
            Some(match t {
                t if (vocab::DIGIT..vocab::DIGIT + 10).contains(&t) => Expr::Const((t - vocab::DIGIT) as u32),
                t if (vocab::VAR..vocab::VAR + 4).contains(&t) => Expr::Var(t - vocab::VAR),
                vocab::PLUS | vocab::MINUS | vocab::TIMES => {
                    let op = match t {
                        vocab::PLUS => BinOp::Add,
                        vocab::MINUS => BinOp::Sub,
                        _ => BinOp::Mul,
                    };
                    let l = go(tokens, pos)?;
                    let r = go(tokens, pos)?;
                    Expr::Op(op, Box::new(l), Box::new(r))
                }
                _ => return None,
            })
        }
        let mut pos = 0;
        let e = go(tokens, &mut pos)?;
        (pos == tokens.len()).then_some(e)
    }
}

/// A task instance: prompt plus unit tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: u64,
    /// Prefix expression tokens.
    pub prompt: Vec<usize>,
    pub bindings: Vec<Binding>,
    pub expected: Vec<u32>,
}

impl Problem {
    /// Prompt followed by the separator: what the model conditions on.
    pub fn context(&self) -> Vec<usize> {
        let mut c = self.prompt.clone();
        c.push(vocab::SEP);
        c
    }
}

/// A problem with its reference program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub problem: Problem,
    pub response: Vec<usize>,
}

impl Example {
    pub fn id(&self) -> u64 {
        self.problem.id
    }

    pub fn sequence(&self) -> Result<Sequence> {
        Sequence::new(&self.problem.context(), &self.response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Underflow { at: usize },
    InvalidToken { at: usize, token: usize },
    MissingEnd,
    LeftoverStack { depth: usize },
}

/// Runs `program` on the stack machine. Execution stops at the first `END`.
pub fn interpret(program: &[usize], binding: &Binding) -> Result<u32, Fault> {
    let mut stack: Vec<u32> = Vec::with_capacity(8);
    for (at, &tok) in program.iter().enumerate() {
        match tok {
            vocab::END => {
                return if stack.len() == 1 { Ok(stack[0]) } else { Err(Fault::LeftoverStack { depth: stack.len() }) };
            }
            t if (vocab::PUSH..vocab::PUSH + 10).contains(&t) => stack.push((t - vocab::PUSH) as u32),
            t if (vocab::LOAD..vocab::LOAD + 4).contains(&t) => stack.push(binding[t - vocab::LOAD] % MODULUS),
            vocab::ADD | vocab::SUB | vocab::MUL => {
                let (Some(b), Some(a)) = (stack.pop(), stack.pop()) else {
                    return Err(Fault::Underflow { at });
                };
                let op = match tok {
                    vocab::ADD => BinOp::Add,
                    vocab::SUB => BinOp::Sub,
                    _ => BinOp::Mul,
                };
                stack.push(op.apply(a, b));
            }
            token => return Err(Fault::InvalidToken { at, token }),
        }
    }
    Err(Fault::MissingEnd)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestOutcome {
    pub passed: Vec<bool>,
}

impl TestOutcome {
    pub fn all_passed(&self) -> bool {
        self.passed.iter().all(|&p| p)
    }
}

pub fn run_unit_tests(program: &[usize], problem: &Problem) -> TestOutcome {
    let passed = problem.bindings.iter().zip(&problem.expected).map(|(b, &want)| interpret(program, b) == Ok(want)).collect();
    TestOutcome { passed }
}

/// Shape of generated expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub min_ops: usize,
    pub max_ops: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { min_ops: 1, max_ops: MAX_OPS }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_ops < 1 || self.min_ops > self.max_ops || self.max_ops > MAX_OPS {
            return Err(Error::config("max_ops", format!("need 1 <= min_ops <= max_ops <= {MAX_OPS}")));
        }
        Ok(())
    }
}

fn random_expr(rng: &mut impl Rng, ops: usize, depth: usize) -> Expr {
    if ops == 0 {
        return if rng.random_bool(0.75) { Expr::Var(rng.random_range(0..4)) } else { Expr::Const(rng.random_range(0..10)) };
    }
    // A subtree of depth <= depth-1 holds at most 2^(depth-1) - 1 operators.
    let cap = (1usize << (depth - 1)) - 1;
    let rest = ops - 1;
    let lo = rest.saturating_sub(cap);
    let hi = rest.min(cap);
    let left = rng.random_range(lo..=hi);
    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][rng.random_range(0..3)];
    let l = random_expr(rng, left, depth - 1);
    let r = random_expr(rng, rest - left, depth - 1);
    Expr::Op(op, Box::new(l), Box::new(r))
}

fn make_example(rng: &mut impl Rng, id: u64, task: &TaskConfig) -> (Expr, Example) {
    let ops = rng.random_range(task.min_ops..=task.max_ops);
    let expr = random_expr(rng, ops, MAX_DEPTH);
    let bindings: Vec<Binding> = (0..TESTS_PER_PROBLEM).map(|_| std::array::from_fn(|_| rng.random_range(0..MODULUS))).collect();
    let expected = bindings.iter().map(|b| expr.eval(b)).collect();
    let problem = Problem { id, prompt: expr.to_prefix(), bindings, expected };
    let response = expr.to_program();
    (expr, Example { problem, response })
}

/// `count` examples with ids `0..count`, distinct expressions, reproducible from `seed`.
pub fn generate_dataset(count: usize, seed: u64) -> Vec<Example> {
    generate_with(&[count], &TaskConfig::default(), seed).pop().unwrap_or_default()
}

/// Several mutually disjoint datasets: ids are assigned consecutively across
/// splits and no expression appears twice anywhere.
pub fn generate_with(sizes: &[usize], task: &TaskConfig, seed: u64) -> Vec<Vec<Example>> {
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let mut seen = HashSet::new();
    let mut next_id = 0u64;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut split = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while split.len() < size {
            attempts += 1;
            assert!(attempts < 1000 * (size + 10), "expression space exhausted");
            let (expr, ex) = make_example(&mut rng, next_id, task);
            if seen.insert(expr) {
                split.push(ex);
                next_id += 1;
            }
        }
        out.push(split);
    }
    out
}

/// On-disk record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub problem_id: u64,
    pub prompt_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub bindings: Vec<BTreeMap<String, u32>>,
    pub expected: Vec<u32>,
}

const VAR_NAMES: [&str; 4] = ["a", "b", "c", "d"];

fn names(tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|&t| vocab::name(t).expect("token in vocabulary")).collect()
}

fn ids(names: &[String], what: &str) -> Result<Vec<usize>> {
    names.iter().map(|n| vocab::parse(n).ok_or_else(|| Error::invalid(format!("unknown {what} token {n:?}")))).collect()
}

impl From<&Example> for Record {
    fn from(ex: &Example) -> Self {
        let p = &ex.problem;
        Record {
            problem_id: p.id,
            prompt_tokens: names(&p.prompt),
            response_tokens: names(&ex.response),
            bindings: p.bindings.iter().map(|b| VAR_NAMES.iter().zip(b).map(|(k, v)| (k.to_string(), *v)).collect()).collect(),
            expected: p.expected.clone(),
        }
    }
}

impl TryFrom<Record> for Example {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        let prompt = ids(&r.prompt_tokens, "prompt")?;
        let response = ids(&r.response_tokens, "response")?;
        let expr = Expr::parse_prefix(&prompt).ok_or_else(|| Error::invalid(format!("problem {}: malformed prompt", r.problem_id)))?;
        if r.bindings.len() != r.expected.len() {
            return Err(Error::invalid(format!("problem {}: bindings/expected length differ", r.problem_id)));
        }
        let mut bindings = Vec::with_capacity(r.bindings.len());
        for (b, &want) in r.bindings.iter().zip(&r.expected) {
            let mut binding = [0u32; 4];
            for (slot, name) in binding.iter_mut().zip(VAR_NAMES) {
                *slot = *b.get(name).ok_or_else(|| Error::invalid(format!("problem {}: binding misses {name}", r.problem_id)))?;
            }
            if expr.eval(&binding) != want {
                return Err(Error::invalid(format!("problem {}: expected value disagrees with the expression", r.problem_id)));
            }
            bindings.push(binding);
        }
        Ok(Example { problem: Problem { id: r.problem_id, prompt, bindings, expected: r.expected }, response })
    }
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &Record::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Example::try_from(serde_json::from_str::<Record>(&line)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vocab::*;

    fn toks(names: &str) -> Vec<usize> {
        names.split_whitespace().map(|n| vocab::parse(n).unwrap()).collect()
    }

    #[test]
    fn postfix_rendering() {
        let e = Expr::parse_prefix(&toks("+ a b")).unwrap();
        assert_eq!(e.to_program(), toks("VAR_a VAR_b ADD END"));
        let e = Expr::parse_prefix(&toks("* + a b c")).unwrap();
        assert_eq!(e.to_program(), toks("VAR_a VAR_b ADD VAR_c MUL END"));
        assert!(Expr::parse_prefix(&toks("+ a")).is_none());
        assert!(Expr::parse_prefix(&toks("a b")).is_none());
    }

    #[test]
    fn interpreter_semantics() {
        let any = [1, 2, 3, 4];
        assert_eq!(interpret(&toks("PUSH_2 PUSH_3 ADD END"), &any), Ok(5));
        assert_eq!(interpret(&toks("PUSH_2 ADD END"), &any), Err(Fault::Underflow { at: 1 }));
        assert_eq!(interpret(&toks("VAR_a VAR_a MUL END"), &[16, 0, 0, 0]), Ok(256));
        assert_eq!(interpret(&toks("PUSH_2 PUSH_3 SUB END"), &any), Ok(256));
        assert_eq!(interpret(&toks("PUSH_2 PUSH_3"), &any), Err(Fault::MissingEnd));
        assert_eq!(interpret(&toks("PUSH_2 PUSH_3 END"), &any), Err(Fault::LeftoverStack { depth: 2 }));
        assert_eq!(interpret(&toks("END"), &any), Err(Fault::LeftoverStack { depth: 0 }));
        assert_eq!(interpret(&[PLUS], &any), Err(Fault::InvalidToken { at: 0, token: PLUS }));
        assert_eq!(interpret(&[], &any), Err(Fault::MissingEnd));
    }

    #[test]
    fn generated_references_pass_their_tests() {
        let data = generate_dataset(1000, 7);
        assert_eq!(data.len(), 1000);
        for ex in &data {
            let e = Expr::parse_prefix(&ex.problem.prompt).unwrap();
            assert!(e.ops() >= 1 && e.ops() <= MAX_OPS);
            assert!(e.depth() <= MAX_DEPTH);
            assert_eq!(ex.problem.bindings.len(), TESTS_PER_PROBLEM);
            assert!(run_unit_tests(&ex.response, &ex.problem).all_passed());
        }
    }

    #[test]
    fn constant_program_fails_non_constant_problems() {
        let data = generate_dataset(1000, 11);
        let zero = toks("PUSH_0 END");
        let mut checked = 0;
        for ex in &data {
            let p = &ex.problem;
            if p.expected.iter().all(|&v| v == p.expected[0]) {
                continue;
            }
            checked += 1;
            assert!(!run_unit_tests(&zero, p).all_passed());
        }
        assert!(checked > 900);
    }

    #[test]
    fn commuted_program_also_passes() {
        let prompt = toks("+ a b");
        let e = Expr::parse_prefix(&prompt).unwrap();
        let bindings = vec![[3, 9, 0, 0], [100, 200, 1, 1], [256, 256, 0, 0], [0, 0, 0, 0], [7, 1, 2, 3]];
        let expected = bindings.iter().map(|b| e.eval(b)).collect();
        let p = Problem { id: 0, prompt, bindings, expected };
        assert!(run_unit_tests(&toks("VAR_b VAR_a ADD END"), &p).all_passed());
        assert!(!run_unit_tests(&toks("VAR_b VAR_a SUB END"), &p).all_passed());
    }

    #[test]
    fn generation_is_reproducible_and_ids_unique() {
        let a = generate_with(&[50, 30], &TaskConfig::default(), 3);
        let b = generate_with(&[50, 30], &TaskConfig::default(), 3);
        assert_eq!(a, b);
        let ids: HashSet<u64> = a.iter().flatten().map(Example::id).collect();
        assert_eq!(ids.len(), 80);
        let prompts: HashSet<&Vec<usize>> = a.iter().flatten().map(|e| &e.problem.prompt).collect();
        assert_eq!(prompts.len(), 80);
        assert_ne!(a, generate_with(&[50, 30], &TaskConfig::default(), 4));
    }

    #[test]
    fn dataset_file_round_trip_and_validation() {
        let dir = std::env::temp_dir().join(format!("ibft-stackcalc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.jsonl");
        let data = generate_dataset(20, 1);
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);

        let mut rec = Record::from(&data[0]);
        rec.expected[0] = (rec.expected[0] + 1) % MODULUS;
        assert!(Example::try_from(rec).is_err());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"prompt_tokens\""));
        std::fs::remove_dir_all(dir).ok();
    }
}
