//! Genetic-programming symbolic regression over arithmetic expression
//! trees, used to rediscover closed-form loss formulas from Monte Carlo
//! data alone.
//!
//! Expressions are binary trees over {+, -, *, /} with leaves drawn from
//! the variables q and r and ephemeral constants in [-1, 1]. Division is
//! protected: a denominator within 1e-12 of zero evaluates to 1.0, keeping
//! every evaluation total. Fitness is mean squared error against the
//! dataset target using the (q, r_finite) columns, plus an additive
//! parsimony penalty per node.
//!
//! Determinism contract: all breeding randomness (selection, crossover
//! points, mutation) flows through one sequential generator seeded from the
//! config; fitness evaluation is pure and may run on any number of workers
//! without changing a single bit of the result.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montecarlo::{derive_cell_seed, RegressionDataset};

/// Denominators within this bound trigger the protected-division value 1.0.
const DIVISION_GUARD: f64 = 1e-12;

/// Depth (in edges) of subtrees grown by mutation, before the remaining
/// depth budget caps it.
const MUTATION_GROW_DEPTH: usize = 6;

/// Header of the evolution-history CSV.
pub const HISTORY_HEADER: &str = "generation,best_raw_mse,best_penalized,best_size";

/// Input variables available to expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    /// Aspect ratio of the observation, column `q` of the dataset.
    Q,
    /// Shrinkage weight, column `r_finite` of the dataset.
    R,
}

/// The four arithmetic operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() < DIVISION_GUARD {
                    1.0
                } else {
                    a / b
                }
            }
        }
    }
}

/// An arithmetic expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Constant(f64),
    Variable(Variable),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
}

impl Expression {
    /// Total evaluation at (q, r); protected division keeps this finite for
    /// ordinary magnitudes (overflow of huge products is handled at the
    /// fitness level).
    pub fn evaluate(&self, q: f64, r: f64) -> f64 {
        match self {
            Expression::Constant(c) => *c,
            Expression::Variable(Variable::Q) => q,
            Expression::Variable(Variable::R) => r,
            Expression::Binary(op, l, r_child) => {
                op.apply(l.evaluate(q, r), r_child.evaluate(q, r))
            }
        }
    }

    /// Node count.
    pub fn size(&self) -> usize {
        match self {
            Expression::Binary(_, l, r) => 1 + l.size() + r.size(),
            _ => 1,
        }
    }

    /// Depth in edges: a single leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expression::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 0,
        }
    }

    /// Parenthesized prefix form, e.g. `(mul 0.25 (mul q r))`.
    pub fn to_prefix(&self) -> String {
        match self {
            Expression::Constant(c) => format!("{c}"),
            Expression::Variable(Variable::Q) => "q".into(),
            Expression::Variable(Variable::R) => "r".into(),
            Expression::Binary(op, l, r) => {
                format!("({} {} {})", op.name(), l.to_prefix(), r.to_prefix())
            }
        }
    }

    /// Parses the prefix form back into a tree. Inverse of to_prefix up to
    /// float formatting.
    pub fn parse_prefix(text: &str) -> Result<Self> {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut pos = 0;
        let expr = Self::parse_at(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::InvalidParameter(format!(
                "trailing tokens after expression: {:?}",
                tokens[pos..].join(" ")
            )));
        }
        Ok(expr)
    }

    fn parse_at(tokens: &[&str], pos: &mut usize) -> Result<Self> {
        let token = *tokens.get(*pos).ok_or_else(|| {
            Error::InvalidParameter("expression text ended early".into())
        })?;
        *pos += 1;
        match token {
            "(" => {
                let name = *tokens.get(*pos).ok_or_else(|| {
                    Error::InvalidParameter("missing operator after '('".into())
                })?;
                *pos += 1;
                let op = match name {
                    "add" => BinaryOp::Add,
                    "sub" => BinaryOp::Sub,
                    "mul" => BinaryOp::Mul,
                    "div" => BinaryOp::Div,
                    other => {
                        return Err(Error::InvalidParameter(format!(
                            "unknown operator {other:?}"
                        )))
                    }
                };
                let left = Self::parse_at(tokens, pos)?;
                let right = Self::parse_at(tokens, pos)?;
                if tokens.get(*pos) != Some(&")") {
                    return Err(Error::InvalidParameter(format!(
                        "expected ')' to close {name}"
                    )));
                }
                *pos += 1;
                Ok(Expression::Binary(op, Box::new(left), Box::new(right)))
            }
            ")" => Err(Error::InvalidParameter("unexpected ')'".into())),
            "q" => Ok(Expression::Variable(Variable::Q)),
            "r" => Ok(Expression::Variable(Variable::R)),
            other => other
                .parse::<f64>()
                .map(Expression::Constant)
                .map_err(|_| Error::InvalidParameter(format!("unrecognized token {other:?}"))),
        }
    }

    /// Fully parenthesized infix form, e.g. `(0.25 * (q * r))`.
    pub fn to_infix(&self) -> String {
        match self {
            Expression::Constant(c) => format!("{c}"),
            Expression::Variable(Variable::Q) => "q".into(),
            Expression::Variable(Variable::R) => "r".into(),
            Expression::Binary(op, l, r) => {
                format!("({} {} {})", l.to_infix(), op.symbol(), r.to_infix())
            }
        }
    }

    /// The subtree rooted at preorder index `target`.
    fn subtree(&self, target: usize) -> &Expression {
        fn walk<'a>(e: &'a Expression, idx: &mut usize, target: usize) -> Option<&'a Expression> {
            let here = *idx;
            *idx += 1;
            if here == target {
                return Some(e);
            }
            if let Expression::Binary(_, l, r) = e {
                if let Some(found) = walk(l, idx, target) {
                    return Some(found);
                }
                if let Some(found) = walk(r, idx, target) {
                    return Some(found);
                }
            }
            None
        }
        walk(self, &mut 0, target).expect("preorder index within size")
    }

    /// A copy of the tree with the subtree at preorder index `target`
    /// replaced by `replacement`.
    fn replace_subtree(&self, target: usize, replacement: &Expression) -> Expression {
        fn walk(
            e: &Expression,
            idx: &mut usize,
            target: usize,
            repl: &Expression,
        ) -> Expression {
            let here = *idx;
            if here == target {
                *idx += e.size();
                return repl.clone();
            }
            *idx += 1;
            match e {
                Expression::Binary(op, l, r) => {
                    let l = walk(l, idx, target, repl);
                    let r = walk(r, idx, target, repl);
                    Expression::Binary(*op, Box::new(l), Box::new(r))
                }
                leaf => leaf.clone(),
            }
        }
        walk(self, &mut 0, target, replacement)
    }

    /// Depth (in edges from the root) of every node in preorder.
    fn node_depths(&self) -> Vec<usize> {
        fn walk(e: &Expression, depth: usize, out: &mut Vec<usize>) {
            out.push(depth);
            if let Expression::Binary(_, l, r) = e {
                walk(l, depth + 1, out);
                walk(r, depth + 1, out);
            }
        }
        let mut out = Vec::with_capacity(self.size());
        walk(self, 0, &mut out);
        out
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> BinaryOp {
    match rng.random_range(0..4u8) {
        0 => BinaryOp::Add,
        1 => BinaryOp::Sub,
        2 => BinaryOp::Mul,
        _ => BinaryOp::Div,
    }
}

fn random_leaf(rng: &mut ChaCha8Rng) -> Expression {
    match rng.random_range(0..4u8) {
        0 => Expression::Variable(Variable::Q),
        1 => Expression::Variable(Variable::R),
        _ => Expression::Constant(rng.random_range(-1.0..1.0)),
    }
}

/// Grows a random tree. `full` forces internal nodes until the budget is
/// spent; otherwise node kinds are drawn uniformly from the merged operator
/// and leaf sets (4 of 7 choices are internal).
fn random_tree(depth_budget: usize, full: bool, rng: &mut ChaCha8Rng) -> Expression {
    if depth_budget == 0 {
        return random_leaf(rng);
    }
    let internal = if full { true } else { rng.random_range(0..7u8) < 4 };
    if internal {
        let op = random_op(rng);
        let l = random_tree(depth_budget - 1, full, rng);
        let r = random_tree(depth_budget - 1, full, rng);
        Expression::Binary(op, Box::new(l), Box::new(r))
    } else {
        random_leaf(rng)
    }
}

/// Evolution parameters. Desk-scale defaults; full-scale reproduction runs
/// raise the population to 50,000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Additive per-node penalty on the fitness.
    pub parsimony: f64,
    pub tournament_size: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Hard depth bound (in edges) on every individual.
    pub max_depth: usize,
    pub seed: u64,
    /// Independent restarts used by [`evolve_rounds`].
    pub independent_runs: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            population_size: 5000,
            generations: 40,
            parsimony: 1e-4,
            tournament_size: 15,
            crossover_prob: 0.9,
            mutation_prob: 0.05,
            max_depth: 12,
            seed: 0,
            independent_runs: 4,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tournament_size == 0 {
            return Err(Error::InvalidParameter(
                "tournament size must be at least 1".into(),
            ));
        }
        if self.population_size < 2 * self.tournament_size {
            return Err(Error::InvalidParameter(format!(
                "population size {} must be at least twice the tournament size {}",
                self.population_size, self.tournament_size
            )));
        }
        for (value, name) in [
            (self.crossover_prob, "crossover probability"),
            (self.mutation_prob, "mutation probability"),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {value}"
                )));
            }
        }
        if !self.parsimony.is_finite() || self.parsimony < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "parsimony coefficient must be nonnegative, got {}",
                self.parsimony
            )));
        }
        if self.max_depth < 2 {
            return Err(Error::InvalidParameter(
                "max depth must be at least 2".into(),
            ));
        }
        if self.independent_runs == 0 {
            return Err(Error::InvalidParameter(
                "independent run count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Fitness of one expression: raw error, the penalized value actually
/// minimized, the tree size, and the generation it was measured in (0 for
/// standalone calls; the evolution loop stamps it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessReport {
    pub raw_mse: f64,
    pub penalized_fitness: f64,
    pub size: usize,
    pub generation: usize,
}

/// An expression together with its fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExpression {
    pub expression: Expression,
    pub report: FitnessReport,
}

/// Mean squared error over the dataset's (q, r_finite) -> target rows plus
/// the parsimony penalty. A non-finite error (overflow inside an expression)
/// is clamped to f64::MAX: the report stays finite and the individual
/// maximally unfit.
pub fn fitness(
    expr: &Expression,
    dataset: &RegressionDataset,
    parsimony: f64,
) -> Result<FitnessReport> {
    if dataset.rows.is_empty() {
        return Err(Error::InvalidParameter(
            "fitness needs a nonempty dataset".into(),
        ));
    }
    let mut sum = 0.0;
    for row in &dataset.rows {
        let d = expr.evaluate(row.q, row.r_finite) - row.target_kl_norm;
        sum += d * d;
    }
    let mut raw_mse = sum / dataset.rows.len() as f64;
    if !raw_mse.is_finite() {
        raw_mse = f64::MAX;
    }
    let size = expr.size();
    let penalized = raw_mse + parsimony * size as f64;
    Ok(FitnessReport {
        raw_mse,
        penalized_fitness: if penalized.is_finite() {
            penalized
        } else {
            f64::MAX
        },
        size,
        generation: 0,
    })
}

/// True when `a` beats `b`: smaller penalized fitness, ties broken by
/// smaller size, then earlier population index.
fn beats(a: &FitnessReport, ai: usize, b: &FitnessReport, bi: usize) -> bool {
    (a.penalized_fitness, a.size, ai) < (b.penalized_fitness, b.size, bi)
}

/// Draws a uniform k-subset of the population and returns its best member.
pub fn tournament_select<'p>(
    population: &'p [ScoredExpression],
    tournament_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<&'p ScoredExpression> {
    if population.is_empty() {
        return Err(Error::InvalidParameter(
            "tournament needs a nonempty population".into(),
        ));
    }
    if tournament_size == 0 || tournament_size > population.len() {
        return Err(Error::InvalidParameter(format!(
            "tournament size {tournament_size} must lie in 1..={}",
            population.len()
        )));
    }
    let picks = sample(rng, population.len(), tournament_size);
    let mut best: Option<usize> = None;
    for i in picks {
        best = Some(match best {
            None => i,
            Some(b) => {
                if beats(&population[i].report, i, &population[b].report, b) {
                    i
                } else {
                    b
                }
            }
        });
    }
    Ok(&population[best.expect("tournament is nonempty")])
}

/// Swaps uniformly chosen subtrees between the parents. An offspring that
/// would exceed `max_depth` is replaced by its own parent, so the bound
/// holds unconditionally.
pub fn crossover(
    a: &Expression,
    b: &Expression,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> (Expression, Expression) {
    let ia = rng.random_range(0..a.size());
    let ib = rng.random_range(0..b.size());
    let first = a.replace_subtree(ia, b.subtree(ib));
    let second = b.replace_subtree(ib, a.subtree(ia));
    let first = if first.depth() > max_depth {
        a.clone()
    } else {
        first
    };
    let second = if second.depth() > max_depth {
        b.clone()
    } else {
        second
    };
    (first, second)
}

/// With probability `mutation_prob`, replaces a uniformly chosen node by a
/// freshly grown subtree whose depth fits the remaining budget at that
/// position; otherwise returns the expression unchanged.
pub fn mutate(
    a: &Expression,
    mutation_prob: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Expression {
    if !(rng.random::<f64>() < mutation_prob) {
        return a.clone();
    }
    let target = rng.random_range(0..a.size());
    let at_depth = a.node_depths()[target];
    let budget = MUTATION_GROW_DEPTH.min(max_depth.saturating_sub(at_depth));
    let replacement = random_tree(budget, false, rng);
    a.replace_subtree(target, &replacement)
}

fn score_population(
    population: Vec<Expression>,
    dataset: &RegressionDataset,
    parsimony: f64,
    generation: usize,
) -> Result<Vec<ScoredExpression>> {
    population
        .into_par_iter()
        .map(|expression| {
            let mut report = fitness(&expression, dataset, parsimony)?;
            report.generation = generation;
            Ok(ScoredExpression { expression, report })
        })
        .collect()
}

fn best_index(population: &[ScoredExpression]) -> usize {
    let mut best = 0;
    for i in 1..population.len() {
        if beats(&population[i].report, i, &population[best].report, best) {
            best = i;
        }
    }
    best
}

/// Runs one evolution: ramped half-and-half initialization, then per
/// generation an elitist carryover of the single best individual followed by
/// tournament selection, crossover, and mutation. Returns the final best
/// expression and one history entry per generation (0..=generations), whose
/// best penalized fitness is non-increasing by elitism.
pub fn evolve(
    config: &GpConfig,
    dataset: &RegressionDataset,
) -> Result<(Expression, Vec<FitnessReport>)> {
    config.validate()?;
    if dataset.rows.is_empty() {
        return Err(Error::InvalidParameter(
            "evolution needs a nonempty dataset".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // ramped half-and-half: cycle depths 2..=6 (capped by max_depth),
    // alternating full and grow initialization
    let ramp_top = config.max_depth.min(6);
    let depths: Vec<usize> = (2..=ramp_top.max(2)).collect();
    let initial: Vec<Expression> = (0..config.population_size)
        .map(|i| {
            let depth = depths[i % depths.len()];
            let full = (i / depths.len()) % 2 == 0;
            random_tree(depth, full, &mut rng)
        })
        .collect();

    let mut population = score_population(initial, dataset, config.parsimony, 0)?;
    let mut history = Vec::with_capacity(config.generations + 1);
    history.push(population[best_index(&population)].report);

    for generation in 1..=config.generations {
        let elite = population[best_index(&population)].expression.clone();
        let mut next = Vec::with_capacity(config.population_size);
        next.push(elite);
        while next.len() < config.population_size {
            let pa = tournament_select(&population, config.tournament_size, &mut rng)?
                .expression
                .clone();
            let pb = tournament_select(&population, config.tournament_size, &mut rng)?
                .expression
                .clone();
            let (c1, c2) = if rng.random::<f64>() < config.crossover_prob {
                crossover(&pa, &pb, config.max_depth, &mut rng)
            } else {
                (pa, pb)
            };
            for child in [c1, c2] {
                if next.len() < config.population_size {
                    next.push(mutate(&child, config.mutation_prob, config.max_depth, &mut rng));
                }
            }
        }
        population = score_population(next, dataset, config.parsimony, generation)?;
        history.push(population[best_index(&population)].report);
    }

    let best = population[best_index(&population)].expression.clone();
    Ok((best, history))
}

/// One independent evolution restart.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub best: Expression,
    pub history: Vec<FitnessReport>,
}

/// Runs `config.independent_runs` evolutions with seeds derived from
/// (config.seed, round index).
pub fn evolve_rounds(config: &GpConfig, dataset: &RegressionDataset) -> Result<Vec<RoundResult>> {
    config.validate()?;
    let mut rounds = Vec::with_capacity(config.independent_runs);
    for round in 0..config.independent_runs {
        let seed = derive_cell_seed(config.seed, round);
        let round_config = GpConfig {
            seed,
            ..config.clone()
        };
        let (best, history) = evolve(&round_config, dataset)?;
        rounds.push(RoundResult {
            round,
            seed,
            best,
            history,
        });
    }
    Ok(rounds)
}

/// Renders an evolution history as CSV.
pub fn history_to_csv(history: &[FitnessReport]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for report in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            report.generation,
            crate::montecarlo::format_float(report.raw_mse),
            crate::montecarlo::format_float(report.penalized_fitness),
            report.size,
        ));
    }
    out
}

/// Collects the terms of a maximal chain of one commutative operator.
fn collect_chain(op: BinaryOp, e: &Expression, out: &mut Vec<Expression>) {
    match e {
        Expression::Binary(o, l, r) if *o == op => {
            collect_chain(op, l, out);
            collect_chain(op, r, out);
        }
        other => out.push(other.clone()),
    }
}

fn rebuild_chain(op: BinaryOp, terms: Vec<Expression>) -> Expression {
    let mut iter = terms.into_iter().rev();
    let mut acc = iter.next().expect("chain is nonempty");
    for term in iter {
        acc = Expression::Binary(op, Box::new(term), Box::new(acc));
    }
    acc
}

fn simplify_once(e: &Expression) -> Expression {
    match e {
        Expression::Binary(op @ (BinaryOp::Add | BinaryOp::Mul), _, _) => {
            let mut terms = Vec::new();
            collect_chain(*op, e, &mut terms);
            let terms: Vec<Expression> = terms.iter().map(simplify_once).collect();

            // fold every constant in the chain into one
            let identity = if *op == BinaryOp::Add { 0.0 } else { 1.0 };
            let mut folded = identity;
            let mut rest = Vec::new();
            for term in terms {
                match term {
                    Expression::Constant(c) => folded = op.apply(folded, c),
                    other => rest.push(other),
                }
            }
            // flatten-and-sort: canonical order for the non-constant terms
            rest.sort_by(|a, b| a.to_prefix().cmp(&b.to_prefix()));
            let mut chain = Vec::new();
            if folded != identity || rest.is_empty() {
                chain.push(Expression::Constant(folded));
            }
            chain.extend(rest);
            rebuild_chain(*op, chain)
        }
        Expression::Binary(op, l, r) => {
            let l = simplify_once(l);
            let r = simplify_once(r);
            match (*op, &l, &r) {
                (_, Expression::Constant(a), Expression::Constant(b)) => {
                    Expression::Constant(op.apply(*a, *b))
                }
                (BinaryOp::Sub, _, Expression::Constant(c)) if *c == 0.0 => l,
                (BinaryOp::Div, _, Expression::Constant(c)) if *c == 1.0 => l,
                _ => Expression::Binary(*op, Box::new(l), Box::new(r)),
            }
        }
        leaf => leaf.clone(),
    }
}

/// Canonicalizes an expression: constant folding, the identity eliminations
/// x+0, x*1, x-0, x/1, and flatten-and-sort of commutative chains. The
/// result must evaluate identically to the input (within 1e-10 relative) on
/// a 1024-point probe grid; if reassociation ever breaks that, the original
/// expression is returned unchanged.
pub fn simplify(e: &Expression) -> Expression {
    let candidate = simplify_once(e);
    for i in 0..32 {
        for j in 0..32 {
            let q = 0.05 + 5.0 * i as f64 / 31.0;
            let r = 0.02 + 0.98 * j as f64 / 31.0;
            let before = e.evaluate(q, r);
            let after = candidate.evaluate(q, r);
            if !((after - before).abs() <= 1e-10 * (1.0 + before.abs())) {
                return e.clone();
            }
        }
    }
    candidate
}
