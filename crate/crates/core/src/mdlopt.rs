//! Classical bounds over the measurement-dependent local polytope.
//!
//! A model picks a hidden strategy `λ` and lets the settings depend on it,
//! subject to `P(xy|λ) ≥ l`. Mixed local responses are convex combinations
//! of the 16 deterministic ones, so the program only needs
//! `q(λ,x,y) = P(λ)·P(xy|λ)` for deterministic `λ`. The program is solved
//! exactly; [`brute_force_bound`] reaches the same optimum without a solver.

use num_traits::{Signed, Zero};
use thiserror::Error;

use crate::exact::{self, Rational};
use crate::ineq::{cell, InequalitySpec, ProbTable, Provenance, TableForm};
use crate::qstate::OutcomeTable;
use crate::simplex::{Cmp, LinearProgram, LpError, LpSolution};

pub const NUM_STRATEGIES: usize = 16;
const NUM_VARS: usize = NUM_STRATEGIES * 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdlOptError {
    #[error("l = {l} exceeds the smallest input probability {min_input}; no model exists")]
    Infeasible { l: f64, min_input: f64 },
    #[error("invalid input distribution: {0}")]
    InvalidInputDist(String),
    #[error("l = {0} is negative")]
    NegativeL(f64),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Deterministic local responses `a = A(x)`, `b = B(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeterministicStrategy {
    pub index: usize,
    pub response_a: [u8; 2],
    pub response_b: [u8; 2],
}

impl DeterministicStrategy {
    /// Bits 0–1 of `index` are Alice's answers to `x = 0, 1`, bits 2–3 Bob's.
    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_STRATEGIES);
        let bit = |k: usize| ((index >> k) & 1) as u8;
        DeterministicStrategy {
            index,
            response_a: [bit(0), bit(1)],
            response_b: [bit(2), bit(3)],
        }
    }

    pub fn outputs(&self, x: u8, y: u8) -> (u8, u8) {
        (self.response_a[x as usize], self.response_b[y as usize])
    }

    /// `P(ab|xy)` tables, indexed `2x + y`.
    pub fn induced_tables(&self) -> [OutcomeTable; 4] {
        let mut out = [OutcomeTable([0.0; 4]); 4];
        for (xy, t) in out.iter_mut().enumerate() {
            let (a, b) = self.outputs((xy >> 1) as u8, (xy & 1) as u8);
            t.0[(2 * a + b) as usize] = 1.0;
        }
        out
    }
}

pub fn enumerate_strategies() -> Vec<DeterministicStrategy> {
    (0..NUM_STRATEGIES)
        .map(DeterministicStrategy::from_index)
        .collect()
}

const fn var(lambda: usize, xy: usize) -> usize {
    4 * lambda + xy
}

/// The LP for one `(spec, l, P(xy))`.
#[derive(Debug, Clone)]
pub struct MdlProgram {
    pub l: Rational,
    pub input_dist: [Rational; 4],
    pub lp: LinearProgram,
}

/// Optimum with its witness `q(λ, x, y)`.
#[derive(Debug, Clone)]
pub struct MdlSolution {
    pub optimum: Rational,
    /// `q[λ][2x + y]`.
    pub q: Vec<[Rational; 4]>,
    pub lp: LpSolution,
}

pub fn uniform_inputs() -> [Rational; 4] {
    std::array::from_fn(|_| exact::ratio(1, 4))
}

impl MdlProgram {
    pub fn build(
        spec: &InequalitySpec,
        l: &Rational,
        input_dist: &[Rational; 4],
    ) -> Result<Self, MdlOptError> {
        if l.is_negative() {
            return Err(MdlOptError::NegativeL(exact::to_f64(l)));
        }
        if input_dist.iter().any(|p| p.is_negative()) {
            return Err(MdlOptError::InvalidInputDist("negative entry".into()));
        }
        let total: Rational = input_dist.iter().sum();
        if total != exact::int(1) {
            return Err(MdlOptError::InvalidInputDist(format!(
                "sums to {}",
                exact::to_f64(&total)
            )));
        }
        let min_input = input_dist.iter().min().expect("four entries");
        if l > min_input {
            return Err(MdlOptError::Infeasible {
                l: exact::to_f64(l),
                min_input: exact::to_f64(min_input),
            });
        }
        if spec.form == TableForm::Conditional && min_input.is_zero() {
            return Err(MdlOptError::InvalidInputDist(
                "conditional functional needs every input pair".into(),
            ));
        }

        let mut lp = LinearProgram::new(NUM_VARS);
        for s in enumerate_strategies() {
            for xy in 0..4 {
                let (x, y) = ((xy >> 1) as u8, (xy & 1) as u8);
                let (a, b) = s.outputs(x, y);
                let coef = &spec.coefficients[cell(a, b, x, y)];
                let mut c = exact::from_binary(coef.constant) + exact::from_binary(coef.per_l) * l;
                if spec.form == TableForm::Conditional {
                    c /= &input_dist[xy];
                }
                lp.objective[var(s.index, xy)] = c;
            }
        }
        // Σ_λ q(λ,x,y) = P(xy)
        for (xy, p) in input_dist.iter().enumerate() {
            let mut row = vec![Rational::zero(); NUM_VARS];
            for lambda in 0..NUM_STRATEGIES {
                row[var(lambda, xy)] = exact::int(1);
            }
            lp.add(row, Cmp::Eq, p.clone());
        }
        // q(λ,x,y) − l·Σ_{x'y'} q(λ,x',y') ≥ 0
        for lambda in 0..NUM_STRATEGIES {
            for xy in 0..4 {
                let mut row = vec![Rational::zero(); NUM_VARS];
                for other in 0..4 {
                    row[var(lambda, other)] = -l.clone();
                }
                row[var(lambda, xy)] += exact::int(1);
                lp.add(row, Cmp::Ge, Rational::zero());
            }
        }
        Ok(MdlProgram {
            l: l.clone(),
            input_dist: input_dist.clone(),
            lp,
        })
    }
}

pub fn lp_solve(program: &MdlProgram) -> Result<MdlSolution, MdlOptError> {
    let lp = program.lp.solve()?;
    let q = (0..NUM_STRATEGIES)
        .map(|lambda| std::array::from_fn(|xy| lp.x[var(lambda, xy)].clone()))
        .collect();
    Ok(MdlSolution {
        optimum: lp.objective.clone(),
        q,
        lp,
    })
}

impl MdlSolution {
    pub fn optimum_f64(&self) -> f64 {
        exact::to_f64(&self.optimum)
    }

    /// `P(λ)`.
    pub fn strategy_weight(&self, lambda: usize) -> Rational {
        self.q[lambda].iter().sum()
    }

    /// Input marginal `Σ_λ q(λ,x,y)`.
    pub fn input_marginal(&self) -> [Rational; 4] {
        std::array::from_fn(|xy| self.q.iter().map(|row| &row[xy]).sum())
    }

    /// Checks every constraint of `program` exactly.
    pub fn satisfies(&self, program: &MdlProgram) -> bool {
        program.lp.is_feasible(&self.lp.x)
    }

    /// The joint distribution this model produces.
    pub fn to_prob_table(&self) -> ProbTable {
        let mut joint = [0.0; 16];
        for (lambda, row) in self.q.iter().enumerate() {
            let s = DeterministicStrategy::from_index(lambda);
            for (xy, q) in row.iter().enumerate() {
                let (x, y) = ((xy >> 1) as u8, (xy & 1) as u8);
                let (a, b) = s.outputs(x, y);
                joint[cell(a, b, x, y)] += exact::to_f64(q);
            }
        }
        ProbTable::new(joint, Provenance::Ideal).expect("witness is a distribution")
    }
}

/// Maximum of `spec` over the measurement-dependent local polytope.
/// `l` and `input_dist` are read as the decimals they print as.
pub fn max_bell_mdl(
    spec: &InequalitySpec,
    l: f64,
    input_dist: [f64; 4],
) -> Result<MdlSolution, MdlOptError> {
    let dist = input_dist.map(exact::from_decimal);
    max_bell_mdl_exact(spec, &exact::from_decimal(l), &dist)
}

pub fn max_bell_mdl_exact(
    spec: &InequalitySpec,
    l: &Rational,
    input_dist: &[Rational; 4],
) -> Result<MdlSolution, MdlOptError> {
    lp_solve(&MdlProgram::build(spec, l, input_dist)?)
}

/// Solver-free optimum in plain floating point.
///
/// The extreme points of `{p : p(xy) ≥ l, Σp = 1}` put `1−3l` on one
/// preferred pair and `l` on the other three. Every model is a mixture of
/// (strategy, preferred pair) atoms. Matching the input marginal fixes the
/// total weight of each preferred pair `k` at `(P(k) − l)/(1 − 4l)`, so the
/// optimum is that weight times the best strategy for `k`, found by trying
/// all 16.
pub fn brute_force_bound(spec: &InequalitySpec, l: f64, input_dist: [f64; 4]) -> Option<f64> {
    let min_input = input_dist.iter().cloned().fold(f64::INFINITY, f64::min);
    if l < 0.0 || l > min_input + 1e-15 {
        return None;
    }
    let value = |s: &DeterministicStrategy, weights: [f64; 4]| -> f64 {
        let mut v = 0.0;
        for xy in 0..4 {
            let (x, y) = ((xy >> 1) as u8, (xy & 1) as u8);
            let (a, b) = s.outputs(x, y);
            let mut c = spec.coefficient(a, b, x, y, l);
            if spec.form == TableForm::Conditional {
                c /= input_dist[xy];
            }
            v += weights[xy] * c;
        }
        v
    };
    let strategies = enumerate_strategies();
    let best_for = |weights: [f64; 4]| {
        strategies
            .iter()
            .map(|s| value(s, weights))
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let spread = 1.0 - 4.0 * l;
    if spread.abs() < 1e-12 {
        // l = 1/4: every λ sees uniform settings.
        if input_dist.iter().any(|p| (p - 0.25).abs() > 1e-12) {
            return None;
        }
        return Some(best_for([0.25; 4]));
    }
    let mut total = 0.0;
    for k in 0..4 {
        let weight = (input_dist[k] - l) / spread;
        let vertex: [f64; 4] = std::array::from_fn(|xy| if xy == k { 1.0 - 3.0 * l } else { l });
        total += weight * best_for(vertex);
    }
    Some(total)
}
