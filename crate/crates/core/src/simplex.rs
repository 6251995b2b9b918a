//! Dense two-phase simplex over exact rationals.
//!
//! Small programs only: the tableau is stored densely and pivots follow
//! Bland's rule, so degenerate vertices never cycle. Every optimum is
//! returned with dual values and is checked against them exactly before it
//! leaves this module.

use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::exact::Rational;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("optimality certificate failed: {0}")]
    Certificate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<Rational>,
    pub cmp: Cmp,
    pub rhs: Rational,
}

/// `maximize c·x` subject to the constraints and `x ≥ 0`.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<Rational>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub objective: Rational,
    pub x: Vec<Rational>,
    /// One multiplier per constraint; `b·y` equals the objective.
    pub duals: Vec<Rational>,
}

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        LinearProgram {
            objective: vec![Rational::zero(); num_vars],
            constraints: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<Rational>, cmp: Cmp, rhs: Rational) {
        self.constraints.push(Constraint { coeffs, cmp, rhs });
    }

    /// Whether `x` satisfies every constraint exactly.
    pub fn is_feasible(&self, x: &[Rational]) -> bool {
        x.len() == self.num_vars()
            && x.iter().all(|v| !v.is_negative())
            && self.constraints.iter().all(|c| {
                let lhs = dot(&c.coeffs, x);
                match c.cmp {
                    Cmp::Le => lhs <= c.rhs,
                    Cmp::Ge => lhs >= c.rhs,
                    Cmp::Eq => lhs == c.rhs,
                }
            })
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let n = self.num_vars();
        if let Some(c) = self.constraints.iter().find(|c| c.coeffs.len() != n) {
            return Err(LpError::Malformed(format!(
                "constraint has {} coefficients, expected {n}",
                c.coeffs.len()
            )));
        }
        let solution = Tableau::build(self).run(&self.objective)?;
        self.certify(&solution)?;
        Ok(solution)
    }

    /// Weak duality plus complementary objective values: `x` feasible, `y`
    /// dual feasible and `c·x = b·y`.
    fn certify(&self, s: &LpSolution) -> Result<(), LpError> {
        if !self.is_feasible(&s.x) {
            return Err(LpError::Certificate("primal point infeasible".into()));
        }
        for (c, y) in self.constraints.iter().zip(&s.duals) {
            let ok = match c.cmp {
                Cmp::Le => !y.is_negative(),
                Cmp::Ge => !y.is_positive(),
                Cmp::Eq => true,
            };
            if !ok {
                return Err(LpError::Certificate(format!("dual sign wrong: {y}")));
            }
        }
        for j in 0..self.num_vars() {
            let reduced: Rational = self
                .constraints
                .iter()
                .zip(&s.duals)
                .map(|(c, y)| &c.coeffs[j] * y)
                .sum();
            if reduced < self.objective[j] {
                return Err(LpError::Certificate(format!("dual infeasible at column {j}")));
            }
        }
        let primal = dot(&self.objective, &s.x);
        let dual: Rational = self
            .constraints
            .iter()
            .zip(&s.duals)
            .map(|(c, y)| &c.rhs * y)
            .sum();
        if primal != dual || primal != s.objective {
            return Err(LpError::Certificate(format!("duality gap {}", dual - primal)));
        }
        Ok(())
    }
}

fn dot(a: &[Rational], b: &[Rational]) -> Rational {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColumnKind {
    Original,
    Slack,
    Artificial,
}

struct Tableau {
    rows: Vec<Vec<Rational>>,
    rhs: Vec<Rational>,
    basis: Vec<usize>,
    kinds: Vec<ColumnKind>,
    /// Column holding `+e_i` for row `i`, used to read off duals.
    identity_col: Vec<usize>,
    /// Rows multiplied by −1 to make their right-hand side nonnegative.
    flipped: Vec<bool>,
    num_original: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.constraints.len();
        let mut kinds = vec![ColumnKind::Original; n];
        let mut rows: Vec<Vec<Rational>> = Vec::with_capacity(m);
        let mut rhs = Vec::with_capacity(m);
        let mut flipped = Vec::with_capacity(m);
        let mut cmps = Vec::with_capacity(m);

        for c in &lp.constraints {
            let flip = c.rhs.is_negative();
            let sign = |v: &Rational| if flip { -v.clone() } else { v.clone() };
            rows.push(c.coeffs.iter().map(sign).collect());
            rhs.push(sign(&c.rhs));
            flipped.push(flip);
            cmps.push(match (c.cmp, flip) {
                (Cmp::Le, true) => Cmp::Ge,
                (Cmp::Ge, true) => Cmp::Le,
                (cmp, _) => cmp,
            });
        }

        let mut basis = vec![0; m];
        let mut identity_col = vec![0; m];
        let push_column = |rows: &mut Vec<Vec<Rational>>, at: usize, value: Rational| {
            for (i, row) in rows.iter_mut().enumerate() {
                row.push(if i == at { value.clone() } else { Rational::zero() });
            }
        };
        for i in 0..m {
            match cmps[i] {
                Cmp::Le => {
                    push_column(&mut rows, i, Rational::one());
                    kinds.push(ColumnKind::Slack);
                    basis[i] = kinds.len() - 1;
                    identity_col[i] = kinds.len() - 1;
                }
                Cmp::Ge => {
                    push_column(&mut rows, i, -Rational::one());
                    kinds.push(ColumnKind::Slack);
                    push_column(&mut rows, i, Rational::one());
                    kinds.push(ColumnKind::Artificial);
                    basis[i] = kinds.len() - 1;
                    identity_col[i] = kinds.len() - 1;
                }
                Cmp::Eq => {
                    push_column(&mut rows, i, Rational::one());
                    kinds.push(ColumnKind::Artificial);
                    basis[i] = kinds.len() - 1;
                    identity_col[i] = kinds.len() - 1;
                }
            }
        }

        Tableau {
            rows,
            rhs,
            basis,
            kinds,
            identity_col,
            flipped,
            num_original: n,
        }
    }

    fn num_cols(&self) -> usize {
        self.kinds.len()
    }

    /// Reduced-cost row `c_B·B⁻¹A − c` and objective value for costs `cost`.
    fn objective_row(&self, cost: &[Rational]) -> (Vec<Rational>, Rational) {
        let mut row: Vec<Rational> = cost.iter().map(|c| -c.clone()).collect();
        let mut value = Rational::zero();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = &cost[b];
            if cb.is_zero() {
                continue;
            }
            for (j, entry) in self.rows[i].iter().enumerate() {
                if !entry.is_zero() {
                    row[j] += cb * entry;
                }
            }
            value += cb * &self.rhs[i];
        }
        (row, value)
    }

    fn pivot(&mut self, obj: &mut [Rational], value: &mut Rational, r: usize, e: usize) {
        let inv = Rational::one() / &self.rows[r][e];
        for v in self.rows[r].iter_mut() {
            if !v.is_zero() {
                *v *= &inv;
            }
        }
        self.rhs[r] *= &inv;
        let support: Vec<usize> = (0..self.num_cols())
            .filter(|&j| !self.rows[r][j].is_zero())
            .collect();
        let (pivot_row, pivot_rhs) = (self.rows[r].clone(), self.rhs[r].clone());

        for i in 0..self.rows.len() {
            if i == r || self.rows[i][e].is_zero() {
                continue;
            }
            let factor = self.rows[i][e].clone();
            for &j in &support {
                let delta = &factor * &pivot_row[j];
                self.rows[i][j] -= delta;
            }
            self.rhs[i] -= &factor * &pivot_rhs;
        }
        if !obj[e].is_zero() {
            let factor = obj[e].clone();
            for &j in &support {
                obj[j] -= &factor * &pivot_row[j];
            }
            // obj holds c_B B⁻¹A − c, so the value moves the opposite way.
            *value -= &factor * &pivot_rhs;
        }
        self.basis[r] = e;
    }

    /// Bland's rule iterations; returns `Err(Unbounded)` if a column has no
    /// limiting row.
    fn optimize(
        &mut self,
        obj: &mut [Rational],
        value: &mut Rational,
        allow: impl Fn(ColumnKind) -> bool,
    ) -> Result<(), LpError> {
        loop {
            let entering = (0..self.num_cols())
                .find(|&j| allow(self.kinds[j]) && obj[j].is_negative());
            let Some(e) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, Rational)> = None;
            for i in 0..self.rows.len() {
                let a = &self.rows[i][e];
                if !a.is_positive() {
                    continue;
                }
                let ratio = &self.rhs[i] / a;
                let better = match &best {
                    None => true,
                    Some((bi, br)) => {
                        ratio < *br || (ratio == *br && self.basis[i] < self.basis[*bi])
                    }
                };
                if better {
                    best = Some((i, ratio));
                }
            }
            let Some((r, _)) = best else {
                return Err(LpError::Unbounded);
            };
            self.pivot(obj, value, r, e);
        }
    }

    fn run(mut self, objective: &[Rational]) -> Result<LpSolution, LpError> {
        let ncols = self.num_cols();
        let has_artificial = self.kinds.contains(&ColumnKind::Artificial);

        if has_artificial {
            // Phase 1: maximize −Σ artificials.
            let cost: Vec<Rational> = self
                .kinds
                .iter()
                .map(|k| match k {
                    ColumnKind::Artificial => -Rational::one(),
                    _ => Rational::zero(),
                })
                .collect();
            let (mut obj, mut value) = self.objective_row(&cost);
            self.optimize(&mut obj, &mut value, |_| true)
                .map_err(|_| LpError::Malformed("phase 1 unbounded".into()))?;
            if value.is_negative() {
                return Err(LpError::Infeasible);
            }
            // Pivot zero-level artificials out where a real column allows it.
            for r in 0..self.rows.len() {
                if self.kinds[self.basis[r]] != ColumnKind::Artificial {
                    continue;
                }
                if let Some(e) = (0..ncols).find(|&j| {
                    self.kinds[j] != ColumnKind::Artificial && !self.rows[r][j].is_zero()
                }) {
                    self.pivot(&mut obj, &mut value, r, e);
                }
            }
        }

        let mut cost = objective.to_vec();
        cost.resize(ncols, Rational::zero());
        let (mut obj, mut value) = self.objective_row(&cost);
        self.optimize(&mut obj, &mut value, |k| k != ColumnKind::Artificial)?;

        let mut x = vec![Rational::zero(); self.num_original];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.num_original {
                x[b] = self.rhs[i].clone();
            }
        }
        let duals = (0..self.rows.len())
            .map(|i| {
                let y = obj[self.identity_col[i]].clone();
                if self.flipped[i] {
                    -y
                } else {
                    y
                }
            })
            .collect();
        Ok(LpSolution {
            objective: value,
            x,
            duals,
        })
    }
}
