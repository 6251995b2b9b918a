//! Bell-type inequalities over joint or conditional probability tables.
//!
//! Cells are addressed by `(a, b, x, y)` with index `8a + 4b + 2x + y`, so
//! index 5 is `P(0101)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact;
use crate::qstate::OutcomeTable;

const TABLE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IneqError {
    #[error("invalid probability table: {0}")]
    InvalidTable(String),
    #[error("input pair (x={x}, y={y}) has zero probability; conditional form is undefined")]
    MissingInput { x: u8, y: u8 },
    #[error("{spec} needs cell P({a}{b}{x}{y}), which this table does not resolve")]
    UnknownCell {
        spec: String,
        a: u8,
        b: u8,
        x: u8,
        y: u8,
    },
    #[error("independence parameter l = {0} outside [0, 1/4]")]
    LOutOfRange(f64),
    #[error("correlator {0} outside [-1, 1]")]
    CorrelatorOutOfRange(f64),
    #[error("CHSH value {0} outside [0, 4]")]
    ChshOutOfRange(f64),
    #[error("critical l undefined: P(0000) and the three MDL cells are all zero")]
    UndefinedL,
}

pub const fn cell(a: u8, b: u8, x: u8, y: u8) -> usize {
    ((a as usize) << 3) | ((b as usize) << 2) | ((x as usize) << 1) | (y as usize)
}

/// `(a, b, x, y)` of a cell index.
pub const fn cell_bits(index: usize) -> (u8, u8, u8, u8) {
    (
        ((index >> 3) & 1) as u8,
        ((index >> 2) & 1) as u8,
        ((index >> 1) & 1) as u8,
        (index & 1) as u8,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ideal,
    Simulated,
    Ingested,
}

/// Joint distribution `P(abxy)` with its input marginal `P(xy)`.
///
/// A table may be partial: published count tables often list a single
/// outcome cell per setting pair. `known` is a 16-bit mask of the cells
/// whose value is actually resolved; the rest of each setting pair's mass
/// is unattributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    joint: [f64; 16],
    input_dist: [f64; 4],
    known: u16,
    provenance: Provenance,
}

impl ProbTable {
    pub const ALL_KNOWN: u16 = 0xFFFF;

    /// A complete table; the input marginal is derived from it.
    pub fn new(joint: [f64; 16], provenance: Provenance) -> Result<Self, IneqError> {
        let mut input_dist = [0.0; 4];
        for (i, p) in joint.iter().enumerate() {
            input_dist[i & 3] += p;
        }
        Self::partial(joint, input_dist, Self::ALL_KNOWN, provenance)
    }

    pub fn partial(
        joint: [f64; 16],
        input_dist: [f64; 4],
        known: u16,
        provenance: Provenance,
    ) -> Result<Self, IneqError> {
        if let Some(p) = joint.iter().chain(&input_dist).find(|p| !(**p >= 0.0)) {
            return Err(IneqError::InvalidTable(format!("negative or NaN entry {p}")));
        }
        for (i, p) in joint.iter().enumerate() {
            if known & (1 << i) == 0 && *p != 0.0 {
                return Err(IneqError::InvalidTable(format!(
                    "unresolved cell {i} carries value {p}"
                )));
            }
        }
        let total: f64 = input_dist.iter().sum();
        if (total - 1.0).abs() > TABLE_TOL {
            return Err(IneqError::InvalidTable(format!("P(xy) sums to {total}")));
        }
        for xy in 0..4 {
            let resolved: f64 = (0..4).map(|ab| joint[(ab << 2) | xy]).sum();
            let complete = (0..4).all(|ab| known & (1 << ((ab << 2) | xy)) != 0);
            let gap = input_dist[xy] - resolved;
            if gap < -TABLE_TOL || (complete && gap.abs() > TABLE_TOL) {
                return Err(IneqError::InvalidTable(format!(
                    "P(xy={xy:02b}) = {} but its cells sum to {resolved}",
                    input_dist[xy]
                )));
            }
        }
        Ok(ProbTable {
            joint,
            input_dist,
            known,
            provenance,
        })
    }

    /// Combines conditional tables (indexed `2x + y`) with an input distribution.
    pub fn from_conditional(
        tables: &[OutcomeTable; 4],
        input_dist: [f64; 4],
        provenance: Provenance,
    ) -> Result<Self, IneqError> {
        let mut joint = [0.0; 16];
        for (xy, t) in tables.iter().enumerate() {
            for ab in 0..4 {
                joint[(ab << 2) | xy] = t.0[ab] * input_dist[xy];
            }
        }
        Self::partial(joint, input_dist, Self::ALL_KNOWN, provenance)
    }

    pub fn joint(&self, a: u8, b: u8, x: u8, y: u8) -> f64 {
        self.joint[cell(a, b, x, y)]
    }

    pub fn joint_cells(&self) -> &[f64; 16] {
        &self.joint
    }

    pub fn input(&self, x: u8, y: u8) -> f64 {
        self.input_dist[(2 * x + y) as usize]
    }

    pub fn input_dist(&self) -> [f64; 4] {
        self.input_dist
    }

    pub fn is_known(&self, a: u8, b: u8, x: u8, y: u8) -> bool {
        self.known & (1 << cell(a, b, x, y)) != 0
    }

    pub fn is_complete(&self) -> bool {
        self.known == Self::ALL_KNOWN
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `P(ab|xy)`, or `None` when the setting pair never occurs.
    pub fn conditional(&self, a: u8, b: u8, x: u8, y: u8) -> Option<f64> {
        let pxy = self.input(x, y);
        (pxy > 0.0).then(|| self.joint(a, b, x, y) / pxy)
    }
}

/// Coefficient `constant + per_l·l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCoefficient {
    pub constant: f64,
    pub per_l: f64,
}

impl AffineCoefficient {
    pub const ZERO: AffineCoefficient = AffineCoefficient::constant(0.0);

    pub const fn constant(c: f64) -> Self {
        AffineCoefficient {
            constant: c,
            per_l: 0.0,
        }
    }

    pub fn eval(&self, l: f64) -> f64 {
        self.constant + self.per_l * l
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.per_l == 0.0
    }
}

/// Whether coefficients multiply `P(abxy)` or `P(ab|xy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableForm {
    Joint,
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundForm {
    /// Classical bound that does not move with `l`.
    Constant(f64),
    /// `4(1 − 2l)`, the relaxed CHSH bound.
    ChshRelaxed,
    /// Only known through the LP over the measurement-dependent polytope.
    LpCertified,
}

/// A linear Bell functional `Σ c(a,b,x,y; l)·P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalitySpec {
    pub name: String,
    pub form: TableForm,
    pub coefficients: [AffineCoefficient; 16],
    pub bound: BoundForm,
}

impl InequalitySpec {
    pub fn from_fn(
        name: impl Into<String>,
        form: TableForm,
        bound: BoundForm,
        f: impl Fn(u8, u8, u8, u8) -> AffineCoefficient,
    ) -> Self {
        let mut coefficients = [AffineCoefficient::ZERO; 16];
        for (i, c) in coefficients.iter_mut().enumerate() {
            let (a, b, x, y) = cell_bits(i);
            *c = f(a, b, x, y);
        }
        InequalitySpec {
            name: name.into(),
            form,
            coefficients,
            bound,
        }
    }

    /// `c = (−1)^(a+b+xy)` on conditional probabilities.
    pub fn chsh() -> Self {
        Self::chsh_variant(1, 1, false)
    }

    /// CHSH with its single minus sign moved to setting pair `(mx, my)`,
    /// optionally with the whole functional negated.
    pub fn chsh_variant(mx: u8, my: u8, negated: bool) -> Self {
        let name = format!(
            "chsh[{}{mx}{my}]",
            if negated { "-" } else { "+" }
        );
        Self::from_fn(name, TableForm::Conditional, BoundForm::ChshRelaxed, |a, b, x, y| {
            let flip = (a ^ b) ^ u8::from(x == mx && y == my);
            let mut c = if flip == 0 { 1.0 } else { -1.0 };
            if negated {
                c = -c;
            }
            AffineCoefficient::constant(c)
        })
    }

    /// The eight CHSH sign placements. Their maximum on any table is the
    /// best-of-8 CHSH value.
    pub fn chsh_variants() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for negated in [false, true] {
            for (mx, my) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out.push(Self::chsh_variant(mx, my, negated));
            }
        }
        out
    }

    /// `l·P(0000) − (1−3l)·(P(0101) + P(1010) + P(0011)) ≤ 0` on joint probabilities.
    pub fn mdl() -> Self {
        Self::from_fn("mdl", TableForm::Joint, BoundForm::Constant(0.0), |a, b, x, y| {
            match (a, b, x, y) {
                (0, 0, 0, 0) => AffineCoefficient {
                    constant: 0.0,
                    per_l: 1.0,
                },
                (0, 1, 0, 1) | (1, 0, 1, 0) | (0, 0, 1, 1) => AffineCoefficient {
                    constant: -1.0,
                    per_l: 3.0,
                },
                _ => AffineCoefficient::ZERO,
            }
        })
    }

    pub fn coefficient(&self, a: u8, b: u8, x: u8, y: u8, l: f64) -> f64 {
        self.coefficients[cell(a, b, x, y)].eval(l)
    }

    /// The analytic or constant classical bound at `l`, when one is known.
    pub fn classical_bound(&self, l: f64) -> Option<f64> {
        match self.bound {
            BoundForm::Constant(v) => Some(v),
            BoundForm::ChshRelaxed => jc_of_l(l).ok(),
            BoundForm::LpCertified => None,
        }
    }
}

/// Lower bound `l` on `P(xy|λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdlBound {
    pub l: f64,
    /// Set when the data needs no measurement dependence at all and `l` was
    /// pinned to 1/4.
    pub clamped: bool,
}

impl MdlBound {
    pub fn new(l: f64) -> Result<Self, IneqError> {
        check_l(l)?;
        Ok(MdlBound { l, clamped: false })
    }
}

fn check_l(l: f64) -> Result<(), IneqError> {
    if (0.0..=0.25).contains(&l) {
        Ok(())
    } else {
        Err(IneqError::LOutOfRange(l))
    }
}

/// Evaluates the functional on a table at independence parameter `l`.
pub fn bell_value(spec: &InequalitySpec, table: &ProbTable, l: f64) -> Result<f64, IneqError> {
    let mut total = 0.0;
    for (i, coef) in spec.coefficients.iter().enumerate() {
        if coef.is_zero() {
            continue;
        }
        let (a, b, x, y) = cell_bits(i);
        if !table.is_known(a, b, x, y) {
            return Err(IneqError::UnknownCell {
                spec: spec.name.clone(),
                a,
                b,
                x,
                y,
            });
        }
        let p = match spec.form {
            TableForm::Joint => table.joint(a, b, x, y),
            TableForm::Conditional => table
                .conditional(a, b, x, y)
                .ok_or(IneqError::MissingInput { x, y })?,
        };
        total += coef.eval(l) * p;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChshConvention {
    /// `E00 + E01 + E10 − E11`.
    Fixed,
    /// Largest `|Σ ±E|` over the four single-minus placements.
    BestOf8,
}

/// CHSH combination of the correlators `[E00, E01, E10, E11]`.
pub fn chsh_value(correlators: [f64; 4], convention: ChshConvention) -> Result<f64, IneqError> {
    if let Some(e) = correlators.iter().find(|e| !(e.abs() <= 1.0)) {
        return Err(IneqError::CorrelatorOutOfRange(*e));
    }
    let with_minus_at = |k: usize| -> f64 {
        correlators
            .iter()
            .enumerate()
            .map(|(i, e)| if i == k { -e } else { *e })
            .sum()
    };
    Ok(match convention {
        ChshConvention::Fixed => with_minus_at(3),
        ChshConvention::BestOf8 => (0..4)
            .map(|k| with_minus_at(k).abs())
            .fold(0.0, f64::max),
    })
}

/// Relaxed CHSH bound `4(1 − 2l)`, computed on the decimal value of `l`.
pub fn jc_of_l(l: f64) -> Result<f64, IneqError> {
    check_l(l)?;
    let value = exact::int(4) * (exact::int(1) - exact::int(2) * exact::from_decimal(l));
    Ok(exact::to_f64(&value))
}

/// `l·P(0000) − (1−3l)·(P(0101) + P(1010) + P(0011))`.
pub fn mdl_lhs(table: &ProbTable, l: f64) -> f64 {
    let s3 = table.joint(0, 1, 0, 1) + table.joint(1, 0, 1, 0) + table.joint(0, 0, 1, 1);
    l * table.joint(0, 0, 0, 0) - (1.0 - 3.0 * l) * s3
}

/// Root of `mdl_lhs(table, ·)`: `S₃ / (P(0000) + 3·S₃)`, clamped to 1/4.
pub fn critical_l_mdl(table: &ProbTable) -> Result<MdlBound, IneqError> {
    for (a, b, x, y) in [(0, 0, 0, 0), (0, 1, 0, 1), (1, 0, 1, 0), (0, 0, 1, 1)] {
        if !table.is_known(a, b, x, y) {
            return Err(IneqError::UnknownCell {
                spec: "mdl".into(),
                a,
                b,
                x,
                y,
            });
        }
    }
    let s3 = table.joint(0, 1, 0, 1) + table.joint(1, 0, 1, 0) + table.joint(0, 0, 1, 1);
    let denom = table.joint(0, 0, 0, 0) + 3.0 * s3;
    if denom <= 0.0 {
        return Err(IneqError::UndefinedL);
    }
    let l = s3 / denom;
    if l >= 0.25 {
        return Ok(MdlBound {
            l: 0.25,
            clamped: true,
        });
    }
    MdlBound::new(l)
}

/// Critical `l` as a reduced fraction of counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl CountRatio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// [`critical_l_mdl`] on raw coincidence counts `N(0000)` and the three
/// cells of the negative term, kept exact.
pub fn critical_l_mdl_counts(n0000: u64, n_negative: [u64; 3]) -> Result<CountRatio, IneqError> {
    let s3: u64 = n_negative.iter().sum();
    let denom = n0000 + 3 * s3;
    if denom == 0 {
        return Err(IneqError::UndefinedL);
    }
    let g = gcd(s3, denom);
    Ok(CountRatio {
        numerator: s3 / g,
        denominator: denom / g,
    })
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Inverts the relaxed CHSH bound: `l = (4 − S)/8`.
pub fn critical_l_chsh(s: f64) -> Result<MdlBound, IneqError> {
    if !(0.0..=4.0).contains(&s) {
        return Err(IneqError::ChshOutOfRange(s));
    }
    if s < 2.0 {
        return Ok(MdlBound {
            l: 0.25,
            clamped: true,
        });
    }
    let l = (exact::int(4) - exact::from_decimal(s)) / exact::int(8);
    MdlBound::new(exact::to_f64(&l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pr_box() -> ProbTable {
        let mut joint = [0.0; 16];
        for (i, p) in joint.iter_mut().enumerate() {
            let (a, b, x, y) = cell_bits(i);
            if a ^ b == x & y {
                *p = 0.5 * 0.25;
            }
        }
        ProbTable::new(joint, Provenance::Ideal).unwrap()
    }

    fn table1() -> ProbTable {
        let total = 135355.0;
        let mut joint = [0.0; 16];
        joint[cell(0, 0, 0, 0)] = 2833.0 / total;
        joint[cell(0, 1, 0, 1)] = 100.0 / total;
        joint[cell(1, 0, 1, 0)] = 193.0 / total;
        joint[cell(0, 0, 1, 1)] = 86.0 / total;
        let known = [cell(0, 0, 0, 0), cell(0, 1, 0, 1), cell(1, 0, 1, 0), cell(0, 0, 1, 1)]
            .iter()
            .fold(0u16, |m, c| m | (1 << c));
        let dist = [34408.0 / total, 40085.0 / total, 41009.0 / total, 19853.0 / total];
        ProbTable::partial(joint, dist, known, Provenance::Ingested).unwrap()
    }

    #[test]
    fn cell_indexing() {
        assert_eq!(cell(0, 1, 0, 1), 5);
        assert_eq!(cell_bits(10), (1, 0, 1, 0));
        for i in 0..16 {
            let (a, b, x, y) = cell_bits(i);
            assert_eq!(cell(a, b, x, y), i);
        }
    }

    #[test]
    fn table_validation() {
        assert!(ProbTable::new([0.1; 16], Provenance::Ideal).is_err());
        let mut j = [0.0625; 16];
        j[0] = -0.0;
        j[1] = 0.125;
        assert!(ProbTable::new(j, Provenance::Ideal).is_ok());
        j[1] = -0.1;
        assert!(ProbTable::new(j, Provenance::Ideal).is_err());
        // cells cannot exceed their setting pair's mass
        let mut j = [0.0; 16];
        j[0] = 0.5;
        assert!(ProbTable::partial(j, [0.25; 4], 1, Provenance::Ingested).is_err());
    }

    #[test]
    fn chsh_on_pr_box_is_four() {
        assert_abs_diff_eq!(
            bell_value(&InequalitySpec::chsh(), &pr_box(), 0.0).unwrap(),
            4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn conditional_form_needs_every_input() {
        let mut joint = [0.0; 16];
        joint[cell(0, 0, 0, 0)] = 1.0;
        let t = ProbTable::new(joint, Provenance::Simulated).unwrap();
        assert_eq!(
            bell_value(&InequalitySpec::chsh(), &t, 0.0),
            Err(IneqError::MissingInput { x: 0, y: 1 })
        );
        // the joint-form functional is fine on the same table
        assert_abs_diff_eq!(bell_value(&InequalitySpec::mdl(), &t, 0.1).unwrap(), 0.1);
    }

    #[test]
    fn partial_table_rejects_unresolved_cells() {
        let err = bell_value(&InequalitySpec::chsh(), &table1(), 0.1).unwrap_err();
        assert!(matches!(err, IneqError::UnknownCell { .. }));
    }

    #[test]
    fn mdl_functional_matches_lhs() {
        let t = table1();
        for l in [0.0, 0.05, 0.0955, 0.2, 0.25] {
            assert_abs_diff_eq!(
                bell_value(&InequalitySpec::mdl(), &t, l).unwrap(),
                mdl_lhs(&t, l),
                epsilon = 1e-15
            );
        }
        assert_abs_diff_eq!(bell_value(&InequalitySpec::mdl(), &t, 0.0955).unwrap(), 0.0, epsilon = 1e-4);
    }

    #[test]
    fn mdl_lhs_signs() {
        let t = table1();
        assert!(mdl_lhs(&t, 0.25) > 0.0);
        assert_abs_diff_eq!(
            mdl_lhs(&t, 0.25),
            0.25 * 2833.0 / 135355.0 - 0.25 * 379.0 / 135355.0,
            epsilon = 1e-15
        );
        assert!(mdl_lhs(&t, 0.05) < 0.0);

        let mut joint = [0.0; 16];
        joint[0] = 0.3;
        joint[cell(1, 1, 0, 0)] = 0.7;
        let hardy = ProbTable::new(joint, Provenance::Ideal).unwrap();
        assert!(mdl_lhs(&hardy, 0.01) > 0.0);
        assert_eq!(critical_l_mdl(&hardy).unwrap().l, 0.0);
    }

    #[test]
    fn critical_l_from_tables() {
        let r = critical_l_mdl_counts(2833, [100, 193, 86]).unwrap();
        assert_eq!((r.numerator, r.denominator), (379, 3970));
        assert_abs_diff_eq!(critical_l_mdl(&table1()).unwrap().l, 379.0 / 3970.0, epsilon = 1e-15);
        let r = critical_l_mdl_counts(38911, [1214, 3246, 1577]).unwrap();
        assert_eq!((r.numerator, r.denominator), (6037, 57022));
        assert_abs_diff_eq!(r.value(), 0.1059, epsilon = 5e-5);
        assert_eq!(critical_l_mdl_counts(0, [0, 0, 0]), Err(IneqError::UndefinedL));
    }

    #[test]
    fn chsh_value_examples() {
        let measured = [-0.751, 0.651, 0.657, 0.745];
        assert_abs_diff_eq!(
            chsh_value(measured, ChshConvention::BestOf8).unwrap(),
            2.804,
            epsilon = 1e-12
        );
        assert_eq!(chsh_value([1.0, 1.0, 1.0, -1.0], ChshConvention::Fixed).unwrap(), 4.0);
        assert_eq!(
            chsh_value([1.2, 0.0, 0.0, 0.0], ChshConvention::Fixed),
            Err(IneqError::CorrelatorOutOfRange(1.2))
        );
    }

    #[test]
    fn relaxed_bound_and_inverse() {
        assert_eq!(jc_of_l(0.25).unwrap(), 2.0);
        assert_eq!(jc_of_l(0.0).unwrap(), 4.0);
        assert_eq!(jc_of_l(0.1495).unwrap(), 2.804);
        assert!(jc_of_l(0.3).is_err());
        assert_eq!(critical_l_chsh(2.804).unwrap().l, 0.1495);
        assert_eq!(critical_l_chsh(2.0).unwrap().l, 0.25);
        assert_eq!(critical_l_chsh(4.0).unwrap().l, 0.0);
        let low = critical_l_chsh(1.5).unwrap();
        assert!(low.clamped);
        assert_eq!(low.l, 0.25);
        assert!(critical_l_chsh(4.5).is_err());
        assert!(critical_l_chsh(-0.1).is_err());
    }

    #[test]
    fn chsh_variants_are_distinct() {
        let v = InequalitySpec::chsh_variants();
        assert_eq!(v.len(), 8);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(v[i].coefficients, v[j].coefficients);
            }
        }
        assert_eq!(v[3].coefficients, InequalitySpec::chsh().coefficients);
    }
}
