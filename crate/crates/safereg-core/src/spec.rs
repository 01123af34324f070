//! Safety specifications over fixed-length trajectories.
//!
//! A specification is a conjunction of threshold predicates on target metrics
//! under an "always" temporal operator with horizon `H`: the conjunction must
//! hold at every one of the `H + 1` trajectory rows.
//!
//! The concrete grammar accepted by [`parse_spec`] is
//!
//! ```text
//! always[H=<int>] ( <metric> <cmp> <number> { and <metric> <cmp> <number> } )
//! ```
//!
//! with comparators `<`, `>`, `<=`, `>=` (Unicode `≤`/`≥` accepted).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("syntax error at byte {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("unknown comparator `{token}` at byte {position}")]
    UnknownComparator { position: usize, token: String },
    #[error("a specification needs at least one predicate")]
    NoPredicates,
    #[error("trajectory has {actual} rows but horizon {horizon} needs {expected}")]
    LengthMismatch {
        horizon: usize,
        expected: usize,
        actual: usize,
    },
    #[error("metric `{metric}` missing from trajectory row at time {time}")]
    MissingMetric { metric: String, time: u64 },
    #[error("metric `{metric}` is not finite at time {time}; cannot evaluate")]
    NonFiniteMetric { metric: String, time: u64 },
    #[error("trajectory time indices must increase by exactly 1 (row {row})")]
    NonConsecutiveTimes { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Less,
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = "<=")]
    LessEq,
    #[serde(rename = ">=")]
    GreaterEq,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Less => value < threshold,
            Comparator::Greater => value > threshold,
            Comparator::LessEq => value <= threshold,
            Comparator::GreaterEq => value >= threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Less => "<",
            Comparator::Greater => ">",
            Comparator::LessEq => "<=",
            Comparator::GreaterEq => ">=",
        }
    }
}

/// Single threshold predicate on one target metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

/// Conjunction of predicates that must hold at every step of an `H+1`-row
/// trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFormula {
    predicates: Vec<Predicate>,
    pub horizon: usize,
}

impl SpecFormula {
    pub fn new(predicates: Vec<Predicate>, horizon: usize) -> Result<Self, SpecError> {
        if predicates.is_empty() {
            return Err(SpecError::NoPredicates);
        }
        Ok(SpecFormula {
            predicates,
            horizon,
        })
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    /// Metric names referenced by the predicates, deduplicated and sorted.
    pub fn metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = self.predicates.iter().map(|p| p.metric.clone()).collect();
        names.sort();
        names.dedup();
        names
    }
}

impl fmt::Display for SpecFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "always[H={}](", self.horizon)?;
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                write!(f, " and ")?;
            }
            write!(f, "{} {} {}", p.metric, p.comparator.symbol(), p.threshold)?;
        }
        write!(f, ")")
    }
}

/// One time step of target-metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: u64,
    pub values: BTreeMap<String, f64>,
}

/// Ordered trajectory with consecutive time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn new(rows: Vec<TrajectoryRow>) -> Result<Self, SpecError> {
        for (i, pair) in rows.windows(2).enumerate() {
            if pair[1].time != pair[0].time + 1 {
                return Err(SpecError::NonConsecutiveTimes { row: i + 1 });
            }
        }
        Ok(Trajectory { rows })
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Evaluates the specification over the trajectory: returns 1 iff every
/// predicate holds at every row, 0 otherwise.
///
/// The trajectory must have exactly `spec.horizon + 1` rows, each containing a
/// finite value for every referenced metric. A NaN or infinite metric value is
/// a monitoring failure and reported as an error, not as a violation.
pub fn evaluate(spec: &SpecFormula, traj: &Trajectory) -> Result<u8, SpecError> {
    let expected = spec.horizon + 1;
    if traj.len() != expected {
        return Err(SpecError::LengthMismatch {
            horizon: spec.horizon,
            expected,
            actual: traj.len(),
        });
    }
    let mut verdict = 1u8;
    for row in traj.rows() {
        for pred in spec.predicates() {
            let value = *row
                .values
                .get(&pred.metric)
                .ok_or_else(|| SpecError::MissingMetric {
                    metric: pred.metric.clone(),
                    time: row.time,
                })?;
            if !value.is_finite() {
                return Err(SpecError::NonFiniteMetric {
                    metric: pred.metric.clone(),
                    time: row.time,
                });
            }
            if !pred.comparator.holds(value, pred.threshold) {
                verdict = 0;
            }
        }
    }
    Ok(verdict)
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { text, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn error(&self, message: &str) -> SpecError {
        SpecError::SyntaxError {
            position: self.pos,
            message: message.to_string(),
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), SpecError> {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{token}`")))
        }
    }

    fn identifier(&mut self) -> Result<String, SpecError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .take_while(|(i, c)| {
                c.is_ascii_alphanumeric() || *c == '_' || (*i == 0 && c.is_ascii_alphabetic())
            })
            .last()
            .map(|(i, c)| i + c.len_utf8());
        match end {
            Some(end) if rest[..end].chars().next().is_some_and(|c| !c.is_ascii_digit()) => {
                self.pos += end;
                Ok(rest[..end].to_string())
            }
            _ => Err(self.error("expected a metric name")),
        }
    }

    fn integer(&mut self) -> Result<usize, SpecError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest.bytes().take_while(|b| b.is_ascii_digit()).count();
        if end == 0 {
            return Err(self.error("expected an integer"));
        }
        let value = rest[..end]
            .parse::<usize>()
            .map_err(|_| self.error("integer out of range"))?;
        self.pos += end;
        Ok(value)
    }

    fn number(&mut self) -> Result<f64, SpecError> {
        self.skip_ws();
        let rest = self.rest();
        let mut end = 0;
        let bytes = rest.as_bytes();
        if end < bytes.len() && (bytes[end] == b'+' || bytes[end] == b'-') {
            end += 1;
        }
        let digits_start = end;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp = end + 1;
            if exp < bytes.len() && (bytes[exp] == b'+' || bytes[exp] == b'-') {
                exp += 1;
            }
            let exp_digits = bytes[exp..].iter().take_while(|b| b.is_ascii_digit()).count();
            if exp_digits > 0 {
                end = exp + exp_digits;
            }
        }
        if end == digits_start {
            return Err(self.error("expected a number"));
        }
        let value = rest[..end]
            .parse::<f64>()
            .map_err(|_| self.error("malformed number"))?;
        self.pos += end;
        Ok(value)
    }

    fn comparator(&mut self) -> Result<Comparator, SpecError> {
        self.skip_ws();
        let rest = self.rest();
        let table: &[(&str, Comparator)] = &[
            ("<=", Comparator::LessEq),
            (">=", Comparator::GreaterEq),
            ("≤", Comparator::LessEq),
            ("≥", Comparator::GreaterEq),
            ("<", Comparator::Less),
            (">", Comparator::Greater),
        ];
        for (tok, cmp) in table {
            if rest.starts_with(tok) {
                self.pos += tok.len();
                return Ok(*cmp);
            }
        }
        // A comparator-looking token that is not supported gets its own error.
        let token: String = rest
            .chars()
            .take_while(|c| matches!(c, '=' | '!' | '~'))
            .collect();
        if !token.is_empty() {
            return Err(SpecError::UnknownComparator {
                position: self.pos,
                token,
            });
        }
        Err(self.error("expected a comparator (<, >, <=, >=)"))
    }

    fn predicate(&mut self) -> Result<Predicate, SpecError> {
        let metric = self.identifier()?;
        let comparator = self.comparator()?;
        let threshold = self.number()?;
        Ok(Predicate {
            metric,
            comparator,
            threshold,
        })
    }
}

/// Parses the `always[H=..](..)` grammar described in the module docs.
pub fn parse_spec(text: &str) -> Result<SpecFormula, SpecError> {
    let mut p = Parser::new(text);
    p.expect("always")?;
    p.expect("[")?;
    p.expect("H")?;
    p.expect("=")?;
    let horizon = p.integer()?;
    p.expect("]")?;
    p.expect("(")?;
    let mut predicates = vec![p.predicate()?];
    loop {
        p.skip_ws();
        if p.rest().starts_with("and") {
            p.pos += 3;
            predicates.push(p.predicate()?);
        } else {
            break;
        }
    }
    p.expect(")")?;
    p.skip_ws();
    if !p.rest().is_empty() {
        return Err(p.error("trailing input after specification"));
    }
    SpecFormula::new(predicates, horizon)
}
