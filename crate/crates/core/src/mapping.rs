//! Student-to-teacher layer mappings `n = g(m)`.
//!
//! Index 0 is the embedding layer and `M + 1` (student) / `N + 1` (teacher)
//! the prediction layer. Interior indices `1..=M` name transformer layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How interior student layers pick their teacher layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// `g(m) = m · N / M`
    Uniform,
    /// `g(m) = m + N − M`
    Top,
    /// `g(m) = m`
    Bottom,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uniform, Strategy::Top, Strategy::Bottom];

    pub fn build(self, student_layers: usize, teacher_layers: usize) -> Result<LayerMapping> {
        match self {
            Strategy::Uniform => LayerMapping::uniform(student_layers, teacher_layers),
            Strategy::Top => LayerMapping::top(student_layers, teacher_layers),
            Strategy::Bottom => LayerMapping::bottom(student_layers, teacher_layers),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Top => "top",
            Strategy::Bottom => "bottom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "top" => Ok(Strategy::Top),
            "bottom" => Ok(Strategy::Bottom),
            other => Err(Error::Config(format!("unknown mapping strategy {other:?}"))),
        }
    }
}

/// A validated table `table[m] = g(m)` of length `M + 2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MappingRepr", into = "MappingRepr")]
pub struct LayerMapping {
    student_layers: usize,
    teacher_layers: usize,
    table: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MappingRepr {
    student_layers: usize,
    teacher_layers: usize,
    table: Vec<usize>,
}

impl TryFrom<MappingRepr> for LayerMapping {
    type Error = Error;

    fn try_from(r: MappingRepr) -> Result<Self> {
        LayerMapping::custom(r.student_layers, r.teacher_layers, r.table)
    }
}

impl From<LayerMapping> for MappingRepr {
    fn from(m: LayerMapping) -> Self {
        MappingRepr {
            student_layers: m.student_layers,
            teacher_layers: m.teacher_layers,
            table: m.table,
        }
    }
}

fn check_sizes(m: usize, n: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Mapping("student must have at least one layer".into()));
    }
    if m > n {
        return Err(Error::Mapping(format!(
            "student has {m} layers but teacher only {n}"
        )));
    }
    Ok(())
}

impl LayerMapping {
    fn from_interior(m: usize, n: usize, interior: impl Fn(usize) -> usize) -> Result<Self> {
        let mut table = Vec::with_capacity(m + 2);
        table.push(0);
        table.extend((1..=m).map(interior));
        table.push(n + 1);
        let mapping = LayerMapping {
            student_layers: m,
            teacher_layers: n,
            table,
        };
        mapping.validate()?;
        Ok(mapping)
    }

    /// Evenly spaced: `g(m) = m · N / M`. Requires `N` divisible by `M`.
    pub fn uniform(m: usize, n: usize) -> Result<Self> {
        check_sizes(m, n)?;
        if n % m != 0 {
            return Err(Error::Mapping(format!(
                "uniform mapping needs teacher layers ({n}) divisible by student layers ({m})"
            )));
        }
        let step = n / m;
        Self::from_interior(m, n, |i| i * step)
    }

    /// The `M` highest teacher layers: `g(m) = m + N − M`.
    pub fn top(m: usize, n: usize) -> Result<Self> {
        check_sizes(m, n)?;
        Self::from_interior(m, n, |i| i + n - m)
    }

    /// The `M` lowest teacher layers: `g(m) = m`.
    pub fn bottom(m: usize, n: usize) -> Result<Self> {
        check_sizes(m, n)?;
        Self::from_interior(m, n, |i| i)
    }

    /// An explicit table, validated like the built-in strategies.
    pub fn custom(m: usize, n: usize, table: Vec<usize>) -> Result<Self> {
        let mapping = LayerMapping {
            student_layers: m,
            teacher_layers: n,
            table,
        };
        mapping.validate()?;
        Ok(mapping)
    }

    /// Checks endpoints, range and strict monotonicity of the interior.
    pub fn validate(&self) -> Result<()> {
        let (m, n, t) = (self.student_layers, self.teacher_layers, &self.table);
        if t.len() != m + 2 {
            return Err(Error::Mapping(format!(
                "table has {} entries, expected M + 2 = {}",
                t.len(),
                m + 2
            )));
        }
        if t[0] != 0 {
            return Err(Error::Mapping(format!(
                "embedding endpoint must map to 0, got g(0) = {}",
                t[0]
            )));
        }
        if t[m + 1] != n + 1 {
            return Err(Error::Mapping(format!(
                "prediction endpoint must map to N + 1 = {}, got g({}) = {}",
                n + 1,
                m + 1,
                t[m + 1]
            )));
        }
        for i in 1..=m {
            if !(1..=n).contains(&t[i]) {
                return Err(Error::Mapping(format!(
                    "g({i}) = {} outside teacher layers 1..={n}",
                    t[i]
                )));
            }
            if i > 1 && t[i] <= t[i - 1] {
                return Err(Error::Mapping(format!(
                    "interior not strictly increasing: g({}) = {} >= g({i}) = {}",
                    i - 1,
                    t[i - 1],
                    t[i]
                )));
            }
        }
        Ok(())
    }

    pub fn student_layers(&self) -> usize {
        self.student_layers
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    /// `g(m)`
    pub fn target(&self, m: usize) -> Option<usize> {
        self.table.get(m).copied()
    }
}
