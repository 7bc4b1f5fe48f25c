//! Per-sub-program training tables.

use crate::patient_model::SubProgramId;
use crate::subprograms::{check_support, Outcome, SubProgramError, SubProgramSpec};

/// Rows `(x, y)` for one sub-program, with `x` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTable {
    pub id: SubProgramId,
    pub dim: usize,
    xs: Vec<f64>,
    ys: Vec<Outcome>,
}

impl TrainingTable {
    pub fn new(id: SubProgramId) -> Self {
        Self::with_dim(id, id.input_dim())
    }

    /// A table whose rows need not follow the registry layout.
    pub fn with_dim(id: SubProgramId, dim: usize) -> Self {
        Self {
            id,
            dim,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn push(&mut self, x: &[f64], y: Outcome) {
        assert_eq!(x.len(), self.dim, "{}: row width", self.id);
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> Outcome {
        self.ys[i]
    }

    pub fn ys(&self) -> &[Outcome] {
        &self.ys
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], Outcome)> + '_ {
        (0..self.len()).map(move |i| (self.x(i), self.ys[i]))
    }

    /// Check row widths and outcome support against `spec`.
    pub fn validate(&self, spec: &SubProgramSpec) -> Result<(), SubProgramError> {
        if self.dim != spec.input_dim {
            return Err(SubProgramError::Dimension {
                subprogram: spec.name.name(),
                expected: spec.input_dim,
                got: self.dim,
            });
        }
        self.ys.iter().try_for_each(|&y| check_support(spec, y))
    }
}

/// One table per sub-program, indexed by [`SubProgramId`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTables {
    tables: Vec<TrainingTable>,
}

impl Default for TrainingTables {
    fn default() -> Self {
        Self::new()
    }
}

impl TrainingTables {
    pub fn new() -> Self {
        Self {
            tables: SubProgramId::ALL.iter().map(|&id| TrainingTable::new(id)).collect(),
        }
    }

    pub fn get(&self, id: SubProgramId) -> &TrainingTable {
        &self.tables[id.index()]
    }

    pub fn get_mut(&mut self, id: SubProgramId) -> &mut TrainingTable {
        &mut self.tables[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingTable> {
        self.tables.iter()
    }

    pub fn into_vec(self) -> Vec<TrainingTable> {
        self.tables
    }
}
