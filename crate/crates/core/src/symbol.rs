//! The symbol vector passed from perceptor to program.

use crate::error::{Error, Result};

/// Output of a perceptor / input of a program.
///
/// Continuous symbols are real vectors (cart-pole state estimates).
/// Categorical symbols carry their values in the task's own 1-based domains:
/// grid coordinates in `1..=5`, orientation in `1..=4` (N, E, S, W).
#[derive(Debug, Clone, PartialEq)]
pub enum SymbolVector {
    Continuous(Vec<f64>),
    Categorical(Vec<usize>),
}

impl SymbolVector {
    pub fn len(&self) -> usize {
        match self {
            SymbolVector::Continuous(v) => v.len(),
            SymbolVector::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_continuous(&self) -> Result<&[f64]> {
        match self {
            SymbolVector::Continuous(v) => Ok(v),
            SymbolVector::Categorical(_) => Err(Error::contract(
                "expected continuous symbols, found categorical",
            )),
        }
    }

    pub fn as_categorical(&self) -> Result<&[usize]> {
        match self {
            SymbolVector::Categorical(v) => Ok(v),
            SymbolVector::Continuous(_) => Err(Error::contract(
                "expected categorical symbols, found continuous",
            )),
        }
    }
}
