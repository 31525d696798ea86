//! Raw multivariate series containers. Missing observations are `NaN`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// One multivariate entity: `values[v][t]`, variate-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EntitySeries {
    pub id: String,
    pub values: Vec<Vec<f64>>,
    pub frequency: String,
}

impl EntitySeries {
    pub fn new(id: impl Into<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            values,
            frequency: String::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_frequency(mut self, freq: impl Into<String>) -> Self {
        self.frequency = freq.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.values.first() else {
            return Err(Error::Input(alloc::format!("entity {:?} has no variates", self.id)));
        };
        for v in &self.values {
            if v.len() != first.len() {
                return Err(Error::LengthMismatch {
                    left: first.len(),
                    right: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn variates(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the time range `[start, end)` for the given variates.
    pub fn slice(&self, variates: &[usize], start: usize, end: usize) -> Vec<Vec<f64>> {
        variates
            .iter()
            .map(|&v| self.values[v][start..end].to_vec())
            .collect()
    }

    /// A single variate as its own one-variate entity.
    pub fn variate_entity(&self, v: usize) -> EntitySeries {
        EntitySeries {
            id: alloc::format!("{}#{v}", self.id),
            values: alloc::vec![self.values[v].clone()],
            frequency: self.frequency.clone(),
        }
    }
}
