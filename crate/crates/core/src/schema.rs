//! Variable schema: names, units, and the target/covariate split that every
//! weight computation keys off.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarRole {
    Target,
    Covariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: VarRole,
    #[serde(default)]
    pub unit: String,
}

impl Variable {
    pub fn target(name: &str, unit: &str) -> Self {
        Variable {
            name: name.to_string(),
            role: VarRole::Target,
            unit: unit.to_string(),
        }
    }

    pub fn covariate(name: &str, unit: &str) -> Self {
        Variable {
            name: name.to_string(),
            role: VarRole::Covariate,
            unit: unit.to_string(),
        }
    }
}

/// Ordered variable list with exactly one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct VariableSchema {
    variables: Vec<Variable>,
    target: usize,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    variables: Vec<Variable>,
}

impl TryFrom<SchemaRepr> for VariableSchema {
    type Error = Error;
    fn try_from(repr: SchemaRepr) -> Result<Self> {
        VariableSchema::new(repr.variables)
    }
}

impl From<VariableSchema> for SchemaRepr {
    fn from(s: VariableSchema) -> Self {
        SchemaRepr {
            variables: s.variables,
        }
    }
}

impl VariableSchema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::InvalidSchema("no variables".into()));
        }
        let mut target = None;
        for (i, v) in variables.iter().enumerate() {
            if v.name.is_empty() {
                return Err(Error::InvalidSchema(format!("variable {i} has empty name")));
            }
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate variable name {:?}",
                    v.name
                )));
            }
            if v.role == VarRole::Target {
                if target.is_some() {
                    return Err(Error::InvalidSchema("more than one target variable".into()));
                }
                target = Some(i);
            }
        }
        let target =
            target.ok_or_else(|| Error::InvalidSchema("no target variable".into()))?;
        Ok(VariableSchema { variables, target })
    }

    #[inline]
    pub fn var_count(&self) -> usize {
        self.variables.len()
    }

    #[inline]
    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.variables.len())
            .filter(|&i| i != self.target)
            .collect()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }
}
