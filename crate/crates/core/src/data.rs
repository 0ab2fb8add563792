use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EmulationError, Result};

/// Paired simulator runs: `n` input rows of dimension `m` and `n` response rows of
/// dimension `k` (usually `k = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    responses: DMatrix<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, responses: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != responses.nrows() {
            return Err(EmulationError::InvalidInput(format!(
                "{} input rows but {} response rows",
                inputs.nrows(),
                responses.nrows()
            )));
        }
        if inputs.nrows() == 0 || inputs.ncols() == 0 || responses.ncols() == 0 {
            return Err(EmulationError::InvalidInput("empty dataset".into()));
        }
        if inputs.iter().chain(responses.iter()).any(|v| !v.is_finite()) {
            return Err(EmulationError::InvalidInput(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self { inputs, responses })
    }

    /// Dataset with a scalar response.
    pub fn scalar(inputs: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(inputs, DMatrix::from_column_slice(n, 1, y.as_slice()))
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn response_dim(&self) -> usize {
        self.responses.ncols()
    }

    /// First response column.
    pub fn response(&self) -> DVector<f64> {
        self.responses.column(0).into_owned()
    }

    /// Scalar response, or an error when the response is multivariate.
    pub fn scalar_response(&self) -> Result<DVector<f64>> {
        if self.response_dim() != 1 {
            return Err(EmulationError::InvalidInput(format!(
                "expected a scalar response, found {} columns",
                self.response_dim()
            )));
        }
        Ok(self.response())
    }

    /// Rows selected by `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            responses: self.responses.select_rows(indices),
        }
    }

    /// Response augmented with the given input columns (treated as extra outputs).
    pub fn with_inputs_as_responses(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.iter().any(|&c| c >= self.input_dim()) {
            return Err(EmulationError::InvalidInput(
                "retained input index out of range".into(),
            ));
        }
        let extra = self.inputs.select_columns(columns);
        let k = self.response_dim();
        let mut responses = DMatrix::zeros(self.len(), k + columns.len());
        responses.columns_mut(0, k).copy_from(&self.responses);
        responses.columns_mut(k, columns.len()).copy_from(&extra);
        Dataset::new(self.inputs.clone(), responses)
    }
}
