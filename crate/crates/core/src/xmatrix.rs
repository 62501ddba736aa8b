//! Fixed-effects design matrix.

use nalgebra::DMatrix;

use crate::data::{format_number, Column, DataFrame};
use crate::error::{GlmmError, Result};
use crate::formula::{FixedTerm, ModelFormula};

#[derive(Debug, Clone, PartialEq)]
enum XColumn {
    Intercept,
    Covariate(String),
    Indicator { var: String, label: String },
}

/// Column recipe of `X`, reusable on new data.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLayout {
    columns: Vec<XColumn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedDesignMatrix {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub layout: FixedLayout,
}

impl FixedDesignMatrix {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

fn cell_label(col: &Column, i: usize) -> String {
    match col {
        Column::Numeric(v) => format_number(v[i]),
        Column::Text(v) => v[i].clone(),
    }
}

pub fn build_x(formula: &ModelFormula, data: &DataFrame) -> Result<FixedDesignMatrix> {
    let mut columns = Vec::new();
    let mut names = Vec::new();
    if formula.intercept {
        columns.push(XColumn::Intercept);
        names.push("(Intercept)".to_string());
    }
    let mut full_rank_factor_used = formula.intercept;
    for term in &formula.fixed {
        match term {
            FixedTerm::Covariate(name) => {
                data.numeric(name).map_err(|e| match e {
                    GlmmError::MissingVariable(v) => GlmmError::MissingVariable(v),
                    _ => GlmmError::Data(format!(
                        "covariate `{name}` is not numeric; wrap it in factor()"
                    )),
                })?;
                columns.push(XColumn::Covariate(name.clone()));
                names.push(name.clone());
            }
            FixedTerm::Factor(name) => {
                let levels = data.levels(name)?;
                let skip = usize::from(full_rank_factor_used);
                if levels.labels.len() <= skip {
                    return Err(GlmmError::DegenerateFactor(name.clone()));
                }
                full_rank_factor_used = true;
                for label in &levels.labels[skip..] {
                    names.push(format!("factor({name}){label}"));
                    columns.push(XColumn::Indicator {
                        var: name.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
    }
    let layout = FixedLayout { columns };
    let x = layout.apply(data)?;
    Ok(FixedDesignMatrix { x, names, layout })
}

impl FixedLayout {
    /// Builds `X` for any table that carries the same variables. Factor
    /// levels absent from the original data map to all-zero indicators.
    pub fn apply(&self, data: &DataFrame) -> Result<DMatrix<f64>> {
        let n = data.nrows();
        let mut x = DMatrix::zeros(n, self.columns.len());
        for (c, col) in self.columns.iter().enumerate() {
            match col {
                XColumn::Intercept => x.column_mut(c).fill(1.0),
                XColumn::Covariate(name) => {
                    for (i, v) in data.numeric(name)?.iter().enumerate() {
                        x[(i, c)] = *v;
                    }
                }
                XColumn::Indicator { var, label } => {
                    let column = data.column(var)?;
                    for i in 0..n {
                        if cell_label(column, i) == *label {
                            x[(i, c)] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(x)
    }
}
