//! Column-oriented data tables, CSV ingestion and a few helpers used when
//! binding formulas to data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{GlmmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Column::Numeric(_))
    }

    fn cell_string(&self, i: usize) -> String {
        match self {
            Column::Numeric(v) => format_number(v[i]),
            Column::Text(v) => v[i].clone(),
        }
    }
}

/// Formats a float the way the CSV writer does: integral values without a
/// fractional part, everything else with the shortest round-trip repr.
pub fn format_number(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Sorted distinct levels of a column: numeric ascending, then lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels {
    pub labels: Vec<String>,
    /// Level index (0-based) for each row.
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataFrame {
    names: Vec<String>,
    columns: Vec<Column>,
    nrows: usize,
}

impl DataFrame {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push_column(&mut self, name: &str, column: Column) -> Result<()> {
        if self.columns.is_empty() {
            self.nrows = column.len();
        } else if column.len() != self.nrows {
            return Err(GlmmError::Dimension(format!(
                "column `{name}` has {} rows, table has {}",
                column.len(),
                self.nrows
            )));
        }
        if let Some(idx) = self.index_of(name) {
            self.columns[idx] = column;
        } else {
            self.names.push(name.to_string());
            self.columns.push(column);
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.index_of(name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| GlmmError::MissingVariable(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Text(_) => Err(GlmmError::Data(format!("column `{name}` is not numeric"))),
        }
    }

    pub fn levels(&self, name: &str) -> Result<Levels> {
        let col = self.column(name)?;
        Ok(match col {
            Column::Numeric(v) => {
                let mut uniq: Vec<f64> = v.clone();
                uniq.sort_by(|a, b| a.total_cmp(b));
                uniq.dedup();
                let codes = v
                    .iter()
                    .map(|x| uniq.binary_search_by(|u| u.total_cmp(x)).unwrap())
                    .collect();
                Levels {
                    labels: uniq.into_iter().map(format_number).collect(),
                    codes,
                }
            }
            Column::Text(v) => {
                let mut uniq: Vec<&String> = v.iter().collect();
                uniq.sort_by(|a, b| text_level_order(a, b));
                uniq.dedup();
                let index: BTreeMap<&str, usize> =
                    uniq.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
                let codes = v.iter().map(|s| index[s.as_str()]).collect();
                Levels {
                    labels: uniq.into_iter().cloned().collect(),
                    codes,
                }
            }
        })
    }

    /// Value used for distance and equality computations: the number itself
    /// for numeric columns, the level code for text columns.
    pub fn encoded(&self, name: &str) -> Result<(Vec<f64>, bool)> {
        match self.column(name)? {
            Column::Numeric(v) => Ok((v.clone(), true)),
            Column::Text(_) => {
                let lv = self.levels(name)?;
                Ok((lv.codes.iter().map(|&c| c as f64).collect(), false))
            }
        }
    }

    /// Rows selected by index, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> DataFrame {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
                Column::Text(v) => Column::Text(rows.iter().map(|&r| v[r].clone()).collect()),
            })
            .collect();
        DataFrame {
            names: self.names.clone(),
            columns,
            nrows: rows.len(),
        }
    }

    /// Parses CSV text with a mandatory header row. A column whose every cell
    /// parses as a float is numeric; anything else is kept as text.
    pub fn from_csv_str(text: &str) -> Result<DataFrame> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| GlmmError::Data("empty CSV input".into()))?;
        let names: Vec<String> = header.split(',').map(|s| unquote(s.trim())).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(GlmmError::Data("empty column name in CSV header".into()));
        }
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        for (lineno, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != names.len() {
                return Err(GlmmError::Data(format!(
                    "CSV line {} has {} fields, expected {}",
                    lineno + 2,
                    parts.len(),
                    names.len()
                )));
            }
            for (c, p) in parts.iter().enumerate() {
                cells[c].push(unquote(p.trim()));
            }
        }
        let mut df = DataFrame::new();
        for (name, col) in names.iter().zip(cells) {
            let parsed: Option<Vec<f64>> = col.iter().map(|s| s.parse::<f64>().ok()).collect();
            let column = match parsed {
                Some(v) => Column::Numeric(v),
                None => Column::Text(col),
            };
            df.push_column(name, column)?;
        }
        Ok(df)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for i in 0..self.nrows {
            for (c, col) in self.columns.iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", col.cell_string(i));
            }
            out.push('\n');
        }
        out
    }

    /// Adds a 0/1 column from a comparison expression such as `t > cl` or
    /// `cl <= 5`. Operands are column names or numeric literals.
    pub fn derive_comparison(&mut self, name: &str, expr: &str) -> Result<()> {
        const OPS: [&str; 6] = [">=", "<=", "==", "!=", ">", "<"];
        let (op, pos) = OPS
            .iter()
            .find_map(|op| expr.find(op).map(|p| (*op, p)))
            .ok_or_else(|| GlmmError::Data(format!("no comparison operator in `{expr}`")))?;
        let lhs = self.operand(expr[..pos].trim())?;
        let rhs = self.operand(expr[pos + op.len()..].trim())?;
        let out: Vec<f64> = (0..self.nrows)
            .map(|i| {
                let (a, b) = (lhs(i), rhs(i));
                let hit = match op {
                    ">=" => a >= b,
                    "<=" => a <= b,
                    "==" => a == b,
                    "!=" => a != b,
                    ">" => a > b,
                    _ => a < b,
                };
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        drop((lhs, rhs));
        self.push_column(name, Column::Numeric(out))
    }

    fn operand(&self, token: &str) -> Result<Box<dyn Fn(usize) -> f64 + '_>> {
        if let Ok(x) = token.parse::<f64>() {
            return Ok(Box::new(move |_| x));
        }
        let v = self.numeric(token)?;
        Ok(Box::new(move |i| v[i]))
    }
}

fn unquote(s: &str) -> String {
    s.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(s)
        .to_string()
}

fn text_level_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_types() {
        let df = DataFrame::from_csv_str("a,b\n1,x\n2.5,y\n").unwrap();
        assert!(df.column("a").unwrap().is_numeric());
        assert!(!df.column("b").unwrap().is_numeric());
        assert_eq!(df.to_csv_string(), "a,b\n1,x\n2.5,y\n");
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(DataFrame::from_csv_str("a,b\n1\n").is_err());
    }

    #[test]
    fn numeric_levels_sort_by_value() {
        let mut df = DataFrame::new();
        df.push_column("t", Column::Numeric(vec![10.0, 2.0, 10.0, 1.0]))
            .unwrap();
        let lv = df.levels("t").unwrap();
        assert_eq!(lv.labels, vec!["1", "2", "10"]);
        assert_eq!(lv.codes, vec![2, 1, 2, 0]);
    }

    #[test]
    fn text_levels_put_numbers_first() {
        let mut df = DataFrame::new();
        df.push_column(
            "g",
            Column::Text(vec!["b".into(), "10".into(), "a".into(), "9".into()]),
        )
        .unwrap();
        assert_eq!(df.levels("g").unwrap().labels, vec!["9", "10", "a", "b"]);
    }

    #[test]
    fn comparison_columns() {
        let mut df = DataFrame::new();
        df.push_column("t", Column::Numeric(vec![1.0, 2.0, 3.0])).unwrap();
        df.push_column("cl", Column::Numeric(vec![2.0, 2.0, 2.0])).unwrap();
        df.derive_comparison("int", "t > cl").unwrap();
        assert_eq!(df.numeric("int").unwrap(), &[0.0, 0.0, 1.0]);
        df.derive_comparison("early", "t <= 1").unwrap();
        assert_eq!(df.numeric("early").unwrap(), &[1.0, 0.0, 0.0]);
    }
}
