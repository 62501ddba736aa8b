//! Compilation of covariance terms to reverse-Polish programs.
//!
//! Each random-effect term is bound to the data once: its variables are
//! collected into a table of unique value combinations, sorted by grouping
//! variables first, and the product of covariance functions becomes a flat
//! instruction stream that evaluates one entry of `D` for a pair of table
//! rows and a parameter vector.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::ops::Range;

use serde::Serialize;

use crate::data::DataFrame;
use crate::error::{GlmmError, Result};
use crate::formula::{CovFn, ParamDomain, RandomTerm};
use crate::special::{bessel_k, gamma};

/// Bumped whenever the meaning of an opcode changes.
pub const OPCODE_VERSION: u32 = 1;

const STACK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Op {
    /// Value of table variable `var` on row `side`.
    PushData { var: usize, side: Side },
    /// `theta[k]`.
    PushParam(usize),
    PushConst(f64),
    Add,
    Mul,
    Div,
    Neg,
    /// `a^b` with `b` on top.
    Pow,
    Exp,
    Sqrt,
    Sin,
    Cos,
    AbsDiff,
    /// Square root of the sum of squares of the top `d` values.
    EuclidFold(usize),
    /// 1 if the top value is exactly zero, else 0.
    IsZero,
    /// 1 if the top value is below one, else 0.
    BelowOne,
    /// `min(x, 1)`.
    ClampUnit,
    /// `K_nu(x)` with `x` on top of `nu`.
    BesselK,
    /// `x^nu K_nu(x)` extended continuously to `x = 0`.
    BesselKScaled,
    GammaFn,
    /// `sin(x)/x`, 1 at zero.
    Sinc,
    /// `(1 - cos(x))/x`, 0 at zero.
    Cosc,
}

impl Op {
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::PushData { .. } | Op::PushParam(_) | Op::PushConst(_) => (0, 1),
            Op::Add | Op::Mul | Op::Div | Op::Pow | Op::AbsDiff | Op::BesselK | Op::BesselKScaled => {
                (2, 1)
            }
            Op::EuclidFold(d) => (*d, 1),
            _ => (1, 1),
        }
    }
}

/// Stateless emitter for one function call.
struct Emitter<'a> {
    ops: &'a mut Vec<Op>,
    vars: &'a [usize],
    range: Option<f64>,
}

impl Emitter<'_> {
    fn push(&mut self, op: Op) -> &mut Self {
        self.ops.push(op);
        self
    }

    fn c(&mut self, x: f64) -> &mut Self {
        self.push(Op::PushConst(x))
    }

    fn p(&mut self, k: usize) -> &mut Self {
        self.push(Op::PushParam(k))
    }

    fn dist(&mut self) -> &mut Self {
        for &v in self.vars {
            self.ops.push(Op::PushData { var: v, side: Side::A });
            self.ops.push(Op::PushData { var: v, side: Side::B });
            self.ops.push(Op::AbsDiff);
        }
        if self.vars.len() > 1 {
            self.ops.push(Op::EuclidFold(self.vars.len()));
        }
        self
    }

    fn scaled(&mut self) -> &mut Self {
        self.dist();
        if let Some(r) = self.range {
            self.c(r).push(Op::Div);
        }
        self
    }

    /// Scaled distance clamped to the unit interval.
    fn y(&mut self) -> &mut Self {
        self.scaled().push(Op::ClampUnit)
    }

    /// `1 - y`.
    fn one_minus_y(&mut self) -> &mut Self {
        self.c(1.0).y().push(Op::Neg).push(Op::Add)
    }

    /// Multiplies by the support indicator.
    fn support(&mut self) -> &mut Self {
        self.scaled().push(Op::BelowOne).push(Op::Mul)
    }

    /// `2^(1-nu) / Gamma(nu)`.
    fn matern_norm(&mut self, nu: usize) -> &mut Self {
        self.c(2.0)
            .c(1.0)
            .p(nu)
            .push(Op::Neg)
            .push(Op::Add)
            .push(Op::Pow)
            .p(nu)
            .push(Op::GammaFn)
            .push(Op::Div)
    }

    fn emit(&mut self, f: CovFn, p: &[usize]) {
        use Op::*;
        match f {
            CovFn::Gr => {
                self.p(p[0]).p(p[0]).push(Mul).dist().push(IsZero).push(Mul);
            }
            CovFn::Fexp => {
                self.p(p[0]).dist().p(p[1]).push(Div).push(Neg).push(Exp).push(Mul);
            }
            CovFn::Fexp0 => {
                self.dist().p(p[0]).push(Div).push(Neg).push(Exp);
            }
            CovFn::Sqexp => {
                self.p(p[0]).dist().p(p[1]).push(Div).c(2.0).push(Pow);
                self.push(Neg).push(Exp).push(Mul);
            }
            CovFn::Sqexp0 => {
                self.dist().p(p[0]).push(Div).c(2.0).push(Pow).push(Neg).push(Exp);
            }
            CovFn::Ar1 => {
                self.p(p[0]).dist().push(Pow);
            }
            CovFn::Bessel => {
                self.p(p[0]).dist().push(BesselK);
            }
            CovFn::Matern => {
                self.matern_norm(p[0]);
                self.p(p[0]);
                self.c(2.0).p(p[0]).push(Mul).push(Sqrt).dist().push(Mul).p(p[1]).push(Div);
                self.push(BesselKScaled).push(Mul);
            }
            CovFn::Wend0 => {
                self.p(p[0]).one_minus_y().p(p[1]).push(Pow).push(Mul).support();
            }
            CovFn::Wend1 => {
                self.p(p[0]);
                self.c(1.0).p(p[1]).c(1.0).push(Add).y().push(Mul).push(Add);
                self.push(Mul);
                self.one_minus_y().p(p[1]).c(1.0).push(Add).push(Pow).push(Mul);
                self.support();
            }
            CovFn::Wend2 => {
                self.p(p[0]);
                self.c(1.0).p(p[1]).c(2.0).push(Add).y().push(Mul).push(Add);
                self.c(1.0 / 3.0).p(p[1]).c(2.0).push(Add).c(2.0).push(Pow);
                self.c(1.0).push(Neg).push(Add).push(Mul);
                self.y().c(2.0).push(Pow).push(Mul).push(Add);
                self.push(Mul);
                self.one_minus_y().p(p[1]).c(2.0).push(Add).push(Pow).push(Mul);
                self.support();
            }
            CovFn::Prodwm => {
                self.p(p[0]).matern_norm(p[1]).push(Mul);
                self.p(p[1]).y().push(BesselKScaled).push(Mul);
                self.c(1.0).c(5.5).y().push(Mul).push(Add);
                self.c(117.0 / 12.0).y().c(2.0).push(Pow).push(Mul).push(Add);
                self.push(Mul);
                self.one_minus_y().c(5.5).push(Pow).push(Mul).support();
            }
            CovFn::Prodcb => {
                self.p(p[0]);
                self.c(1.0).y().p(p[1]).push(Pow).push(Add).c(-3.0).push(Pow).push(Mul);
                self.one_minus_y().c(PI).y().push(Mul).push(Cos).push(Mul);
                self.c(PI).y().push(Mul).push(Sin).c(1.0 / PI).push(Mul).push(Add);
                self.push(Mul).support();
            }
            CovFn::Prodek => {
                self.p(p[0]);
                self.y().p(p[1]).push(Pow).push(Neg).push(Exp).push(Mul);
                self.one_minus_y().c(2.0 * PI).y().push(Mul).push(Sinc).push(Mul);
                self.c(2.0 * PI).y().push(Mul).push(Cosc).c(1.0 / PI).push(Mul).push(Add);
                self.push(Mul).support();
            }
        }
    }
}

/// One function of a compiled product with its global parameter indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompiledFunction {
    pub function: CovFn,
    pub vars: Vec<usize>,
    pub params: Vec<usize>,
}

/// A compiled random-effect term bound to a data table.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceBlockProgram {
    pub label: String,
    pub instructions: Vec<Op>,
    /// Indices into the global parameter vector, in formula order.
    pub param_indices: Vec<usize>,
    pub functions: Vec<CompiledFunction>,
    pub variables: Vec<String>,
    pub slope: Option<String>,
    /// Whether the product contains `gr`.
    pub has_group: bool,
    pub effective_range: Option<f64>,
    /// Unique variable combinations, row-major with `variables.len()` columns.
    #[serde(skip)]
    pub table: Vec<f64>,
    /// Contiguous ranges of `table` rows sharing the grouping variables.
    #[serde(skip)]
    pub blocks: Vec<Range<usize>>,
    /// Table row for each data row.
    #[serde(skip)]
    pub row_index: Vec<usize>,
    /// Slope multiplier for each data row.
    #[serde(skip)]
    pub slope_values: Vec<f64>,
    #[serde(skip)]
    numeric: Vec<bool>,
    #[serde(skip)]
    levels: Vec<Option<Vec<String>>>,
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl CovarianceBlockProgram {
    pub fn n_params(&self) -> usize {
        self.param_indices.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Number of unique variable combinations, i.e. columns of `Z` for the term.
    pub fn n_levels(&self) -> usize {
        self.table.len() / self.n_vars().max(1)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.n_vars();
        &self.table[k * d..(k + 1) * d]
    }

    /// Checks every parameter against the domain of the function it feeds.
    pub fn validate(&self, theta: &[f64]) -> Result<()> {
        for f in &self.functions {
            for (&k, dom) in f.params.iter().zip(f.function.domains(f.vars.len())) {
                let value = *theta.get(k).ok_or_else(|| {
                    GlmmError::Dimension(format!(
                        "parameter index {k} out of range for vector of length {}",
                        theta.len()
                    ))
                })?;
                if !value.is_finite() || !dom.contains(value) {
                    return Err(GlmmError::ParameterRange {
                        index: k,
                        value,
                        function: f.function.name().into(),
                        range: dom.describe(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Domains of this term's parameters, aligned with `param_indices`.
    pub fn domains(&self) -> Vec<ParamDomain> {
        self.functions
            .iter()
            .flat_map(|f| f.function.domains(f.vars.len()))
            .collect()
    }

    /// Runs the program on two explicit variable rows.
    pub fn eval_rows(&self, a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
        let mut st = [0.0f64; STACK];
        let mut sp = 0usize;
        for op in &self.instructions {
            match *op {
                Op::PushData { var, side } => {
                    st[sp] = if side == Side::A { a[var] } else { b[var] };
                    sp += 1;
                }
                Op::PushParam(k) => {
                    st[sp] = theta[k];
                    sp += 1;
                }
                Op::PushConst(c) => {
                    st[sp] = c;
                    sp += 1;
                }
                Op::EuclidFold(d) => {
                    let s: f64 = st[sp - d..sp].iter().map(|x| x * x).sum();
                    sp -= d;
                    st[sp] = s.sqrt();
                    sp += 1;
                }
                Op::Add | Op::Mul | Op::Div | Op::Pow | Op::AbsDiff | Op::BesselK
                | Op::BesselKScaled => {
                    let y = st[sp - 1];
                    let x = st[sp - 2];
                    sp -= 1;
                    st[sp - 1] = match *op {
                        Op::Add => x + y,
                        Op::Mul => x * y,
                        Op::Div => x / y,
                        Op::Pow => x.powf(y),
                        Op::AbsDiff => (x - y).abs(),
                        Op::BesselK => bessel_k(x, y),
                        _ => {
                            if y == 0.0 {
                                2f64.powf(x - 1.0) * gamma(x)
                            } else {
                                y.powf(x) * bessel_k(x, y)
                            }
                        }
                    };
                }
                _ => {
                    let x = st[sp - 1];
                    st[sp - 1] = match *op {
                        Op::Neg => -x,
                        Op::Exp => x.exp(),
                        Op::Sqrt => x.sqrt(),
                        Op::Sin => x.sin(),
                        Op::Cos => x.cos(),
                        Op::IsZero => f64::from(x == 0.0),
                        Op::BelowOne => f64::from(x < 1.0),
                        Op::ClampUnit => x.min(1.0),
                        Op::GammaFn => gamma(x),
                        Op::Sinc => {
                            if x == 0.0 {
                                1.0
                            } else {
                                x.sin() / x
                            }
                        }
                        Op::Cosc => {
                            if x == 0.0 {
                                0.0
                            } else {
                                let s = (0.5 * x).sin();
                                2.0 * s * s / x
                            }
                        }
                        _ => unreachable!("binary and push opcodes handled above"),
                    };
                }
            }
        }
        debug_assert_eq!(sp, 1);
        st[0]
    }

    /// `D` entry for table rows `i` and `j`.
    pub fn eval(&self, i: usize, j: usize, theta: &[f64]) -> f64 {
        self.eval_rows(self.row(i), self.row(j), theta)
    }

    /// Encodes the term's variables for the rows of another table, using the
    /// level codes of the bound data for text variables. Unknown text levels
    /// get fresh codes so that they never compare equal to a known level.
    pub fn encode_rows(&self, data: &DataFrame) -> Result<Vec<Vec<f64>>> {
        let n = data.nrows();
        let mut out = vec![vec![0.0; self.n_vars()]; n];
        for (v, name) in self.variables.iter().enumerate() {
            match (&self.levels[v], data.column(name)?) {
                (None, crate::data::Column::Numeric(x)) => {
                    for (row, val) in out.iter_mut().zip(x) {
                        row[v] = *val;
                    }
                }
                (Some(labels), col) => {
                    for (i, row) in out.iter_mut().enumerate() {
                        let cell = match col {
                            crate::data::Column::Numeric(x) => crate::data::format_number(x[i]),
                            crate::data::Column::Text(s) => s[i].clone(),
                        };
                        row[v] = labels
                            .iter()
                            .position(|l| *l == cell)
                            .unwrap_or(labels.len() + i) as f64;
                    }
                }
                (None, _) => {
                    return Err(GlmmError::Data(format!(
                        "variable `{name}` must be numeric in new data"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn is_numeric(&self, var: usize) -> bool {
        self.numeric[var]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("program serialises")
    }
}

fn max_depth(ops: &[Op]) -> Option<(usize, usize)> {
    let mut depth = 0usize;
    let mut max = 0usize;
    for op in ops {
        let (pop, push) = op.arity();
        depth = depth.checked_sub(pop)? + push;
        max = max.max(depth);
    }
    Some((depth, max))
}

/// Compiles one random term against `data`. Parameters are numbered from
/// `param_offset` in the order the functions are written.
pub fn compile_term(
    term: &RandomTerm,
    data: &DataFrame,
    param_offset: usize,
    effective_range: Option<f64>,
) -> Result<CovarianceBlockProgram> {
    let label = term.to_string();
    let scales = term.functions.iter().filter(|f| f.function.has_scale()).count();
    if scales > 1 {
        return Err(GlmmError::Unidentifiable(label));
    }
    if let Some(r) = effective_range {
        if !(r > 0.0 && r.is_finite()) {
            return Err(GlmmError::InvalidArgument(format!(
                "effective range must be positive, got {r}"
            )));
        }
    }

    let mut variables: Vec<String> = Vec::new();
    for call in &term.functions {
        for v in &call.vars {
            if !variables.contains(v) {
                variables.push(v.clone());
            }
        }
    }
    let mut columns = Vec::with_capacity(variables.len());
    let mut numeric = Vec::with_capacity(variables.len());
    let mut levels = Vec::with_capacity(variables.len());
    for v in &variables {
        let (vals, is_num) = data.encoded(v)?;
        columns.push(vals);
        numeric.push(is_num);
        levels.push(if is_num { None } else { Some(data.levels(v)?.labels) });
    }

    let mut functions = Vec::new();
    let mut instructions = Vec::new();
    let mut k = param_offset;
    for (pos, call) in term.functions.iter().enumerate() {
        let f = call.function;
        let vars: Vec<usize> = call
            .vars
            .iter()
            .map(|v| variables.iter().position(|x| x == v).expect("collected above"))
            .collect();
        if f != CovFn::Gr {
            if let Some(&bad) = vars.iter().find(|&&v| !numeric[v]) {
                return Err(GlmmError::NonNumericVariable {
                    var: variables[bad].clone(),
                    function: f.name().into(),
                });
            }
        }
        if let Some(max) = f.max_dims() {
            if vars.len() > max {
                return Err(GlmmError::DimensionLimit {
                    function: f.name().into(),
                    max,
                    got: vars.len(),
                });
            }
        }
        let params: Vec<usize> = (k..k + f.n_params()).collect();
        k += f.n_params();
        let range = if f.is_compact() { effective_range } else { None };
        Emitter {
            ops: &mut instructions,
            vars: &vars,
            range,
        }
        .emit(f, &params);
        if pos > 0 {
            instructions.push(Op::Mul);
        }
        functions.push(CompiledFunction {
            function: f,
            vars,
            params,
        });
    }
    match max_depth(&instructions) {
        Some((1, max)) if max <= STACK => {}
        other => {
            return Err(GlmmError::MalformedTerm(format!(
                "program for {label} is unbalanced: {other:?}"
            )))
        }
    }

    // Grouping variables are the arguments of `gr`; rows sort by them first.
    let group_vars: Vec<usize> = functions
        .iter()
        .filter(|f| f.function == CovFn::Gr)
        .flat_map(|f| f.vars.iter().copied())
        .fold(Vec::new(), |mut acc, v| {
            if !acc.contains(&v) {
                acc.push(v);
            }
            acc
        });
    let has_group = !group_vars.is_empty();
    let mut order: Vec<usize> = group_vars.clone();
    order.extend((0..variables.len()).filter(|v| !group_vars.contains(v)));

    let n = data.nrows();
    let d = variables.len();
    let key = |i: usize| -> Vec<f64> { order.iter().map(|&v| columns[v][i]).collect() };
    let mut keys: Vec<Vec<f64>> = (0..n).map(key).collect();
    let mut uniq: Vec<Vec<f64>> = keys.clone();
    uniq.sort_by(|a, b| cmp_rows(a, b));
    uniq.dedup_by(|a, b| cmp_rows(a, b).is_eq());
    let row_index: Vec<usize> = keys
        .drain(..)
        .map(|k| uniq.binary_search_by(|u| cmp_rows(u, &k)).expect("present"))
        .collect();

    let g = group_vars.len();
    let mut blocks = Vec::new();
    let mut start = 0;
    for r in 1..uniq.len() {
        if has_group && cmp_rows(&uniq[r][..g], &uniq[r - 1][..g]).is_ne() {
            blocks.push(start..r);
            start = r;
        }
    }
    if !uniq.is_empty() {
        blocks.push(start..uniq.len());
    }

    // Back from sort order to variable order.
    let mut table = vec![0.0; uniq.len() * d];
    for (r, u) in uniq.iter().enumerate() {
        for (pos, &v) in order.iter().enumerate() {
            table[r * d + v] = u[pos];
        }
    }

    let slope_values = match &term.slope {
        Some(z) => data.numeric(z)?.to_vec(),
        None => vec![1.0; n],
    };

    Ok(CovarianceBlockProgram {
        label,
        instructions,
        param_indices: (param_offset..k).collect(),
        functions,
        variables,
        slope: term.slope.clone(),
        has_group,
        effective_range,
        table,
        blocks,
        row_index,
        slope_values,
        numeric,
        levels,
    })
}
