//! Model formulae: `~ fixed terms + (z | f(vars) * g(vars)) + ...`.

use std::fmt;

use serde::Serialize;

use crate::error::{GlmmError, Result};

/// Covariance functions available on the right of the bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CovFn {
    Gr,
    Fexp,
    Fexp0,
    Sqexp,
    Sqexp0,
    Ar1,
    Bessel,
    Matern,
    Wend0,
    Wend1,
    Wend2,
    Prodwm,
    Prodcb,
    Prodek,
}

/// Admissible values for one covariance parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ParamDomain {
    Positive,
    OpenUnit,
    AtLeast(f64),
    Closed(f64, f64),
}

impl ParamDomain {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            ParamDomain::Positive => x > 0.0,
            ParamDomain::OpenUnit => x > 0.0 && x < 1.0,
            ParamDomain::AtLeast(lo) => x >= lo,
            ParamDomain::Closed(lo, hi) => x >= lo && x <= hi,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            ParamDomain::Positive => "(0, inf)".into(),
            ParamDomain::OpenUnit => "(0, 1)".into(),
            ParamDomain::AtLeast(lo) => format!("[{lo}, inf)"),
            ParamDomain::Closed(lo, hi) => format!("[{lo}, {hi}]"),
        }
    }
}

impl CovFn {
    pub const ALL: [CovFn; 14] = [
        CovFn::Gr,
        CovFn::Fexp,
        CovFn::Fexp0,
        CovFn::Sqexp,
        CovFn::Sqexp0,
        CovFn::Ar1,
        CovFn::Bessel,
        CovFn::Matern,
        CovFn::Wend0,
        CovFn::Wend1,
        CovFn::Wend2,
        CovFn::Prodwm,
        CovFn::Prodcb,
        CovFn::Prodek,
    ];

    pub fn from_name(name: &str) -> Option<CovFn> {
        CovFn::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn name(&self) -> &'static str {
        match self {
            CovFn::Gr => "gr",
            CovFn::Fexp => "fexp",
            CovFn::Fexp0 => "fexp0",
            CovFn::Sqexp => "sqexp",
            CovFn::Sqexp0 => "sqexp0",
            CovFn::Ar1 => "ar1",
            CovFn::Bessel => "bessel",
            CovFn::Matern => "matern",
            CovFn::Wend0 => "wend0",
            CovFn::Wend1 => "wend1",
            CovFn::Wend2 => "wend2",
            CovFn::Prodwm => "prodwm",
            CovFn::Prodcb => "prodcb",
            CovFn::Prodek => "prodek",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            CovFn::Gr | CovFn::Fexp0 | CovFn::Sqexp0 | CovFn::Ar1 | CovFn::Bessel => 1,
            _ => 2,
        }
    }

    /// Whether the first parameter multiplies the whole function.
    pub fn has_scale(&self) -> bool {
        !matches!(
            self,
            CovFn::Fexp0 | CovFn::Sqexp0 | CovFn::Ar1 | CovFn::Bessel | CovFn::Matern
        )
    }

    pub fn is_compact(&self) -> bool {
        matches!(
            self,
            CovFn::Wend0
                | CovFn::Wend1
                | CovFn::Wend2
                | CovFn::Prodwm
                | CovFn::Prodcb
                | CovFn::Prodek
        )
    }

    /// Largest number of variables the function is valid for.
    pub fn max_dims(&self) -> Option<usize> {
        match self {
            CovFn::Prodwm => Some(2),
            CovFn::Prodcb => Some(1),
            CovFn::Prodek => Some(3),
            _ => None,
        }
    }

    pub fn domains(&self, dims: usize) -> Vec<ParamDomain> {
        use ParamDomain::*;
        let d = dims as f64;
        match self {
            CovFn::Gr | CovFn::Fexp0 | CovFn::Sqexp0 | CovFn::Bessel => vec![Positive],
            CovFn::Ar1 => vec![OpenUnit],
            CovFn::Fexp | CovFn::Sqexp | CovFn::Matern | CovFn::Prodwm | CovFn::Prodek => {
                vec![Positive, Positive]
            }
            CovFn::Wend0 => vec![Positive, AtLeast((d + 1.0) / 2.0)],
            CovFn::Wend1 => vec![Positive, AtLeast((d + 3.0) / 2.0)],
            CovFn::Wend2 => vec![Positive, AtLeast((d + 5.0) / 2.0)],
            CovFn::Prodcb => vec![Positive, Closed(0.0, 2.0)],
        }
    }
}

impl fmt::Display for CovFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionCall {
    pub function: CovFn,
    pub vars: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomTerm {
    /// Covariate on the left of the bar; `None` for a random intercept.
    pub slope: Option<String>,
    pub functions: Vec<FunctionCall>,
}

impl RandomTerm {
    pub fn n_params(&self) -> usize {
        self.functions.iter().map(|f| f.function.n_params()).sum()
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lhs = self.slope.as_deref().unwrap_or("1");
        let rhs: Vec<String> = self
            .functions
            .iter()
            .map(|c| format!("{}({})", c.function, c.vars.join(",")))
            .collect();
        write!(f, "({lhs}|{})", rhs.join("*"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FixedTerm {
    Covariate(String),
    Factor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelFormula {
    pub intercept: bool,
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
}

impl ModelFormula {
    /// Total number of covariance parameters, in formula order.
    pub fn n_cov_params(&self) -> usize {
        self.random.iter().map(RandomTerm::n_params).sum()
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits `text` on `seps` at parenthesis depth zero, keeping the separator
/// that preceded each piece.
fn split_top_level(text: &str, seps: &[char]) -> Result<Vec<(Option<char>, String, usize)>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    let mut sep = None;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(GlmmError::Syntax {
                        pos: i,
                        msg: "unbalanced `)`".into(),
                    });
                }
            }
            _ => {}
        }
        if depth == 0 && seps.contains(&c) {
            out.push((sep, std::mem::take(&mut current), start));
            sep = Some(c);
            start = i + 1;
        } else {
            current.push(c);
        }
    }
    if depth != 0 {
        return Err(GlmmError::Syntax {
            pos: text.len(),
            msg: "unbalanced `(`".into(),
        });
    }
    out.push((sep, current, start));
    Ok(out)
}

pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    let body = text.trim();
    let body = body.strip_prefix('~').unwrap_or(body);
    let mut formula = ModelFormula {
        intercept: true,
        fixed: Vec::new(),
        random: Vec::new(),
    };
    for (sign, piece, pos) in split_top_level(body, &['+', '-'])? {
        let piece = piece.trim();
        let negative = sign == Some('-');
        if piece.is_empty() {
            if sign.is_none() {
                continue;
            }
            return Err(GlmmError::Syntax {
                pos,
                msg: "empty term".into(),
            });
        }
        match piece {
            "1" => {
                formula.intercept = !negative;
                continue;
            }
            "0" if !negative => {
                formula.intercept = false;
                continue;
            }
            _ => {}
        }
        if negative {
            return Err(GlmmError::MalformedTerm(format!(
                "only the intercept can be removed, found `-{piece}`"
            )));
        }
        if piece.starts_with('(') && piece.ends_with(')') {
            formula.random.push(parse_random_term(&piece[1..piece.len() - 1])?);
        } else if let Some(inner) = piece
            .strip_prefix("factor(")
            .and_then(|s| s.strip_suffix(')'))
        {
            let inner = inner.trim();
            if !is_identifier(inner) {
                return Err(GlmmError::MalformedTerm(piece.to_string()));
            }
            formula.fixed.push(FixedTerm::Factor(inner.to_string()));
        } else if is_identifier(piece) {
            formula.fixed.push(FixedTerm::Covariate(piece.to_string()));
        } else {
            return Err(GlmmError::MalformedTerm(piece.to_string()));
        }
    }
    Ok(formula)
}

fn parse_random_term(body: &str) -> Result<RandomTerm> {
    let bars = body.matches('|').count();
    if bars == 0 {
        return Err(GlmmError::MalformedTerm(format!(
            "random term `({body})` has no `|`"
        )));
    }
    if bars > 1 {
        return Err(GlmmError::MalformedTerm(format!(
            "random term `({body})` has more than one `|`"
        )));
    }
    let (lhs, rhs) = body.split_once('|').expect("one bar");
    let lhs = lhs.trim();
    let slope = match lhs {
        "1" => None,
        s if is_identifier(s) => Some(s.to_string()),
        s => {
            return Err(GlmmError::MalformedTerm(format!(
                "left of `|` must be 1 or a covariate, found `{s}`"
            )))
        }
    };
    let mut functions = Vec::new();
    for (_, call, _) in split_top_level(rhs, &['*'])? {
        let call = call.trim();
        let open = call
            .find('(')
            .filter(|_| call.ends_with(')'))
            .ok_or_else(|| GlmmError::MalformedTerm(format!("`{call}` is not a function call")))?;
        let name = call[..open].trim();
        let function =
            CovFn::from_name(name).ok_or_else(|| GlmmError::UnknownFunction(name.to_string()))?;
        let vars: Vec<String> = call[open + 1..call.len() - 1]
            .split(',')
            .map(|v| v.trim().to_string())
            .collect();
        if vars.iter().any(|v| !is_identifier(v)) {
            return Err(GlmmError::MalformedTerm(format!(
                "bad variable list in `{call}`"
            )));
        }
        functions.push(FunctionCall { function, vars });
    }
    Ok(RandomTerm { slope, functions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_without_intercept_and_one_random_term() {
        let f = parse_formula("~ factor(t) - 1 + (1|gr(j)*ar1(t))").unwrap();
        assert!(!f.intercept);
        assert_eq!(f.fixed, vec![FixedTerm::Factor("t".into())]);
        assert_eq!(f.random.len(), 1);
        let fns: Vec<CovFn> = f.random[0].functions.iter().map(|c| c.function).collect();
        assert_eq!(fns, vec![CovFn::Gr, CovFn::Ar1]);
        assert_eq!(f.n_cov_params(), 2);
    }

    #[test]
    fn plain_covariate() {
        let f = parse_formula("~ x").unwrap();
        assert!(f.intercept);
        assert_eq!(f.fixed, vec![FixedTerm::Covariate("x".into())]);
        assert!(f.random.is_empty());
    }

    #[test]
    fn two_random_blocks() {
        let f = parse_formula("~ int + factor(t)-1 + (1|gr(cl))+(1|gr(cl,t))").unwrap();
        assert!(!f.intercept);
        assert_eq!(f.random.len(), 2);
        assert_eq!(f.random[1].functions[0].vars, vec!["cl", "t"]);
        assert_eq!(f.random[1].to_string(), "(1|gr(cl,t))");
    }

    #[test]
    fn slope_terms() {
        let f = parse_formula("~1 + (x|gr(ind))").unwrap();
        assert_eq!(f.random[0].slope.as_deref(), Some("x"));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_formula("~ (1|foo(x))"),
            Err(GlmmError::UnknownFunction(n)) if n == "foo"
        ));
        assert!(matches!(
            parse_formula("~ (1|gr(x)|gr(y))"),
            Err(GlmmError::MalformedTerm(_))
        ));
        assert!(matches!(
            parse_formula("~ (gr(x))"),
            Err(GlmmError::MalformedTerm(_))
        ));
        assert!(parse_formula("~ x - y").is_err());
        assert!(parse_formula("~ (1|gr(x)").is_err());
        assert!(parse_formula("~ x +").is_err());
    }
}
