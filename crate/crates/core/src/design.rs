//! Nelder block-design notation.
//!
//! `>` nests the right operand inside every level of the left one and `*`
//! crosses the two operands. Both operators bind equally tightly and
//! associate to the left; brackets set the order of evaluation. Nested
//! labels keep counting across parent levels, so `~cl(2) > ind(3)` labels
//! individuals 1..6.

use std::fmt;

use crate::data::{Column, DataFrame};
use crate::error::{GlmmError, Result};

/// Default cap on the number of generated rows.
pub const DEFAULT_ROW_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockDesign {
    Factor { name: String, levels: u64 },
    Nest(Box<BlockDesign>, Box<BlockDesign>),
    Cross(Box<BlockDesign>, Box<BlockDesign>),
}

impl BlockDesign {
    /// Number of rows the expanded design will have.
    pub fn row_count(&self) -> u128 {
        match self {
            BlockDesign::Factor { levels, .. } => *levels as u128,
            BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => {
                a.row_count().saturating_mul(b.row_count())
            }
        }
    }

    fn names(&self, out: &mut Vec<String>) {
        match self {
            BlockDesign::Factor { name, .. } => out.push(name.clone()),
            BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => {
                a.names(out);
                b.names(out);
            }
        }
    }

    fn fmt_inner(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockDesign::Factor { name, levels } => write!(f, "{name}({levels})"),
            BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => {
                let op = if matches!(self, BlockDesign::Nest(..)) { '>' } else { '*' };
                a.fmt_inner(f)?;
                write!(f, " {op} ")?;
                if matches!(**b, BlockDesign::Factor { .. }) {
                    b.fmt_inner(f)
                } else {
                    write!(f, "(")?;
                    b.fmt_inner(f)?;
                    write!(f, ")")
                }
            }
        }
    }
}

impl fmt::Display for BlockDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "~")?;
        self.fmt_inner(f)
    }
}

/// Parses a Nelder formula such as `~(cl(4) * t(3)) > ind(5)`.
pub fn parse_nelder(text: &str) -> Result<BlockDesign> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    if p.peek() == Some(b'~') {
        p.pos += 1;
    }
    let tree = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    let mut names = Vec::new();
    tree.names(&mut names);
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(GlmmError::Syntax {
                pos: 0,
                msg: format!("factor `{n}` appears more than once"),
            });
        }
    }
    Ok(tree)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn error(&self, msg: &str) -> GlmmError {
        GlmmError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn expr(&mut self) -> Result<BlockDesign> {
        let mut lhs = self.primary()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'>') => {
                    self.pos += 1;
                    let rhs = self.primary()?;
                    lhs = BlockDesign::Nest(Box::new(lhs), Box::new(rhs));
                }
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.primary()?;
                    lhs = BlockDesign::Cross(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn primary(&mut self) -> Result<BlockDesign> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_alphabetic() => self.factor(),
            Some(_) => Err(self.error("expected a factor or `(`")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn factor(&mut self) -> Result<BlockDesign> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii")
            .to_string();
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Err(self.error("expected `(` after factor name"));
        }
        self.pos += 1;
        self.skip_ws();
        let num_start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.src[num_start..self.pos]).expect("ascii");
        let count: i64 = digits
            .parse()
            .map_err(|_| GlmmError::Syntax {
                pos: num_start,
                msg: "expected an integer level count".into(),
            })?;
        self.skip_ws();
        if self.peek() != Some(b')') {
            return Err(self.error("expected `)` after level count"));
        }
        self.pos += 1;
        if count < 1 {
            return Err(GlmmError::InvalidLevelCount { name, count });
        }
        Ok(BlockDesign::Factor {
            name,
            levels: count as u64,
        })
    }
}

/// Rectangular table of 1-based factor levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<u64>>,
}

impl DesignTable {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_frame(&self) -> DataFrame {
        let mut df = DataFrame::new();
        for (c, name) in self.names.iter().enumerate() {
            let col = self.rows.iter().map(|r| r[c] as f64).collect();
            df.push_column(name, Column::Numeric(col))
                .expect("columns have equal length");
        }
        df
    }
}

pub fn expand_design(tree: &BlockDesign) -> Result<DesignTable> {
    expand_design_capped(tree, DEFAULT_ROW_CAP)
}

pub fn expand_design_capped(tree: &BlockDesign, cap: u64) -> Result<DesignTable> {
    let rows = tree.row_count();
    if rows > cap as u128 {
        return Err(GlmmError::RowCapExceeded { rows, cap });
    }
    let mut names = Vec::new();
    tree.names(&mut names);
    Ok(DesignTable {
        names,
        rows: expand(tree),
    })
}

fn expand(tree: &BlockDesign) -> Vec<Vec<u64>> {
    match tree {
        BlockDesign::Factor { levels, .. } => (1..=*levels).map(|l| vec![l]).collect(),
        BlockDesign::Cross(a, b) => {
            let (ra, rb) = (expand(a), expand(b));
            let mut out = Vec::with_capacity(ra.len() * rb.len());
            for x in &ra {
                for y in &rb {
                    out.push(x.iter().chain(y).copied().collect());
                }
            }
            out
        }
        BlockDesign::Nest(a, b) => {
            let (ra, rb) = (expand(a), expand(b));
            let width = rb.first().map_or(0, |r| r.len());
            let span: Vec<u64> = (0..width)
                .map(|c| rb.iter().map(|r| r[c]).max().unwrap_or(0))
                .collect();
            let mut out = Vec::with_capacity(ra.len() * rb.len());
            for (p, x) in ra.iter().enumerate() {
                for y in &rb {
                    let child = y.iter().zip(&span).map(|(v, s)| p as u64 * s + v);
                    out.push(x.iter().copied().chain(child).collect());
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(name: &str, levels: u64) -> Box<BlockDesign> {
        Box::new(BlockDesign::Factor {
            name: name.into(),
            levels,
        })
    }

    #[test]
    fn parses_nesting() {
        assert_eq!(
            parse_nelder("~cl(4) > ind(5)").unwrap(),
            BlockDesign::Nest(leaf("cl", 4), leaf("ind", 5))
        );
    }

    #[test]
    fn parses_single_factor() {
        assert_eq!(parse_nelder("~a(1)").unwrap(), *leaf("a", 1));
    }

    #[test]
    fn brackets_set_precedence() {
        assert_eq!(
            parse_nelder("~(cl(4) * t(3)) > ind(5)").unwrap(),
            BlockDesign::Nest(
                Box::new(BlockDesign::Cross(leaf("cl", 4), leaf("t", 3))),
                leaf("ind", 5)
            )
        );
        assert_eq!(
            parse_nelder("~cl(4) > (ind(5) * t(3))").unwrap(),
            BlockDesign::Nest(
                leaf("cl", 4),
                Box::new(BlockDesign::Cross(leaf("ind", 5), leaf("t", 3)))
            )
        );
    }

    #[test]
    fn operators_are_left_associative() {
        assert_eq!(
            parse_nelder("a(2) * b(2) > c(2)").unwrap(),
            BlockDesign::Nest(
                Box::new(BlockDesign::Cross(leaf("a", 2), leaf("b", 2))),
                leaf("c", 2)
            )
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            parse_nelder("~cl(0)"),
            Err(GlmmError::InvalidLevelCount { count: 0, .. })
        ));
        assert!(matches!(
            parse_nelder("~cl(-3)"),
            Err(GlmmError::InvalidLevelCount { count: -3, .. })
        ));
        assert!(matches!(
            parse_nelder("~cl(4) >"),
            Err(GlmmError::Syntax { .. })
        ));
        assert!(matches!(
            parse_nelder("~cl(4) ind(2)"),
            Err(GlmmError::Syntax { pos: 7, .. })
        ));
        assert!(parse_nelder("~(a(2)").is_err());
        assert!(parse_nelder("~a(2) * a(3)").is_err());
        assert!(parse_nelder("~1a(2)").is_err());
    }

    #[test]
    fn full_crossing() {
        let t = expand_design(&parse_nelder("~a(2)*b(2)").unwrap()).unwrap();
        assert_eq!(t.rows, vec![vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]]);
    }

    #[test]
    fn nested_labels_are_globally_unique() {
        let t = expand_design(&parse_nelder("~cl(2) > ind(3)").unwrap()).unwrap();
        let expected: Vec<Vec<u64>> = vec![
            vec![1, 1],
            vec![1, 2],
            vec![1, 3],
            vec![2, 4],
            vec![2, 5],
            vec![2, 6],
        ];
        assert_eq!(t.rows, expected);
    }

    #[test]
    fn cohort_design_crosses_after_nesting() {
        let t = expand_design(&parse_nelder("~(cl(2) > ind(2)) * t(2)").unwrap()).unwrap();
        assert_eq!(t.names, vec!["cl", "ind", "t"]);
        assert_eq!(t.rows[2], vec![1, 2, 1]);
        assert_eq!(t.rows[4], vec![2, 3, 1]);
    }

    #[test]
    fn row_cap_is_enforced() {
        let tree = parse_nelder("~(x(100000) * y(100000))").unwrap();
        assert!(matches!(
            expand_design(&tree),
            Err(GlmmError::RowCapExceeded { .. })
        ));
    }

    #[test]
    fn csv_output() {
        let t = expand_design(&parse_nelder("~a(2)").unwrap()).unwrap();
        assert_eq!(t.to_csv_string(), "a\n1\n2\n");
    }

    #[test]
    fn display_round_trips() {
        for f in [
            "~(j(4) * t(5)) > i(5)",
            "~a(1)",
            "~cl(4) > (ind(5) * t(3))",
            "~((x(10) * y(10)) > hh(4)) * t(2)",
        ] {
            let tree = parse_nelder(f).unwrap();
            assert_eq!(parse_nelder(&tree.to_string()).unwrap(), tree);
        }
    }
}
