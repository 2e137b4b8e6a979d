//! Text form of tensor index notation, e.g. `A(i,j) = B(i,k) * C(k,j)`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{build_statement, Access, Expr, IndexVar, TensorError, TensorIndexStmt, TensorVar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NotationError {
    #[error("at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("no extent given for index variable {0}")]
    MissingExtent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(char),
}

fn lex(s: &str) -> Result<Vec<(usize, Tok)>, NotationError> {
    let cs: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut n = 0;
    while n < cs.len() {
        let c = cs[n];
        if c.is_whitespace() {
            n += 1;
        } else if c.is_alphabetic() || c == '_' {
            let start = n;
            while n < cs.len() && (cs[n].is_alphanumeric() || cs[n] == '_') {
                n += 1;
            }
            out.push((start, Tok::Ident(cs[start..n].iter().collect())));
        } else if c.is_ascii_digit() || c == '.' {
            let start = n;
            while n < cs.len() && (cs[n].is_ascii_digit() || cs[n] == '.') {
                n += 1;
            }
            let text: String = cs[start..n].iter().collect();
            let v = text.parse().map_err(|_| NotationError::Syntax {
                col: start + 1,
                msg: format!("bad number {text}"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if "()=+*,".contains(c) {
            out.push((n, Tok::Sym(c)));
            n += 1;
        } else {
            return Err(NotationError::Syntax {
                col: n + 1,
                msg: format!("unexpected {c:?}"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    extents: &'a BTreeMap<String, usize>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, NotationError> {
        let col = self.toks.get(self.pos).map(|t| t.0 + 1).unwrap_or(0);
        Err(NotationError::Syntax { col, msg: msg.into() })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), NotationError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.fail(format!("expected '{c}'"))
        }
    }

    fn access(&mut self, name: String) -> Result<Access, NotationError> {
        let mut vars = Vec::new();
        if self.eat('(') && !self.eat(')') {
            loop {
                match self.peek().cloned() {
                    Some(Tok::Ident(v)) => {
                        self.pos += 1;
                        vars.push(v);
                    }
                    _ => return self.fail("expected an index variable"),
                }
                if self.eat(')') {
                    break;
                }
                self.expect(',')?;
            }
        }
        let dims = vars
            .iter()
            .map(|v| self.extents.get(v).copied().ok_or_else(|| NotationError::MissingExtent(v.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let t = TensorVar::new(name, dims)?;
        Ok(Access::new(t, vars.into_iter().map(IndexVar::new).collect()))
    }

    fn factor(&mut self) -> Result<Expr, NotationError> {
        match self.peek().cloned() {
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                Ok(Expr::Access(self.access(name)?))
            }
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => self.fail("expected an access, number or '('"),
        }
    }

    fn product(&mut self) -> Result<Expr, NotationError> {
        let mut e = self.factor()?;
        while self.eat('*') {
            e = e * self.factor()?;
        }
        Ok(e)
    }

    fn sum(&mut self) -> Result<Expr, NotationError> {
        let mut e = self.product()?;
        while self.eat('+') {
            e = e + self.product()?;
        }
        Ok(e)
    }
}

/// Parses `lhs = rhs`. Every index variable needs an entry in `extents`;
/// tensor dimensions follow from the variables that index them.
pub fn parse_statement(text: &str, extents: &BTreeMap<String, usize>) -> Result<TensorIndexStmt, NotationError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        extents,
    };
    let lhs = match p.peek().cloned() {
        Some(Tok::Ident(name)) => {
            p.pos += 1;
            p.access(name)?
        }
        _ => return p.fail("expected the output access"),
    };
    p.expect('=')?;
    let rhs = p.sum()?;
    if p.pos != p.toks.len() {
        return p.fail("trailing input");
    }
    Ok(build_statement(lhs, rhs)?)
}

/// Index variables named in `text`, in order of first appearance.
pub fn index_vars(text: &str) -> Result<Vec<String>, NotationError> {
    let toks = lex(text)?;
    let mut out: Vec<String> = Vec::new();
    let mut depth = 0;
    for (_, t) in &toks {
        match t {
            Tok::Sym('(') => depth += 1,
            Tok::Sym(')') => depth -= 1,
            Tok::Ident(v) if depth > 0 && !out.contains(v) => out.push(v.clone()),
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AssignMode;

    fn ext(n: usize) -> BTreeMap<String, usize> {
        ["i", "j", "k", "l"].iter().map(|v| (v.to_string(), n)).collect()
    }

    #[test]
    fn gemm_text() {
        let s = parse_statement("A(i,j) = B(i,k) * C(k,j)", &ext(3)).unwrap();
        assert_eq!(s.mode(), AssignMode::SumReduce);
        assert_eq!(s.reduction_vars(), &[IndexVar::new("k")]);
        assert_eq!(s.to_string(), "A(i,j) = B(i,k) * C(k,j)");
    }

    #[test]
    fn scalar_and_constants() {
        let s = parse_statement("a = 2 * (B(i) + C(i))", &ext(2)).unwrap();
        assert_eq!(s.lhs().indices.len(), 0);
        assert_eq!(s.reduction_vars(), &[IndexVar::new("i")]);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_statement("A(i) = B(i", &ext(2)), Err(NotationError::Syntax { .. })));
        assert!(matches!(parse_statement("A(q) = B(q)", &ext(2)), Err(NotationError::MissingExtent(_))));
        assert!(matches!(parse_statement("A(i) = A(i)", &ext(2)), Err(NotationError::Tensor(_))));
        assert!(matches!(parse_statement("A(i) = B(i) $", &ext(2)), Err(NotationError::Syntax { col: 13, .. })));
    }

    #[test]
    fn variable_order() {
        assert_eq!(index_vars("A(i,l) = B(i,j,k) * C(j,l)").unwrap(), ["i", "l", "j", "k"]);
    }
}
