//! Model formulas for the Stage-1 nuisance regressions.
//!
//! A `FormulaSpec` is a list of terms plus an error family. The textual
//! mini-language mirrors common additive-model notation:
//!
//! ```text
//! y ~ a*(s(z,10) + s(t,10)) + s(z,10) + s(t,10)
//! r ~ s(t)
//! ```
//!
//! `a` is the treatment, `t` the decision-point index, `s(v, k, order)` a
//! penalized spline in variable `v` (defaults k=10, order=2), and
//! `a*( ... )` expands to a treatment main effect plus treatment interactions
//! with every enclosed term. An intercept is always included.

use serde::{Deserialize, Serialize};

use crate::basis::{DEFAULT_NUM_BASIS, DEFAULT_PENALTY_ORDER};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Linear(String),
    Spline {
        var: String,
        num_basis: usize,
        penalty_order: usize,
    },
    TreatMain,
    TreatInteract(Box<Term>),
}

impl Term {
    pub fn spline(var: &str) -> Term {
        Term::Spline {
            var: var.into(),
            num_basis: DEFAULT_NUM_BASIS,
            penalty_order: DEFAULT_PENALTY_ORDER,
        }
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaSpec {
    /// Response name from the formula text; informational only.
    pub response: Option<String>,
    pub terms: Vec<Term>,
    pub family: Family,
}

impl FormulaSpec {
    pub fn new(terms: Vec<Term>, family: Family) -> Result<Self> {
        let spec = FormulaSpec {
            response: None,
            terms,
            family,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("formula has no terms".into()));
        }
        let mut main_splines = Vec::new();
        let mut inter_splines = Vec::new();
        for term in &self.terms {
            match term {
                Term::Spline {
                    var,
                    num_basis,
                    penalty_order,
                } => {
                    if *num_basis < penalty_order + 2 {
                        return Err(Error::Config(format!(
                            "s({var}): num_basis {num_basis} < penalty_order + 2"
                        )));
                    }
                    if main_splines.contains(var) {
                        return Err(Error::Config(format!(
                            "duplicate spline term for variable {var}"
                        )));
                    }
                    main_splines.push(var.clone());
                }
                Term::TreatInteract(inner) => match inner.as_ref() {
                    Term::TreatMain | Term::TreatInteract(_) => {
                        return Err(Error::Config(
                            "treatment interaction must wrap a non-treatment term".into(),
                        ))
                    }
                    Term::Spline { var, .. } => {
                        if inter_splines.contains(var) {
                            return Err(Error::Config(format!(
                                "duplicate treatment-interacted spline for variable {var}"
                            )));
                        }
                        inter_splines.push(var.clone());
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        Ok(())
    }

    pub fn has_treat_terms(&self) -> bool {
        self.terms
            .iter()
            .any(|t| matches!(t, Term::TreatMain | Term::TreatInteract(_)))
    }

    /// Variables referenced anywhere in the formula (excluding treatment).
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |v: &str| {
            if !out.iter().any(|o: &String| o == v) {
                out.push(v.to_string());
            }
        };
        for term in &self.terms {
            match term {
                Term::Linear(v) => push(v),
                Term::Spline { var, .. } => push(var),
                Term::TreatInteract(inner) => match inner.as_ref() {
                    Term::Linear(v) => push(v),
                    Term::Spline { var, .. } => push(var),
                    _ => {}
                },
                _ => {}
            }
        }
        out
    }

    /// Parse the textual mini-language. The part before `~` is kept as the
    /// response name; an intercept is added if not written explicitly.
    pub fn parse(text: &str, family: Family) -> Result<Self> {
        let (response, rhs) = match text.split_once('~') {
            Some((lhs, rhs)) => (Some(lhs.trim().to_string()), rhs),
            None => (None, text),
        };
        if let Some(r) = &response {
            if r.is_empty() || !r.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(Error::Config(format!("bad response name {r:?}")));
            }
        }
        let mut tokens = tokenize(rhs)?;
        tokens.reverse(); // pop from the back
        let mut terms = parse_sum(&mut tokens)?;
        if let Some(tok) = tokens.pop() {
            return Err(Error::Config(format!("unexpected token {tok:?} in formula")));
        }
        if !terms.contains(&Term::Intercept) {
            terms.insert(0, Term::Intercept);
        }
        let mut spec = FormulaSpec::new(terms, family)?;
        spec.response = response;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    Plus,
    Star,
    LParen,
    RParen,
    Comma,
    One,
}

fn tokenize(s: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                chars.next();
            }
            '+' => {
                chars.next();
                out.push(Tok::Plus);
            }
            '*' => {
                chars.next();
                out.push(Tok::Star);
            }
            '(' => {
                chars.next();
                out.push(Tok::LParen);
            }
            ')' => {
                chars.next();
                out.push(Tok::RParen);
            }
            ',' => {
                chars.next();
                out.push(Tok::Comma);
            }
            '0'..='9' => {
                let mut num = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() {
                        num.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                if num == "1" {
                    out.push(Tok::One);
                } else {
                    out.push(Tok::Int(num.parse().unwrap()));
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut id = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_alphanumeric() || d == '_' || d == '.' {
                        id.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(Tok::Ident(id));
            }
            other => return Err(Error::Config(format!("bad character {other:?} in formula"))),
        }
    }
    Ok(out)
}

fn parse_sum(toks: &mut Vec<Tok>) -> Result<Vec<Term>> {
    let mut terms = parse_product(toks)?;
    while toks.last() == Some(&Tok::Plus) {
        toks.pop();
        terms.extend(parse_product(toks)?);
    }
    Ok(terms)
}

fn parse_product(toks: &mut Vec<Tok>) -> Result<Vec<Term>> {
    // a*( ... ) expands to treat_main + treat:each-inner-term
    if toks.last() == Some(&Tok::Ident("a".into())) {
        let a = toks.pop().unwrap();
        if toks.last() == Some(&Tok::Star) {
            toks.pop();
            expect(toks, Tok::LParen)?;
            let inner = parse_sum(toks)?;
            expect(toks, Tok::RParen)?;
            let mut out = vec![Term::TreatMain];
            for t in inner {
                match t {
                    Term::Intercept => {}
                    other => out.push(Term::TreatInteract(Box::new(other))),
                }
            }
            return Ok(out);
        }
        toks.push(a);
    }
    parse_atom(toks).map(|t| vec![t])
}

fn parse_atom(toks: &mut Vec<Tok>) -> Result<Term> {
    match toks.pop() {
        Some(Tok::One) => Ok(Term::Intercept),
        Some(Tok::Ident(id)) if id == "a" => Ok(Term::TreatMain),
        Some(Tok::Ident(id)) if id == "s" => {
            expect(toks, Tok::LParen)?;
            let var = match toks.pop() {
                Some(Tok::Ident(v)) => v,
                other => {
                    return Err(Error::Config(format!(
                        "expected variable name in s(...), got {other:?}"
                    )))
                }
            };
            let mut num_basis = DEFAULT_NUM_BASIS;
            let mut penalty_order = DEFAULT_PENALTY_ORDER;
            if toks.last() == Some(&Tok::Comma) {
                toks.pop();
                num_basis = parse_int(toks)?;
                if toks.last() == Some(&Tok::Comma) {
                    toks.pop();
                    penalty_order = parse_int(toks)?;
                }
            }
            expect(toks, Tok::RParen)?;
            Ok(Term::Spline {
                var,
                num_basis,
                penalty_order,
            })
        }
        Some(Tok::Ident(id)) => Ok(Term::Linear(id)),
        other => Err(Error::Config(format!("expected a term, got {other:?}"))),
    }
}

fn parse_int(toks: &mut Vec<Tok>) -> Result<usize> {
    match toks.pop() {
        Some(Tok::Int(n)) => Ok(n),
        Some(Tok::One) => Ok(1),
        other => Err(Error::Config(format!("expected integer, got {other:?}"))),
    }
}

fn expect(toks: &mut Vec<Tok>, want: Tok) -> Result<()> {
    match toks.pop() {
        Some(t) if t == want => Ok(()),
        other => Err(Error::Config(format!("expected {want:?}, got {other:?}"))),
    }
}
