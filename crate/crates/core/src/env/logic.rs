//! Propositional formulas over at most four atoms and the truth-table oracle.
//!
//! Formulas print and parse in a plain-word syntax (`if A then not B`,
//! `A or B`, `A and (B or C)`); the symbolic forms `->`, `|`, `&`, `~` are
//! accepted on input as well.

use std::fmt;

use crate::error::{Error, Result};
use crate::reward::AnswerLabel;

/// Largest atom count the task generator and oracle support.
pub const MAX_ATOMS: usize = 4;

const ATOM_NAMES: [char; MAX_ATOMS] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Const(bool),
    Atom(u8),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
}

/// Connective and atom occurrence counts, used as syntax features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyntaxCounts {
    pub atoms: [u32; MAX_ATOMS],
    pub not: u32,
    pub and: u32,
    pub or: u32,
    pub implies: u32,
    pub constants: u32,
}

impl Formula {
    pub fn atom(i: u8) -> Self {
        Formula::Atom(i)
    }

    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    /// Truth value under `assignment`, where bit `i` is the value of atom `i`.
    pub fn eval(&self, assignment: u32) -> bool {
        match self {
            Formula::Const(b) => *b,
            Formula::Atom(i) => assignment >> i & 1 == 1,
            Formula::Not(f) => !f.eval(assignment),
            Formula::And(a, b) => a.eval(assignment) && b.eval(assignment),
            Formula::Or(a, b) => a.eval(assignment) || b.eval(assignment),
            Formula::Implies(a, b) => !a.eval(assignment) || b.eval(assignment),
        }
    }

    /// One more than the highest atom index mentioned (0 for constant formulas).
    pub fn atom_span(&self) -> usize {
        match self {
            Formula::Const(_) => 0,
            Formula::Atom(i) => *i as usize + 1,
            Formula::Not(f) => f.atom_span(),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                a.atom_span().max(b.atom_span())
            }
        }
    }

    pub fn syntax_counts(&self) -> SyntaxCounts {
        let mut c = SyntaxCounts::default();
        self.count_into(&mut c);
        c
    }

    fn count_into(&self, c: &mut SyntaxCounts) {
        match self {
            Formula::Const(_) => c.constants += 1,
            Formula::Atom(i) => c.atoms[*i as usize] += 1,
            Formula::Not(f) => {
                c.not += 1;
                f.count_into(c);
            }
            Formula::And(a, b) => {
                c.and += 1;
                a.count_into(c);
                b.count_into(c);
            }
            Formula::Or(a, b) => {
                c.or += 1;
                a.count_into(c);
                b.count_into(c);
            }
            Formula::Implies(a, b) => {
                c.implies += 1;
                a.count_into(c);
                b.count_into(c);
            }
        }
    }

    /// Words of the printed form, parentheses as separate words.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_words(&mut out, 0);
        out
    }

    // Precedence: implication 1, or 2, and 3, not/atoms 4.
    fn precedence(&self) -> u8 {
        match self {
            Formula::Implies(..) => 1,
            Formula::Or(..) => 2,
            Formula::And(..) => 3,
            _ => 4,
        }
    }

    fn push_words(&self, out: &mut Vec<String>, min_prec: u8) {
        let wrap = self.precedence() < min_prec;
        if wrap {
            out.push("(".into());
        }
        match self {
            Formula::Const(true) => out.push("true".into()),
            Formula::Const(false) => out.push("false".into()),
            Formula::Atom(i) => out.push(ATOM_NAMES[*i as usize].to_string()),
            Formula::Not(f) => {
                out.push("not".into());
                f.push_words(out, 4);
            }
            Formula::And(a, b) => {
                a.push_words(out, 3);
                out.push("and".into());
                b.push_words(out, 4);
            }
            Formula::Or(a, b) => {
                a.push_words(out, 2);
                out.push("or".into());
                b.push_words(out, 3);
            }
            Formula::Implies(a, b) => {
                out.push("if".into());
                a.push_words(out, 2);
                out.push("then".into());
                b.push_words(out, 1);
            }
        }
        if wrap {
            out.push(")".into());
        }
    }

    pub fn parse(s: &str) -> Result<Formula> {
        let tokens = lex(s)?;
        let mut p = Parser { tokens, pos: 0 };
        let f = p.expr()?;
        if let Some((off, t)) = p.tokens.get(p.pos) {
            return Err(Error::Formula {
                offset: *off,
                message: format!("unexpected {t:?} after complete formula"),
            });
        }
        Ok(f)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let joined = self.words().join(" ");
        f.write_str(&joined.replace("( ", "(").replace(" )", ")"))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    If,
    Then,
    Arrow,
    Or,
    And,
    Not,
    LParen,
    RParen,
    True,
    False,
    Atom(u8),
}

fn lex(s: &str) -> Result<Vec<(usize, Tok)>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'(' => {
                i += 1;
                Tok::LParen
            }
            b')' => {
                i += 1;
                Tok::RParen
            }
            b'&' => {
                i += 1;
                Tok::And
            }
            b'|' => {
                i += 1;
                Tok::Or
            }
            b'~' | b'!' => {
                i += 1;
                Tok::Not
            }
            b'-' if bytes.get(i + 1) == Some(&b'>') => {
                i += 2;
                Tok::Arrow
            }
            c if c.is_ascii_alphabetic() => {
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let word = &s[start..i];
                match word.to_ascii_lowercase().as_str() {
                    "if" => Tok::If,
                    "then" => Tok::Then,
                    "implies" => Tok::Arrow,
                    "or" => Tok::Or,
                    "and" => Tok::And,
                    "not" => Tok::Not,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => {
                        let idx = ATOM_NAMES.iter().position(|&a| word.len() == 1 && word.starts_with(a));
                        match idx {
                            Some(k) => Tok::Atom(k as u8),
                            None => {
                                return Err(Error::Formula {
                                    offset: start,
                                    message: format!("unknown word {word:?}"),
                                })
                            }
                        }
                    }
                }
            }
            _ => {
                return Err(Error::Formula {
                    offset: start,
                    message: format!("unexpected character {:?}", c as char),
                })
            }
        };
        out.push((start, tok));
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or_else(|| self.tokens.last().map(|(o, _)| o + 1).unwrap_or(0))
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Formula {
                offset: self.offset(),
                message: format!("expected {want:?}"),
            })
        }
    }

    // expr := 'if' expr 'then' expr | disj ('->' expr)?
    fn expr(&mut self) -> Result<Formula> {
        if self.peek() == Some(&Tok::If) {
            self.pos += 1;
            let a = self.expr()?;
            self.expect(Tok::Then)?;
            let b = self.expr()?;
            return Ok(Formula::implies(a, b));
        }
        let a = self.disj()?;
        if self.peek() == Some(&Tok::Arrow) {
            self.pos += 1;
            let b = self.expr()?;
            return Ok(Formula::implies(a, b));
        }
        Ok(a)
    }

    fn disj(&mut self) -> Result<Formula> {
        let mut a = self.conj()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            let b = self.conj()?;
            a = Formula::or(a, b);
        }
        Ok(a)
    }

    fn conj(&mut self) -> Result<Formula> {
        let mut a = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let b = self.unary()?;
            a = Formula::and(a, b);
        }
        Ok(a)
    }

    fn unary(&mut self) -> Result<Formula> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(Formula::not(self.unary()?))
            }
            Some(Tok::Atom(i)) => {
                self.pos += 1;
                Ok(Formula::Atom(i))
            }
            Some(Tok::True) => {
                self.pos += 1;
                Ok(Formula::Const(true))
            }
            Some(Tok::False) => {
                self.pos += 1;
                Ok(Formula::Const(false))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let f = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(f)
            }
            Some(Tok::If) => self.expr(),
            other => Err(Error::Formula {
                offset,
                message: match other {
                    Some(t) => format!("unexpected {t:?}"),
                    None => "unexpected end of formula".into(),
                },
            }),
        }
    }
}

/// Entailed iff every assignment satisfying both premises satisfies the conclusion.
pub fn truth_table_entailment(major: &Formula, minor: &Formula, conclusion: &Formula) -> AnswerLabel {
    let n = major
        .atom_span()
        .max(minor.atom_span())
        .max(conclusion.atom_span());
    let counterexample =
        (0..1u32 << n).any(|a| major.eval(a) && minor.eval(a) && !conclusion.eval(a));
    if counterexample {
        AnswerLabel::NotEntailed
    } else {
        AnswerLabel::Entailed
    }
}
