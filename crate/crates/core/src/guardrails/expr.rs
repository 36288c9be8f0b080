//! Predicate expression language.
//!
//! ```text
//! expr := or
//! or   := and ('||' and)*
//! and  := not ('&&' not)*
//! not  := '!'? cmp
//! cmp  := sum (('<'|'<='|'>'|'>='|'=='|'!=') sum)?
//! sum  := term (('+'|'-') term)*
//! term := atom (('*'|'/') atom)*
//! atom := number | constant | 'm.'key | 'mhat.'key | '(' expr ')'
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::telemetry::MetricKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown constant `{name}` at {position}")]
    UnknownConstant { name: String, position: usize },
    #[error("unknown metric key `{name}` at {position}")]
    UnknownMetric { name: String, position: usize },
    #[error("type mismatch at {position}: {message}")]
    Type { position: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricSource {
    /// `m.<key>`: the current frame.
    Current,
    /// `mhat.<key>`: the one-tick forecast.
    Forecast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Num,
    Bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Named constant, already resolved against the config.
    Const {
        name: String,
        value: f64,
    },
    Metric {
        source: MetricSource,
        key: MetricKey,
    },
    Not(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Const { name, .. } => f.write_str(name),
            Expr::Metric {
                source: MetricSource::Current,
                key,
            } => write!(f, "m.{key}"),
            Expr::Metric {
                source: MetricSource::Forecast,
                key,
            } => write!(f, "mhat.{key}"),
            Expr::Not(inner) => write!(f, "!({inner})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Num(f64),
    Bool(bool),
}

/// Metric lookups for one participant; `None` is a null metric.
pub trait MetricEnv {
    fn metric(&self, source: MetricSource, key: MetricKey) -> Option<f64>;
}

impl<F: Fn(MetricSource, MetricKey) -> Option<f64>> MetricEnv for F {
    fn metric(&self, source: MetricSource, key: MetricKey) -> Option<f64> {
        self(source, key)
    }
}

impl Expr {
    pub fn ty(&self) -> Ty {
        match self {
            Expr::Num(_) | Expr::Const { .. } | Expr::Metric { .. } => Ty::Num,
            Expr::Not(_) => Ty::Bool,
            Expr::Binary { op, .. } => match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => Ty::Num,
                _ => Ty::Bool,
            },
        }
    }

    pub fn metrics(&self) -> BTreeSet<(MetricSource, MetricKey)> {
        let mut out = BTreeSet::new();
        self.collect_metrics(&mut out);
        out
    }

    fn collect_metrics(&self, out: &mut BTreeSet<(MetricSource, MetricKey)>) {
        match self {
            Expr::Metric { source, key } => {
                out.insert((*source, *key));
            }
            Expr::Not(inner) => inner.collect_metrics(out),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.collect_metrics(out);
                rhs.collect_metrics(out);
            }
            Expr::Num(_) | Expr::Const { .. } => {}
        }
    }

    /// `None` when any referenced metric is null.
    pub fn eval(&self, env: &dyn MetricEnv) -> Option<Value> {
        Some(match self {
            Expr::Num(n) => Value::Num(*n),
            Expr::Const { value, .. } => Value::Num(*value),
            Expr::Metric { source, key } => Value::Num(env.metric(*source, *key)?),
            Expr::Not(inner) => match inner.eval(env)? {
                Value::Bool(b) => Value::Bool(!b),
                Value::Num(_) => return None,
            },
            Expr::Binary { op, lhs, rhs } => {
                let l = lhs.eval(env)?;
                let r = rhs.eval(env)?;
                match (l, r) {
                    (Value::Bool(a), Value::Bool(b)) => match op {
                        BinOp::Or => Value::Bool(a || b),
                        BinOp::And => Value::Bool(a && b),
                        _ => return None,
                    },
                    (Value::Num(a), Value::Num(b)) => match op {
                        BinOp::Lt => Value::Bool(a < b),
                        BinOp::Le => Value::Bool(a <= b),
                        BinOp::Gt => Value::Bool(a > b),
                        BinOp::Ge => Value::Bool(a >= b),
                        BinOp::Eq => Value::Bool(a == b),
                        BinOp::Ne => Value::Bool(a != b),
                        BinOp::Add => Value::Num(a + b),
                        BinOp::Sub => Value::Num(a - b),
                        BinOp::Mul => Value::Num(a * b),
                        BinOp::Div => Value::Num(a / b),
                        BinOp::Or | BinOp::And => return None,
                    },
                    _ => return None,
                }
            }
        })
    }

    /// Truth value with not-applicable semantics: null metrics make it false.
    pub fn holds(&self, env: &dyn MetricEnv) -> bool {
        matches!(self.eval(env), Some(Value::Bool(true)))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

const OPERATORS: [&str; 14] = [
    "||", "&&", "<=", ">=", "==", "!=", "<", ">", "!", "+", "-", "*", "/", ".",
];

fn lex(src: &str) -> Result<Vec<Spanned>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                let frac = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if frac == i {
                    return Err(ExprError::Syntax {
                        position: i,
                        message: "expected digits after `.`".into(),
                    });
                }
            }
            let n = src[start..i].parse().map_err(|_| ExprError::Syntax {
                position: start,
                message: "malformed number".into(),
            })?;
            out.push(Spanned {
                tok: Tok::Num(n),
                pos: start,
            });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Spanned {
                tok: Tok::Ident(src[start..i].to_string()),
                pos: start,
            });
        } else if c == b'(' {
            i += 1;
            out.push(Spanned {
                tok: Tok::LParen,
                pos: start,
            });
        } else if c == b')' {
            i += 1;
            out.push(Spanned {
                tok: Tok::RParen,
                pos: start,
            });
        } else if let Some(op) = OPERATORS.iter().find(|op| src[i..].starts_with(**op)) {
            i += op.len();
            out.push(Spanned {
                tok: Tok::Op(op),
                pos: start,
            });
        } else {
            let ch = src[i..].chars().next().unwrap_or('?');
            return Err(ExprError::Syntax {
                position: start,
                message: format!("unexpected character `{ch}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    at: usize,
    end: usize,
    constants: &'a BTreeMap<String, f64>,
}

/// Parses `src`, resolving constant names and checking that the result is
/// Boolean. Positions are byte offsets into `src`.
pub fn parse_expr(src: &str, constants: &BTreeMap<String, f64>) -> Result<Expr, ExprError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        at: 0,
        end: src.len(),
        constants,
    };
    let (expr, _) = p.or()?;
    if let Some(t) = p.peek() {
        return Err(ExprError::Syntax {
            position: t.pos,
            message: "unexpected trailing input".into(),
        });
    }
    if expr.ty() != Ty::Bool {
        return Err(ExprError::Type {
            position: 0,
            message: "predicate must be Boolean".into(),
        });
    }
    Ok(expr)
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<(&'static str, usize)> {
        match self.peek() {
            Some(Spanned {
                tok: Tok::Op(op),
                pos,
            }) if ops.contains(op) => {
                let found = (*op, *pos);
                self.at += 1;
                Some(found)
            }
            _ => None,
        }
    }

    fn expect(&self, want: Ty, got: Ty, pos: usize, op: &str) -> Result<(), ExprError> {
        if want == got {
            return Ok(());
        }
        let name = |t: Ty| if t == Ty::Num { "number" } else { "Boolean" };
        Err(ExprError::Type {
            position: pos,
            message: format!("`{op}` expects {} operand, got {}", name(want), name(got)),
        })
    }

    fn binary_chain(
        &mut self,
        ops: &[&'static str],
        operand: Ty,
        next: fn(&mut Self) -> Result<(Expr, usize), ExprError>,
    ) -> Result<(Expr, usize), ExprError> {
        let (mut lhs, start) = next(self)?;
        while let Some((op, _)) = self.eat_op(ops) {
            let (rhs, rpos) = next(self)?;
            self.expect(operand, lhs.ty(), start, op)?;
            self.expect(operand, rhs.ty(), rpos, op)?;
            lhs = Expr::Binary {
                op: bin_op(op),
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok((lhs, start))
    }

    fn or(&mut self) -> Result<(Expr, usize), ExprError> {
        self.binary_chain(&["||"], Ty::Bool, Self::and)
    }

    fn and(&mut self) -> Result<(Expr, usize), ExprError> {
        self.binary_chain(&["&&"], Ty::Bool, Self::not)
    }

    fn not(&mut self) -> Result<(Expr, usize), ExprError> {
        if let Some((_, pos)) = self.eat_op(&["!"]) {
            let (inner, ipos) = self.cmp()?;
            self.expect(Ty::Bool, inner.ty(), ipos, "!")?;
            return Ok((Expr::Not(Box::new(inner)), pos));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<(Expr, usize), ExprError> {
        let (lhs, start) = self.sum()?;
        if let Some((op, _)) = self.eat_op(&["<", "<=", ">", ">=", "==", "!="]) {
            let (rhs, rpos) = self.sum()?;
            self.expect(Ty::Num, lhs.ty(), start, op)?;
            self.expect(Ty::Num, rhs.ty(), rpos, op)?;
            return Ok((
                Expr::Binary {
                    op: bin_op(op),
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                },
                start,
            ));
        }
        Ok((lhs, start))
    }

    fn sum(&mut self) -> Result<(Expr, usize), ExprError> {
        self.binary_chain(&["+", "-"], Ty::Num, Self::term)
    }

    fn term(&mut self) -> Result<(Expr, usize), ExprError> {
        self.binary_chain(&["*", "/"], Ty::Num, Self::atom)
    }

    fn atom(&mut self) -> Result<(Expr, usize), ExprError> {
        let pos = self.pos();
        let Some(t) = self.toks.get(self.at).cloned() else {
            return Err(ExprError::Syntax {
                position: pos,
                message: "unexpected end of input".into(),
            });
        };
        self.at += 1;
        match t.tok {
            Tok::Num(n) => Ok((Expr::Num(n), pos)),
            Tok::LParen => {
                let (inner, _) = self.or()?;
                match self.peek() {
                    Some(Spanned {
                        tok: Tok::RParen, ..
                    }) => {
                        self.at += 1;
                        Ok((inner, pos))
                    }
                    _ => Err(ExprError::Syntax {
                        position: self.pos(),
                        message: "expected `)`".into(),
                    }),
                }
            }
            Tok::Ident(name) if name == "m" || name == "mhat" => {
                let source = if name == "m" {
                    MetricSource::Current
                } else {
                    MetricSource::Forecast
                };
                if self.eat_op(&["."]).is_none() {
                    return Err(ExprError::Syntax {
                        position: self.pos(),
                        message: format!("expected `.` after `{name}`"),
                    });
                }
                let key_pos = self.pos();
                match self.toks.get(self.at).cloned() {
                    Some(Spanned {
                        tok: Tok::Ident(key),
                        ..
                    }) => {
                        self.at += 1;
                        let key =
                            key.parse::<MetricKey>()
                                .map_err(|_| ExprError::UnknownMetric {
                                    name: key.clone(),
                                    position: key_pos,
                                })?;
                        Ok((Expr::Metric { source, key }, pos))
                    }
                    _ => Err(ExprError::Syntax {
                        position: key_pos,
                        message: "expected metric key".into(),
                    }),
                }
            }
            Tok::Ident(name) => match self.constants.get(&name) {
                Some(value) => Ok((
                    Expr::Const {
                        name,
                        value: *value,
                    },
                    pos,
                )),
                None => Err(ExprError::UnknownConstant {
                    name,
                    position: pos,
                }),
            },
            Tok::RParen | Tok::Op(_) => Err(ExprError::Syntax {
                position: pos,
                message: "expected operand".into(),
            }),
        }
    }
}

fn bin_op(op: &str) -> BinOp {
    match op {
        "||" => BinOp::Or,
        "&&" => BinOp::And,
        "<" => BinOp::Lt,
        "<=" => BinOp::Le,
        ">" => BinOp::Gt,
        ">=" => BinOp::Ge,
        "==" => BinOp::Eq,
        "!=" => BinOp::Ne,
        "+" => BinOp::Add,
        "-" => BinOp::Sub,
        "*" => BinOp::Mul,
        "/" => BinOp::Div,
        other => unreachable!("not a binary operator: {other}"),
    }
}
