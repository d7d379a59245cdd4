use std::fmt;

use crate::error::{Error, Result};

/// Frame offsets spliced around time `t`, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextSpec {
    offsets: Vec<i32>,
}

impl ContextSpec {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidInput("context must not be empty".into()));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "context offsets {offsets:?} are not strictly increasing"
            )));
        }
        Ok(Self { offsets })
    }

    /// The identity context `{0}`.
    pub fn current() -> Self {
        Self { offsets: vec![0] }
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn min(&self) -> i32 {
        self.offsets[0]
    }

    pub fn max(&self) -> i32 {
        *self.offsets.last().unwrap()
    }

    pub fn is_current(&self) -> bool {
        self.offsets == [0]
    }
}

fn render_offset(o: i32) -> String {
    match o {
        0 => "t".to_string(),
        o if o > 0 => format!("t+{o}"),
        o => format!("t{o}"),
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let contiguous = self.offsets.windows(2).all(|w| w[1] == w[0] + 1);
        if self.offsets.len() > 2 && contiguous {
            write!(f, "{}:{}", render_offset(self.min()), render_offset(self.max()))
        } else {
            let parts: Vec<String> = self.offsets.iter().map(|&o| render_offset(o)).collect();
            write!(f, "{}", parts.join(","))
        }
    }
}

pub fn render_context(c: &ContextSpec) -> String {
    c.to_string()
}

/// Parses `t-2:t+2`, `t-4,t,t+4` or `t`; whitespace anywhere is ignored.
pub fn parse_context(text: &str) -> Result<ContextSpec> {
    parse_context_at(text, 1, 1)
}

/// As [`parse_context`], reporting errors relative to (`line`, `column`).
pub(crate) fn parse_context_at(text: &str, line: usize, column: usize) -> Result<ContextSpec> {
    let mut scanner = Scanner {
        chars: text.chars().collect(),
        pos: 0,
        line,
        column,
    };
    let first = scanner.term()?;
    let offsets = if scanner.eat(':') {
        let last = scanner.term()?;
        if last <= first {
            return Err(scanner.error(format!(
                "range {}:{} is not increasing",
                render_offset(first),
                render_offset(last)
            )));
        }
        (first..=last).collect()
    } else {
        let mut offsets = vec![first];
        while scanner.eat(',') {
            let next = scanner.term()?;
            let prev = *offsets.last().unwrap();
            if next == prev {
                return Err(scanner.error(format!("duplicate offset {}", render_offset(next))));
            }
            if next < prev {
                return Err(scanner.error(format!(
                    "offset {} after {} is decreasing",
                    render_offset(next),
                    render_offset(prev)
                )));
            }
            offsets.push(next);
        }
        offsets
    };
    scanner.skip_ws();
    if scanner.pos < scanner.chars.len() {
        return Err(scanner.error(format!("unexpected `{}`", scanner.chars[scanner.pos])));
    }
    Ok(ContextSpec { offsets })
}

struct Scanner {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
}

impl Scanner {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.chars.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn error(&self, message: String) -> Error {
        Error::Parse {
            line: self.line,
            column: self.column + self.pos,
            message,
        }
    }

    fn term(&mut self) -> Result<i32> {
        self.skip_ws();
        if !self.eat('t') {
            return Err(match self.chars.get(self.pos) {
                Some(c) => self.error(format!("expected `t`, found `{c}`")),
                None => self.error("expected `t`, found end of input".into()),
            });
        }
        let sign = if self.eat('+') {
            1
        } else if self.eat('-') {
            -1
        } else {
            return Ok(0);
        };
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected digits after sign".into()));
        }
        let digits: String = self.chars[start..self.pos].iter().collect();
        let value: i32 = digits
            .parse()
            .map_err(|_| self.error(format!("offset `{digits}` out of range")))?;
        Ok(sign * value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn range_form() {
        assert_eq!(parse_context("t-2:t+2").unwrap().offsets(), &[-2, -1, 0, 1, 2]);
    }

    #[test]
    fn list_form() {
        assert_eq!(parse_context("t-4,t,t+4").unwrap().offsets(), &[-4, 0, 4]);
        assert_eq!(parse_context("t-3,t -1").unwrap().offsets(), &[-3, -1]);
        assert_eq!(parse_context(" t - 6 , t-3, t ").unwrap().offsets(), &[-6, -3, 0]);
    }

    #[test]
    fn bare_t() {
        assert_eq!(parse_context("t").unwrap().offsets(), &[0]);
    }

    #[test]
    fn errors_carry_position() {
        match parse_context("t+2:t-2") {
            Err(Error::Parse { column, .. }) => assert!(column > 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_context("t,t").is_err());
        assert!(parse_context("t+1,t").is_err());
        assert!(parse_context("x").is_err());
        assert!(parse_context("t+").is_err());
        assert!(parse_context("t t").is_err());
        assert!(parse_context("").is_err());
    }

    proptest! {
        #[test]
        fn parse_render_round_trip(mut offs in prop::collection::btree_set(-20i32..20, 1..8)) {
            let offsets: Vec<i32> = std::mem::take(&mut offs).into_iter().collect();
            let c = ContextSpec::new(offsets).unwrap();
            prop_assert_eq!(parse_context(&render_context(&c)).unwrap(), c);
        }
    }
}
