//! Fixed token vocabulary shared by every experiment.
//!
//! Layout: ten digit tokens, two operators, the control tokens `FINISH`,
//! `RESTART`, `EMPTY` and `END`, the two role flags, and six filler tokens
//! used by injected distractor instructions.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const VOCAB_SIZE: usize = 24;
pub const NUM_DIGITS: usize = 10;
pub const NUM_FILLERS: usize = 6;

const NAMES: [&str; VOCAB_SIZE] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "FINISH", "RESTART", "EMPTY",
    "END", "<meta>", "<reason>", "F0", "F1", "F2", "F3", "F4", "F5",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const PLUS: Token = Token(10);
    pub const TIMES: Token = Token(11);
    pub const FINISH: Token = Token(12);
    pub const RESTART: Token = Token(13);
    pub const EMPTY: Token = Token(14);
    pub const END: Token = Token(15);
    pub const META_FLAG: Token = Token(16);
    pub const REASON_FLAG: Token = Token(17);

    pub fn digit(d: u8) -> Token {
        assert!((d as usize) < NUM_DIGITS, "digit {d} out of range");
        Token(d as u16)
    }

    pub fn filler(i: usize) -> Token {
        assert!(i < NUM_FILLERS);
        Token(18 + i as u16)
    }

    pub fn from_index(index: usize) -> Option<Token> {
        (index < VOCAB_SIZE).then_some(Token(index as u16))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_digit(self) -> Option<u8> {
        (self.index() < NUM_DIGITS).then_some(self.0 as u8)
    }

    pub fn is_role_flag(self) -> bool {
        self == Token::META_FLAG || self == Token::REASON_FLAG
    }

    /// Tokens that close a step: any digit, `END`, or `EMPTY`.
    pub fn is_terminator(self) -> bool {
        self.as_digit().is_some() || self == Token::END || self == Token::EMPTY
    }

    pub fn name(self) -> &'static str {
        NAMES.get(self.index()).copied().unwrap_or("?")
    }

    pub fn parse(name: &str) -> Option<Token> {
        NAMES.iter().position(|n| *n == name).map(|i| Token(i as u16))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names of all vocabulary entries, in id order.
pub fn vocabulary() -> &'static [&'static str; VOCAB_SIZE] {
    &NAMES
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.name()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for i in 0..VOCAB_SIZE {
            let t = Token::from_index(i).unwrap();
            assert_eq!(Token::parse(t.name()), Some(t));
        }
        assert_eq!(Token::from_index(VOCAB_SIZE), None);
    }

    #[test]
    fn terminators() {
        assert!(Token::digit(3).is_terminator());
        assert!(Token::END.is_terminator());
        assert!(Token::EMPTY.is_terminator());
        assert!(!Token::FINISH.is_terminator());
        assert!(!Token::RESTART.is_terminator());
        assert!(!Token::PLUS.is_terminator());
    }
}
