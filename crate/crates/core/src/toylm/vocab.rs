//! Symbol-level vocabulary: reserved markers, a small keyword/operator set and
//! whole-number tokens `0..=MAX_NUMBER`.

use super::LmError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
pub const NEWLINE: usize = 3;
pub const STEP_MARKER: usize = 4;
pub const ANSWER_MARKER: usize = 5;

pub const STEP_MARKER_TEXT: &str = "- Step";
pub const ANSWER_MARKER_TEXT: &str = "<Answer>:";

const SYMBOLS: [&str; 26] = [
    "<pad>", "<bos>", "<end>", "\n", STEP_MARKER_TEXT, ANSWER_MARKER_TEXT, "Q:", ":", ";", "+", "-",
    "*", "=", "&", "start", "add", "sub", "mul", "mod", "meet", "len", "none", "so", "then", "now",
    "next",
];

/// Largest number with its own token.
pub const MAX_NUMBER: u32 = 229;
const NUMBER_BASE: usize = SYMBOLS.len();

/// Bijective token string ↔ id mapping; ids are dense in `[0, len)`.
///
/// Reserved ids: 0 `<pad>`, 1 `<bos>`, 2 `<end>`, 3 newline, 4 `- Step`,
/// 5 `<Answer>:`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    _private: (),
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self { _private: () }
    }

    pub fn len(&self) -> usize {
        NUMBER_BASE + MAX_NUMBER as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn number(&self, n: u32) -> Result<usize, LmError> {
        if n > MAX_NUMBER {
            return Err(LmError::UnknownSymbol(n.to_string()));
        }
        Ok(NUMBER_BASE + n as usize)
    }

    /// The number a token stands for, if it is a number token.
    pub fn as_number(&self, id: usize) -> Option<u32> {
        (NUMBER_BASE..self.len())
            .contains(&id)
            .then(|| (id - NUMBER_BASE) as u32)
    }

    pub fn id(&self, symbol: &str) -> Result<usize, LmError> {
        if let Some(i) = SYMBOLS.iter().position(|s| *s == symbol) {
            return Ok(i);
        }
        if !symbol.is_empty() && symbol.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = symbol.parse::<u32>() {
                // canonical form only, so the mapping stays bijective
                if n.to_string() == symbol {
                    return self.number(n);
                }
            }
        }
        Err(LmError::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Result<String, LmError> {
        if id < NUMBER_BASE {
            Ok(SYMBOLS[id].to_string())
        } else if let Some(n) = self.as_number(id) {
            Ok(n.to_string())
        } else {
            Err(LmError::UnknownToken(id))
        }
    }

    /// Splits text into symbols. Whitespace other than newline separates
    /// symbols; `- Step`, `<Answer>:` and `Q:` are matched as units.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, LmError> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let rest = &text[i..];
            let c = bytes[i];
            if c == b'\n' {
                out.push(NEWLINE);
                i += 1;
            } else if c.is_ascii_whitespace() {
                i += 1;
            } else if rest.starts_with(STEP_MARKER_TEXT) {
                out.push(STEP_MARKER);
                i += STEP_MARKER_TEXT.len();
            } else if rest.starts_with(ANSWER_MARKER_TEXT) {
                out.push(ANSWER_MARKER);
                i += ANSWER_MARKER_TEXT.len();
            } else if rest.starts_with("Q:") {
                out.push(self.id("Q:")?);
                i += 2;
            } else if c.is_ascii_digit() {
                let end = rest
                    .find(|ch: char| !ch.is_ascii_digit())
                    .unwrap_or(rest.len());
                out.push(self.id(&rest[..end])?);
                i += end;
            } else if c.is_ascii_alphabetic() {
                let end = rest
                    .find(|ch: char| !ch.is_ascii_alphabetic())
                    .unwrap_or(rest.len());
                out.push(self.id(&rest[..end])?);
                i += end;
            } else {
                let ch = rest.chars().next().expect("non-empty");
                out.push(self.id(&rest[..ch.len_utf8()])?);
                i += ch.len_utf8();
            }
        }
        Ok(out)
    }

    /// Canonical rendering: single spaces between symbols, none around
    /// newlines or before `:`. `<pad>`, `<bos>` and `<end>` are not rendered.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String, LmError> {
        let mut out = String::new();
        let mut prev_newline = true;
        for &id in ids {
            if id == PAD || id == BOS || id == END {
                continue;
            }
            let sym = self.symbol(id)?;
            let attach = id == NEWLINE || sym == ":";
            if !prev_newline && !attach {
                out.push(' ');
            }
            out.push_str(&sym);
            prev_newline = id == NEWLINE;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<end>").unwrap(), END);
        assert_eq!(v.id("\n").unwrap(), NEWLINE);
        assert_eq!(v.id("- Step").unwrap(), STEP_MARKER);
        assert_eq!(v.id("<Answer>:").unwrap(), ANSWER_MARKER);
        assert_eq!(v.len(), 256);
    }

    #[test]
    fn ids_are_dense_and_bijective() {
        let v = Vocabulary::new();
        for id in 0..v.len() {
            let s = v.symbol(id).unwrap();
            assert_eq!(v.id(&s).unwrap(), id);
        }
        assert!(v.symbol(v.len()).is_err());
        assert!(v.id("007").is_err());
        assert!(v.id("230").is_err());
    }

    #[test]
    fn step_line_tokenizes_as_expected() {
        let v = Vocabulary::new();
        let ids = v.tokenize("- Step 1: 7 + 5 = 12\n<Answer>: 12\n").unwrap();
        let syms: Vec<String> = ids.iter().map(|&i| v.symbol(i).unwrap()).collect();
        assert_eq!(
            syms,
            ["- Step", "1", ":", "7", "+", "5", "=", "12", "\n", "<Answer>:", "12", "\n"]
        );
        assert_eq!(
            v.detokenize(&ids).unwrap(),
            "- Step 1: 7 + 5 = 12\n<Answer>: 12\n"
        );
        assert!(v.tokenize("7 / 5").is_err());
    }

    proptest! {
        #[test]
        fn detokenize_then_tokenize_is_identity(ids in proptest::collection::vec(3usize..256, 0..40)) {
            let v = Vocabulary::new();
            let text = v.detokenize(&ids).unwrap();
            prop_assert_eq!(v.tokenize(&text).unwrap(), ids);
        }
    }
}
