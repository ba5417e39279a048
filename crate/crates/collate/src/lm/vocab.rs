//! Closed word-level vocabulary with digit-level number tokens.
//!
//! Text is split on whitespace; a word made entirely of ASCII digits is
//! further split into one token per digit so that numbers of any size stay
//! in-vocabulary. Decoding joins tokens with single spaces and re-joins runs
//! of adjacent digit tokens without spaces, so `encode(decode(ids)) == ids`
//! for every id sequence, and `decode(encode(text)) == text` for text in
//! canonical form (single spaces, numbers written contiguously).

use std::collections::HashMap;
use std::path::Path;

use super::LmError;

pub type TokenId = usize;

/// A sequence of token ids; every id is `< V` for the owning vocabulary.
pub type TokenSequence = Vec<TokenId>;

pub const BOS_TOKEN: &str = "<BOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const PAD_TOKEN: &str = "<PAD>";
pub const SEP_TOKEN: &str = "<SEP>";

/// Ordered token list with dense ids and the four special tokens.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    pad: TokenId,
    sep: TokenId,
}

impl Vocabulary {
    /// Build a vocabulary from corpus texts. The four specials occupy ids
    /// 0..4, the ten digits are always present, and remaining tokens are the
    /// sorted set of words seen in `texts`.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for d in 0..10u32 {
            words.insert(d.to_string());
        }
        for text in texts {
            for word in text.as_ref().split_whitespace() {
                if is_number_word(word) {
                    for ch in word.chars() {
                        words.insert(ch.to_string());
                    }
                } else {
                    words.insert(word.to_string());
                }
            }
        }
        let mut tokens = vec![
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("constructed token list is valid")
    }

    /// Rebuild from an explicit token list (specials must come first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, LmError> {
        if tokens.len() < 4
            || tokens[0] != BOS_TOKEN
            || tokens[1] != EOS_TOKEN
            || tokens[2] != PAD_TOKEN
            || tokens[3] != SEP_TOKEN
        {
            return Err(LmError::InvalidVocabulary(
                "token list must start with <BOS>, <EOS>, <PAD>, <SEP>".to_string(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(LmError::InvalidVocabulary(format!(
                    "token {tok:?} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(LmError::InvalidVocabulary(format!(
                    "duplicate token {tok:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            bos: 0,
            eos: 1,
            pad: 2,
            sep: 3,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn sep(&self) -> TokenId {
        self.sep
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Result<&str, LmError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(LmError::InvalidTokenId {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Tokenize `text`: whitespace words, with all-digit words split into one
    /// token per digit. Fails on any word not in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<TokenSequence, LmError> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if is_number_word(word) && word.len() > 1 {
                for ch in word.chars() {
                    let t = ch.to_string();
                    let id = self
                        .index
                        .get(&t)
                        .ok_or_else(|| LmError::UnknownToken(t.clone()))?;
                    ids.push(*id);
                }
            } else {
                let id = self
                    .index
                    .get(word)
                    .ok_or_else(|| LmError::UnknownToken(word.to_string()))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// Render ids back to text: single spaces between tokens, with runs of
    /// digit tokens joined contiguously.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, LmError> {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            let tok = self.token(id)?;
            let digit = is_digit_token(tok);
            if !out.is_empty() && !(prev_digit && digit) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_digit = digit;
        }
        Ok(out)
    }

    /// `[BOS] ++ encode(text)`: the conditioning context used when scoring or
    /// generating completions.
    pub fn encode_prompt(&self, text: &str) -> Result<TokenSequence, LmError> {
        let mut ids = vec![self.bos];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// `encode(text) ++ [EOS]`: the target scored for a completion.
    pub fn encode_completion(&self, text: &str) -> Result<TokenSequence, LmError> {
        let mut ids = self.encode(text)?;
        ids.push(self.eos);
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| LmError::InvalidVocabulary(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }
}

fn is_number_word(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_digit())
}

fn is_digit_token(tok: &str) -> bool {
    tok.len() == 1 && tok.chars().all(|c| c.is_ascii_digit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arith_vocab() -> Vocabulary {
        Vocabulary::build(["start with 7 ; add 3 ; result ?", "3 + 4", "7 plus 3 is 10"])
    }

    #[test]
    fn encode_direct_lookup() {
        let v = arith_vocab();
        let ids = v.encode("3 + 4").unwrap();
        assert_eq!(
            ids,
            vec![v.id("3").unwrap(), v.id("+").unwrap(), v.id("4").unwrap()]
        );
    }

    #[test]
    fn encode_empty_is_empty() {
        let v = arith_vocab();
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn encode_splits_numbers_into_digits() {
        let v = arith_vocab();
        let ids = v.encode("10").unwrap();
        assert_eq!(ids, vec![v.id("1").unwrap(), v.id("0").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "10");
    }

    #[test]
    fn unknown_token_error_names_offender() {
        let v = arith_vocab();
        let err = v.encode("start banana").unwrap_err();
        match err {
            LmError::UnknownToken(t) => assert_eq!(t, "banana"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn decode_round_trips_canonical_text() {
        let v = arith_vocab();
        let text = "7 plus 3 is 10 ; 10 plus 4 is 14";
        // 14 never seen during build; digits cover it.
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn specials_are_distinct_and_dense() {
        let v = arith_vocab();
        let mut ids = vec![v.bos(), v.eos(), v.pad(), v.sep()];
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        for (want, tok) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(tok), Some(want));
        }
    }

    #[test]
    fn prompt_and_completion_conventions() {
        let v = arith_vocab();
        let p = v.encode_prompt("3 + 4").unwrap();
        assert_eq!(p[0], v.bos());
        assert_eq!(p.len(), 4);
        let c = v.encode_completion("7").unwrap();
        assert_eq!(c.last(), Some(&v.eos()));
    }

    #[test]
    fn save_load_round_trip() {
        let v = arith_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.tokens(), v.tokens());
    }

    proptest! {
        // encode ∘ decode is the identity on token-id sequences.
        #[test]
        fn encode_decode_identity(raw in proptest::collection::vec(0usize..1000, 0..40)) {
            let v = arith_vocab();
            let ids: Vec<TokenId> = raw.iter().map(|i| i % v.size()).collect();
            let text = v.decode(&ids).unwrap();
            let back = v.encode(&text).unwrap();
            prop_assert_eq!(back, ids);
        }
    }
}
