use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::hash_words;
use crate::vocab::Token;

/// Always-on feature row.
pub const BIAS_FEATURE: u32 = 0;

const ROLE_TAG: u64 = 0x524f_4c45;
const NGRAM_TAG: u64 = 0x4e47_524d;

/// Hashed, position-anchored n-gram features over the last `window` context
/// tokens, plus the role flag.
///
/// Every n-gram ending `d` tokens from the end of the context (with
/// `d + n - 1 <= window`) contributes one active bucket keyed by
/// `(d, n, tokens, role)`. The role flag is the first role-flag token in the
/// context; it is visible regardless of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub window: usize,
    pub max_ngram: usize,
    pub feature_dim: usize,
    /// Cross every n-gram with the role flag.
    pub role_conditioned: bool,
}

impl Default for FeaturizerSpec {
    fn default() -> Self {
        FeaturizerSpec {
            window: 8,
            max_ngram: 3,
            feature_dim: 4096,
            role_conditioned: true,
        }
    }
}

impl FeaturizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.max_ngram == 0 {
            return Err(Error::Config("window and max_ngram must be positive".into()));
        }
        if self.feature_dim < 2 || self.feature_dim > u32::MAX as usize {
            return Err(Error::Config(format!(
                "feature_dim must be in 2..2^32, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    #[inline]
    fn bucket(&self, h: u64) -> u32 {
        1 + (h % (self.feature_dim as u64 - 1)) as u32
    }

    /// Active feature indices for `context` (each with value 1; a repeated
    /// index counts twice).
    pub fn features(&self, context: &[Token]) -> Vec<u32> {
        let role = context.iter().copied().find(|t| t.is_role_flag());
        let role_key = match role {
            Some(r) if self.role_conditioned => r.index() as u64 + 1,
            _ => 0,
        };
        let n = context.len();
        let w = self.window.min(n);
        let mut out = Vec::with_capacity(2 + w * self.max_ngram);
        out.push(BIAS_FEATURE);
        if let Some(r) = role {
            out.push(self.bucket(hash_words(&[ROLE_TAG, r.index() as u64])));
        }
        let mut words = [0u64; 16];
        for d in 1..=w {
            for len in 1..=self.max_ngram {
                if d + len - 1 > w {
                    break;
                }
                let end = n - d;
                let start = end + 1 - len;
                words[0] = NGRAM_TAG;
                words[1] = role_key;
                words[2] = d as u64;
                words[3] = len as u64;
                let mut k = 4;
                for t in &context[start..=end] {
                    if k == words.len() {
                        break;
                    }
                    words[k] = t.index() as u64;
                    k += 1;
                }
                out.push(self.bucket(hash_words(&words[..k])));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(ids: &[u16]) -> Vec<Token> {
        ids.iter().map(|&i| Token(i)).collect()
    }

    #[test]
    fn deterministic_and_bias_first() {
        let spec = FeaturizerSpec::default();
        let ctx = toks(&[1, 10, 2, 16, 3]);
        let a = spec.features(&ctx);
        assert_eq!(a, spec.features(&ctx));
        assert_eq!(a[0], BIAS_FEATURE);
        assert!(a.iter().all(|&f| (f as usize) < spec.feature_dim));
    }

    #[test]
    fn only_last_window_tokens_matter() {
        let spec = FeaturizerSpec {
            window: 3,
            ..Default::default()
        };
        let a = toks(&[1, 2, 16, 5, 6, 7, 8]);
        let b = toks(&[9, 16, 4, 4, 4, 6, 7, 8]);
        assert_eq!(spec.features(&a), spec.features(&b));
        let c = toks(&[9, 16, 4, 4, 4, 5, 7, 8]);
        assert_ne!(spec.features(&a), spec.features(&c));
    }

    #[test]
    fn role_flag_changes_features() {
        let spec = FeaturizerSpec::default();
        let a = toks(&[1, 16, 2]);
        let b = toks(&[1, 17, 2]);
        assert_ne!(spec.features(&a), spec.features(&b));
    }
}
