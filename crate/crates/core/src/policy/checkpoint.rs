//! Plain-text policy checkpoints.
//!
//! ```text
//! metareason-policy 1
//! vocab_size 24
//! feature_dim 4096
//! window 8
//! max_ngram 3
//! role_conditioned 1
//! seed 7
//! step 300
//! weights
//! <feature_dim lines, each with vocab_size values in shortest round-trip
//!  scientific notation, separated by single spaces>
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamMatrix;
use crate::vocab::VOCAB_SIZE;

use super::{FeaturizedPolicy, FeaturizerSpec};

const MAGIC: &str = "metareason-policy 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: FeaturizedPolicy,
    pub seed: u64,
    pub step: usize,
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let spec = ckpt.policy.spec();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "vocab_size {VOCAB_SIZE}")?;
    writeln!(out, "feature_dim {}", spec.feature_dim)?;
    writeln!(out, "window {}", spec.window)?;
    writeln!(out, "max_ngram {}", spec.max_ngram)?;
    writeln!(out, "role_conditioned {}", u8::from(spec.role_conditioned))?;
    writeln!(out, "seed {}", ckpt.seed)?;
    writeln!(out, "step {}", ckpt.step)?;
    writeln!(out, "weights")?;
    let w = ckpt.policy.weights();
    let mut line = String::new();
    for r in 0..w.rows() {
        line.clear();
        for (c, v) in w.row(r).iter().enumerate() {
            if c > 0 {
                line.push(' ');
            }
            write!(line, "{v:e}").expect("writing to a String cannot fail");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn header_value<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::Format(format!("missing header `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected header `{key}`, found `{line}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value `{s}` for `{key}`")))
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let lines: Vec<String> = BufReader::new(input).lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter().map(String::as_str);
    if it.next() != Some(MAGIC) {
        return Err(Error::Format("not a metareason policy checkpoint".into()));
    }
    let vocab: usize = parse_num(header_value(it.next(), "vocab_size")?, "vocab_size")?;
    if vocab != VOCAB_SIZE {
        return Err(Error::Format(format!(
            "checkpoint vocabulary has {vocab} tokens, this build uses {VOCAB_SIZE}"
        )));
    }
    let feature_dim = parse_num(header_value(it.next(), "feature_dim")?, "feature_dim")?;
    let window = parse_num(header_value(it.next(), "window")?, "window")?;
    let max_ngram = parse_num(header_value(it.next(), "max_ngram")?, "max_ngram")?;
    let role: u8 = parse_num(header_value(it.next(), "role_conditioned")?, "role_conditioned")?;
    let seed = parse_num(header_value(it.next(), "seed")?, "seed")?;
    let step = parse_num(header_value(it.next(), "step")?, "step")?;
    if it.next() != Some("weights") {
        return Err(Error::Format("missing `weights` marker".into()));
    }
    let spec = FeaturizerSpec {
        window,
        max_ngram,
        feature_dim,
        role_conditioned: role != 0,
    };
    spec.validate()?;
    let mut data = Vec::with_capacity(feature_dim * VOCAB_SIZE);
    for r in 0..feature_dim {
        let line = it
            .next()
            .ok_or_else(|| Error::Format(format!("missing weight row {r}")))?;
        let before = data.len();
        for v in line.split(' ') {
            data.push(parse_num::<f64>(v, "weight")?);
        }
        if data.len() - before != VOCAB_SIZE {
            return Err(Error::Format(format!("weight row {r} has the wrong width")));
        }
    }
    if it.any(|l| !l.is_empty()) {
        return Err(Error::Format("trailing data after weights".into()));
    }
    let weights = ParamMatrix::from_vec(feature_dim, VOCAB_SIZE, data)?;
    Ok(Checkpoint {
        policy: FeaturizedPolicy::from_weights(spec, weights)?,
        seed,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(values in prop::collection::vec(-1e6f64..1e6, 8 * VOCAB_SIZE), seed in any::<u64>()) {
            let spec = FeaturizerSpec { window: 3, max_ngram: 2, feature_dim: 8, role_conditioned: true };
            let w = ParamMatrix::from_vec(8, VOCAB_SIZE, values).unwrap();
            let ckpt = Checkpoint { policy: FeaturizedPolicy::from_weights(spec, w).unwrap(), seed, step: 12 };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ckpt).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &ckpt);
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint("hello\n".as_bytes()).is_err());
    }
}
