//! Plain-text parameter snapshots.
//!
//! ```text
//! tps-sdf-checkpoint 1
//! meta <key> <value...>
//! network <name> <layer count>
//! layer <out> <in> <activation> <bias 0|1>
//! <out lines of `in` weights>
//! [<one line of `out` biases>]
//! end
//! ```
//! Values use the shortest decimal form that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;

use super::mlp::{Activation, Layer, MlpParams};
use crate::error::{Error, Result};
use crate::Real;

pub const MAGIC: &str = "tps-sdf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub networks: Vec<(String, MlpParams<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn network(&self, name: &str) -> Option<&MlpParams<T>> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC} {VERSION}").unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, net) in &self.networks {
            writeln!(s, "network {name} {}", net.layers.len()).unwrap();
            for l in &net.layers {
                writeln!(
                    s,
                    "layer {} {} {} {}",
                    l.out_dim(),
                    l.in_dim(),
                    l.activation.tag(),
                    u8::from(l.bias.is_some())
                )
                .unwrap();
                for row in l.weight.rows() {
                    write_row(&mut s, row.iter());
                }
                if let Some(b) = &l.bias {
                    write_row(&mut s, b.iter());
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let (ln, head) = lines.next().ok_or_else(|| perr(1, "empty checkpoint"))?;
        let mut hp = head.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(perr(ln, "missing checkpoint header"));
        }
        match hp.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(VERSION) => {}
            _ => return Err(perr(ln, "unsupported checkpoint version")),
        }
        let mut ck = Checkpoint {
            meta: BTreeMap::new(),
            networks: Vec::new(),
        };
        loop {
            let (ln, line) = lines.next().ok_or_else(|| perr(0, "missing end marker"))?;
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("end") => return Ok(ck),
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| perr(ln, "meta without key"))?;
                    ck.meta
                        .insert(k.to_string(), parts.next().unwrap_or("").to_string());
                }
                Some("network") => {
                    let name = parts.next().ok_or_else(|| perr(ln, "network without name"))?;
                    let count: usize = parts
                        .next()
                        .and_then(|c| c.trim().parse().ok())
                        .ok_or_else(|| perr(ln, "bad layer count"))?;
                    let mut layers = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (ln, hdr) = lines.next().ok_or_else(|| perr(ln, "truncated network"))?;
                        let f: Vec<&str> = hdr.split_whitespace().collect();
                        if f.len() != 5 || f[0] != "layer" {
                            return Err(perr(ln, "expected layer header"));
                        }
                        let out: usize = f[1].parse().map_err(|_| perr(ln, "bad out dim"))?;
                        let inp: usize = f[2].parse().map_err(|_| perr(ln, "bad in dim"))?;
                        let activation =
                            Activation::parse(f[3]).ok_or_else(|| perr(ln, "unknown activation"))?;
                        let has_bias = f[4] == "1";
                        let mut w = Vec::with_capacity(out * inp);
                        for _ in 0..out {
                            let (ln, row) = lines.next().ok_or_else(|| perr(ln, "truncated weights"))?;
                            read_row(row, inp, &mut w).map_err(|m| perr(ln, &m))?;
                        }
                        let bias = if has_bias {
                            let (ln, row) = lines.next().ok_or_else(|| perr(ln, "truncated bias"))?;
                            let mut b = Vec::with_capacity(out);
                            read_row(row, out, &mut b).map_err(|m| perr(ln, &m))?;
                            Some(Array2::from_shape_vec((1, out), b).unwrap())
                        } else {
                            None
                        };
                        layers.push(Layer {
                            weight: Array2::from_shape_vec((out, inp), w).unwrap(),
                            bias,
                            activation,
                        });
                    }
                    ck.networks.push((name.to_string(), MlpParams { layers }));
                }
                _ => return Err(perr(ln, "unexpected line")),
            }
        }
    }
}

fn write_row<'a, T: Real>(s: &mut String, vals: impl Iterator<Item = &'a T>) {
    let mut first = true;
    for v in vals {
        if !first {
            s.push(' ');
        }
        first = false;
        write!(s, "{v}").unwrap();
    }
    s.push('\n');
}

fn read_row<T: Real>(row: &str, expect: usize, out: &mut Vec<T>) -> std::result::Result<(), String> {
    let before = out.len();
    for tok in row.split_whitespace() {
        out.push(tok.parse::<T>().map_err(|_| format!("bad number {tok:?}"))?);
    }
    if out.len() - before != expect {
        return Err(format!("expected {expect} values, got {}", out.len() - before));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(seed in 0u64..1000, scale in -300i32..300) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut net = MlpParams::<f64>::new(&[3, 4, 2], Activation::Softplus { beta: 100.0 }, Init::KaimingUniform, &mut rng).unwrap();
            net.layers[0].weight *= 10f64.powi(scale);
            net.layers[1].bias = None;
            let mut ck = Checkpoint::default();
            ck.meta.insert("feature_dim".into(), "8".into());
            ck.networks.push(("mlp1".into(), net));
            let back = Checkpoint::<f64>::from_text(&ck.to_text()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        assert!(Checkpoint::<f64>::from_text("tps-sdf-checkpoint 9\nend\n").is_err());
        let err = Checkpoint::<f64>::from_text("tps-sdf-checkpoint 1\nnetwork a 1\nlayer 1 2 identity 0\n1.0\nend\n").unwrap_err();
        assert_eq!(err.class(), "parse");
    }
}
