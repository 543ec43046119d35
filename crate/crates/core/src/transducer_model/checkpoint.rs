//! Text checkpoint format.
//!
//! ```text
//! ctxbias-checkpoint 1
//! meta <one-line JSON>
//! tensor <group> <name> <dim>x<dim>…
//! <space-separated values>
//! …
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a write/read
//! cycle is bit-exact. Groups hold e.g. model parameters and optimiser
//! moments; `meta` carries configuration and counters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &str = "ctxbias-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub groups: BTreeMap<String, ParamStore>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint { meta, groups: BTreeMap::new() }
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no `{name}` group")))
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "meta {meta}").unwrap();
        for (group, store) in &self.groups {
            for (name, t) in store {
                if group.contains(char::is_whitespace) || name.contains(char::is_whitespace) {
                    return Err(Error::Data(format!("whitespace in tensor name `{group}/{name}`")));
                }
                let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                writeln!(out, "tensor {group} {name} {}", shape.join("x")).unwrap();
                let mut first = true;
                for v in t.data() {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    write!(out, "{v}").unwrap();
                }
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("expected `{MAGIC}`"))),
        }
        let meta = match lines.next() {
            Some((n, l)) => {
                let json = l.strip_prefix("meta ").ok_or_else(|| err(n + 1, "expected `meta`".into()))?;
                serde_json::from_str(json).map_err(|e| err(n + 1, e.to_string()))?
            }
            None => return Err(err(2, "missing `meta` line".into())),
        };
        let mut ck = Checkpoint::new(meta);
        while let Some((n, header)) = lines.next() {
            if header.is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(err(n + 1, "expected `tensor <group> <name> <shape>`".into()));
            }
            let shape = parts[3]
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(n + 1, e.to_string()))?;
            let (m, body) = lines.next().ok_or_else(|| err(n + 2, "missing tensor values".into()))?;
            let data = if body.is_empty() {
                Vec::new()
            } else {
                body.split(' ')
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(m + 1, e.to_string()))?
            };
            let t = Tensor::new(shape, data).map_err(|e| err(m + 1, e.to_string()))?;
            ck.groups
                .entry(parts[1].to_string())
                .or_default()
                .insert(parts[2].to_string(), t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        p.insert("a.w".into(), Tensor::randn(&[3, 4], 1e-3, &mut rng));
        p.insert("b".into(), Tensor::new(vec![1, 3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
        let mut ck = Checkpoint::new(serde_json::json!({"step": 7, "name": "x"}));
        ck.groups.insert("params".into(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let b = &back.groups["params"]["b"];
        assert!(b.data()[1].is_sign_negative());
    }

    #[test]
    fn corrupt_files_are_parse_errors() {
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_text("nope", p), Err(Error::Parse { .. })));
        let bad = format!("{MAGIC}\nmeta {{}}\ntensor g n 2x2\n1 2 3\n");
        assert!(matches!(Checkpoint::from_text(&bad, p), Err(Error::Parse { line: 4, .. })));
    }
}
