//! Versioned text checkpoints.
//!
//! ```text
//! afn-checkpoint 1
//! arch.input_dim 16
//! arch.hidden 64,64
//! ...
//! tensor backbone.0.weight 16 64
//! <one line per row, space separated>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a reload is bitwise
//! exact. The loader builds a fresh model and returns it only when the whole
//! file parsed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Architecture, DropoutSpec, DropoutVariant, ModelParams};

pub const CHECKPOINT_TAG: &str = "afn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Every stored array of a model: learnable tensors, then batch-norm running
/// statistics, each with its shape.
fn entries(model: &ModelParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = model
        .named_params()
        .into_iter()
        .map(|(name, p)| (name, p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    for (i, b) in model.bottleneck.iter().enumerate() {
        let e = b.bn.running_mean.len();
        out.push((format!("bottleneck.{i}.bn.running_mean"), vec![e], b.bn.running_mean.clone()));
        out.push((format!("bottleneck.{i}.bn.running_var"), vec![e], b.bn.running_var.clone()));
    }
    out
}

/// Serializes `model` to the checkpoint text format.
pub fn checkpoint_to_string(model: &ModelParams) -> String {
    let a = model.arch();
    let mut s = String::new();
    let hidden: Vec<String> = a.hidden.iter().map(usize::to_string).collect();
    writeln!(s, "{CHECKPOINT_TAG} {CHECKPOINT_VERSION}").unwrap();
    writeln!(s, "arch.input_dim {}", a.input_dim).unwrap();
    writeln!(s, "arch.hidden {}", hidden.join(",")).unwrap();
    writeln!(s, "arch.embedding_size {}", a.embedding_size).unwrap();
    writeln!(s, "arch.bottleneck_blocks {}", a.bottleneck_blocks).unwrap();
    writeln!(s, "arch.num_classes {}", a.num_classes).unwrap();
    writeln!(s, "arch.dropout_p {:e}", a.dropout.p()).unwrap();
    writeln!(s, "arch.dropout_variant {}", a.dropout.variant().name()).unwrap();
    writeln!(s, "arch.bn_momentum {:e}", a.bn_momentum).unwrap();
    writeln!(s, "arch.bn_eps {:e}", a.bn_eps).unwrap();
    for (name, shape, data) in entries(model) {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(s, "tensor {name} {}", dims.join(" ")).unwrap();
        let cols = if shape.len() == 2 { shape[1] } else { data.len() };
        for row in data.chunks(cols) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
    }
    s.push_str("end\n");
    s
}

/// Writes the checkpoint next to `path` and renames it into place, so a
/// reader never observes a half-written file.
pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(model);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Format(format!("file ends before {what} (truncated?)")))
    }

    fn field(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (no, line) = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((no, v)),
            _ => Err(Error::Format(format!("line {no}: expected `{key} <value>`, got `{line}`"))),
        }
    }
}

fn num<T: std::str::FromStr>(no: usize, s: &str, key: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {no}: bad value `{s}` for {key}")))
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (no, header) = lines.next("the header")?;
    let version = header
        .strip_prefix(CHECKPOINT_TAG)
        .map(str::trim)
        .ok_or_else(|| Error::Format(format!("line {no}: not a checkpoint (missing `{CHECKPOINT_TAG}` tag)")))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }

    let (no, v) = lines.field("arch.input_dim")?;
    let input_dim: usize = num(no, v, "arch.input_dim")?;
    let (no, v) = lines.field("arch.hidden")?;
    let hidden = if v.trim().is_empty() {
        Vec::new()
    } else {
        v.split(',').map(|w| num(no, w, "arch.hidden")).collect::<Result<Vec<usize>>>()?
    };
    let (no, v) = lines.field("arch.embedding_size")?;
    let embedding_size = num(no, v, "arch.embedding_size")?;
    let (no, v) = lines.field("arch.bottleneck_blocks")?;
    let bottleneck_blocks = num(no, v, "arch.bottleneck_blocks")?;
    let (no, v) = lines.field("arch.num_classes")?;
    let num_classes = num(no, v, "arch.num_classes")?;
    let (no, v) = lines.field("arch.dropout_p")?;
    let p: f64 = num(no, v, "arch.dropout_p")?;
    let (_, v) = lines.field("arch.dropout_variant")?;
    let variant = DropoutVariant::parse(v.trim()).map_err(|e| Error::Format(e.to_string()))?;
    let (no, v) = lines.field("arch.bn_momentum")?;
    let bn_momentum = num(no, v, "arch.bn_momentum")?;
    let (no, v) = lines.field("arch.bn_eps")?;
    let bn_eps = num(no, v, "arch.bn_eps")?;

    let arch = Architecture {
        input_dim,
        hidden,
        embedding_size,
        bottleneck_blocks,
        num_classes,
        dropout: DropoutSpec::new(p, variant).map_err(|e| Error::Format(e.to_string()))?,
        bn_momentum,
        bn_eps,
    };
    let mut model = ModelParams::zeros(arch).map_err(|e| Error::Format(format!("architecture: {e}")))?;

    let expected = entries(&model);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (name, shape, _) in &expected {
        let (no, line) = lines.next(&format!("tensor {name}"))?;
        let mut words = line.split_whitespace();
        if words.next() != Some("tensor") || words.next() != Some(name.as_str()) {
            return Err(Error::Format(format!("line {no}: expected `tensor {name}`, got `{line}`")));
        }
        let dims = words.map(|w| num(no, w, name)).collect::<Result<Vec<usize>>>()?;
        if dims != *shape {
            return Err(Error::Format(format!(
                "line {no}: tensor {name} has shape {dims:?}, architecture needs {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let cols = if shape.len() == 2 { shape[1] } else { len };
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let (no, line) = lines.next(&format!("the end of tensor {name}"))?;
            let before = data.len();
            for w in line.split_whitespace() {
                data.push(num::<f64>(no, w, name)?);
            }
            if data.len() - before != cols {
                return Err(Error::Format(format!(
                    "line {no}: tensor {name} row has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        values.push(data);
    }
    let (no, last) = lines.next("the `end` marker")?;
    if last.trim() != "end" {
        return Err(Error::Format(format!("line {no}: expected `end`, got `{last}`")));
    }
    if let Some((i, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Format(format!("line {}: content after `end`: `{extra}`", i + 1)));
    }

    let n_params = model.named_params().len();
    let mut values = values.into_iter();
    for (p, data) in model.params_mut().into_iter().zip(values.by_ref().take(n_params)) {
        p.value.data_mut().copy_from_slice(&data);
    }
    for block in &mut model.bottleneck {
        block.bn.running_mean = values.next().expect("running mean entry");
        block.bn.running_var = values.next().expect("running var entry");
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelParams {
        let mut a = Architecture::new(5, 3);
        a.hidden = vec![7];
        a.embedding_size = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ModelParams::init(a, &mut rng).unwrap();
        for b in &mut m.bottleneck {
            for v in b.bn.running_mean.iter_mut().chain(b.bn.running_var.iter_mut()) {
                *v = rng.random_range(0.1..3.0);
            }
        }
        m.head.bias.value.data_mut()[0] = 1e-300;
        m.head.bias.value.data_mut()[1] = -0.1 - 0.2;
        m
    }

    fn probe() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Tensor::new(vec![6, 5], (0..30).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = parse_checkpoint(&checkpoint_to_string(&m)).unwrap();
        assert_eq!(back, m);
        let (f1, l1) = m.predict(&probe()).unwrap();
        let (f2, l2) = back.predict(&probe()).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn save_load_save_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        save_checkpoint(&model(), &p1).unwrap();
        save_checkpoint(&load_checkpoint(&p1).unwrap(), &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let text = checkpoint_to_string(&model());
        let lines: Vec<&str> = text.lines().collect();
        for cut in [0, 1, 5, lines.len() / 2, lines.len() - 1] {
            let partial = lines[..cut].join("\n");
            assert!(
                matches!(parse_checkpoint(&partial), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        // a row cut mid-way
        let mid = &text[..text.len() / 2];
        assert!(matches!(parse_checkpoint(mid), Err(Error::Format(_))));
    }

    #[test]
    fn version_and_shape_mismatch() {
        let text = checkpoint_to_string(&model());
        let bumped = text.replacen("afn-checkpoint 1", "afn-checkpoint 2", 1);
        assert!(matches!(parse_checkpoint(&bumped), Err(Error::Format(_))));
        let reshaped = text.replacen("arch.embedding_size 4", "arch.embedding_size 5", 1);
        let err = parse_checkpoint(&reshaped).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
        assert!(parse_checkpoint("hello").is_err());
    }
}
