use std::fmt::Write as _;

use crate::{Tensor, TensorError};

/// Handle to one named parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

const CHECKPOINT_MAGIC: &str = "magec-params v1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Zero-valued gradient accumulator shaped like this set.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    /// Text checkpoint: a header, then per tensor a `name rows cols` line
    /// followed by one line of space-separated values. Values use the
    /// shortest representation that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "count {}", self.values.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            let _ = writeln!(out, "{} {} {}", name, value.rows(), value.cols());
            let mut first = true;
            for v in value.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TensorError> {
        let bad = |line: usize, msg: &str| TensorError::Checkpoint {
            line,
            message: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad(1, "missing checkpoint header")),
        }
        let (count_line, count) = lines.next().ok_or_else(|| bad(2, "missing count"))?;
        let count: usize = count
            .strip_prefix("count ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(count_line + 1, "malformed count line"))?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let (ln, header) = lines.next().ok_or_else(|| bad(0, "truncated checkpoint"))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(ln + 1, "expected `name rows cols`"));
            }
            let rows: usize = parts[1].parse().map_err(|_| bad(ln + 1, "bad rows"))?;
            let cols: usize = parts[2].parse().map_err(|_| bad(ln + 1, "bad cols"))?;
            let (vln, values) = lines.next().ok_or_else(|| bad(ln + 2, "missing values"))?;
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(vln + 1, "unparseable value"))?;
            if data.len() != rows * cols {
                return Err(bad(vln + 1, "value count does not match shape"));
            }
            if set.id_of(parts[0]).is_some() {
                return Err(bad(ln + 1, "duplicate parameter name"));
            }
            set.insert(parts[0], Tensor::from_vec(rows, cols, data)?);
        }
        Ok(set)
    }
}

/// Per-parameter gradient accumulators aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.scale_in_place(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.scale_in_place(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_of_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
