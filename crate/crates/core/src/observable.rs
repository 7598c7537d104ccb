//! Bounded test functions `φ: X → ℝ`.

use std::fmt;
use std::sync::Arc;

type Evaluator = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct Observable {
    name: String,
    eval: Arc<Evaluator>,
    sup_norm: f64,
    locality: Option<usize>,
    constant: Option<f64>,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observable({}, ‖·‖∞ ≤ {})", self.name, self.sup_norm)
    }
}

impl Observable {
    /// `sup_norm` must bound `|φ|`; `locality` is the number of leading points
    /// `φ` depends on, when finite.
    pub fn new(
        name: impl Into<String>,
        sup_norm: f64,
        locality: Option<usize>,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            sup_norm,
            locality,
            constant: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        let mut o = Self::new(format!("const({c})"), c.abs(), Some(0), move |_| c);
        o.constant = Some(c);
        o
    }

    /// `x ↦ x_n^k`: component `k` (0-based) of point `n` (1-based) for letters of
    /// dimension `dim`, bounded by `bound`.
    pub fn coordinate(n: usize, k: usize, dim: usize, bound: f64) -> Self {
        let at = (n - 1) * dim + k;
        Self::new(format!("x_{n}[{k}]"), bound, Some(n), move |x| x[at])
    }

    /// `φ − c`.
    pub fn centered(&self, c: f64) -> Self {
        let inner = self.eval.clone();
        let mut o = Self::new(
            format!("{} - {c}", self.name),
            self.sup_norm + c.abs(),
            self.locality,
            move |x| inner(x) - c,
        );
        o.constant = self.constant.map(|v| v - c);
        o
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn locality(&self) -> Option<usize> {
        self.locality
    }

    /// Value of a constant observable.
    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }
}
