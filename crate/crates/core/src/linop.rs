//! Matrix-free linear operators: apply, adjoint, composition and the dot test.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fieldio::RngStream;

type Apply = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A linear map given only by its action and the action of its adjoint.
///
/// Operators are cheap to clone and immutable; the closures capture whatever
/// state (model, geometry) they need.
#[derive(Clone)]
pub struct LinearOperator {
    name: String,
    domain: Vec<usize>,
    range: Vec<usize>,
    forward: Apply,
    adjoint: Apply,
}

impl fmt::Debug for LinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOperator")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("range", &self.range)
            .finish()
    }
}

impl LinearOperator {
    pub fn new<F, A>(name: impl Into<String>, domain: Vec<usize>, range: Vec<usize>, forward: F, adjoint: A) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        A: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            domain,
            range,
            forward: Arc::new(forward),
            adjoint: Arc::new(adjoint),
        }
    }

    pub fn identity(shape: Vec<usize>) -> Self {
        Self::new("I", shape.clone(), shape, |x| x.to_vec(), |y| y.to_vec())
    }

    pub fn diagonal(entries: Vec<f64>) -> Self {
        let d = Arc::new(entries);
        let d2 = Arc::clone(&d);
        let n = d.len();
        Self::new(
            "diag",
            vec![n],
            vec![n],
            move |x| x.iter().zip(d.iter()).map(|(a, b)| a * b).collect(),
            move |y| y.iter().zip(d2.iter()).map(|(a, b)| a * b).collect(),
        )
    }

    /// Dense row-major `rows x cols` matrix.
    pub fn dense(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        let a = Arc::new(entries);
        let at = Arc::clone(&a);
        Ok(Self::new(
            "dense",
            vec![cols],
            vec![rows],
            move |x| (0..rows).map(|i| (0..cols).map(|j| a[i * cols + j] * x[j]).sum()).collect(),
            move |y| (0..cols).map(|j| (0..rows).map(|i| at[i * cols + j] * y[i]).sum()).collect(),
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain_shape(&self) -> &[usize] {
        &self.domain
    }

    pub fn range_shape(&self) -> &[usize] {
        &self.range
    }

    pub fn domain_len(&self) -> usize {
        self.domain.iter().product()
    }

    pub fn range_len(&self) -> usize {
        self.range.iter().product()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.domain_len() {
            return Err(Error::Shape(format!(
                "{}: input of length {} for domain {:?}",
                self.name,
                x.len(),
                self.domain
            )));
        }
        Ok((self.forward)(x))
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.range_len() {
            return Err(Error::Shape(format!(
                "{}': input of length {} for range {:?}",
                self.name,
                y.len(),
                self.range
            )));
        }
        Ok((self.adjoint)(y))
    }

    /// The adjoint as an operator in its own right.
    pub fn adjoint(&self) -> Self {
        Self {
            name: format!("{}'", self.name),
            domain: self.range.clone(),
            range: self.domain.clone(),
            forward: Arc::clone(&self.adjoint),
            adjoint: Arc::clone(&self.forward),
        }
    }

    /// `self ∘ inner`, i.e. `x ↦ self(inner(x))`.
    pub fn compose(&self, inner: &LinearOperator) -> Result<Self> {
        compose(self, inner)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let (f, a) = (Arc::clone(&self.forward), Arc::clone(&self.adjoint));
        Self::new(
            format!("{alpha}*{}", self.name),
            self.domain.clone(),
            self.range.clone(),
            move |x| f(x).into_iter().map(|v| alpha * v).collect(),
            move |y| a(y).into_iter().map(|v| alpha * v).collect(),
        )
    }
}

/// Composition `a ∘ b`. Requires `b.range == a.domain`.
pub fn compose(a: &LinearOperator, b: &LinearOperator) -> Result<LinearOperator> {
    if b.range != a.domain {
        return Err(Error::Shape(format!(
            "cannot compose {} (domain {:?}) with {} (range {:?})",
            a.name, a.domain, b.name, b.range
        )));
    }
    let (af, bf) = (Arc::clone(&a.forward), Arc::clone(&b.forward));
    let (aa, ba) = (Arc::clone(&a.adjoint), Arc::clone(&b.adjoint));
    Ok(LinearOperator::new(
        format!("{}*{}", a.name, b.name),
        b.domain.clone(),
        a.range.clone(),
        move |x| af(&bf(x)),
        move |y| ba(&aa(y)),
    ))
}

/// Outcome of a dot test `⟨Ax, y⟩ = ⟨x, Aᵀy⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub operator: String,
    /// `⟨Ax, y⟩`
    pub forward_inner: f64,
    /// `⟨x, Aᵀy⟩`
    pub adjoint_inner: f64,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when an output contained NaN/Inf: which side and the flat index.
    pub non_finite: Option<(String, usize)>,
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} <Ax,y>={:+.12e} <x,A'y>={:+.12e} rel={:.3e} {}",
            self.operator,
            self.forward_inner,
            self.adjoint_inner,
            self.relative_error,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some((side, i)) = &self.non_finite {
            write!(f, " (non-finite {side} output at index {i})")?;
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random dot test with standard-normal probes drawn from `stream`.
pub fn dot_test(a: &LinearOperator, stream: &mut RngStream, tol: f64) -> TestReport {
    let x: Vec<f64> = (0..a.domain_len()).map(|_| stream.normal()).collect();
    let y: Vec<f64> = (0..a.range_len()).map(|_| stream.normal()).collect();
    dot_test_with(a, &x, &y, tol)
}

/// Dot test with caller-chosen probe vectors.
pub fn dot_test_with(a: &LinearOperator, x: &[f64], y: &[f64], tol: f64) -> TestReport {
    let ax = (a.forward)(x);
    let aty = (a.adjoint)(y);
    let non_finite = ax
        .iter()
        .position(|v| !v.is_finite())
        .map(|i| ("forward".to_string(), i))
        .or_else(|| aty.iter().position(|v| !v.is_finite()).map(|i| ("adjoint".to_string(), i)));
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let denom = lhs.abs().max(rhs.abs());
    let rel = if denom == 0.0 { 0.0 } else { (lhs - rhs).abs() / denom };
    let passed = non_finite.is_none() && rel.is_finite() && rel < tol;
    TestReport {
        operator: a.name.clone(),
        forward_inner: lhs,
        adjoint_inner: rhs,
        relative_error: rel,
        tolerance: tol,
        passed,
        non_finite,
    }
}
