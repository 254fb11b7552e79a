//! Reverse-mode composition engine with user-registered pullback rules.
//!
//! A loss is written as a closure over a [`Tape`]. Each call through the tape
//! records a node holding its primal outputs and a pullback closure; a single
//! reverse sweep over the nodes (in reverse construction order) sums the
//! cotangents arriving at every node and hands them to its pullback.
//!
//! Heavy physics enters through [`Registry::register`]: a rule computes its
//! forward value and returns a pullback. Arguments that are not traced values
//! (acquisition geometry, flow schedules, network parameters) are passed as
//! [`Input::Aux`] and always receive [`Cotangent::NoTangent`].

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fieldio::Field;

/// Dense primal or cotangent value on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("tensor shape {:?} with {} values", shape, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same shape, values from `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl From<Field> for Tensor {
    fn from(f: Field) -> Self {
        let shape = f.dims().to_vec();
        Self {
            shape,
            data: f.into_data(),
        }
    }
}

impl From<&Field> for Tensor {
    fn from(f: &Field) -> Self {
        Self {
            shape: f.dims().to_vec(),
            data: f.data().to_vec(),
        }
    }
}

/// Non-differentiable argument.
pub type Aux = Arc<dyn Any + Send + Sync>;

/// Input cotangent returned by a pullback.
#[derive(Debug, Clone, PartialEq)]
pub enum Cotangent {
    /// The slot is not differentiable (or received no sensitivity at all).
    NoTangent,
    Dense(Tensor),
}

impl Cotangent {
    pub fn is_no_tangent(&self) -> bool {
        matches!(self, Cotangent::NoTangent)
    }

    pub fn dense(&self) -> Option<&Tensor> {
        match self {
            Cotangent::Dense(t) => Some(t),
            Cotangent::NoTangent => None,
        }
    }

    pub fn into_dense(self) -> Option<Tensor> {
        match self {
            Cotangent::Dense(t) => Some(t),
            Cotangent::NoTangent => None,
        }
    }
}

/// Argument as seen by a rule's forward function.
#[derive(Clone)]
pub enum Arg {
    Tensor(Tensor),
    Aux(Aux),
}

impl Arg {
    pub fn tensor(&self) -> Result<&Tensor> {
        match self {
            Arg::Tensor(t) => Ok(t),
            Arg::Aux(_) => Err(Error::Autodiff("expected a traced tensor argument, got aux".into())),
        }
    }

    pub fn aux<T: Any>(&self) -> Result<&T> {
        match self {
            Arg::Aux(a) => a
                .downcast_ref::<T>()
                .ok_or_else(|| Error::Autodiff(format!("aux argument is not a {}", std::any::type_name::<T>()))),
            Arg::Tensor(_) => Err(Error::Autodiff("expected an aux argument, got a tensor".into())),
        }
    }
}

/// Maps output cotangents (one per output, zero-filled when unused) to one
/// cotangent per input slot.
pub type Pullback = Box<dyn FnOnce(&[Tensor]) -> Result<Vec<Cotangent>>>;

/// Forward function of a registered operation.
///
/// When `record` is false only the primal outputs are needed and the
/// returned pullback is ignored.
pub trait Primitive: Send + Sync {
    fn apply(&self, args: &[Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)>;
}

/// Named operation plus its forward/pullback implementation.
#[derive(Clone)]
pub struct PullbackRule {
    name: String,
    primitive: Arc<dyn Primitive>,
}

impl fmt::Debug for PullbackRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PullbackRule").field("name", &self.name).finish()
    }
}

impl PullbackRule {
    pub fn new(name: impl Into<String>, primitive: impl Primitive + 'static) -> Self {
        Self {
            name: name.into(),
            primitive: Arc::new(primitive),
        }
    }

    /// Rule from a forward function and a pullback factory `(args, outputs, cotangents) -> input cotangents`.
    pub fn from_fns<F, B>(name: impl Into<String>, forward: F, pullback: B) -> Self
    where
        F: Fn(&[Arg]) -> Result<Vec<Tensor>> + Send + Sync + 'static,
        B: Fn(&[Arg], &[Tensor], &[Tensor]) -> Result<Vec<Cotangent>> + Send + Sync + 'static,
    {
        Self::new(
            name,
            FnRule {
                forward,
                pullback: Arc::new(pullback),
            },
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

type PullbackFn = dyn Fn(&[Arg], &[Tensor], &[Tensor]) -> Result<Vec<Cotangent>> + Send + Sync;

struct FnRule<F> {
    forward: F,
    pullback: Arc<PullbackFn>,
}

impl<F> Primitive for FnRule<F>
where
    F: Fn(&[Arg]) -> Result<Vec<Tensor>> + Send + Sync,
{
    fn apply(&self, args: &[Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)> {
        let outputs = (self.forward)(args)?;
        if !record {
            return Ok((outputs, None));
        }
        let saved_args = args.to_vec();
        let saved_out = outputs.clone();
        let pb = Arc::clone(&self.pullback);
        Ok((outputs, Some(Box::new(move |cot| pb(&saved_args, &saved_out, cot)))))
    }
}

/// Operation table. Write once, then shared read-only by any number of tapes.
#[derive(Default, Clone)]
pub struct Registry {
    rules: HashMap<String, Arc<dyn Primitive>>,
    aliases: HashMap<String, String>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.rules.keys().collect();
        names.sort();
        f.debug_struct("Registry")
            .field("rules", &names)
            .field("aliases", &self.aliases)
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, rule: PullbackRule) -> Result<()> {
        if self.rules.contains_key(&rule.name) || self.aliases.contains_key(&rule.name) {
            return Err(Error::Autodiff(format!("rule '{}' is already registered", rule.name)));
        }
        self.rules.insert(rule.name, rule.primitive);
        Ok(())
    }

    /// Make `alias` resolve to the registered rule `target`.
    pub fn alias(&mut self, alias: &str, target: &str) -> Result<()> {
        if self.rules.contains_key(alias) || self.aliases.contains_key(alias) {
            return Err(Error::Autodiff(format!("name '{alias}' is already registered")));
        }
        if !self.rules.contains_key(target) {
            return Err(Error::Autodiff(format!("alias target '{target}' is not registered")));
        }
        self.aliases.insert(alias.to_string(), target.to_string());
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.rules.contains_key(name) || self.aliases.contains_key(name)
    }

    /// Name a rule or alias finally resolves to.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        let target = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.rules.get_key_value(target).map(|(k, _)| k.as_str())
    }

    fn lookup(&self, name: &str) -> Result<Arc<dyn Primitive>> {
        let target = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.rules
            .get(target)
            .cloned()
            .ok_or_else(|| Error::Autodiff(format!("no rule registered for operation '{name}'")))
    }
}

/// Handle to one output of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    node: usize,
    output: usize,
}

/// Traced argument passed to [`Tape::call`].
#[derive(Clone)]
pub enum Input {
    Var(Var),
    Aux(Aux),
}

impl Input {
    pub fn aux<T: Any + Send + Sync>(value: T) -> Self {
        Input::Aux(Arc::new(value))
    }
}

impl From<Var> for Input {
    fn from(v: Var) -> Self {
        Input::Var(v)
    }
}

struct Node {
    op: String,
    inputs: Vec<Option<Var>>,
    outputs: Vec<Tensor>,
    pullback: Option<Pullback>,
}

/// One evaluation's computation graph. Not shareable across threads.
pub struct Tape<'r> {
    registry: &'r Registry,
    record: bool,
    nodes: Vec<Node>,
}

impl<'r> Tape<'r> {
    fn new(registry: &'r Registry, record: bool) -> Self {
        Self {
            registry,
            record,
            nodes: Vec::new(),
        }
    }

    pub fn registry(&self) -> &Registry {
        self.registry
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.node].outputs[v.output]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf("constant", t)
    }

    fn leaf(&mut self, op: &str, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: op.to_string(),
            inputs: Vec::new(),
            outputs: vec![t],
            pullback: None,
        });
        Var {
            node: self.nodes.len() - 1,
            output: 0,
        }
    }

    fn push(&mut self, op: &str, inputs: Vec<Option<Var>>, outputs: Vec<Tensor>, pullback: Option<Pullback>) -> Vec<Var> {
        if let Some(i) = outputs.iter().flat_map(|t| t.data.iter()).position(|v| !v.is_finite()) {
            log::debug!("operation '{op}' produced a non-finite value at flat index {i}");
        }
        let n = outputs.len();
        self.nodes.push(Node {
            op: op.to_string(),
            inputs,
            outputs,
            pullback: if self.record { pullback } else { None },
        });
        let node = self.nodes.len() - 1;
        (0..n).map(|output| Var { node, output }).collect()
    }

    /// Invoke a registered rule (or alias) on traced and auxiliary inputs.
    pub fn call(&mut self, name: &str, inputs: &[Input]) -> Result<Vec<Var>> {
        let prim = self.registry.lookup(name)?;
        let args: Vec<Arg> = inputs
            .iter()
            .map(|i| match i {
                Input::Var(v) => Arg::Tensor(self.value(*v).clone()),
                Input::Aux(a) => Arg::Aux(Arc::clone(a)),
            })
            .collect();
        let (outputs, pullback) = prim.apply(&args, self.record)?;
        if self.record && pullback.is_none() {
            return Err(Error::Autodiff(format!("rule '{name}' returned no pullback")));
        }
        let slots = inputs
            .iter()
            .map(|i| match i {
                Input::Var(v) => Some(*v),
                Input::Aux(_) => None,
            })
            .collect();
        Ok(self.push(name, slots, outputs, pullback))
    }

    /// Single-output convenience for [`Tape::call`].
    pub fn call1(&mut self, name: &str, inputs: &[Input]) -> Result<Var> {
        let outs = self.call(name, inputs)?;
        if outs.len() != 1 {
            return Err(Error::Autodiff(format!("'{name}' returned {} outputs, expected 1", outs.len())));
        }
        Ok(outs[0])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let pb: Pullback = Box::new(|c| Ok(vec![Cotangent::Dense(c[0].clone()), Cotangent::Dense(c[0].clone())]));
        Ok(self.push("add", vec![Some(a), Some(b)], vec![out], Some(pb))[0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x - y);
        let pb: Pullback = Box::new(|c| Ok(vec![Cotangent::Dense(c[0].clone()), Cotangent::Dense(c[0].map(|v| -v))]));
        Ok(self.push("sub", vec![Some(a), Some(b)], vec![out], Some(pb))[0])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_with(&va, &vb, |x, y| x * y);
        let pb: Pullback = Box::new(move |c| {
            Ok(vec![
                Cotangent::Dense(zip_with(&c[0], &vb, |g, y| g * y)),
                Cotangent::Dense(zip_with(&c[0], &va, |g, x| g * x)),
            ])
        });
        Ok(self.push("mul", vec![Some(a), Some(b)], vec![out], Some(pb))[0])
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x);
        let pb: Pullback = Box::new(move |c| Ok(vec![Cotangent::Dense(c[0].map(|g| alpha * g))]));
        self.push("scale", vec![Some(a)], vec![out], Some(pb))[0]
    }

    /// `a + beta` element-wise.
    pub fn shift(&mut self, a: Var, beta: f64) -> Var {
        let out = self.value(a).map(|x| x + beta);
        let pb: Pullback = Box::new(|c| Ok(vec![Cotangent::Dense(c[0].clone())]));
        self.push("shift", vec![Some(a)], vec![out], Some(pb))[0]
    }

    /// Element-wise power `a^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let va = self.value(a).clone();
        let out = va.map(|x| x.powf(p));
        let pb: Pullback = Box::new(move |c| Ok(vec![Cotangent::Dense(zip_with(&c[0], &va, |g, x| g * p * x.powf(p - 1.0)))]));
        self.push("powf", vec![Some(a)], vec![out], Some(pb))[0]
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let saved = out.clone();
        let pb: Pullback = Box::new(move |c| Ok(vec![Cotangent::Dense(zip_with(&c[0], &saved, |g, e| g * e))]));
        self.push("exp", vec![Some(a)], vec![out], Some(pb))[0]
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(f64::ln);
        let pb: Pullback = Box::new(move |c| Ok(vec![Cotangent::Dense(zip_with(&c[0], &va, |g, x| g / x))]));
        self.push("ln", vec![Some(a)], vec![out], Some(pb))[0]
    }

    /// Squared ℓ2 norm, a scalar.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = Tensor::scalar(va.data.iter().map(|x| x * x).sum());
        let pb: Pullback = Box::new(move |c| {
            let g2 = 2.0 * c[0].data[0];
            Ok(vec![Cotangent::Dense(va.map(|x| g2 * x))])
        });
        self.push("sum_sq", vec![Some(a)], vec![out], Some(pb))[0]
    }

    /// Inner product `⟨a, b⟩`, a scalar.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("inner", a, b)?;
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = Tensor::scalar(va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum());
        let pb: Pullback = Box::new(move |c| {
            let g = c[0].data[0];
            Ok(vec![Cotangent::Dense(vb.map(|y| g * y)), Cotangent::Dense(va.map(|x| g * x))])
        });
        Ok(self.push("inner", vec![Some(a), Some(b)], vec![out], Some(pb))[0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape.clone();
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        let pb: Pullback = Box::new(move |c| {
            let g = c[0].data[0];
            Ok(vec![Cotangent::Dense(Tensor {
                data: vec![g; shape.iter().product()],
                shape: shape.clone(),
            })])
        });
        self.push("sum", vec![Some(a)], vec![out], Some(pb))[0]
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let old = va.shape.clone();
        let out = Tensor::new(shape, va.data.clone())?;
        let pb: Pullback = Box::new(move |c| Ok(vec![Cotangent::Dense(Tensor::new(old.clone(), c[0].data.clone())?)]));
        Ok(self.push("reshape", vec![Some(a)], vec![out], Some(pb))[0])
    }

    fn backward(mut self, loss: Var, n_inputs: usize) -> Result<Vec<Cotangent>> {
        let mut cot: Vec<Vec<Option<Tensor>>> = self.nodes.iter().map(|n| vec![None; n.outputs.len()]).collect();
        cot[loss.node][loss.output] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].inputs.is_empty() {
                continue;
            }
            if cot[id].iter().all(Option::is_none) {
                continue;
            }
            let node = &mut self.nodes[id];
            let out_cot: Vec<Tensor> = std::mem::take(&mut cot[id])
                .into_iter()
                .zip(&node.outputs)
                .map(|(c, o)| c.unwrap_or_else(|| Tensor::zeros(&o.shape)))
                .collect();
            let pullback = node
                .pullback
                .take()
                .ok_or_else(|| Error::Autodiff(format!("operation '{}' has no pullback", node.op)))?;
            let in_cot = pullback(&out_cot)?;
            if in_cot.len() != node.inputs.len() {
                return Err(Error::Autodiff(format!(
                    "pullback of '{}' returned {} cotangents for {} inputs",
                    node.op,
                    in_cot.len(),
                    node.inputs.len()
                )));
            }
            let op = node.op.clone();
            let inputs = node.inputs.clone();
            for (slot, (input, c)) in inputs.into_iter().zip(in_cot).enumerate() {
                match (input, c) {
                    (_, Cotangent::NoTangent) => {}
                    (None, Cotangent::Dense(_)) => {
                        return Err(Error::Autodiff(format!(
                            "pullback of '{op}' returned a tangent for auxiliary slot {slot}"
                        )))
                    }
                    (Some(v), Cotangent::Dense(t)) => {
                        let expect = &self.nodes[v.node].outputs[v.output].shape;
                        if &t.shape != expect {
                            return Err(Error::Shape(format!(
                                "pullback of '{op}' slot {slot}: cotangent {:?} for input {:?}",
                                t.shape, expect
                            )));
                        }
                        match &mut cot[v.node][v.output] {
                            Some(acc) => acc.add_assign(&t),
                            empty => *empty = Some(t),
                        }
                    }
                }
            }
        }

        Ok(cot
            .into_iter()
            .take(n_inputs)
            .map(|mut c| match c[0].take() {
                Some(t) => Cotangent::Dense(t),
                None => Cotangent::NoTangent,
            })
            .collect())
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn run<F>(tape: &mut Tape<'_>, at: &[Tensor], loss: F) -> Result<(Var, f64)>
where
    F: FnOnce(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = at.iter().map(|t| tape.leaf("input", t.clone())).collect();
    let out = loss(tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Autodiff(format!("loss must be a scalar, got shape {:?}", v.shape)));
    }
    let value = v.data[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((out, value))
}

/// Loss value and cotangent for every entry of `at`, by one reverse sweep.
///
/// Inputs the loss never depends on (or only through non-differentiable
/// slots) report [`Cotangent::NoTangent`].
pub fn gradient<F>(registry: &Registry, at: &[Tensor], loss: F) -> Result<(f64, Vec<Cotangent>)>
where
    F: FnOnce(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(registry, true);
    let (out, value) = run(&mut tape, at, loss)?;
    let grads = tape.backward(out, at.len())?;
    Ok((value, grads))
}

/// Forward evaluation only.
pub fn value<F>(registry: &Registry, at: &[Tensor], loss: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(registry, false);
    run(&mut tape, at, loss).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldio::RngStream;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn sin_rule() -> PullbackRule {
        PullbackRule::from_fns(
            "sin",
            |a| Ok(vec![a[0].tensor()?.map(f64::sin)]),
            |a, _, c| {
                let x = a[0].tensor()?;
                Ok(vec![Cotangent::Dense(zip_with(&c[0], x, |g, x| g * x.cos()))])
            },
        )
    }

    #[test]
    fn quadratic_at_minimum() {
        let reg = Registry::new();
        let d = t(&[1.0, -2.0, 3.0]);
        let d2 = d.clone();
        let (l, g) = gradient(&reg, &[d.clone()], move |tp, x| {
            let dd = tp.constant(d2);
            let r = tp.sub(x[0], dd)?;
            let s = tp.sum_sq(r);
            Ok(tp.scale(s, 0.5))
        })
        .unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g[0].dense().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut reg = Registry::new();
        reg.register(sin_rule()).unwrap();
        assert!(reg.register(sin_rule()).is_err());
        assert!(reg.alias("sin", "sin").is_err());
        reg.alias("S", "sin").unwrap();
        assert_eq!(reg.resolve("S"), Some("sin"));
    }

    #[test]
    fn missing_rule_names_operation() {
        let reg = Registry::new();
        let e = value(&reg, &[t(&[1.0])], |tp, x| tp.call1("wave_forward", &[x[0].into()]))
            .unwrap_err()
            .to_string();
        assert!(e.contains("wave_forward"), "{e}");
    }

    #[test]
    fn non_scalar_and_nan_losses() {
        let reg = Registry::new();
        assert!(gradient(&reg, &[t(&[1.0, 2.0])], |_, x| Ok(x[0])).is_err());
        let e = value(&reg, &[t(&[-1.0])], |tp, x| {
            let l = tp.ln(x[0]);
            Ok(tp.sum(l))
        })
        .unwrap_err();
        assert_eq!(e.to_string(), "non-finite loss");
    }

    #[test]
    fn no_tangent_for_declared_slot_and_unused_inputs() {
        let mut reg = Registry::new();
        // y = a * sum(geom) where geom is declared non-differentiable
        reg.register(PullbackRule::from_fns(
            "weighted",
            |a| {
                let s: f64 = a[1].tensor()?.data().iter().sum();
                Ok(vec![a[0].tensor()?.map(|v| v * s)])
            },
            |a, _, c| {
                let s: f64 = a[1].tensor()?.data().iter().sum();
                Ok(vec![Cotangent::Dense(c[0].map(|g| g * s)), Cotangent::NoTangent])
            },
        ))
        .unwrap();
        let (_, g) = gradient(&reg, &[t(&[1.0, 2.0]), t(&[3.0]), t(&[7.0])], |tp, x| {
            let y = tp.call1("weighted", &[x[0].into(), x[1].into()])?;
            Ok(tp.sum_sq(y))
        })
        .unwrap();
        assert_eq!(g[0].dense().unwrap().data(), &[18.0, 36.0]);
        assert!(g[1].is_no_tangent());
        assert!(g[2].is_no_tangent());
    }

    #[test]
    fn tangent_for_aux_slot_is_rejected() {
        let mut reg = Registry::new();
        reg.register(PullbackRule::from_fns(
            "leaky",
            |a| Ok(vec![a[0].tensor()?.clone()]),
            |_, _, c| Ok(vec![Cotangent::Dense(c[0].clone()), Cotangent::Dense(Tensor::scalar(0.0))]),
        ))
        .unwrap();
        let r = gradient(&reg, &[t(&[1.0])], |tp, x| {
            let y = tp.call1("leaky", &[x[0].into(), Input::aux(3usize)])?;
            Ok(tp.sum(y))
        });
        assert!(r.is_err());
    }

    #[test]
    fn wrong_cotangent_shape_is_rejected() {
        let mut reg = Registry::new();
        reg.register(PullbackRule::from_fns(
            "bad",
            |a| Ok(vec![a[0].tensor()?.clone()]),
            |_, _, _| Ok(vec![Cotangent::Dense(Tensor::zeros(&[5]))]),
        ))
        .unwrap();
        let r = gradient(&reg, &[t(&[1.0, 2.0])], |tp, x| {
            let y = tp.call1("bad", &[x[0].into()])?;
            Ok(tp.sum(y))
        });
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut reg = Registry::new();
        reg.register(sin_rule()).unwrap();
        let x0 = t(&[0.3, -0.7, 1.1]);
        let f = |tp: &mut Tape<'_>, x: Var| -> Result<Var> {
            let s = tp.call1("sin", &[x.into()])?;
            Ok(tp.sum_sq(s))
        };
        let g = |tp: &mut Tape<'_>, x: Var| -> Result<Var> {
            let p = tp.powf(x, 3.0);
            Ok(tp.sum(p))
        };
        let (_, gf) = gradient(&reg, &[x0.clone()], |tp, x| f(tp, x[0])).unwrap();
        let (_, gg) = gradient(&reg, &[x0.clone()], |tp, x| g(tp, x[0])).unwrap();
        let (_, gs) = gradient(&reg, &[x0], |tp, x| {
            let a = f(tp, x[0])?;
            let b = g(tp, x[0])?;
            tp.add(a, b)
        })
        .unwrap();
        for i in 0..3 {
            let sum = gf[0].dense().unwrap().data()[i] + gg[0].dense().unwrap().data()[i];
            assert!((gs[0].dense().unwrap().data()[i] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn value_matches_gradient_bitwise() {
        let mut reg = Registry::new();
        reg.register(sin_rule()).unwrap();
        let mut s = RngStream::new(4);
        let x0 = t(&(0..6).map(|_| s.normal()).collect::<Vec<_>>());
        let loss = |tp: &mut Tape<'_>, x: &[Var]| -> Result<Var> {
            let a = tp.call1("sin", &[x[0].into()])?;
            let b = tp.mul(a, x[0])?;
            let e = tp.exp(b);
            let l = tp.sum_sq(e);
            Ok(tp.scale(l, 0.25))
        };
        let v = value(&reg, &[x0.clone()], loss).unwrap();
        let (g, _) = gradient(&reg, &[x0], loss).unwrap();
        assert_eq!(v.to_bits(), g.to_bits());
    }
}
