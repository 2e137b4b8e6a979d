//! Tensor index notation: tensor variables, accesses, expressions, statements,
//! dense tensor values, and the sequential reference evaluator.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cin::{CinStmt, Loop};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor {tensor} has order {order} but is accessed with {given} indices")]
    ArityMismatch {
        tensor: String,
        order: usize,
        given: usize,
    },
    #[error("index variable {var} bound to extent {first} and {second}")]
    ExtentMismatch {
        var: String,
        first: usize,
        second: usize,
    },
    #[error("tensor {0} has a zero-sized dimension")]
    ZeroExtent(String),
    #[error("index variable {0} appears twice in one access")]
    DuplicateIndex(String),
    #[error("output tensor {0} also appears on the right-hand side")]
    OutputOnRhs(String),
    #[error("tensor {name} declared with dims {a:?} and {b:?}")]
    InconsistentTensor {
        name: String,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("missing input tensor {0}")]
    MissingInput(String),
    #[error("input {name} has dims {got:?}, expected {expected:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("data length {got} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, got: usize },
}

/// Name of a loop/index variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexVar(String);

impl IndexVar {
    pub fn new(name: impl Into<String>) -> Self {
        IndexVar(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl From<&str> for IndexVar {
    fn from(s: &str) -> Self {
        IndexVar(s.to_string())
    }
}

impl From<String> for IndexVar {
    fn from(s: String) -> Self {
        IndexVar(s)
    }
}

impl fmt::Display for IndexVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds a list of index variables from names.
pub fn vars(names: &[&str]) -> Vec<IndexVar> {
    names.iter().map(|n| IndexVar::from(*n)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorVar {
    name: String,
    dims: Vec<usize>,
}

impl TensorVar {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Result<Self, TensorError> {
        let name = name.into();
        if dims.contains(&0) {
            return Err(TensorError::ZeroExtent(name));
        }
        Ok(TensorVar { name, dims })
    }

    pub fn scalar(name: impl Into<String>) -> Self {
        TensorVar {
            name: name.into(),
            dims: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Accesses this tensor with the given variables.
    pub fn at(&self, indices: &[&str]) -> Access {
        Access::new(self.clone(), vars(indices))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: TensorVar,
    pub indices: Vec<IndexVar>,
}

impl Access {
    pub fn new(tensor: TensorVar, indices: Vec<IndexVar>) -> Self {
        Access { tensor, indices }
    }

    pub fn name(&self) -> &str {
        self.tensor.name()
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tensor.name())?;
        if self.indices.is_empty() {
            return Ok(());
        }
        f.write_str("(")?;
        for (n, v) in self.indices.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Access(Access),
    Const(f64),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Accesses in textual (left-to-right) order.
    pub fn accesses(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        self.collect_accesses(&mut out);
        out
    }

    fn collect_accesses<'a>(&'a self, out: &mut Vec<&'a Access>) {
        match self {
            Expr::Access(a) => out.push(a),
            Expr::Const(_) => {}
            Expr::Add(l, r) | Expr::Mul(l, r) => {
                l.collect_accesses(out);
                r.collect_accesses(out);
            }
        }
    }

    /// Evaluates the expression, reading each access through `read`.
    pub fn eval<E>(&self, read: &mut impl FnMut(&Access) -> Result<f64, E>) -> Result<f64, E> {
        Ok(match self {
            Expr::Access(a) => read(a)?,
            Expr::Const(c) => *c,
            Expr::Add(l, r) => l.eval(read)? + r.eval(read)?,
            Expr::Mul(l, r) => l.eval(read)? * r.eval(read)?,
        })
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, in_mul: bool) -> fmt::Result {
        match self {
            Expr::Access(a) => write!(f, "{a}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Add(l, r) => {
                if in_mul {
                    f.write_str("(")?;
                }
                l.fmt_prec(f, false)?;
                f.write_str(" + ")?;
                r.fmt_prec(f, false)?;
                if in_mul {
                    f.write_str(")")?;
                }
                Ok(())
            }
            Expr::Mul(l, r) => {
                l.fmt_prec(f, true)?;
                f.write_str(" * ")?;
                r.fmt_prec(f, true)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, false)
    }
}

impl From<Access> for Expr {
    fn from(a: Access) -> Self {
        Expr::Access(a)
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Add(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Mul(Box::new(self), Box::new(rhs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignMode {
    Assign,
    SumReduce,
}

/// A checked tensor index notation statement `lhs = rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorIndexStmt {
    lhs: Access,
    rhs: Expr,
    extents: BTreeMap<IndexVar, usize>,
    free: Vec<IndexVar>,
    reduction: Vec<IndexVar>,
    mode: AssignMode,
}

impl TensorIndexStmt {
    pub fn lhs(&self) -> &Access {
        &self.lhs
    }

    pub fn rhs(&self) -> &Expr {
        &self.rhs
    }

    pub fn mode(&self) -> AssignMode {
        self.mode
    }

    pub fn free_vars(&self) -> &[IndexVar] {
        &self.free
    }

    pub fn reduction_vars(&self) -> &[IndexVar] {
        &self.reduction
    }

    pub fn extent(&self, v: &IndexVar) -> Option<usize> {
        self.extents.get(v).copied()
    }

    pub fn extents(&self) -> &BTreeMap<IndexVar, usize> {
        &self.extents
    }

    /// Free variables in written order, then reduction variables in order of
    /// first appearance.
    pub fn loop_order(&self) -> Vec<IndexVar> {
        self.free.iter().chain(&self.reduction).cloned().collect()
    }

    /// All distinct tensors, output first, then inputs in order of appearance.
    pub fn tensors(&self) -> Vec<TensorVar> {
        let mut out = vec![self.lhs.tensor.clone()];
        for a in self.rhs.accesses() {
            if !out.iter().any(|t| t.name() == a.name()) {
                out.push(a.tensor.clone());
            }
        }
        out
    }

    pub fn inputs(&self) -> Vec<TensorVar> {
        self.tensors().into_iter().skip(1).collect()
    }
}

impl fmt::Display for TensorIndexStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.lhs, self.rhs)
    }
}

fn bind(
    extents: &mut BTreeMap<IndexVar, usize>,
    access: &Access,
) -> Result<(), TensorError> {
    let t = &access.tensor;
    if access.indices.len() != t.order() {
        return Err(TensorError::ArityMismatch {
            tensor: t.name().to_string(),
            order: t.order(),
            given: access.indices.len(),
        });
    }
    for (n, v) in access.indices.iter().enumerate() {
        if access.indices[..n].contains(v) {
            return Err(TensorError::DuplicateIndex(v.to_string()));
        }
        let d = t.dims()[n];
        match extents.get(v) {
            Some(&e) if e != d => {
                return Err(TensorError::ExtentMismatch {
                    var: v.to_string(),
                    first: e,
                    second: d,
                })
            }
            Some(_) => {}
            None => {
                extents.insert(v.clone(), d);
            }
        }
    }
    Ok(())
}

/// Checks a statement and classifies its variables. Variables that appear only
/// on the right-hand side become sum reductions.
pub fn build_statement(lhs: Access, rhs: Expr) -> Result<TensorIndexStmt, TensorError> {
    let mut extents = BTreeMap::new();
    bind(&mut extents, &lhs)?;
    let mut seen: BTreeMap<&str, &TensorVar> = BTreeMap::new();
    let mut reduction = Vec::new();
    for a in rhs.accesses() {
        if a.name() == lhs.name() {
            return Err(TensorError::OutputOnRhs(a.name().to_string()));
        }
        if let Some(prev) = seen.insert(a.name(), &a.tensor) {
            if prev.dims() != a.tensor.dims() {
                return Err(TensorError::InconsistentTensor {
                    name: a.name().to_string(),
                    a: prev.dims().to_vec(),
                    b: a.tensor.dims().to_vec(),
                });
            }
        }
        bind(&mut extents, a)?;
        for v in &a.indices {
            if !lhs.indices.contains(v) && !reduction.contains(v) {
                reduction.push(v.clone());
            }
        }
    }
    let mode = if reduction.is_empty() {
        AssignMode::Assign
    } else {
        AssignMode::SumReduce
    };
    Ok(TensorIndexStmt {
        free: lhs.indices.clone(),
        lhs,
        rhs,
        extents,
        reduction,
        mode,
    })
}

/// Dense row-major tensor of 64-bit reals. Order-0 tensors hold one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(dims: &[usize]) -> Self {
        DenseTensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let vol: usize = dims.iter().product();
        if data.len() != vol {
            return Err(TensorError::DataLength {
                dims: dims.to_vec(),
                got: data.len(),
            });
        }
        Ok(DenseTensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for_each_coord(dims, |c| data.push(f(c)));
        DenseTensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.dims)
    }

    pub fn linear_index(&self, coord: &[usize]) -> usize {
        linear_index(&self.dims, coord)
    }

    pub fn get(&self, coord: &[usize]) -> f64 {
        self.data[self.linear_index(coord)]
    }

    pub fn set(&mut self, coord: &[usize], v: f64) {
        let n = self.linear_index(coord);
        self.data[n] = v;
    }

    /// Multiplies every element by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| x * alpha).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and every element.
    pub fn bit_eq(&self, other: &DenseTensor) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * dims[d + 1];
    }
    strides
}

pub fn linear_index(dims: &[usize], coord: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), coord.len());
    let mut idx = 0;
    for (c, d) in coord.iter().zip(dims) {
        debug_assert!(c < d, "coordinate {coord:?} out of {dims:?}");
        idx = idx * d + c;
    }
    idx
}

/// Visits every coordinate of `dims` in lexicographic order. A zero-length
/// `dims` visits the empty coordinate once; any zero extent visits nothing.
pub fn for_each_coord(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.contains(&0) {
        return;
    }
    let mut c = vec![0; dims.len()];
    loop {
        f(&c);
        let mut d = dims.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            c[d] += 1;
            if c[d] < dims[d] {
                break;
            }
            c[d] = 0;
        }
    }
}

fn check_input<'a>(
    inputs: &'a BTreeMap<String, DenseTensor>,
    t: &TensorVar,
) -> Result<&'a DenseTensor, TensorError> {
    let v = inputs
        .get(t.name())
        .ok_or_else(|| TensorError::MissingInput(t.name().to_string()))?;
    if v.dims() != t.dims() {
        return Err(TensorError::InputShape {
            name: t.name().to_string(),
            expected: t.dims().to_vec(),
            got: v.dims().to_vec(),
        });
    }
    Ok(v)
}

/// Reference evaluator. Output coordinates are visited in lexicographic order
/// of the free variables; each output accumulates from 0.0 over the reduction
/// coordinates in lexicographic order.
pub fn sequential_evaluate(
    stmt: &TensorIndexStmt,
    inputs: &BTreeMap<String, DenseTensor>,
) -> Result<DenseTensor, TensorError> {
    for t in stmt.inputs() {
        check_input(inputs, &t)?;
    }
    let extent = |v: &IndexVar| stmt.extents[v];
    let free_dims: Vec<usize> = stmt.free.iter().map(extent).collect();
    let red_dims: Vec<usize> = stmt.reduction.iter().map(extent).collect();
    let mut out = DenseTensor::zeros(stmt.lhs.tensor.dims());
    let mut value_of: BTreeMap<&IndexVar, usize> = BTreeMap::new();

    let point = |value_of: &BTreeMap<&IndexVar, usize>| -> f64 {
        let r: Result<f64, TensorError> = stmt.rhs.eval(&mut |a: &Access| {
            let coord: Vec<usize> = a.indices.iter().map(|v| value_of[v]).collect();
            Ok(inputs[a.name()].get(&coord))
        });
        r.expect("inputs checked above")
    };

    for_each_coord(&free_dims, |fc| {
        for (v, &c) in stmt.free.iter().zip(fc) {
            value_of.insert(v, c);
        }
        let value = match stmt.mode {
            AssignMode::Assign => point(&value_of),
            AssignMode::SumReduce => {
                let mut acc = 0.0;
                for_each_coord(&red_dims, |rc| {
                    for (v, &c) in stmt.reduction.iter().zip(rc) {
                        value_of.insert(v, c);
                    }
                    acc += point(&value_of);
                });
                acc
            }
        };
        // lhs indices are exactly the free variables, in order
        out.set(fc, value);
    });
    Ok(out)
}

/// Builds the loop nest: one forall per variable in `loop_order`, around
/// `lhs = rhs` or `lhs += rhs`.
pub fn lower_to_cin(stmt: &TensorIndexStmt) -> CinStmt {
    let leaf = match stmt.mode {
        AssignMode::Assign => CinStmt::Assign {
            lhs: stmt.lhs.clone(),
            rhs: stmt.rhs.clone(),
        },
        AssignMode::SumReduce => CinStmt::Reduce {
            lhs: stmt.lhs.clone(),
            rhs: stmt.rhs.clone(),
        },
    };
    stmt.loop_order().into_iter().rev().fold(leaf, |body, v| {
        let extent = stmt.extents[&v];
        CinStmt::forall(Loop::new(v, extent), body)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(name: &str, dims: &[usize]) -> TensorVar {
        TensorVar::new(name, dims.to_vec()).unwrap()
    }

    fn gemm(m: usize, n: usize, k: usize) -> TensorIndexStmt {
        let a = t("A", &[m, n]);
        let b = t("B", &[m, k]);
        let c = t("C", &[k, n]);
        build_statement(
            a.at(&["i", "j"]),
            Expr::from(b.at(&["i", "k"])) * c.at(&["k", "j"]).into(),
        )
        .unwrap()
    }

    #[test]
    fn gemm_bookkeeping() {
        let s = gemm(2, 2, 3);
        assert_eq!(s.free_vars(), vars(&["i", "j"]).as_slice());
        assert_eq!(s.reduction_vars(), vars(&["k"]).as_slice());
        assert_eq!(s.extent(&"i".into()), Some(2));
        assert_eq!(s.extent(&"j".into()), Some(2));
        assert_eq!(s.extent(&"k".into()), Some(3));
        assert_eq!(s.mode(), AssignMode::SumReduce);
    }

    #[test]
    fn ttv_reduces_over_k() {
        let a = t("A", &[2, 3]);
        let b = t("B", &[2, 3, 4]);
        let c = t("c", &[4]);
        let s = build_statement(
            a.at(&["i", "j"]),
            Expr::from(b.at(&["i", "j", "k"])) * c.at(&["k"]).into(),
        )
        .unwrap();
        assert_eq!(s.reduction_vars(), vars(&["k"]).as_slice());
    }

    #[test]
    fn extent_mismatch_detected() {
        let a = t("A", &[2, 2]);
        let b = t("B", &[2, 3]);
        let ok = t("C", &[2, 3]);
        let bad = t("C", &[2, 4]);
        let rhs = |c: &TensorVar| Expr::from(b.at(&["i", "k"])) * c.at(&["j", "k"]).into();
        assert!(build_statement(a.at(&["i", "j"]), rhs(&ok)).is_ok());
        assert!(matches!(
            build_statement(a.at(&["i", "j"]), rhs(&bad)),
            Err(TensorError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn arity_mismatch_detected() {
        let a = t("A", &[2, 2]);
        let b = t("B", &[2, 2]);
        let err = build_statement(a.at(&["i"]), b.at(&["i", "j"]).into()).unwrap_err();
        assert!(matches!(err, TensorError::ArityMismatch { .. }));
    }

    #[test]
    fn evaluate_small_cases() {
        let s = gemm(1, 1, 1);
        let mut inputs = BTreeMap::new();
        inputs.insert("B".into(), DenseTensor::from_vec(&[1, 1], vec![2.0]).unwrap());
        inputs.insert("C".into(), DenseTensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        assert_eq!(sequential_evaluate(&s, &inputs).unwrap().data(), &[6.0]);

        let s = gemm(2, 2, 2);
        let eye = DenseTensor::from_fn(&[2, 2], |c| if c[0] == c[1] { 1.0 } else { 0.0 });
        let mut inputs = BTreeMap::new();
        inputs.insert("B".into(), eye.clone());
        inputs.insert("C".into(), eye.clone());
        assert_eq!(sequential_evaluate(&s, &inputs).unwrap(), eye);
    }

    #[test]
    fn innerprod_of_ones_counts_points() {
        let a = TensorVar::scalar("a");
        let b = t("B", &[3, 3, 3]);
        let c = t("C", &[3, 3, 3]);
        let s = build_statement(
            a.at(&[]),
            Expr::from(b.at(&["i", "j", "k"])) * c.at(&["i", "j", "k"]).into(),
        )
        .unwrap();
        let ones = DenseTensor::from_fn(&[3, 3, 3], |_| 1.0);
        let inputs = BTreeMap::from([("B".to_string(), ones.clone()), ("C".to_string(), ones)]);
        assert_eq!(sequential_evaluate(&s, &inputs).unwrap().data(), &[27.0]);
    }

    #[test]
    fn missing_input_reported() {
        let s = gemm(2, 2, 2);
        let err = sequential_evaluate(&s, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, TensorError::MissingInput("B".into()));
    }

    #[test]
    fn lowering_orders_loops() {
        let s = gemm(2, 2, 3);
        assert_eq!(
            lower_to_cin(&s).to_string(),
            "forall(i) forall(j) forall(k) A(i,j) += B(i,k) * C(k,j)"
        );
        let a = t("a", &[3]);
        let b = t("b", &[3]);
        let s = build_statement(a.at(&["i"]), b.at(&["j"]).into()).unwrap();
        assert_eq!(lower_to_cin(&s).to_string(), "forall(i) forall(j) a(i) += b(j)");
        let scalar = build_statement(TensorVar::scalar("a").at(&[]), Expr::Const(2.0)).unwrap();
        assert_eq!(lower_to_cin(&scalar).to_string(), "a = 2");
    }

    #[test]
    fn coords_visit_lexicographically() {
        let mut seen = Vec::new();
        for_each_coord(&[2, 2], |c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        let mut n = 0;
        for_each_coord(&[], |_| n += 1);
        assert_eq!(n, 1);
        for_each_coord(&[3, 0], |_| n += 1);
        assert_eq!(n, 1);
    }
}
