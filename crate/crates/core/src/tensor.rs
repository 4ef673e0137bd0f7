//! Rank-4 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is an immutable `(N, C, H, W)` row-major buffer. Operations
//! that see at least one input requiring gradients record a [`Backward`]
//! node, so the result of a forward pass is the root of an acyclic graph
//! that [`Tensor::backward`] walks in reverse topological order.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{self, MatMut, MatRef};

/// Floating-point element type usable in a graph.
pub trait Element:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw strided GEMM, `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds, non-aliasing (for `c`) matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Extents `(N, C, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// A `(rows, cols)` matrix stored as `(rows, cols, 1, 1)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([rows, cols, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }

    pub fn c(&self) -> usize {
        self.0[1]
    }

    pub fn h(&self) -> usize {
        self.0[2]
    }

    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Extent of one sample, `C * H * W`.
    pub fn sample_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    /// The 2-D view used by matrix ops: `(N, C * H * W)`.
    pub fn as_matrix(&self) -> (usize, usize) {
        (self.0[0], self.sample_len())
    }

    fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Whether `other` can be broadcast over `self` along singleton axes.
    pub fn broadcasts_over(&self, other: &Shape) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(&a, &b)| a == b || b == 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

/// Reverse-mode rule of a recorded operation.
///
/// `backward` receives the op's inputs, its forward output and the gradient
/// flowing into that output, and returns one gradient per input (`None` for
/// inputs that do not require gradients).
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    name: Option<String>,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Shared handle to an immutable tensor and the graph that produced it.
pub struct Tensor<T: Element = f32>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("name", &self.0.name)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on this thread currently record graph nodes.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

impl<T: Element> Tensor<T> {
    fn from_parts(
        shape: Shape,
        data: Vec<T>,
        requires_grad: bool,
        name: Option<String>,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            name,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant leaf tensor.
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self::from_parts(shape, data, false, None, None))
    }

    /// Leaf tensor, optionally tracked for gradients.
    pub fn leaf(shape: impl Into<Shape>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(if requires_grad {
            t.requires_grad_leaf()
        } else {
            t
        })
    }

    /// Named trainable leaf; its gradient appears under `name` in a [`GradientMap`].
    pub fn parameter(
        name: impl Into<String>,
        shape: impl Into<Shape>,
        data: Vec<T>,
    ) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_parts(
            t.0.shape,
            t.to_vec(),
            true,
            Some(name.into()),
            None,
        ))
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self::from_parts(shape, vec![value; shape.numel()], false, None, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Result of an operation. A graph node is recorded when gradient mode is
    /// on and any input requires gradients.
    pub fn from_op(
        shape: Shape,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            let node = Node {
                op: Box::new(op),
                inputs,
            };
            Self::from_parts(shape, data, true, None, Some(node))
        } else {
            Self::from_parts(shape, data, false, None, None)
        }
    }

    /// Copy of this tensor as a fresh leaf that requires gradients.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::from_parts(self.0.shape, self.to_vec(), true, self.0.name.clone(), None)
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape, self.to_vec(), false, None, None)
    }

    /// Same values under a new name, as a trainable leaf.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self::from_parts(self.0.shape, self.to_vec(), true, Some(name.into()), None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing operation, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    /// Gradient accumulated into this leaf by previous backward calls.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let g = self.0.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|v| Self::from_parts(self.0.shape, v.clone(), false, None, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_string()));
        }
        Ok(self.0.data[0])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Reshape,
        ))
    }

    /// Differentiates a scalar loss, returning gradients of every named
    /// trainable leaf and accumulating into each leaf's gradient buffer.
    pub fn backward(&self) -> Result<GradientMap<T>> {
        if self.shape() != Shape::SCALAR {
            return Err(Error::NotScalar(self.shape().to_string()));
        }
        self.backward_from(&[T::one()])
    }

    /// Reverse pass seeded with an arbitrary output gradient of this tensor's shape.
    pub fn backward_from(&self, seed: &[T]) -> Result<GradientMap<T>> {
        if seed.len() != self.numel() {
            return Err(Error::shape(
                "backward_from",
                self.shape(),
                format!("seed of {}", seed.len()),
            ));
        }
        let mut map = GradientMap::default();
        if !self.requires_grad() {
            return Ok(map);
        }

        // Iterative post-order DFS gives a topological order of the graph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for inp in node.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), seed.to_vec());
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let input_grads = node.op.backward(&node.inputs, &t.0.data, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(
                    ig.len(),
                    inp.numel(),
                    "{} input grad length",
                    node.op.name()
                );
                match grads.get_mut(&inp.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        grads.insert(inp.id(), ig);
                    }
                }
            }
        }

        for t in order.iter().filter(|t| t.is_leaf()) {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            {
                let mut buf = t.0.grad.lock().expect("grad lock poisoned");
                match buf.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => *buf = Some(g.clone()),
                }
            }
            if let Some(name) = &t.0.name {
                map.entries.insert(
                    name.clone(),
                    Self::from_parts(t.shape(), g, false, None, None),
                );
            }
        }
        Ok(map)
    }
}

/// Gradients of named trainable leaves, keyed by parameter name.
#[derive(Debug)]
pub struct GradientMap<T: Element = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for GradientMap<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Element> GradientMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.entries.insert(name.into(), grad);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

/// Kinds accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind<T> {
    Add,
    Sub,
    Mul,
    BroadcastMul,
    Sigmoid,
    Relu,
    Scale(T),
}

/// Dispatches one elementwise kind; binary kinds require `b`.
pub fn elementwise<T: Element>(
    kind: ElementwiseKind<T>,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let need_b =
        || b.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs a second operand")));
    match kind {
        ElementwiseKind::Add => a.add(need_b()?),
        ElementwiseKind::Sub => a.sub(need_b()?),
        ElementwiseKind::Mul | ElementwiseKind::BroadcastMul => a.mul(need_b()?),
        ElementwiseKind::Sigmoid => Ok(a.sigmoid()),
        ElementwiseKind::Relu => Ok(a.relu()),
        ElementwiseKind::Scale(s) => Ok(a.scale(s)),
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Index of the broadcast operand for every element of the output.
fn broadcast_index(out: Shape, b: Shape) -> Vec<usize> {
    let os = out.0;
    let bs = b.strides();
    let bst: [usize; 4] = std::array::from_fn(|i| if b.0[i] == 1 { 0 } else { bs[i] });
    let mut idx = Vec::with_capacity(out.numel());
    for n in 0..os[0] {
        for c in 0..os[1] {
            for h in 0..os[2] {
                let base = n * bst[0] + c * bst[1] + h * bst[2];
                for w in 0..os[3] {
                    idx.push(base + w * bst[3]);
                }
            }
        }
    }
    idx
}

struct Binary {
    kind: BinaryKind,
    same_shape: bool,
}

impl<T: Element> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let bidx = if self.same_shape {
            None
        } else {
            Some(broadcast_index(a.shape(), b.shape()))
        };
        let b_at = |i: usize| match &bidx {
            Some(ix) => b.data()[ix[i]],
            None => b.data()[i],
        };
        let ga = a.requires_grad().then(|| match self.kind {
            BinaryKind::Add | BinaryKind::Sub => grad.to_vec(),
            BinaryKind::Mul => grad.iter().enumerate().map(|(i, &g)| g * b_at(i)).collect(),
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            for (i, &g) in grad.iter().enumerate() {
                let j = bidx.as_ref().map_or(i, |ix| ix[i]);
                let contrib = match self.kind {
                    BinaryKind::Add => g,
                    BinaryKind::Sub => -g,
                    BinaryKind::Mul => g * a.data()[i],
                };
                gb[j] = gb[j] + contrib;
            }
            gb
        });
        vec![ga, gb]
    }
}

struct Unary<T> {
    kind: UnaryKind<T>,
}

#[derive(Clone, Copy)]
enum UnaryKind<T> {
    Sigmoid,
    Relu,
    Scale(T),
}

impl<T: Element> Backward<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::Scale(_) => "scale",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let g = match self.kind {
            UnaryKind::Sigmoid => grad
                .iter()
                .zip(output)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
            UnaryKind::Relu => grad
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            UnaryKind::Scale(s) => grad.iter().map(|&g| g * s).collect(),
        };
        vec![Some(g)]
    }
}

struct Reshape;

impl<T: Element> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Sum;

impl<T: Element> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; inputs[0].numel()])]
    }
}

struct Mean;

impl<T: Element> Backward<T> for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = inputs[0].numel();
        vec![Some(vec![grad[0] / T::of_f64(n as f64); n])]
    }
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinaryKind, op: &'static str) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if !sa.broadcasts_over(&sb) {
            return Err(Error::shape(op, sa, sb));
        }
        let same_shape = sa == sb;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<T> = if same_shape {
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let idx = broadcast_index(sa, sb);
            self.data()
                .iter()
                .zip(idx)
                .map(|(&x, j)| f(x, other.data()[j]))
                .collect()
        };
        Ok(Tensor::from_op(
            sa,
            data,
            vec![self.clone(), other.clone()],
            Binary { kind, same_shape },
        ))
    }

    /// `self + other`, with `other` broadcast over singleton axes.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise product; `other` may broadcast over singleton axes, e.g.
    /// `(N, C, 1, 1)` channel gates or `(N, 1, H, W)` spatial gates.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    fn unary(&self, kind: UnaryKind<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape(), data, vec![self.clone()], Unary { kind })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            UnaryKind::Relu,
            |x| if x < T::zero() { T::zero() } else { x },
        )
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary(UnaryKind::Scale(s), |x| x * s)
    }

    /// Sum of all elements as a scalar tensor (accumulated in `f64`).
    pub fn sum(&self) -> Tensor<T> {
        let s: f64 = self.data().iter().map(|x| x.as_f64()).sum();
        Tensor::from_op(Shape::SCALAR, vec![T::of_f64(s)], vec![self.clone()], Sum)
    }

    pub fn mean(&self) -> Tensor<T> {
        let s: f64 = self.data().iter().map(|x| x.as_f64()).sum();
        let m = s / self.numel().max(1) as f64;
        Tensor::from_op(Shape::SCALAR, vec![T::of_f64(m)], vec![self.clone()], Mean)
    }
}

/// Numerically stable logistic function. Saturated values are held one step
/// inside `(0, 1)` so gates never fully open or close.
pub fn sigmoid<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    if s.is_nan() {
        return s;
    }
    s.max(T::min_positive_value())
        .min(T::one() - T::epsilon() / T::of_f64(2.0))
}

// ---------------------------------------------------------------------------
// Matrix product and channel concatenation
// ---------------------------------------------------------------------------

struct MatMulOp {
    m: usize,
    k: usize,
    p: usize,
}

impl<T: Element> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, p) = (self.m, self.k, self.p);
        let ga = a.requires_grad().then(|| {
            // dA = G * B^T
            let mut ga = vec![T::zero(); m * k];
            linalg::gemm(
                T::one(),
                MatRef::row_major(grad, m, p),
                MatRef::transposed(b.data(), p, k),
                T::zero(),
                MatMut::row_major(&mut ga, m, k),
            );
            ga
        });
        let gb = b.requires_grad().then(|| {
            // dB = A^T * G
            let mut gb = vec![T::zero(); k * p];
            linalg::gemm(
                T::one(),
                MatRef::transposed(a.data(), k, m),
                MatRef::row_major(grad, m, p),
                T::zero(),
                MatMut::row_major(&mut gb, k, p),
            );
            gb
        });
        vec![ga, gb]
    }
}

/// Matrix product of `a` viewed as `(M, K)` and `b` viewed as `(K, P)`;
/// the result has shape `(M, P, 1, 1)`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape().as_matrix();
    let (k2, p) = b.shape().as_matrix();
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * p];
    linalg::gemm(
        T::one(),
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, p),
        T::zero(),
        MatMut::row_major(&mut out, m, p),
    );
    Ok(Tensor::from_op(
        Shape::matrix(m, p),
        out,
        vec![a.clone(), b.clone()],
        MatMulOp { m, k, p },
    ))
}

struct ConcatChannels {
    channels: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let plane = s.h() * s.w();
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (inp, &c) in inputs.iter().zip(&self.channels) {
            if inp.requires_grad() {
                let mut g = Vec::with_capacity(inp.numel());
                for n in 0..s.n() {
                    let start = (n * total + offset) * plane;
                    g.extend_from_slice(&grad[start..start + c * plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one input".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::shape("concat_channels", first, s));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape().c()).collect();
    let total: usize = channels.iter().sum();
    let plane = first.h() * first.w();
    let mut data = Vec::with_capacity(first.n() * total * plane);
    for n in 0..first.n() {
        for (p, &c) in parts.iter().zip(&channels) {
            let start = n * c * plane;
            data.extend_from_slice(&p.data()[start..start + c * plane]);
        }
    }
    Ok(Tensor::from_op(
        Shape::new(first.n(), total, first.h(), first.w()),
        data,
        parts.to_vec(),
        ConcatChannels { channels },
    ))
}
