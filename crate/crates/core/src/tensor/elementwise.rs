use super::graph::{GradSink, Op};
use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the two operands of a binary op line up.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// right operand is a single element
    RightScalar,
    LeftScalar,
}

fn broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else {
        Err(Error::shape(
            "elementwise",
            "broadcast",
            format!("unsupported broadcast {:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, input: Var, kind: UnaryKind) -> Var {
        let f: fn(T) -> T = match kind {
            UnaryKind::Relu => |x| if x > T::zero() { x } else { T::zero() },
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Abs => |x| x.abs(),
        };
        let value = self.value(input).map(f);
        self.push(value, Op::Unary { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Sigmoid)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Abs)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast(av, bv)?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let value = match bc {
            Broadcast::Same => Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Broadcast::RightScalar => {
                let y = bv.data()[0];
                av.map(|x| f(x, y))
            }
            Broadcast::LeftScalar => {
                let x = av.data()[0];
                bv.map(|y| f(x, y))
            }
        };
        Ok(self.push(value, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }
}

pub(crate) fn unary_backward<T: Scalar>(
    kind: UnaryKind,
    input: Var,
    x: &Tensor<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let gi: Vec<T> = match kind {
        UnaryKind::Relu => x
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        UnaryKind::Sigmoid => out
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &g)| g * y * (T::one() - y))
            .collect(),
        UnaryKind::Abs => x
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .collect(),
    };
    sink.add(input, gi);
}

pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: Var,
    b: Var,
    av: &Tensor<T>,
    bv: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let bc = broadcast(av, bv).expect("validated in forward");
    // d out / d a and d out / d b at element i of the output
    let da = |i: usize| -> T {
        match kind {
            BinaryKind::Add | BinaryKind::Sub => T::one(),
            BinaryKind::Mul => match bc {
                Broadcast::RightScalar => bv.data()[0],
                _ => bv.data()[i],
            },
        }
    };
    let db = |i: usize| -> T {
        match kind {
            BinaryKind::Add => T::one(),
            BinaryKind::Sub => -T::one(),
            BinaryKind::Mul => match bc {
                Broadcast::LeftScalar => av.data()[0],
                _ => av.data()[i],
            },
        }
    };
    let reduce = |d: &dyn Fn(usize) -> T| -> Vec<T> {
        let s: f64 = g.iter().enumerate().map(|(i, &gi)| (gi * d(i)).as_f64()).sum();
        vec![T::of(s)]
    };
    let elementwise = |d: &dyn Fn(usize) -> T| -> Vec<T> { g.iter().enumerate().map(|(i, &gi)| gi * d(i)).collect() };

    if sink.wants(a) {
        let ga = if bc == Broadcast::LeftScalar {
            reduce(&da)
        } else {
            elementwise(&da)
        };
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let gb = if bc == Broadcast::RightScalar {
            reduce(&db)
        } else {
            elementwise(&db)
        };
        sink.add(b, gb);
    }
}
