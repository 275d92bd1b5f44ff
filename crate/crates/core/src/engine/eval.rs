//! Column-at-a-time expression evaluation.

use std::borrow::Cow;

use super::expr::{BinOp, Expr, ExprError, Func, UnaryOp};
use crate::format::ColumnBatch;

/// Anything exposing named, equal-length f64 columns.
pub trait Columns {
    fn len(&self) -> usize;
    fn get(&self, name: &str) -> Option<&[f64]>;
}

impl Columns for ColumnBatch {
    fn len(&self) -> usize {
        self.n_events()
    }

    fn get(&self, name: &str) -> Option<&[f64]> {
        self.column(name)
    }
}

#[inline]
pub(crate) fn truthy(v: f64) -> bool {
    v != 0.0
}

#[inline]
fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn apply_binary(op: BinOp, a: f64, b: f64) -> f64 {
    // Rust's ordered comparisons are already false for NaN; `!=` needs care.
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Lt => flag(a < b),
        BinOp::Le => flag(a <= b),
        BinOp::Gt => flag(a > b),
        BinOp::Ge => flag(a >= b),
        BinOp::Eq => flag(a == b),
        BinOp::Ne => flag(!a.is_nan() && !b.is_nan() && a != b),
        BinOp::And => flag(truthy(a) && truthy(b)),
        BinOp::Or => flag(truthy(a) || truthy(b)),
    }
}

fn apply_func(f: Func, a: f64, b: f64) -> f64 {
    match f {
        Func::Sqrt => a.sqrt(),
        Func::Abs => a.abs(),
        Func::Log => a.ln(),
        Func::Exp => a.exp(),
        Func::Min => nan_min(a, b),
        Func::Max => nan_max(a, b),
    }
}

/// Evaluates `expr` over every row of `batch`. Booleans are 1.0 / 0.0.
pub fn eval_expr<C: Columns + ?Sized>(expr: &Expr, batch: &C) -> Result<Vec<f64>, ExprError> {
    Ok(eval_inner(expr, batch)?.into_owned())
}

fn eval_inner<'a, C: Columns + ?Sized>(expr: &Expr, batch: &'a C) -> Result<Cow<'a, [f64]>, ExprError> {
    let n = batch.len();
    Ok(match expr {
        Expr::Num(v) => Cow::Owned(vec![*v; n]),
        Expr::Col(name) => Cow::Borrowed(
            batch
                .get(name)
                .ok_or_else(|| ExprError::UnknownIdentifier(name.clone()))?,
        ),
        Expr::Unary(op, inner) => {
            let mut v = eval_inner(inner, batch)?.into_owned();
            match op {
                UnaryOp::Neg => v.iter_mut().for_each(|x| *x = -*x),
                UnaryOp::Not => v.iter_mut().for_each(|x| *x = flag(!truthy(*x))),
            }
            Cow::Owned(v)
        }
        Expr::Binary(op, lhs, rhs) => {
            let a = eval_inner(lhs, batch)?;
            let b = eval_inner(rhs, batch)?;
            Cow::Owned(a.iter().zip(b.iter()).map(|(&x, &y)| apply_binary(*op, x, y)).collect())
        }
        Expr::Call(f, args) => {
            let a = eval_inner(&args[0], batch)?;
            let out = if f.arity() == 2 {
                let b = eval_inner(&args[1], batch)?;
                a.iter().zip(b.iter()).map(|(&x, &y)| apply_func(*f, x, y)).collect()
            } else {
                a.iter().map(|&x| apply_func(*f, x, 0.0)).collect()
            };
            Cow::Owned(out)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::expr::parse_expr;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn batch(pairs: &[(&str, Vec<f64>)]) -> ColumnBatch {
        ColumnBatch::new(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()).unwrap()
    }

    fn eval(src: &str, b: &ColumnBatch) -> Vec<f64> {
        eval_expr(&parse_expr(src).unwrap(), b).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(eval("a+b", &batch(&[("a", vec![1.0, 2.0]), ("b", vec![3.0, 4.0])])), vec![4.0, 6.0]);
        assert_eq!(eval("a>1", &batch(&[("a", vec![0.0, 1.0, 2.0])])), vec![0.0, 0.0, 1.0]);
        assert!(eval("sqrt(a)", &batch(&[("a", vec![-1.0])]))[0].is_nan());
    }

    #[test]
    fn nan_conventions() {
        let b = batch(&[("a", vec![f64::NAN]), ("b", vec![1.0])]);
        for cmp in ["a<b", "a<=b", "a>b", "a>=b", "a==b", "a!=b", "a!=a"] {
            assert_eq!(eval(cmp, &b), vec![0.0], "{cmp}");
        }
        assert!(eval("log(0-b) + b", &b)[0].is_nan());
        assert!(eval("min(a, b)", &b)[0].is_nan());
    }

    #[test]
    fn unknown_identifier() {
        let err = eval_expr(&parse_expr("a + zz").unwrap(), &batch(&[("a", vec![1.0])])).unwrap_err();
        assert_eq!(err, ExprError::UnknownIdentifier("zz".into()));
    }

    /// Row-wise reference interpreter, written independently of the
    /// vectorized path (scalar recursion, explicit NaN handling).
    fn scalar(expr: &Expr, row: &BTreeMap<String, f64>) -> f64 {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        let either_nan = |x: f64, y: f64| x.is_nan() || y.is_nan();
        match expr {
            Expr::Num(v) => *v,
            Expr::Col(n) => row[n],
            Expr::Unary(UnaryOp::Neg, e) => -scalar(e, row),
            Expr::Unary(UnaryOp::Not, e) => b(scalar(e, row) == 0.0),
            Expr::Binary(op, l, r) => {
                let (x, y) = (scalar(l, row), scalar(r, row));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Lt => b(!either_nan(x, y) && x < y),
                    BinOp::Le => b(!either_nan(x, y) && x <= y),
                    BinOp::Gt => b(!either_nan(x, y) && x > y),
                    BinOp::Ge => b(!either_nan(x, y) && x >= y),
                    BinOp::Eq => b(!either_nan(x, y) && x == y),
                    BinOp::Ne => b(!either_nan(x, y) && x != y),
                    BinOp::And => b(x != 0.0 && y != 0.0),
                    BinOp::Or => b(x != 0.0 || y != 0.0),
                }
            }
            Expr::Call(f, args) => {
                let x = scalar(&args[0], row);
                match f {
                    Func::Sqrt => x.sqrt(),
                    Func::Abs => x.abs(),
                    Func::Log => x.ln(),
                    Func::Exp => x.exp(),
                    Func::Min | Func::Max => {
                        let y = scalar(&args[1], row);
                        if either_nan(x, y) {
                            f64::NAN
                        } else if (*f == Func::Min) == (x < y) {
                            x
                        } else {
                            y
                        }
                    }
                }
            }
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-5i32..5).prop_map(|v| Expr::Num(v as f64 * 0.5)),
            prop_oneof![Just("a"), Just("b"), Just("c")].prop_map(Expr::col),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            let bin = prop_oneof![
                Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div),
                Just(BinOp::Lt), Just(BinOp::Le), Just(BinOp::Gt), Just(BinOp::Ge),
                Just(BinOp::Eq), Just(BinOp::Ne), Just(BinOp::And), Just(BinOp::Or),
            ];
            let un = prop_oneof![
                Just(Func::Sqrt), Just(Func::Abs), Just(Func::Log), Just(Func::Exp)
            ];
            prop_oneof![
                (bin, inner.clone(), inner.clone()).prop_map(|(op, a, b)| Expr::bin(op, a, b)),
                (un, inner.clone()).prop_map(|(f, a)| Expr::call(f, vec![a])),
                (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner.clone())
                    .prop_map(|(f, a, b)| Expr::call(f, vec![a, b])),
                inner.clone().prop_map(|a| Expr::Unary(UnaryOp::Neg, Box::new(a))),
                inner.prop_map(|a| Expr::Unary(UnaryOp::Not, Box::new(a))),
            ]
        })
    }

    fn value() -> impl Strategy<Value = f64> {
        prop_oneof![
            8 => -10.0f64..10.0,
            1 => Just(0.0),
            1 => Just(f64::NAN),
        ]
    }

    proptest! {
        #[test]
        fn vectorized_matches_row_interpreter(
            expr in arb_expr(),
            rows in prop::collection::vec((value(), value(), value()), 0..20),
        ) {
            let b = batch(&[
                ("a", rows.iter().map(|r| r.0).collect()),
                ("b", rows.iter().map(|r| r.1).collect()),
                ("c", rows.iter().map(|r| r.2).collect()),
            ]);
            let got = eval_expr(&expr, &b).unwrap();
            prop_assert_eq!(got.len(), rows.len());
            for (i, r) in rows.iter().enumerate() {
                let row: BTreeMap<String, f64> =
                    [("a".to_string(), r.0), ("b".to_string(), r.1), ("c".to_string(), r.2)].into();
                let want = scalar(&expr, &row);
                prop_assert!(
                    want == got[i] || (want.is_nan() && got[i].is_nan()),
                    "row {} expr {}: want {} got {}", i, expr, want, got[i]
                );
            }
        }
    }
}
