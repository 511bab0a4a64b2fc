//! Helpers shared by the in-crate unit tests.

/// Relative comparison: absolute tolerance near zero, relative away from it.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() <= tol
    } else {
        (a - b).abs() / scale <= tol
    }
}

macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {
        let (a, b) = ($a, $b);
        assert!(
            crate::test_util::close(a, b, $tol),
            "{} vs {} (tol {})",
            a,
            b,
            $tol
        );
    };
}
pub(crate) use assert_close;
