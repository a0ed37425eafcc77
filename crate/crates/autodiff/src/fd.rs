//! Central finite differences, for checking analytic gradients in tests.

/// Central difference of `f` at `x` along each coordinate, with step
/// `h = rel_step * (1 + |x_i|)`.
pub fn central_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| central_partial(f, &mut probe, i, rel_step))
        .collect()
}

/// Central difference along coordinate `i` only. `probe` is restored on return.
pub fn central_partial(f: &mut dyn FnMut(&[f64]) -> f64, probe: &mut [f64], i: usize, rel_step: f64) -> f64 {
    let x0 = probe[i];
    let h = rel_step * (1.0 + x0.abs());
    probe[i] = x0 + h;
    let up = f(probe);
    probe[i] = x0 - h;
    let down = f(probe);
    probe[i] = x0;
    (up - down) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
