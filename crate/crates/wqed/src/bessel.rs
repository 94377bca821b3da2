//! Integer-order Bessel functions of the first kind.

/// J_n(x) for every order 0..=n_max, by Miller's downward recurrence
/// normalised with J_0 + 2 Σ J_2k = 1.
pub fn bessel_j_orders(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let ax = x.abs();
    let top = n_max.max(ax.ceil() as usize);
    let mut start = top + 20 + (40.0 * top as f64).sqrt() as usize;
    if start % 2 == 1 {
        start += 1;
    }
    let mut j_next = 0.0;
    let mut j_cur = 1e-300_f64;
    let mut norm = 0.0;
    let mut scaled = vec![0.0; n_max + 1];
    for m in (0..start).rev() {
        // J_m = (2(m+1)/x) J_{m+1} - J_{m+2}
        let j_m = 2.0 * (m + 1) as f64 / ax * j_cur - j_next;
        j_next = j_cur;
        j_cur = j_m;
        if j_cur.abs() > 1e250 {
            j_cur *= 1e-250;
            j_next *= 1e-250;
            norm *= 1e-250;
            for v in scaled.iter_mut() {
                *v *= 1e-250;
            }
        }
        if m <= n_max {
            scaled[m] = j_cur;
        }
        if m % 2 == 0 {
            norm += if m == 0 { j_cur } else { 2.0 * j_cur };
        }
    }
    for (n, v) in scaled.iter().enumerate() {
        let mut val = v / norm;
        if x < 0.0 && n % 2 == 1 {
            val = -val;
        }
        out[n] = val;
    }
    out
}

/// J_n(x) for any integer order.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    let m = n.unsigned_abs() as usize;
    let v = bessel_j_orders(m, x)[m];
    if n < 0 && m % 2 == 1 {
        -v
    } else {
        v
    }
}
