//! Exact-rational back-stepping oracle shared by the integration tests.
#![allow(dead_code)]

use num_rational::Ratio;
use resilient_backstep::backstep::TransformTable;

pub type Q = Ratio<i128>;

pub fn q(v: i128) -> Q {
    Q::from_integer(v)
}

pub fn gamma_q(g: f64) -> Q {
    // Gains used here are multiples of 1/2.
    let twice = (g * 2.0).round() as i128;
    assert_eq!(twice as f64 / 2.0, g);
    Q::new(twice, 2)
}

/// Rows of `z = T x` built from the virtual controls as linear forms in `x`.
pub fn oracle_t(n: usize, g: Q) -> (Vec<Vec<Q>>, Vec<Vec<Q>>) {
    let zero = vec![q(0); n];
    let mut t: Vec<Vec<Q>> = Vec::new();
    let mut alphas: Vec<Vec<Q>> = Vec::new();
    for j in 0..n {
        let prev_alpha = if j == 0 { zero.clone() } else { alphas[j - 1].clone() };
        let mut row = zero.clone();
        row[j] = q(1);
        for k in 0..n {
            row[k] -= prev_alpha[k];
        }
        t.push(row);
        // alpha_{j+1} = -g z_{j+1} - z_j + d/dt alpha_j along x_k' = x_{k+1}
        let mut a: Vec<Q> = t[j].iter().map(|c| -g * c).collect();
        if j > 0 {
            for k in 0..n {
                a[k] -= t[j - 1][k];
            }
            for k in 0..n - 1 {
                a[k + 1] += prev_alpha[k];
            }
        }
        alphas.push(a);
    }
    (t, alphas)
}

pub fn inverse(m: &[Vec<Q>]) -> Vec<Vec<Q>> {
    let n = m.len();
    let mut a: Vec<Vec<Q>> = m
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|k| if k == i { q(1) } else { q(0) }));
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n).find(|&r| a[r][col] != q(0)).expect("invertible");
        a.swap(col, p);
        let piv = a[col][col];
        for v in a[col].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != col && a[r][col] != q(0) {
                let f = a[r][col];
                let base = a[col].clone();
                for (v, b) in a[r].iter_mut().zip(&base) {
                    *v -= f * b;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn to_f(v: Q) -> f64 {
    *v.numer() as f64 / *v.denom() as f64
}

pub fn close(a: f64, b: Q) -> bool {
    let b = to_f(b);
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

/// Compares a production table with the oracle; `Err` names the first mismatch.
pub fn check_table(table: &TransformTable, g: f64) -> Result<(), String> {
    let n = table.n;
    let (t, alphas) = oracle_t(n, gamma_q(g));
    let c = inverse(&t);
    let zm = table.z_matrix();
    let cm = table.c_matrix();
    for i in 0..n {
        for k in 0..n {
            if !close(zm[i][k], t[i][k]) {
                return Err(format!("T n={n} g={g} ({i},{k}): {} vs {}", zm[i][k], t[i][k]));
            }
            if !close(cm[i][k], c[i][k]) {
                return Err(format!("C n={n} g={g} ({i},{k}): {} vs {}", cm[i][k], c[i][k]));
            }
        }
    }
    for j in 0..n.saturating_sub(1) {
        for k in 0..n {
            let got = table.alpha_rows[j].coefficients.get(k).copied().unwrap_or(0.0);
            if !close(got, alphas[j][k]) {
                return Err(format!("alpha_{} n={n} g={g} x{}", j + 1, k + 1));
            }
        }
    }
    // Feed-forward of alpha_{n-1} along the chain, expressed in z.
    let mut ff = vec![q(0); n];
    if n >= 2 {
        for k in 0..n - 1 {
            ff[k + 1] += alphas[n - 2][k];
        }
    }
    let mut cbar_max = q(0);
    let mut b_max = q(0);
    for col in 0..n {
        let b: Q = (0..n).map(|j| ff[j] * c[j][col]).sum();
        if !close(table.b_row.coefficients[col], b) {
            return Err(format!("b n={n} g={g} col {col}"));
        }
        let cbar: Q = (0..n).map(|j| abs(c[j][col])).sum();
        if !close(table.c_bar[col], cbar) {
            return Err(format!("c_bar n={n} g={g} col {col}"));
        }
        cbar_max = cbar_max.max(cbar);
        b_max = b_max.max(abs(b));
    }
    if !close(table.c_im, cbar_max) || !close(table.b_im, b_max) {
        return Err(format!("c_im/b_im n={n} g={g}"));
    }
    Ok(())
}

fn abs(v: Q) -> Q {
    if v < q(0) {
        -v
    } else {
        v
    }
}
