//! Weight initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Orthogonal initialization: QR of a Gaussian matrix, sign-fixed so the
/// decomposition is unique, scaled by `gain`. For rectangular shapes the
/// QR runs on the taller orientation and is transposed back.
pub fn orthogonal(rows: usize, cols: usize, gain: f32, rng: &mut impl Rng) -> Tensor {
    let (tall_r, tall_c, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut a = vec![0.0f64; tall_r * tall_c];
    for x in a.iter_mut() {
        *x = rng.sample::<f64, _>(StandardNormal);
    }
    let q = qr_q(&mut a, tall_r, tall_c);

    let mut out = vec![0.0f32; rows * cols];
    for i in 0..tall_r {
        for j in 0..tall_c {
            let v = (q[i * tall_c + j] * gain as f64) as f32;
            if transpose {
                out[j * cols + i] = v;
            } else {
                out[i * cols + j] = v;
            }
        }
    }
    Tensor::new(vec![rows, cols], out).expect("orthogonal init shape")
}

/// Thin-Q factor of an r x c (r >= c) matrix via Householder reflections,
/// with columns sign-fixed by the R diagonal.
fn qr_q(a: &mut [f64], r: usize, c: usize) -> Vec<f64> {
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut diag_signs = vec![1.0f64; c];
    for k in 0..c {
        // Householder vector for column k below the diagonal.
        let mut norm = 0.0;
        for i in k..r {
            norm += a[i * c + k] * a[i * c + k];
        }
        let norm = norm.sqrt();
        let akk = a[k * c + k];
        let alpha = if akk >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0f64; r];
        let mut vnorm2 = 0.0;
        if norm > 0.0 {
            v[k] = akk - alpha;
            for i in (k + 1)..r {
                v[i] = a[i * c + k];
            }
            for x in &v[k..r] {
                vnorm2 += x * x;
            }
        }
        if vnorm2 > 1e-300 {
            // Apply H = I - 2 v v^T / (v^T v) to the remaining columns.
            for j in k..c {
                let mut dot = 0.0;
                for i in k..r {
                    dot += v[i] * a[i * c + j];
                }
                let s = 2.0 * dot / vnorm2;
                for i in k..r {
                    a[i * c + j] -= s * v[i];
                }
            }
        }
        diag_signs[k] = if a[k * c + k] >= 0.0 { 1.0 } else { -1.0 };
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{c-1} applied to the thin identity.
    let mut q = vec![0.0f64; r * c];
    for j in 0..c {
        q[j * c + j] = 1.0;
    }
    for k in (0..c).rev() {
        let v = &vs[k];
        let mut vnorm2 = 0.0;
        for x in &v[k..r] {
            vnorm2 += x * x;
        }
        if vnorm2 <= 1e-300 {
            continue;
        }
        for j in 0..c {
            let mut dot = 0.0;
            for i in k..r {
                dot += v[i] * q[i * c + j];
            }
            let s = 2.0 * dot / vnorm2;
            for i in k..r {
                q[i * c + j] -= s * v[i];
            }
        }
    }
    // Sign fix: Q columns flipped so R's diagonal is positive.
    for j in 0..c {
        if diag_signs[j] < 0.0 {
            for i in 0..r {
                q[i * c + j] = -q[i * c + j];
            }
        }
    }
    q
}
