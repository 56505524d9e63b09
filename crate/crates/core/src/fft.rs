//! Mixed-radix fast Fourier transform for arbitrary lengths.
//!
//! Lengths whose prime factors are all small use recursive decimation in
//! time, one radix per prime factor. Lengths with a large prime factor fall
//! back to Bluestein's chirp-z algorithm on a power-of-two inner transform.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Prime factors above this use Bluestein rather than an O(p²) butterfly.
const MAX_DIRECT_RADIX: usize = 61;

#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    kind: PlanKind,
}

#[derive(Clone, Debug)]
enum PlanKind {
    MixedRadix {
        factors: Vec<usize>,
        roots: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_fft: Vec<Complex64>,
        inner: Box<FftPlan>,
    },
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    // radix-4 is not special-cased; 2s come first so butterflies stay cheap
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// `exp(-2πi·k/n)` with the angle reduced exactly in integers.
fn root(k: usize, n: usize) -> Complex64 {
    let a = -2.0 * PI * ((k % n) as f64) / n as f64;
    Complex64::new(a.cos(), a.sin())
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let factors = prime_factors(n);
        if factors.iter().any(|&p| p > MAX_DIRECT_RADIX) {
            return Self::bluestein(n);
        }
        FftPlan {
            n,
            kind: PlanKind::MixedRadix {
                factors,
                roots: (0..n).map(|k| root(k, n)).collect(),
            },
        }
    }

    fn bluestein(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = FftPlan::new(m);
        // chirp_k = exp(-iπ k²/n); k² is reduced mod 2n to keep the angle small
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                let a = -PI * k2 / n as f64;
                Complex64::new(a.cos(), a.sin())
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.forward(&mut kernel);
        FftPlan {
            n,
            kind: PlanKind::Bluestein {
                chirp,
                kernel_fft: kernel,
                inner: Box::new(inner),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X_k = Σ_j x_j·exp(-2πi·jk/n)`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length must match the plan");
        match &self.kind {
            PlanKind::MixedRadix { factors, roots } => {
                let input = buf.to_vec();
                let mut t = vec![Complex64::new(0.0, 0.0); factors.iter().copied().max().unwrap_or(1)];
                let mut y = t.clone();
                mixed_radix(&input, 1, buf, self.n, self.n, factors, roots, &mut t, &mut y);
            }
            PlanKind::Bluestein {
                chirp,
                kernel_fft,
                inner,
            } => {
                let m = inner.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..self.n {
                    a[k] = buf[k] * chirp[k];
                }
                inner.forward(&mut a);
                for (x, k) in a.iter_mut().zip(kernel_fft) {
                    *x *= k;
                }
                inner.inverse(&mut a);
                for k in 0..self.n {
                    buf[k] = a[k] * chirp[k];
                }
            }
        }
    }

    /// In-place inverse transform, normalised by `1/n`.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        for x in buf.iter_mut() {
            *x = x.conj();
        }
        self.forward(buf);
        let s = 1.0 / self.n as f64;
        for x in buf.iter_mut() {
            *x = x.conj() * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mixed_radix(
    input: &[Complex64],
    stride: usize,
    out: &mut [Complex64],
    len: usize,
    total: usize,
    factors: &[usize],
    roots: &[Complex64],
    t: &mut [Complex64],
    y: &mut [Complex64],
) {
    if len == 1 {
        out[0] = input[0];
        return;
    }
    let p = factors[0];
    let m = len / p;
    for q in 0..p {
        mixed_radix(
            &input[q * stride..],
            stride * p,
            &mut out[q * m..(q + 1) * m],
            m,
            total,
            &factors[1..],
            roots,
            t,
            y,
        );
    }
    let level = total / len;
    let radix_step = total / p;
    for k in 0..m {
        for q in 0..p {
            t[q] = out[q * m + k] * roots[(q * k * level) % total];
        }
        if p == 2 {
            out[k] = t[0] + t[1];
            out[k + m] = t[0] - t[1];
            continue;
        }
        for r in 0..p {
            let mut acc = t[0];
            for q in 1..p {
                acc += t[q] * roots[(q * r * radix_step) % total];
            }
            y[r] = acc;
        }
        for r in 0..p {
            out[k + r * m] = y[r];
        }
    }
}

/// Forward transform of a real signal, returning the full complex spectrum.
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let plan = FftPlan::new(x.len());
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    buf
}

/// Direct O(n²) DFT; the reference the fast paths are tested against.
pub fn dft_naive(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| v * root(j * k % n, n))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize, seed: u64) -> Vec<Complex64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let a = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let b = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
                Complex64::new(a, b)
            })
            .collect()
    }

    #[test]
    fn factorisation() {
        assert_eq!(prime_factors(440), vec![2, 2, 2, 5, 11]);
        assert_eq!(prime_factors(1), Vec::<usize>::new());
        assert_eq!(prime_factors(97), vec![97]);
    }

    #[test]
    fn matches_naive_dft_on_mixed_lengths() {
        for &n in &[1usize, 2, 3, 4, 5, 6, 8, 12, 30, 49, 64, 97, 121, 202, 440, 1009] {
            let x = signal(n, n as u64);
            let want = dft_naive(&x);
            let mut got = x.clone();
            FftPlan::new(n).forward(&mut got);
            let err = got
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-9 * n as f64, "n={n} err={err}");
        }
    }

    #[test]
    fn inverse_round_trips() {
        for &n in &[7usize, 440, 127] {
            let x = signal(n, 9);
            let mut y = x.clone();
            let plan = FftPlan::new(n);
            plan.forward(&mut y);
            plan.inverse(&mut y);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
        }
    }
}
