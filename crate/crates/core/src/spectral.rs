//! Per-channel 2D DFT, amplitude/phase decomposition and reconstruction,
//! plus the vector-Jacobian products of both directions.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::tensor::FeatureMap;

/// Paired amplitude and phase spectra, both C×H×W.
///
/// Straight out of [`decompose`] the amplitude is nonnegative and the phase
/// lies in (−π, π]. Transformed spectra may leave those ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpPhase {
    pub amplitude: FeatureMap,
    pub phase: FeatureMap,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// Unnormalized in-place 2D transform of a row-major H×W plane.
fn fft2(buf: &mut [Complex64], height: usize, width: usize, dir: Direction) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row, col) = match dir {
            Direction::Forward => (planner.plan_fft_forward(width), planner.plan_fft_forward(height)),
            Direction::Inverse => (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height)),
        };
        row.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); height];
        for x in 0..width {
            for y in 0..height {
                column[y] = buf[y * width + x];
            }
            col.process(&mut column);
            for y in 0..height {
                buf[y * width + x] = column[y];
            }
        }
    });
}

/// Bins that are their own conjugate partner; their DFT is real for real input.
fn is_self_conjugate(y: usize, x: usize, height: usize, width: usize) -> bool {
    (2 * y) % height == 0 && (2 * x) % width == 0
}

fn forward_plane(plane: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, height, width, Direction::Forward);
    for y in 0..height {
        for x in 0..width {
            if is_self_conjugate(y, x, height, width) {
                buf[y * width + x].im = 0.0;
            }
        }
    }
    buf
}

/// Complex spectrum of every channel, unnormalized.
pub fn fft_channels(f: &FeatureMap) -> Vec<Vec<Complex64>> {
    (0..f.channels())
        .map(|c| forward_plane(f.plane(c), f.height(), f.width()))
        .collect()
}

/// Canonical phase: arg of the bin, 0 for empty bins, and −π folded onto π.
fn phase_of(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let p = z.im.atan2(z.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn decompose(f: &FeatureMap) -> AmpPhase {
    let (c, h, w) = f.shape();
    let mut amplitude = FeatureMap::zeros(c, h, w);
    let mut phase = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let spec = forward_plane(f.plane(ch), h, w);
        for (a, z) in amplitude.plane_mut(ch).iter_mut().zip(&spec) {
            *a = z.norm();
        }
        for (p, z) in phase.plane_mut(ch).iter_mut().zip(&spec) {
            *p = phase_of(*z);
        }
    }
    AmpPhase { amplitude, phase }
}

/// Real part of the inverse DFT of A·e^{iP} per channel, together with the
/// largest discarded imaginary magnitude.
pub fn reconstruct_with_residue(s: &AmpPhase) -> (FeatureMap, f64) {
    let (c, h, w) = s.amplitude.shape();
    assert_eq!(s.phase.shape(), (c, h, w), "amplitude/phase shape mismatch");
    let n = (h * w) as f64;
    let mut out = FeatureMap::zeros(c, h, w);
    let mut residue = 0.0f64;
    for ch in 0..c {
        let mut buf: Vec<Complex64> = s
            .amplitude
            .plane(ch)
            .iter()
            .zip(s.phase.plane(ch))
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        fft2(&mut buf, h, w, Direction::Inverse);
        let plane = out.plane_mut(ch);
        for (o, z) in plane.iter_mut().zip(&buf) {
            *o = z.re / n;
            residue = residue.max((z.im / n).abs());
        }
    }
    (out, residue)
}

pub fn reconstruct(s: &AmpPhase) -> FeatureMap {
    reconstruct_with_residue(s).0
}

/// Gradient of a loss w.r.t. amplitude and phase, given its gradient w.r.t.
/// the reconstructed feature.
pub fn reconstruct_backward(s: &AmpPhase, grad_out: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = s.amplitude.shape();
    let n = (h * w) as f64;
    let mut d_amp = FeatureMap::zeros(c, h, w);
    let mut d_phase = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let mut buf: Vec<Complex64> = grad_out
            .plane(ch)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft2(&mut buf, h, w, Direction::Forward);
        let amp = s.amplitude.plane(ch);
        let ph = s.phase.plane(ch);
        let da = d_amp.plane_mut(ch);
        for i in 0..h * w {
            let dz = buf[i] / n;
            let (sin, cos) = ph[i].sin_cos();
            da[i] = dz.re * cos + dz.im * sin;
        }
        let dp = d_phase.plane_mut(ch);
        for i in 0..h * w {
            let dz = buf[i] / n;
            let (sin, cos) = ph[i].sin_cos();
            dp[i] = amp[i] * (dz.im * cos - dz.re * sin);
        }
    }
    (d_amp, d_phase)
}

/// Gradient w.r.t. the input feature, given gradients w.r.t. its amplitude
/// and phase. Empty bins contribute nothing.
pub fn decompose_backward(f: &FeatureMap, d_amp: &FeatureMap, d_phase: &FeatureMap) -> FeatureMap {
    let (c, h, w) = f.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let spec = forward_plane(f.plane(ch), h, w);
        let da = d_amp.plane(ch);
        let dp = d_phase.plane(ch);
        let mut buf: Vec<Complex64> = spec
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let a2 = z.norm_sqr();
                if a2 == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let a = a2.sqrt();
                Complex64::new(
                    da[i] * z.re / a - dp[i] * z.im / a2,
                    da[i] * z.im / a + dp[i] * z.re / a2,
                )
            })
            .collect();
        fft2(&mut buf, h, w, Direction::Inverse);
        for (o, z) in out.plane_mut(ch).iter_mut().zip(&buf) {
            *o = z.re;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let theta = -2.0
                            * PI
                            * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        acc += Complex64::from_polar(plane[y * w + x], theta);
                    }
                }
                out[ky * w + kx] = acc;
            }
        }
        out
    }

    fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.uniform_range(-10.0, 10.0))
    }

    #[test]
    fn constant_map_is_dc_only() {
        let v = 2.5;
        let s = decompose(&FeatureMap::from_fn(1, 2, 2, |_, _, _| v));
        assert_eq!(s.amplitude.as_slice(), &[4.0 * v, 0.0, 0.0, 0.0]);
        assert_eq!(s.phase.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut f = FeatureMap::zeros(1, 4, 4);
        f.set(0, 0, 0, 1.0);
        let s = decompose(&f);
        assert!(s.amplitude.as_slice().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        assert!(s.phase.as_slice().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn negative_real_bins_have_phase_pi() {
        let s = decompose(&FeatureMap::from_fn(1, 4, 4, |_, _, _| -1.0));
        assert_eq!(s.phase.get(0, 0, 0), PI);
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = Rng::new(11);
        let f = random_map(&mut rng, 2, 8, 8);
        let s = decompose(&f);
        for c in 0..2 {
            let spec = naive_dft(f.plane(c), 8, 8);
            for (i, z) in spec.iter().enumerate() {
                let a = s.amplitude.plane(c)[i];
                assert!((a - z.norm()).abs() <= 1e-6 * z.norm().max(1.0));
                let got = Complex64::from_polar(a, s.phase.plane(c)[i]);
                assert!((got - z).norm() <= 1e-6 * z.norm().max(1.0));
            }
        }
    }

    #[test]
    fn zero_amplitude_reconstructs_zero() {
        let s = AmpPhase {
            amplitude: FeatureMap::zeros(2, 3, 3),
            phase: FeatureMap::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f64),
        };
        assert!(reconstruct(&s).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_amplitude_doubles_feature() {
        let mut rng = Rng::new(5);
        let f = random_map(&mut rng, 3, 7, 8);
        let mut s = decompose(&f);
        s.amplitude = s.amplitude.scaled(2.0);
        let (g, residue) = reconstruct_with_residue(&s);
        for (a, b) in g.as_slice().iter().zip(f.as_slice()) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
        assert!(residue < 1e-10);
    }

    #[test]
    fn parseval_holds() {
        let mut rng = Rng::new(9);
        let f = random_map(&mut rng, 3, 5, 6);
        let s = decompose(&f);
        for c in 0..3 {
            let energy: f64 = f.plane(c).iter().map(|v| v * v).sum();
            let spec: f64 = s.amplitude.plane(c).iter().map(|a| a * a).sum::<f64>() / 30.0;
            assert!((energy - spec).abs() <= 1e-6 * energy);
        }
    }

    #[test]
    fn backward_passes_match_finite_differences() {
        let mut rng = Rng::new(21);
        let f = random_map(&mut rng, 2, 4, 5);
        let wa = random_map(&mut rng, 2, 4, 5);
        let wp = random_map(&mut rng, 2, 4, 5);
        let loss = |g: &FeatureMap| {
            let s = decompose(g);
            s.amplitude.as_slice().iter().zip(wa.as_slice()).map(|(a, b)| a * b).sum::<f64>()
                + s.phase.as_slice().iter().zip(wp.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = decompose_backward(&f, &wa, &wp);
        let eps = 1e-6;
        for i in 0..f.as_slice().len() {
            let mut p = f.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = f.clone();
            m.as_mut_slice()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - grad.as_slice()[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}");
        }

        let s = decompose(&f);
        let up = random_map(&mut rng, 2, 4, 5);
        let (da, dp) = reconstruct_backward(&s, &up);
        let rloss = |s: &AmpPhase| {
            reconstruct(s).as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..f.as_slice().len() {
            for (which, analytic) in [(0, &da), (1, &dp)] {
                let mut p = s.clone();
                let mut m = s.clone();
                let (tp, tm) = if which == 0 {
                    (&mut p.amplitude, &mut m.amplitude)
                } else {
                    (&mut p.phase, &mut m.phase)
                };
                tp.as_mut_slice()[i] += eps;
                tm.as_mut_slice()[i] -= eps;
                let fd = (rloss(&p) - rloss(&m)) / (2.0 * eps);
                let a = analytic.as_slice()[i];
                assert!((fd - a).abs() < 1e-5 * (1.0 + fd.abs()), "{which} {i}");
            }
        }
    }
}
