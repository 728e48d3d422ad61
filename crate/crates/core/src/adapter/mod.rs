//! Three-layer bottleneck text adapter with a learnable residual gate.
//!
//! ```text
//! h1 = relu(W_down · z)        W_down: r × d
//! h2 = relu(W_mid  · h1)       W_mid:  r × r
//! a  = W_up · h2               W_up:   d × r
//! y  = z + s · a
//! ```
//!
//! There are no bias terms. The ReLU subgradient at exactly zero is taken as 0.

mod checkpoint;

use crate::error::{Error, Result};
use crate::numerics::{dot, matvec, relu, Mat64, Vec64};

pub use checkpoint::{load, load_file, save, save_file, Meta, CHECKPOINT_VERSION};

/// Trainable adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    d: usize,
    r: usize,
    w_down: Mat64,
    w_mid: Mat64,
    w_up: Mat64,
    s: f64,
}

/// Gradients with the same layout as [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub g_down: Mat64,
    pub g_mid: Mat64,
    pub g_up: Mat64,
    pub g_s: f64,
}

/// Intermediate values of one forward pass, kept for `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub z: Vec64,
    /// `W_down · z` before the ReLU.
    pub pre1: Vec64,
    pub h1: Vec64,
    /// `W_mid · h1` before the ReLU.
    pub pre2: Vec64,
    pub h2: Vec64,
    pub a: Vec64,
    pub y: Vec64,
}

impl ForwardTrace {
    /// Smallest `|pre-activation|` over both ReLU layers.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre1
            .iter()
            .chain(self.pre2.iter())
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }
}

pub(crate) fn check_dims(d: usize, r: usize) -> Result<()> {
    if d == 0 || r == 0 {
        return Err(Error::shape(format!(
            "adapter dims must be >= 1, got d={d} r={r}"
        )));
    }
    if r > d {
        return Err(Error::shape(format!(
            "bottleneck r={r} is wider than the feature dim d={d}"
        )));
    }
    Ok(())
}

/// Logged once per freshly initialized adapter, not on every construction.
pub(crate) fn warn_if_wide(d: usize, r: usize) {
    if 2 * r >= d {
        log::warn!("bottleneck r={r} is not much smaller than d={d}");
    }
}

impl AdapterParams {
    pub fn new(w_down: Mat64, w_mid: Mat64, w_up: Mat64, s: f64) -> Result<Self> {
        let (r, d) = (w_down.rows(), w_down.cols());
        check_dims(d, r)?;
        if w_mid.rows() != r || w_mid.cols() != r {
            return Err(Error::shape(format!(
                "w_mid is {}x{}, expected {r}x{r}",
                w_mid.rows(),
                w_mid.cols()
            )));
        }
        if w_up.rows() != d || w_up.cols() != r {
            return Err(Error::shape(format!(
                "w_up is {}x{}, expected {d}x{r}",
                w_up.rows(),
                w_up.cols()
            )));
        }
        if !(w_down.is_finite() && w_mid.is_finite() && w_up.is_finite() && s.is_finite()) {
            return Err(Error::domain("adapter parameters must be finite"));
        }
        Ok(AdapterParams {
            d,
            r,
            w_down,
            w_mid,
            w_up,
            s,
        })
    }

    /// All-zero matrices with gate `s`; `forward` is the identity for any `s`.
    pub fn zeros(d: usize, r: usize, s: f64) -> Result<Self> {
        AdapterParams::new(
            Mat64::zeros(r, d),
            Mat64::zeros(r, r),
            Mat64::zeros(d, r),
            s,
        )
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn w_down(&self) -> &Mat64 {
        &self.w_down
    }

    pub fn w_mid(&self) -> &Mat64 {
        &self.w_mid
    }

    pub fn w_up(&self) -> &Mat64 {
        &self.w_up
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn set_s(&mut self, s: f64) {
        self.s = s;
    }

    /// `2·r·d + r² + 1`.
    pub fn param_count(&self) -> usize {
        param_count(self.d, self.r)
    }

    /// Reads parameter `i` in flat order: `w_down`, `w_mid`, `w_up` (each row-major), then `s`.
    pub fn flat_get(&self, i: usize) -> f64 {
        let (m, k) = self.locate(i);
        match m {
            0 => self.w_down.values()[k],
            1 => self.w_mid.values()[k],
            2 => self.w_up.values()[k],
            _ => self.s,
        }
    }

    pub fn flat_set(&mut self, i: usize, v: f64) {
        let (m, k) = self.locate(i);
        match m {
            0 => self.w_down.values_mut()[k] = v,
            1 => self.w_mid.values_mut()[k] = v,
            2 => self.w_up.values_mut()[k] = v,
            _ => self.s = v,
        }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let n_down = self.w_down.len();
        let n_mid = self.w_mid.len();
        let n_up = self.w_up.len();
        assert!(i < self.param_count(), "parameter index {i} out of range");
        if i < n_down {
            (0, i)
        } else if i < n_down + n_mid {
            (1, i - n_down)
        } else if i < n_down + n_mid + n_up {
            (2, i - n_down - n_mid)
        } else {
            (3, 0)
        }
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Mat64; 3] {
        [&mut self.w_down, &mut self.w_mid, &mut self.w_up]
    }

    /// Runs the adapter on one feature vector.
    pub fn forward(&self, z: &[f64]) -> Result<ForwardTrace> {
        if z.len() != self.d {
            return Err(Error::shape(format!(
                "adapter expects feature dim {}, got {}",
                self.d,
                z.len()
            )));
        }
        let pre1 = matvec(&self.w_down, z)?;
        let h1 = relu(&pre1);
        let pre2 = matvec(&self.w_mid, &h1)?;
        let h2 = relu(&pre2);
        let a = matvec(&self.w_up, &h2)?;
        let y = z.iter().zip(a.iter()).map(|(zi, ai)| zi + self.s * ai).collect();
        Ok(ForwardTrace {
            z: Vec64::new(z.to_vec()),
            pre1,
            h1,
            pre2,
            h2,
            a,
            y,
        })
    }

    /// Gradients for upstream `dy = ∂L/∂y`. Returns `(∂L/∂params, ∂L/∂z)`.
    pub fn backward(&self, trace: &ForwardTrace, dy: &[f64]) -> Result<(AdapterGrads, Vec64)> {
        let mut grads = AdapterGrads::zeros_like(self);
        let dz = self.backward_into(trace, dy, &mut grads)?;
        Ok((grads, dz))
    }

    /// Like [`backward`](Self::backward) but adds the parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        dy: &[f64],
        grads: &mut AdapterGrads,
    ) -> Result<Vec64> {
        if dy.len() != self.d || trace.z.len() != self.d || trace.h1.len() != self.r {
            return Err(Error::shape(format!(
                "backward with dy of length {} and trace dims (z {}, h {}) for adapter d={} r={}",
                dy.len(),
                trace.z.len(),
                trace.h1.len(),
                self.d,
                self.r
            )));
        }
        if !grads.matches(self) {
            return Err(Error::shape("gradient buffer does not match adapter shape"));
        }

        grads.g_s += dot(dy, &trace.a);

        let da: Vec<f64> = dy.iter().map(|g| self.s * g).collect();
        grads.g_up.add_outer(1.0, &da, &trace.h2);

        let mut dpre2 = self.w_up.transpose_matvec(&da)?;
        mask_inactive(&mut dpre2, &trace.pre2);
        grads.g_mid.add_outer(1.0, &dpre2, &trace.h1);

        let mut dpre1 = self.w_mid.transpose_matvec(&dpre2)?;
        mask_inactive(&mut dpre1, &trace.pre1);
        grads.g_down.add_outer(1.0, &dpre1, &trace.z);

        let back = self.w_down.transpose_matvec(&dpre1)?;
        Ok(dy.iter().zip(back.iter()).map(|(g, b)| g + b).collect())
    }
}

fn mask_inactive(grad: &mut [f64], pre: &[f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn param_count(d: usize, r: usize) -> usize {
    2 * r * d + r * r + 1
}

impl AdapterGrads {
    pub fn zeros_like(p: &AdapterParams) -> Self {
        AdapterGrads {
            g_down: Mat64::zeros(p.r, p.d),
            g_mid: Mat64::zeros(p.r, p.r),
            g_up: Mat64::zeros(p.d, p.r),
            g_s: 0.0,
        }
    }

    pub fn matches(&self, p: &AdapterParams) -> bool {
        self.g_down.same_shape(&p.w_down)
            && self.g_mid.same_shape(&p.w_mid)
            && self.g_up.same_shape(&p.w_up)
    }

    /// Entry `i` in the same flat order as [`AdapterParams::flat_get`].
    pub fn flat_get(&self, i: usize) -> f64 {
        let n_down = self.g_down.len();
        let n_mid = self.g_mid.len();
        let n_up = self.g_up.len();
        if i < n_down {
            self.g_down.values()[i]
        } else if i < n_down + n_mid {
            self.g_mid.values()[i - n_down]
        } else if i < n_down + n_mid + n_up {
            self.g_up.values()[i - n_down - n_mid]
        } else {
            assert_eq!(i, n_down + n_mid + n_up, "gradient index {i} out of range");
            self.g_s
        }
    }

    pub fn scale(&mut self, k: f64) {
        for m in [&mut self.g_down, &mut self.g_mid, &mut self.g_up] {
            for v in m.values_mut() {
                *v *= k;
            }
        }
        self.g_s *= k;
    }

    pub(crate) fn matrices(&self) -> [&Mat64; 3] {
        [&self.g_down, &self.g_mid, &self.g_up]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};

    fn scalar_adapter() -> AdapterParams {
        AdapterParams::new(
            Mat64::from_vec(1, 1, vec![2.0]).unwrap(),
            Mat64::from_vec(1, 1, vec![3.0]).unwrap(),
            Mat64::from_vec(1, 1, vec![0.5]).unwrap(),
            0.1,
        )
        .unwrap()
    }

    fn random_adapter(rng: &mut Rng, d: usize, r: usize) -> AdapterParams {
        let mut m = |rows, cols| {
            Mat64::from_vec(rows, cols, gaussian_sample(rng, 0.0, 0.7, rows * cols).unwrap().into_inner())
                .unwrap()
        };
        let (w_down, w_mid, w_up) = (m(r, d), m(r, r), m(d, r));
        AdapterParams::new(w_down, w_mid, w_up, 0.3).unwrap()
    }

    #[test]
    fn zero_adapter_is_identity() {
        let p = AdapterParams::zeros(3, 2, 0.15).unwrap();
        let z = [0.3, -1.2, 4.0];
        assert_eq!(p.forward(&z).unwrap().y.as_ref(), &z);
    }

    #[test]
    fn scalar_forward() {
        let p = scalar_adapter();
        let t = p.forward(&[1.0]).unwrap();
        assert_eq!(t.h1.as_ref(), &[2.0]);
        assert_eq!(t.h2.as_ref(), &[6.0]);
        assert_eq!(t.a.as_ref(), &[3.0]);
        assert!((t.y[0] - 1.3).abs() < 1e-15);

        let neg = p.forward(&[-1.0]).unwrap();
        assert_eq!(neg.h1.as_ref(), &[0.0]);
        assert_eq!(neg.a.as_ref(), &[0.0]);
        assert_eq!(neg.y.as_ref(), &[-1.0]);
    }

    #[test]
    fn scalar_backward() {
        let p = scalar_adapter();
        let t = p.forward(&[1.0]).unwrap();
        let (g, dz) = p.backward(&t, &[1.0]).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(g.g_s, 3.0));
        assert!(close(g.g_up.get(0, 0), 0.6));
        assert!(close(g.g_mid.get(0, 0), 0.1));
        assert!(close(g.g_down.get(0, 0), 0.15));
        assert!(close(dz[0], 1.3));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(1);
        let p = random_adapter(&mut rng, 6, 3);
        let z = gaussian_sample(&mut rng, 0.0, 1.0, 6).unwrap();
        let t = p.forward(&z).unwrap();
        let (g, dz) = p.backward(&t, &[0.0; 6]).unwrap();
        assert_eq!(g, AdapterGrads::zeros_like(&p));
        assert!(dz.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = AdapterParams::zeros(4, 2, 0.1).unwrap();
        assert!(matches!(p.forward(&[1.0; 3]), Err(Error::Shape(_))));
        let t = p.forward(&[1.0; 4]).unwrap();
        assert!(matches!(p.backward(&t, &[1.0; 5]), Err(Error::Shape(_))));
        assert!(AdapterParams::zeros(2, 3, 0.1).is_err());
        assert!(AdapterParams::zeros(0, 0, 0.1).is_err());
        assert!(AdapterParams::new(Mat64::zeros(2, 4), Mat64::zeros(2, 3), Mat64::zeros(4, 2), 0.0).is_err());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(768, 64), 102_401);
        assert_eq!(param_count(1, 1), 4);
        assert_eq!(param_count(4, 2), 21);
        let p = AdapterParams::zeros(4, 2, 0.0).unwrap();
        assert_eq!(
            p.param_count(),
            p.w_down().len() + p.w_mid().len() + p.w_up().len() + 1
        );
    }

    #[test]
    fn flat_view_round_trips() {
        let mut rng = Rng::new(4);
        let mut p = random_adapter(&mut rng, 5, 2);
        for i in 0..p.param_count() {
            let v = p.flat_get(i);
            p.flat_set(i, v + 1.0);
            assert_eq!(p.flat_get(i), v + 1.0);
        }
        assert_eq!(p.s(), 1.3);
    }

    #[test]
    fn closed_gate_is_exact_identity() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let mut p = random_adapter(&mut rng, 9, 4);
            p.set_s(0.0);
            let z = gaussian_sample(&mut rng, 0.0, 3.0, 9).unwrap();
            assert_eq!(p.forward(&z).unwrap().y, z);
        }
    }

    #[test]
    fn residual_is_linear_in_gate() {
        let mut rng = Rng::new(12);
        let mut p = random_adapter(&mut rng, 7, 3);
        let z = gaussian_sample(&mut rng, 0.0, 1.0, 7).unwrap();
        p.set_s(0.25);
        let y1 = p.forward(&z).unwrap();
        p.set_s(0.5);
        let y2 = p.forward(&z).unwrap();
        for i in 0..7 {
            let (r1, r2) = (y1.y[i] - z[i], y2.y[i] - z[i]);
            assert!((r2 - 2.0 * r1).abs() <= 1e-14 * (1.0 + z[i].abs()), "{r1} {r2}");
        }
        assert_eq!(y1.a, y2.a);
    }

    fn pattern(t: &ForwardTrace) -> Vec<bool> {
        t.pre1.iter().chain(t.pre2.iter()).map(|&x| x > 0.0).collect()
    }

    /// Central differences of `L = dy · y` against `backward`. Entries whose
    /// perturbation flips a ReLU are skipped: the difference quotient then
    /// straddles a kink and measures nothing useful.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(2024);
        let h = 1e-3;
        let (mut checked, mut skipped) = (0, 0);
        for _ in 0..100 {
            let d = 4 + rng.below(13);
            let r = 1 + rng.below(4);
            let p = random_adapter(&mut rng, d, r);
            let z = gaussian_sample(&mut rng, 0.0, 1.0, d).unwrap();
            let dy = gaussian_sample(&mut rng, 0.0, 1.0, d).unwrap();
            let t = p.forward(&z).unwrap();
            if t.min_abs_preactivation() < 1e-6 {
                continue;
            }
            let base = pattern(&t);
            let (g, dz) = p.backward(&t, &dy).unwrap();
            let eval = |q: &AdapterParams, zz: &[f64]| {
                let tr = q.forward(zz).unwrap();
                (dot(&dy, &tr.y), pattern(&tr) == base)
            };

            for i in 0..p.param_count() {
                let mut plus = p.clone();
                plus.flat_set(i, p.flat_get(i) + h);
                let mut minus = p.clone();
                minus.flat_set(i, p.flat_get(i) - h);
                let ((lp, okp), (lm, okm)) = (eval(&plus, &z), eval(&minus, &z));
                if !(okp && okm) {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                assert_grad_close(g.flat_get(i), (lp - lm) / (2.0 * h), i);
            }
            for j in 0..d {
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let ((lp, okp), (lm, okm)) = (eval(&p, &zp), eval(&p, &zm));
                if !(okp && okm) {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                assert_grad_close(dz[j], (lp - lm) / (2.0 * h), j);
            }
        }
        assert!(checked > 20 * skipped.max(1), "checked {checked}, skipped {skipped}");
    }

    fn assert_grad_close(analytic: f64, numeric: f64, idx: usize) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        assert!(
            diff <= 1e-8 || diff / scale < 1e-4,
            "entry {idx}: analytic {analytic} vs numeric {numeric}"
        );
    }
}
