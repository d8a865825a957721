//! Dynamic Gaussian-blur perturbation and the maps that drive it.
//!
//! A perturbation map `M` is an `S x D` matrix in `[0, 1]`: entry `M[s, i]`
//! blurs suspect value `(s, i)` with bandwidth `sigma_max * M[s, i]` over the
//! whole window (context included). `M = 0` leaves the window untouched.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::types::Window;

/// Kernel-weighted average of dimension `dim` around row `t` of `full`, with
/// bandwidth `sigma`, plus its derivative with respect to `sigma`.
///
/// `sigma == 0` is the delta kernel: the original value and a zero
/// derivative.
pub fn blur_at(full: ArrayView2<f64>, t: usize, dim: usize, sigma: f64) -> (f64, f64) {
    let center = full[[t, dim]];
    if sigma == 0.0 {
        return (center, 0.0);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut wsum = 0.0;
    let mut wx = 0.0;
    let mut wd2 = 0.0;
    let mut wd2x = 0.0;
    for (j, &x) in full.column(dim).iter().enumerate() {
        let d = j as f64 - t as f64;
        let d2 = d * d;
        let w = (-d2 * inv).exp();
        wsum += w;
        wx += w * x;
        wd2 += w * d2;
        wd2x += w * d2 * x;
    }
    let value = wx / wsum;
    // d/dsigma of the normalized kernel average is the kernel covariance of
    // (d^2, x) divided by sigma^3.
    let deriv = (wd2x / wsum - value * wd2 / wsum) / (sigma * sigma * sigma);
    (value, deriv)
}

/// Blur operator with weight `m`: bandwidth `sigma_max * (1 - m)`, so
/// `m = 1` returns the original value exactly.
pub fn gaussian_blur(full: ArrayView2<f64>, t: usize, dim: usize, m: f64, sigma_max: f64) -> f64 {
    blur_at(full, t, dim, sigma_max * (1.0 - m)).0
}

/// Perturbed suspect window `W_S(M)`.
pub fn apply_map(window: &Window, map: ArrayView2<f64>, sigma_max: f64) -> Array2<f64> {
    apply_map_with_grad(window, map, sigma_max).0
}

/// `W_S(M)` and the entrywise derivative `d W_S(M)[s, i] / d M[s, i]`.
pub fn apply_map_with_grad(
    window: &Window,
    map: ArrayView2<f64>,
    sigma_max: f64,
) -> (Array2<f64>, Array2<f64>) {
    debug_assert_eq!(map.dim(), window.suspect.dim());
    let full = window.full();
    let offset = window.context_len();
    let mut values = window.suspect.clone();
    let mut grads = Array2::zeros(map.dim());
    for ((s, i), &strength) in map.indexed_iter() {
        // Blur weight m = 1 - M, so the bandwidth is sigma_max * M.
        let sigma = sigma_max * strength;
        if sigma == 0.0 {
            continue;
        }
        let (v, dv) = blur_at(full.view(), offset + s, i, sigma);
        values[[s, i]] = v;
        grads[[s, i]] = dv * sigma_max;
    }
    (values, grads)
}

/// `M(w, t) = t ⊗ w`: `M[s, i] = t[s] * w[i]`.
pub fn outer_map(w: ArrayView1<f64>, t: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((t.len(), w.len()), |(s, i)| t[s] * w[i])
}

/// Per-dimension convex mix `w_i * Z[:, i] + (1 - w_i) * W_S[:, i]`.
pub fn mix_sparse(suspect: ArrayView2<f64>, w: ArrayView1<f64>, z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(suspect.dim());
    Zip::indexed(&mut out)
        .and(&suspect)
        .and(&z)
        .for_each(|(_, i), o, &x, &zi| {
            *o = if w[i] == 0.0 {
                x
            } else {
                w[i] * zi + (1.0 - w[i]) * x
            };
        });
    out
}

/// Clamp to `[0, 1]`.
pub fn project_box(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn project_box_all(a: &mut Array2<f64>) {
    a.mapv_inplace(project_box);
}

pub fn project_box_vec(a: &mut Array1<f64>) {
    a.mapv_inplace(project_box);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Origin;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn origin() -> Origin {
        Origin {
            series: "t".into(),
            start: 0,
        }
    }

    fn bump() -> Window {
        Window::new(array![[0.0]], array![[1.0], [0.0]], origin()).unwrap()
    }

    #[test]
    fn full_weight_is_identity() {
        let w = bump();
        let full = w.full();
        for t in 0..3 {
            assert_eq!(gaussian_blur(full.view(), t, 0, 1.0, 3.0), full[[t, 0]]);
        }
    }

    #[test]
    fn kernel_sum_oracle() {
        // Direct oracle: weights exp(-1/2), 1, exp(-1/2) around the middle point.
        let w = bump();
        let expected = 1.0 / (1.0 + 2.0 * (-0.5f64).exp());
        let v = gaussian_blur(w.full().view(), 1, 0, 0.5, 2.0);
        assert_relative_eq!(v, expected, epsilon = 1e-15);
        assert_relative_eq!(v, 0.45186, epsilon = 1e-5);
    }

    #[test]
    fn constant_window_is_fixed() {
        let w = Window::new(Array2::from_elem((4, 2), 1.5), Array2::from_elem((3, 2), 1.5), origin()).unwrap();
        for m in [0.0, 0.3, 0.99] {
            for sm in [0.5, 3.0, 10.0] {
                for t in 0..7 {
                    assert_relative_eq!(gaussian_blur(w.full().view(), t, 1, m, sm), 1.5, epsilon = 1e-12);
                }
            }
        }
        let out = apply_map(&w, Array2::from_elem((3, 2), 0.7).view(), 3.0);
        for v in out.iter() {
            assert_relative_eq!(*v, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_map_is_exact_identity() {
        let w = Window::new(
            array![[0.1, 5.0], [0.7, -2.0]],
            array![[3.3, 1e-9], [-4.0, 7.25]],
            origin(),
        )
        .unwrap();
        let out = apply_map(&w, Array2::zeros((2, 2)).view(), 3.0);
        assert_eq!(out, w.suspect);
    }

    #[test]
    fn single_entry_map() {
        let w = bump();
        let map = array![[0.5], [0.0]];
        let out = apply_map(&w, map.view(), 2.0);
        assert_relative_eq!(out[[0, 0]], 0.45186, epsilon = 1e-5);
        assert_eq!(out[[1, 0]], 0.0);
    }

    #[test]
    fn map_derivative_matches_central_difference() {
        let w = Window::new(
            Array::from_shape_fn((6, 2), |(i, j)| ((i * 3 + j) as f64).sin()),
            Array::from_shape_fn((4, 2), |(i, j)| ((i * 7 + j) as f64).cos() * 2.0),
            origin(),
        )
        .unwrap();
        let map = Array::from_shape_fn((4, 2), |(i, j)| 0.1 + 0.2 * i as f64 + 0.05 * j as f64);
        let (_, g) = apply_map_with_grad(&w, map.view(), 3.0);
        let h = 1e-6;
        for ((s, i), &m) in map.indexed_iter() {
            let mut up = map.clone();
            up[[s, i]] = m + h;
            let mut down = map.clone();
            down[[s, i]] = m - h;
            let fd = (apply_map(&w, up.view(), 3.0)[[s, i]] - apply_map(&w, down.view(), 3.0)[[s, i]]) / (2.0 * h);
            assert_relative_eq!(g[[s, i]], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn outer_map_examples() {
        let m = outer_map(array![0.2, 0.4].view(), array![0.5, 1.0].view());
        for (a, b) in m.iter().zip([0.1, 0.2, 0.2, 0.4]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let m = outer_map(array![0.0, 0.0, 0.0].view(), array![0.3, 0.9].view());
        assert!(m.iter().all(|&x| x == 0.0));
        let m = outer_map(array![0.0, 0.0, 1.0].view(), array![1.0, 1.0].view());
        assert_eq!(m, array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn mix_sparse_endpoints() {
        let ws = array![[1.0, 2.0], [3.0, 4.0]];
        let z = array![[3.0, -1.0], [5.0, 0.5]];
        assert_eq!(mix_sparse(ws.view(), array![0.0, 0.0].view(), z.view()), ws);
        assert_eq!(mix_sparse(ws.view(), array![1.0, 1.0].view(), z.view()), z);
        let half = mix_sparse(ws.view(), array![0.5, 0.0].view(), z.view());
        assert_eq!(half.column(0).to_vec(), vec![2.0, 4.0]);
        assert_eq!(half.column(1), ws.column(1));
    }

    #[test]
    fn box_projection() {
        assert_eq!(project_box(1.3), 1.0);
        assert_eq!(project_box(-0.2), 0.0);
        assert_eq!(project_box(0.5), 0.5);
    }

    proptest! {
        #[test]
        fn blur_stays_in_range(
            vals in proptest::collection::vec(-10.0f64..10.0, 8),
            m in 0.0f64..1.0,
            sigma_max in 0.0f64..12.0,
            t in 0usize..8,
        ) {
            let full = Array2::from_shape_vec((8, 1), vals.clone()).unwrap();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = gaussian_blur(full.view(), t, 0, m, sigma_max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn mix_keeps_unselected_dims(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            zs in proptest::collection::vec(-5.0f64..5.0, 6),
            w0 in 0.0f64..1.0,
        ) {
            let ws = Array2::from_shape_vec((3, 2), vals).unwrap();
            let z = Array2::from_shape_vec((3, 2), zs).unwrap();
            let out = mix_sparse(ws.view(), array![w0, 0.0].view(), z.view());
            prop_assert_eq!(out.column(1), ws.column(1));
        }
    }
}
