//! Layer kinds and their kernels: dense, recurrent dense and convolution
//! with optional 2x2 max pooling.
//!
//! Weights are stored fan-in major, `[fan_in, outputs]`, for every kind. A
//! convolution kernel row is indexed by `(in_channel, dy, dx)` and its column
//! by output channel. Feature vectors of convolutional layers are flattened
//! channel-major: `c * height * width + y * width + x`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Result, TpError};
use crate::scalar::Scalar;

/// Stride-1, same-padding convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(TpError::Config(format!("conv kernel must be odd, got {}", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(TpError::Config("conv dimensions must be positive".into()));
        }
        if self.pool && (self.height < 2 || self.width < 2) {
            return Err(TpError::Config("pooling needs spatial size >= 2".into()));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_features(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// LIF units: one per output channel and spatial position, before pooling.
    pub fn units(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    pub fn pooled_dims(&self) -> (usize, usize) {
        if self.pool {
            (self.height / 2, self.width / 2)
        } else {
            (self.height, self.width)
        }
    }

    pub fn output_features(&self) -> usize {
        let (h, w) = self.pooled_dims();
        self.out_channels * h * w
    }

    /// Feed-forward current `[batch, units]` from presynaptic activity `[batch, input_features]`.
    pub fn forward<T: Scalar>(&self, input: ArrayView2<'_, T>, kernel: ArrayView2<'_, T>) -> Array2<T> {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let pad = k / 2;
        let hw = h * w;
        let mut out = Array2::<T>::zeros((input.nrows(), self.units()));
        for (b, row) in input.outer_iter().enumerate() {
            let mut out_row = out.row_mut(b);
            let out_slice = out_row.as_slice_mut().expect("contiguous output row");
            for (idx, &s) in row.iter().enumerate() {
                if s == T::zero() {
                    continue;
                }
                let ci = idx / hw;
                let iy = (idx % hw) / w;
                let ix = idx % w;
                for dy in 0..k {
                    // output position oy sees input oy + dy - pad
                    let oy = iy + pad;
                    if oy < dy || oy - dy >= h {
                        continue;
                    }
                    let oy = oy - dy;
                    for dx in 0..k {
                        let ox = ix + pad;
                        if ox < dx || ox - dx >= w {
                            continue;
                        }
                        let ox = ox - dx;
                        let krow = kernel.row((ci * k + dy) * k + dx);
                        let base = oy * w + ox;
                        for (co, &kv) in krow.iter().enumerate() {
                            out_slice[co * hw + base] += s * kv;
                        }
                    }
                }
            }
        }
        out
    }

    /// `grad[(ci,dy,dx), co] += sum_b sum_pos input[b, ci, pos + d - pad] * post[b, co, pos]`.
    pub fn accumulate_kernel_grad<T: Scalar>(
        &self,
        grad: &mut Array2<T>,
        input: ArrayView2<'_, T>,
        post: ArrayView2<'_, T>,
    ) {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let pad = k / 2;
        let hw = h * w;
        for b in 0..input.nrows() {
            let row = input.row(b);
            let prow = post.row(b);
            for (idx, &s) in row.iter().enumerate() {
                if s == T::zero() {
                    continue;
                }
                let ci = idx / hw;
                let iy = (idx % hw) / w;
                let ix = idx % w;
                for dy in 0..k {
                    let oy = iy + pad;
                    if oy < dy || oy - dy >= h {
                        continue;
                    }
                    let oy = oy - dy;
                    for dx in 0..k {
                        let ox = ix + pad;
                        if ox < dx || ox - dx >= w {
                            continue;
                        }
                        let ox = ox - dx;
                        let base = oy * w + ox;
                        let mut grow = grad.row_mut((ci * k + dy) * k + dx);
                        for (co, g) in grow.iter_mut().enumerate() {
                            *g += s * prow[co * hw + base];
                        }
                    }
                }
            }
        }
    }

    /// 2x2 stride-2 max pooling. Returns pooled values and the flat unit index
    /// picked for each output (first maximum in scan order).
    pub fn pool<T: Scalar>(&self, spikes: ArrayView2<'_, T>) -> (Array2<T>, Vec<usize>) {
        let (ph, pw) = self.pooled_dims();
        let (h, w) = (self.height, self.width);
        let batch = spikes.nrows();
        let mut out = Array2::zeros((batch, self.output_features()));
        let mut picks = Vec::with_capacity(batch * self.output_features());
        for b in 0..batch {
            for c in 0..self.out_channels {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = c * h * w + (2 * py) * w + 2 * px;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = c * h * w + (2 * py + dy) * w + 2 * px + dx;
                            if spikes[[b, cand]] > spikes[[b, best]] {
                                best = cand;
                            }
                        }
                        out[[b, (c * ph + py) * pw + px]] = spikes[[b, best]];
                        picks.push(best);
                    }
                }
            }
        }
        (out, picks)
    }

    /// Pools `spikes` at indices chosen by another pass of [`ConvGeometry::pool`].
    pub fn gather<T: Scalar>(&self, spikes: ArrayView2<'_, T>, picks: &[usize]) -> Array2<T> {
        let per = self.output_features();
        Array2::from_shape_fn((spikes.nrows(), per), |(b, o)| spikes[[b, picks[b * per + o]]])
    }
}

/// How the recurrent matrix couples a layer's units to its own previous spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recurrence {
    #[default]
    Full,
    /// Only `R[j, j]` is used and learned.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    Dense { inputs: usize, units: usize },
    Conv(ConvGeometry),
}

impl Topology {
    pub fn input_features(&self) -> usize {
        match self {
            Topology::Dense { inputs, .. } => *inputs,
            Topology::Conv(g) => g.input_features(),
        }
    }

    pub fn units(&self) -> usize {
        match self {
            Topology::Dense { units, .. } => *units,
            Topology::Conv(g) => g.units(),
        }
    }

    pub fn output_features(&self) -> usize {
        match self {
            Topology::Dense { units, .. } => *units,
            Topology::Conv(g) => g.output_features(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            Topology::Dense { inputs, .. } => *inputs,
            Topology::Conv(g) => g.fan_in(),
        }
    }

    /// Columns of the weight matrix.
    pub fn weight_cols(&self) -> usize {
        match self {
            Topology::Dense { units, .. } => *units,
            Topology::Conv(g) => g.out_channels,
        }
    }

    pub fn current<T: Scalar>(&self, input: ArrayView2<'_, T>, weights: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if input.ncols() != self.input_features() {
            return Err(TpError::dim("layer input", self.input_features(), input.ncols()));
        }
        Ok(match self {
            Topology::Dense { .. } => input.dot(&weights),
            Topology::Conv(g) => g.forward(input, weights),
        })
    }

    /// Adds `pre^T post` (dense) or the kernel correlation (conv) into `grad`.
    pub fn accumulate_weight_grad<T: Scalar>(
        &self,
        grad: &mut Array2<T>,
        pre: ArrayView2<'_, T>,
        post: ArrayView2<'_, T>,
    ) -> Result<()> {
        match self {
            Topology::Dense { .. } => crate::rule::accumulate_outer(grad, pre, post),
            Topology::Conv(g) => {
                g.accumulate_kernel_grad(grad, pre, post);
                Ok(())
            }
        }
    }
}

/// `W_eff[., j] = gain[j] * W[., j] / ||W[., j]||_2`, norm over fan-in.
pub fn weight_normalize<T: Scalar>(weights: ArrayView2<'_, T>, gain: &Array1<T>) -> Result<Array2<T>> {
    if gain.len() != weights.ncols() {
        return Err(TpError::dim("weight-norm gain", weights.ncols(), gain.len()));
    }
    if gain.iter().any(|&g| !(g > T::zero())) {
        return Err(TpError::Input("weight-norm gains must be positive".into()));
    }
    let norms = column_norms(weights);
    let mut out = weights.to_owned();
    for ((mut col, &n), &g) in out.axis_iter_mut(Axis(1)).zip(norms.iter()).zip(gain.iter()) {
        let scale = g / n;
        col.mapv_inplace(|x| x * scale);
    }
    Ok(out)
}

/// Column norms with the `1e-12` guard added.
pub fn column_norms<T: Scalar>(weights: ArrayView2<'_, T>) -> Array1<T> {
    let eps = T::of(1e-12);
    weights
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt() + eps)
        .collect()
}

/// Pulls a gradient with respect to normalized weights back to the raw
/// direction and the gain: `dV = (g/||v||)(dW - w_hat (w_hat . dW))`, `dg = w_hat . dW`.
pub fn weight_norm_backward<T: Scalar>(
    weights: ArrayView2<'_, T>,
    gain: &Array1<T>,
    grad_eff: ArrayView2<'_, T>,
) -> (Array2<T>, Array1<T>) {
    let norms = column_norms(weights);
    let mut dv = Array2::zeros(weights.dim());
    let mut dg = Array1::zeros(gain.len());
    for j in 0..weights.ncols() {
        let col = weights.column(j);
        let gcol = grad_eff.column(j);
        let n = norms[j];
        let proj = Zip::from(&col).and(&gcol).fold(T::zero(), |acc, &w, &g| acc + w / n * g);
        dg[j] = proj;
        let scale = gain[j] / n;
        Zip::from(dv.column_mut(j)).and(&col).and(&gcol).for_each(|d, &w, &g| {
            *d = scale * (g - w / n * proj);
        });
    }
    (dv, dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn geom(pool: bool) -> ConvGeometry {
        ConvGeometry {
            in_channels: 2,
            height: 4,
            width: 4,
            out_channels: 3,
            kernel: 3,
            pool,
        }
    }

    fn naive_conv(g: &ConvGeometry, input: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
        let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
        let pad = (k / 2) as isize;
        Array2::from_shape_fn((input.nrows(), g.units()), |(b, u)| {
            let co = u / (g.height * g.width);
            let oy = ((u % (g.height * g.width)) / g.width) as isize;
            let ox = (u % g.width) as isize;
            let mut acc = 0.0;
            for ci in 0..g.in_channels {
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = oy + dy as isize - pad;
                        let ix = ox + dx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                            continue;
                        }
                        let idx = ci * g.height * g.width + (iy * w + ix) as usize;
                        acc += input[[b, idx]] * kernel[[(ci * k + dy) * k + dx, co]];
                    }
                }
            }
            acc
        })
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut x = seed;
        Array2::from_shape_fn((rows, cols), |_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = geom(false);
        let input = pseudo(2, g.input_features(), 1);
        let kernel = pseudo(g.fan_in(), g.out_channels, 2);
        let got = g.forward(input.view(), kernel.view());
        let want = naive_conv(&g, &input, &kernel);
        for (a, b) in got.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_kernel_grad_is_adjoint_of_forward() {
        // d/dK sum(post * conv(input, K)) must equal the accumulated kernel gradient
        let g = geom(false);
        let input = pseudo(3, g.input_features(), 3);
        let post = pseudo(3, g.units(), 4);
        let mut grad = Array2::zeros((g.fan_in(), g.out_channels));
        g.accumulate_kernel_grad(&mut grad, input.view(), post.view());
        for r in 0..g.fan_in() {
            for c in 0..g.out_channels {
                let mut unit = Array2::zeros((g.fan_in(), g.out_channels));
                unit[[r, c]] = 1.0;
                let out = naive_conv(&g, &input, &unit);
                let want: f64 = (&out * &post).sum();
                assert_relative_eq!(grad[[r, c]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pooling_picks_first_max() {
        let g = ConvGeometry {
            in_channels: 1,
            height: 2,
            width: 4,
            out_channels: 1,
            kernel: 1,
            pool: true,
        };
        let s = array![[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]];
        let (p, picks) = g.pool(s.view());
        assert_eq!(p, array![[1.0, 0.0]]);
        assert_eq!(picks, vec![1, 2]);
        let other = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]];
        assert_eq!(g.gather(other.view(), &picks), array![[0.0, 0.0]]);
        assert_eq!(g.pool(other.view()).0, array![[1.0, 1.0]]);
    }

    #[test]
    fn weight_norm_properties() {
        let w = array![[0.6, 3.0], [0.8, 4.0]];
        let unit = weight_normalize(w.view(), &array![1.0, 1.0]).unwrap();
        assert_relative_eq!(unit[[0, 0]], 0.6, epsilon = 1e-12);
        assert_relative_eq!(unit[[1, 0]], 0.8, epsilon = 1e-12);
        let scaled = weight_normalize((&w * 10.0).view(), &array![1.0, 1.0]).unwrap();
        for (a, b) in unit.iter().zip(scaled.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let doubled = weight_normalize(w.view(), &array![2.0, 2.0]).unwrap();
        let n = column_norms(doubled.view());
        assert_relative_eq!(n[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(n[1], 2.0, epsilon = 1e-9);
        assert!(weight_normalize(w.view(), &array![1.0, 0.0]).is_err());
        let zero = Array2::<f64>::zeros((2, 1));
        assert!(weight_normalize(zero.view(), &array![1.0]).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn weight_norm_backward_matches_finite_differences() {
        let v = pseudo(4, 3, 7);
        let gain = array![0.7, 1.3, 2.0];
        let upstream = pseudo(4, 3, 8);
        let f = |v: &Array2<f64>, g: &Array1<f64>| (&weight_normalize(v.view(), g).unwrap() * &upstream).sum();
        let (dv, dg) = weight_norm_backward(v.view(), &gain, upstream.view());
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let (mut p, mut m) = (v.clone(), v.clone());
                p[[r, c]] += h;
                m[[r, c]] -= h;
                assert_relative_eq!(dv[[r, c]], (f(&p, &gain) - f(&m, &gain)) / (2.0 * h), epsilon = 1e-7);
            }
        }
        for c in 0..3 {
            let (mut p, mut m) = (gain.clone(), gain.clone());
            p[c] += h;
            m[c] -= h;
            assert_relative_eq!(dg[c], (f(&v, &p) - f(&v, &m)) / (2.0 * h), epsilon = 1e-7);
        }
    }
}
