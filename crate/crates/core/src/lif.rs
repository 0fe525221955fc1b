//! Discrete-time leaky integrate-and-fire dynamics and the ArcTan surrogate.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Result, TpError};
use crate::scalar::Scalar;

/// Per-layer neuron constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams<T> {
    /// Membrane decay per step, in `[0, 1]`.
    pub alpha: T,
    /// Firing threshold, `> 0`.
    pub v_th: T,
    /// Width parameter of the ArcTan surrogate, `> 0`.
    pub surrogate_scale: T,
}

impl<T: Scalar> LifParams<T> {
    pub fn new(alpha: T, v_th: T, surrogate_scale: T) -> Result<Self> {
        let p = LifParams {
            alpha,
            v_th,
            surrogate_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(TpError::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if !(self.v_th > T::zero()) || !self.v_th.is_finite() {
            return Err(TpError::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if !(self.surrogate_scale > T::zero()) || !self.surrogate_scale.is_finite() {
            return Err(TpError::Config(format!(
                "surrogate scale must be positive, got {}",
                self.surrogate_scale
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for LifParams<T> {
    fn default() -> Self {
        LifParams {
            alpha: T::of(0.9),
            v_th: T::one(),
            surrogate_scale: T::one(),
        }
    }
}

/// Membrane potential and last-step spikes, both `[batch, neurons]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState<T> {
    pub v: Array2<T>,
    pub s_prev: Array2<T>,
}

impl<T: Scalar> MembraneState<T> {
    pub fn zeros(batch: usize, neurons: usize) -> Self {
        MembraneState {
            v: Array2::zeros((batch, neurons)),
            s_prev: Array2::zeros((batch, neurons)),
        }
    }

    pub fn reset(&mut self) {
        self.v.fill(T::zero());
        self.s_prev.fill(T::zero());
    }

    /// Advances the state in place by one step.
    ///
    /// `current` is the total synaptic drive (feed-forward plus recurrent).
    /// After the call `s_prev` holds the spikes emitted at this step.
    pub fn advance(&mut self, current: ArrayView2<'_, T>, params: &LifParams<T>) -> Result<()> {
        if current.dim() != self.v.dim() {
            return Err(TpError::dim("lif current", format!("{:?}", self.v.dim()), format!("{:?}", current.dim())));
        }
        let (alpha, v_th) = (params.alpha, params.v_th);
        let mut finite = true;
        Zip::from(&mut self.v)
            .and(&mut self.s_prev)
            .and(current)
            .for_each(|v, s, &i| {
                let nv = alpha * *v + i - *s * v_th;
                finite &= nv.is_finite();
                *v = nv;
                *s = if nv >= v_th { T::one() } else { T::zero() };
            });
        if !finite {
            return Err(TpError::Numeric("membrane potential".into()));
        }
        Ok(())
    }
}

/// One LIF update, `v' = alpha*v + I + I_rec - s_prev*v_th`, `s = [v' >= v_th]`.
///
/// Returns the new state and the emitted spikes (which the new state also
/// carries as `s_prev`).
pub fn lif_step<T: Scalar>(
    state: &MembraneState<T>,
    input_current: ArrayView2<'_, T>,
    recurrent_current: Option<ArrayView2<'_, T>>,
    params: &LifParams<T>,
) -> Result<(MembraneState<T>, Array2<T>)> {
    params.validate()?;
    if state.s_prev.dim() != state.v.dim() {
        return Err(TpError::dim("membrane state", format!("{:?}", state.v.dim()), format!("{:?}", state.s_prev.dim())));
    }
    let mut current = input_current.to_owned();
    if let Some(rec) = recurrent_current {
        if rec.dim() != current.dim() {
            return Err(TpError::dim("recurrent current", format!("{:?}", current.dim()), format!("{:?}", rec.dim())));
        }
        current += &rec;
    }
    if current.iter().any(|x| !x.is_finite()) {
        return Err(TpError::Numeric("input current".into()));
    }
    let mut next = state.clone();
    next.advance(current.view(), params)?;
    let spikes = next.s_prev.clone();
    Ok((next, spikes))
}

/// ArcTan surrogate at offset `u = v - v_th`: `s / (1 + (pi*s*u/2)^2)`.
#[inline]
pub fn arctan_surrogate<T: Scalar>(u: T, scale: T) -> T {
    let x = T::FRAC_PI_2() * scale * u;
    scale / (T::one() + x * x)
}

/// Smoothed spike function `(2/pi) atan(pi*s*u/2)`; its derivative is [`arctan_surrogate`].
#[inline]
pub fn arctan_smoothed<T: Scalar>(u: T, scale: T) -> T {
    T::FRAC_2_PI() * (T::FRAC_PI_2() * scale * u).atan()
}

/// Elementwise surrogate derivative `theta'(v - v_th)`.
pub fn surrogate_derivative<T: Scalar>(v: ArrayView2<'_, T>, params: &LifParams<T>) -> Array2<T> {
    let (v_th, s) = (params.v_th, params.surrogate_scale);
    v.mapv(|x| arctan_surrogate(x - v_th, s))
}

/// Elementwise smoothed spike `sigma(v - v_th)` used by the gradient oracle.
pub fn surrogate_antiderivative<T: Scalar>(v: ArrayView2<'_, T>, params: &LifParams<T>) -> Array2<T> {
    let (v_th, s) = (params.v_th, params.surrogate_scale);
    v.mapv(|x| arctan_smoothed(x - v_th, s))
}
