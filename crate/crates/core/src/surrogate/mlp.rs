//! Per-atom network on a flat parameter vector.
//!
//! One shared trunk maps a descriptor row to a latent feature; a linear
//! energy head reads out the per-atom energy and a small second head the
//! log of the per-atom force noise scale. All parameters live in one flat
//! vector so sampling and priors can treat the model as a point in R^n;
//! the layout records where each layer sits and which head it belongs to.
//!
//! Besides the plain forward pass this module implements the two extra
//! passes force-loss gradients need: a directional (tangent) forward pass
//! carrying a descriptor-space perturbation through the trunk, and a
//! reverse pass that accumulates parameter adjoints for a weighted sum of
//! the energy output, the noise-head output, and the tangent output. The
//! tangent adjoint rules need the second derivative of the activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Which head a layer's parameters belong to. Transfer priors recentre
/// trunk and energy-head parameters on the pretrained values but pull the
/// noise head toward zero, so the distinction is part of the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Backbone,
    SigmaHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Offset of the row-major `out_dim x in_dim` weight block.
    pub w_offset: usize,
    /// Offset of the `out_dim` bias block.
    pub b_offset: usize,
    pub part: Part,
}

/// Flat-parameter layout: trunk layers, then the energy head, then the
/// noise-head layers, each with SiLU activations except the two scalar
/// output layers which stay linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerEntry>,
    pub n_params: usize,
    n_trunk: usize,
}

impl Layout {
    pub fn new(input_dim: usize, trunk_widths: &[usize], sigma_widths: &[usize]) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("network input dimension must be positive".into()));
        }
        if trunk_widths.is_empty() {
            return Err(Error::Config("trunk needs at least one hidden layer".into()));
        }
        if trunk_widths.iter().chain(sigma_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }

        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, in_dim: usize, out_dim: usize, part: Part, off: &mut usize| {
            let w_offset = *off;
            *off += in_dim * out_dim;
            let b_offset = *off;
            *off += out_dim;
            layers.push(LayerEntry { name, in_dim, out_dim, w_offset, b_offset, part });
        };

        let mut prev = input_dim;
        for (l, &w) in trunk_widths.iter().enumerate() {
            push(format!("trunk.{l}"), prev, w, Part::Backbone, &mut offset);
            prev = w;
        }
        let feature = prev;
        push("energy".into(), feature, 1, Part::Backbone, &mut offset);
        let mut prev = feature;
        for (l, &w) in sigma_widths.iter().enumerate() {
            push(format!("sigma.{l}"), prev, w, Part::SigmaHead, &mut offset);
            prev = w;
        }
        push("sigma.out".into(), prev, 1, Part::SigmaHead, &mut offset);

        Ok(Self { layers, n_params: offset, n_trunk: trunk_widths.len() })
    }

    #[inline]
    fn trunk(&self) -> &[LayerEntry] {
        &self.layers[..self.n_trunk]
    }

    #[inline]
    fn energy(&self) -> &LayerEntry {
        &self.layers[self.n_trunk]
    }

    #[inline]
    fn sigma(&self) -> &[LayerEntry] {
        &self.layers[self.n_trunk + 1..]
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// True at every parameter index owned by the noise head.
    pub fn sigma_head_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_params];
        for entry in &self.layers {
            if entry.part == Part::SigmaHead {
                for m in mask
                    .iter_mut()
                    .skip(entry.w_offset)
                    .take(entry.in_dim * entry.out_dim + entry.out_dim)
                {
                    *m = true;
                }
            }
        }
        mask
    }
}

/// Draw initial parameters: weights N(0, 1/fan_in), biases zero.
pub fn init_parameters<T: Real, R: Rng + ?Sized>(layout: &Layout, rng: &mut R) -> Vec<T> {
    let mut theta = vec![T::zero(); layout.n_params];
    for entry in &layout.layers {
        let std = T::from_f64(1.0 / (entry.in_dim as f64).sqrt());
        for w in theta
            .iter_mut()
            .skip(entry.w_offset)
            .take(entry.in_dim * entry.out_dim)
        {
            *w = std * T::standard_normal(rng);
        }
    }
    theta
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// First derivative: s(z) + z s(z)(1 - s(z)).
#[inline]
fn silu_d1<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s + z * s * (T::one() - s)
}

/// Second derivative: s(z)(1 - s(z)) (2 + z (1 - 2 s(z))).
#[inline]
fn silu_d2<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() - s) * (T::two() + z * (T::one() - T::two() * s))
}

#[inline]
fn w_slice<'a, T>(theta: &'a [T], e: &LayerEntry) -> &'a [T] {
    &theta[e.w_offset..e.w_offset + e.in_dim * e.out_dim]
}

#[inline]
fn b_slice<'a, T>(theta: &'a [T], e: &LayerEntry) -> &'a [T] {
    &theta[e.b_offset..e.b_offset + e.out_dim]
}

fn linear<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *out_o = acc;
    }
}

/// Same contraction without the bias, for tangent propagation.
fn linear_nobias<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = T::zero();
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *out_o = acc;
    }
}

/// Forward-pass caches for one atom. `a[0]` is the descriptor row itself;
/// `a[l+1] = silu(z[l])`. The noise-head caches mirror this with the trunk
/// feature as implicit input.
#[derive(Debug, Clone)]
pub(crate) struct AtomFwd<T> {
    pub a: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub e: T,
    pub hz: Vec<Vec<T>>,
    pub ha: Vec<Vec<T>>,
    /// Noise-head output before exponentiation.
    pub s: T,
}

/// Tangent caches: the directional derivative of every trunk quantity
/// along a fixed descriptor-space direction, plus the energy tangent.
#[derive(Debug, Clone)]
pub(crate) struct AtomTan<T> {
    pub da: Vec<Vec<T>>,
    pub dz: Vec<Vec<T>>,
    /// Energy tangent; production seeds its adjoint instead of reading it,
    /// but the finite-difference tests check it directly.
    #[allow(dead_code)]
    pub edot: T,
}

impl Layout {
    pub(crate) fn forward<T: Real>(&self, theta: &[T], x: &[T]) -> AtomFwd<T> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut a: Vec<Vec<T>> = Vec::with_capacity(self.n_trunk + 1);
        let mut z: Vec<Vec<T>> = Vec::with_capacity(self.n_trunk);
        a.push(x.to_vec());
        for entry in self.trunk() {
            let mut zl = vec![T::zero(); entry.out_dim];
            linear(w_slice(theta, entry), b_slice(theta, entry), a.last().unwrap(), &mut zl);
            a.push(zl.iter().map(|&v| silu(v)).collect());
            z.push(zl);
        }
        let feature = a.last().unwrap();

        let e_entry = self.energy();
        let mut e_out = [T::zero()];
        linear(w_slice(theta, e_entry), b_slice(theta, e_entry), feature, &mut e_out);

        let sigma_layers = self.sigma();
        let n_hidden = sigma_layers.len() - 1;
        let mut hz: Vec<Vec<T>> = Vec::with_capacity(n_hidden);
        let mut ha: Vec<Vec<T>> = Vec::with_capacity(n_hidden);
        for entry in &sigma_layers[..n_hidden] {
            let input = ha.last().unwrap_or(feature);
            let mut zl = vec![T::zero(); entry.out_dim];
            linear(w_slice(theta, entry), b_slice(theta, entry), input, &mut zl);
            ha.push(zl.iter().map(|&v| silu(v)).collect());
            hz.push(zl);
        }
        let s_entry = &sigma_layers[n_hidden];
        let s_input = ha.last().unwrap_or(feature);
        let mut s_out = [T::zero()];
        linear(w_slice(theta, s_entry), b_slice(theta, s_entry), s_input, &mut s_out);

        AtomFwd { a, z, e: e_out[0], hz, ha, s: s_out[0] }
    }

    /// Gradient of the energy output with respect to the descriptor row.
    pub(crate) fn input_grad<T: Real>(&self, theta: &[T], fwd: &AtomFwd<T>) -> Vec<T> {
        let e_entry = self.energy();
        let mut ga: Vec<T> = w_slice(theta, e_entry).to_vec();
        for (l, entry) in self.trunk().iter().enumerate().rev() {
            let gz: Vec<T> = fwd.z[l]
                .iter()
                .zip(&ga)
                .map(|(&zv, &g)| silu_d1(zv) * g)
                .collect();
            let w = w_slice(theta, entry);
            let mut prev = vec![T::zero(); entry.in_dim];
            for (o, &g) in gz.iter().enumerate() {
                let row = &w[o * entry.in_dim..(o + 1) * entry.in_dim];
                for (p, &wv) in prev.iter_mut().zip(row) {
                    *p += wv * g;
                }
            }
            ga = prev;
        }
        ga
    }

    /// Push the descriptor-space direction `v` through the trunk and the
    /// energy head, caching every intermediate tangent.
    pub(crate) fn tangent<T: Real>(&self, theta: &[T], fwd: &AtomFwd<T>, v: &[T]) -> AtomTan<T> {
        let mut da: Vec<Vec<T>> = Vec::with_capacity(self.n_trunk + 1);
        let mut dz: Vec<Vec<T>> = Vec::with_capacity(self.n_trunk);
        da.push(v.to_vec());
        for (l, entry) in self.trunk().iter().enumerate() {
            let mut dzl = vec![T::zero(); entry.out_dim];
            linear_nobias(w_slice(theta, entry), da.last().unwrap(), &mut dzl);
            da.push(
                fwd.z[l]
                    .iter()
                    .zip(&dzl)
                    .map(|(&zv, &d)| silu_d1(zv) * d)
                    .collect(),
            );
            dz.push(dzl);
        }
        let e_entry = self.energy();
        let mut edot = [T::zero()];
        linear_nobias(w_slice(theta, e_entry), da.last().unwrap(), &mut edot);
        AtomTan { da, dz, edot: edot[0] }
    }

    /// Accumulate into `grad` the parameter gradient of
    /// `seed_e * e + seed_s * s + seed_edot * edot`
    /// for one atom, where `edot` is the tangent output cached in `tan`.
    /// The tangent direction itself is treated as a constant.
    pub(crate) fn reverse<T: Real>(
        &self,
        theta: &[T],
        fwd: &AtomFwd<T>,
        tan: Option<&AtomTan<T>>,
        seed_e: T,
        seed_s: T,
        seed_edot: T,
        grad: &mut [T],
    ) {
        debug_assert_eq!(grad.len(), self.n_params);
        let feature = fwd.a.last().unwrap();
        let n_feat = feature.len();

        // Energy head: e = w.a + b, edot = w.da.
        let e_entry = self.energy();
        let w_e = w_slice(theta, e_entry);
        let mut ga = vec![T::zero(); n_feat];
        let mut gda = vec![T::zero(); n_feat];
        {
            let gw = &mut grad[e_entry.w_offset..e_entry.w_offset + n_feat];
            for (gwi, &ai) in gw.iter_mut().zip(feature) {
                *gwi += seed_e * ai;
            }
            if let Some(t) = tan {
                let dfeat = t.da.last().unwrap();
                let gw = &mut grad[e_entry.w_offset..e_entry.w_offset + n_feat];
                for (gwi, &di) in gw.iter_mut().zip(dfeat) {
                    *gwi += seed_edot * di;
                }
            }
            grad[e_entry.b_offset] += seed_e;
            for ((gai, gdai), &wi) in ga.iter_mut().zip(gda.iter_mut()).zip(w_e) {
                *gai += seed_e * wi;
                *gdai += seed_edot * wi;
            }
        }

        // Noise head, reversed down to the trunk feature.
        let sigma_layers = self.sigma();
        let n_hidden = sigma_layers.len() - 1;
        {
            let s_entry = &sigma_layers[n_hidden];
            let s_input: &[T] = fwd.ha.last().unwrap_or(feature);
            let w_s = w_slice(theta, s_entry);
            let gw = &mut grad[s_entry.w_offset..s_entry.w_offset + s_entry.in_dim];
            for (gwi, &hi) in gw.iter_mut().zip(s_input) {
                *gwi += seed_s * hi;
            }
            grad[s_entry.b_offset] += seed_s;
            let mut gh: Vec<T> = w_s.iter().map(|&wi| seed_s * wi).collect();

            for (m, entry) in sigma_layers[..n_hidden].iter().enumerate().rev() {
                let input: &[T] = if m == 0 { feature } else { &fwd.ha[m - 1] };
                let gz: Vec<T> = fwd.hz[m]
                    .iter()
                    .zip(&gh)
                    .map(|(&zv, &g)| silu_d1(zv) * g)
                    .collect();
                let w = w_slice(theta, entry);
                for (o, &g) in gz.iter().enumerate() {
                    let gw = &mut grad
                        [entry.w_offset + o * entry.in_dim..entry.w_offset + (o + 1) * entry.in_dim];
                    for (gwi, &xi) in gw.iter_mut().zip(input) {
                        *gwi += g * xi;
                    }
                    grad[entry.b_offset + o] += g;
                }
                let mut prev = vec![T::zero(); entry.in_dim];
                for (o, &g) in gz.iter().enumerate() {
                    let row = &w[o * entry.in_dim..(o + 1) * entry.in_dim];
                    for (p, &wv) in prev.iter_mut().zip(row) {
                        *p += wv * g;
                    }
                }
                gh = prev;
            }
            for (gai, &g) in ga.iter_mut().zip(&gh) {
                *gai += g;
            }
        }

        // Trunk, reversed with paired plain/tangent adjoints:
        //   gz  = silu'(z) . ga + silu''(z) . dz . gda
        //   gdz = silu'(z) . gda
        //   dW += gz (x) a_prev + gdz (x) da_prev, db += gz
        for (l, entry) in self.trunk().iter().enumerate().rev() {
            let d1: Vec<T> = fwd.z[l].iter().map(|&zv| silu_d1(zv)).collect();
            let mut gz: Vec<T> = d1.iter().zip(&ga).map(|(&d, &g)| d * g).collect();
            let mut gdz = vec![T::zero(); entry.out_dim];
            if let Some(t) = tan {
                for (o, gzo) in gz.iter_mut().enumerate() {
                    *gzo += silu_d2(fwd.z[l][o]) * t.dz[l][o] * gda[o];
                }
                for (o, gdzo) in gdz.iter_mut().enumerate() {
                    *gdzo = d1[o] * gda[o];
                }
            }

            let a_prev = &fwd.a[l];
            for (o, &g) in gz.iter().enumerate() {
                let gw = &mut grad
                    [entry.w_offset + o * entry.in_dim..entry.w_offset + (o + 1) * entry.in_dim];
                for (gwi, &xi) in gw.iter_mut().zip(a_prev) {
                    *gwi += g * xi;
                }
                grad[entry.b_offset + o] += g;
            }
            if let Some(t) = tan {
                let da_prev = &t.da[l];
                for (o, &g) in gdz.iter().enumerate() {
                    let gw = &mut grad
                        [entry.w_offset + o * entry.in_dim..entry.w_offset + (o + 1) * entry.in_dim];
                    for (gwi, &xi) in gw.iter_mut().zip(da_prev) {
                        *gwi += g * xi;
                    }
                }
            }

            let w = w_slice(theta, entry);
            let mut prev_ga = vec![T::zero(); entry.in_dim];
            let mut prev_gda = vec![T::zero(); entry.in_dim];
            for o in 0..entry.out_dim {
                let row = &w[o * entry.in_dim..(o + 1) * entry.in_dim];
                let (g, gd) = (gz[o], gdz[o]);
                for (i, &wv) in row.iter().enumerate() {
                    prev_ga[i] += wv * g;
                    prev_gda[i] += wv * gd;
                }
            }
            ga = prev_ga;
            gda = prev_gda;
        }
    }
}
