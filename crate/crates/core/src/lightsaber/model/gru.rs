//! Stacked GRU sequence classifier.
//!
//! Layer 0 reads `[values_t, mask_t]` at each of the `T` bins. The last layer's final
//! hidden state is concatenated with the static covariates and fed to a logistic readout.
//! Dropout (inverted, one mask per sequence) applies to the inputs of layers above the
//! first and to the final hidden state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_with_logit, Network, Sample, Segment};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    input: usize,
    offset: usize,
}

impl LayerLayout {
    fn len(&self, h: usize) -> usize {
        3 * h * self.input + 3 * h * h + 3 * h
    }
    fn w(&self, h: usize, gate: usize) -> usize {
        self.offset + gate * h * self.input
    }
    fn u(&self, h: usize, gate: usize) -> usize {
        self.offset + 3 * h * self.input + gate * h * h
    }
    fn b(&self, h: usize, gate: usize) -> usize {
        self.offset + 3 * h * self.input + 3 * h * h + gate * h
    }
}

const Z: usize = 0;
const R: usize = 1;
const N: usize = 2;
const GATES: [&str; 3] = ["z", "r", "h"];

#[derive(Debug, Clone, PartialEq)]
pub struct GruModel<F> {
    hidden: usize,
    n_static: usize,
    n_bins: usize,
    n_channels: usize,
    dropout: f64,
    layers: Vec<LayerLayout>,
    readout: usize,
    params: Vec<F>,
}

/// Forward activations of one layer over a sequence.
struct LayerTrace<F> {
    /// `T x d` inputs as seen by the layer (after dropout).
    input: Vec<F>,
    /// `(T + 1) x H`, row 0 is the zero initial state.
    h: Vec<F>,
    z: Vec<F>,
    r: Vec<F>,
    n: Vec<F>,
    /// `r_t * h_{t-1}`
    rh: Vec<F>,
}

/// `out[i] += sum_j m[i * cols + j] * v[j]`
fn gemv_acc<F: Scalar>(m: &[F], v: &[F], out: &mut [F]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        let mut acc = F::zero();
        for (a, b) in row.iter().zip(v) {
            acc += *a * *b;
        }
        *o += acc;
    }
}

/// `out[j] += sum_i m[i * cols + j] * v[i]`
fn gemv_t_acc<F: Scalar>(m: &[F], v: &[F], out: &mut [F]) {
    let cols = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == F::zero() {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += *a * vi;
        }
    }
}

/// `g[i * cols + j] += a[i] * b[j]`
fn outer_acc<F: Scalar>(a: &[F], b: &[F], g: &mut [F]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == F::zero() {
            continue;
        }
        let row = &mut g[i * cols..(i + 1) * cols];
        for (o, bj) in row.iter_mut().zip(b) {
            *o += ai * *bj;
        }
    }
}

impl<F: Scalar> GruModel<F> {
    /// Weights uniform in `+-1/sqrt(H)`, biases zero.
    pub fn new(
        hidden: usize,
        layers: usize,
        dropout: f64,
        n_static: usize,
        n_bins: usize,
        n_channels: usize,
        seed: u64,
    ) -> Self {
        assert!(hidden > 0 && layers > 0, "hidden_size and layers must be positive");
        let mut layout = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            let input = if l == 0 { 2 * n_channels } else { hidden };
            let ll = LayerLayout { input, offset };
            offset += ll.len(hidden);
            layout.push(ll);
        }
        let readout = offset;
        let total = readout + hidden + n_static + 1;
        let mut params = vec![F::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        for ll in &layout {
            let weights = 3 * hidden * ll.input + 3 * hidden * hidden;
            for p in &mut params[ll.offset..ll.offset + weights] {
                *p = F::lit(rng.gen_range(-bound..bound));
            }
        }
        let readout_bound = 1.0 / ((hidden + n_static) as f64).sqrt();
        for p in &mut params[readout..readout + hidden + n_static] {
            *p = F::lit(rng.gen_range(-readout_bound..readout_bound));
        }
        Self {
            hidden,
            n_static,
            n_bins,
            n_channels,
            dropout,
            layers: layout,
            readout,
            params,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Offset of the readout weights (`H + S` weights then the bias) in the flat vector.
    pub fn readout_offset(&self) -> usize {
        self.readout
    }

    fn dropout_mask(&self, rng: Option<&mut ChaCha8Rng>, len: usize) -> Option<Vec<F>> {
        let rng = rng?;
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = F::lit(1.0 / (1.0 - self.dropout));
        Some(
            (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < self.dropout {
                        F::zero()
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }

    fn forward(
        &self,
        x: &Sample<'_, F>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<LayerTrace<F>>, Vec<Option<Vec<F>>>, Option<Vec<F>>, F) {
        let (h, t_len, c) = (self.hidden, self.n_bins, self.n_channels);
        debug_assert_eq!(x.temporal.len(), t_len * c);
        let mut traces: Vec<LayerTrace<F>> = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for (l, ll) in self.layers.iter().enumerate() {
            let d = ll.input;
            let mut input = vec![F::zero(); t_len * d];
            let mask = if l == 0 {
                for t in 0..t_len {
                    input[t * d..t * d + c].copy_from_slice(&x.temporal[t * c..(t + 1) * c]);
                    input[t * d + c..(t + 1) * d].copy_from_slice(&x.mask[t * c..(t + 1) * c]);
                }
                None
            } else {
                let below = &traces[l - 1].h;
                input.copy_from_slice(&below[h..]);
                let mask = self.dropout_mask(rng.as_deref_mut(), h);
                if let Some(m) = &mask {
                    for t in 0..t_len {
                        for (v, k) in input[t * d..(t + 1) * d].iter_mut().zip(m) {
                            *v *= *k;
                        }
                    }
                }
                mask
            };
            masks.push(mask);

            let p = &self.params;
            let mut tr = LayerTrace {
                h: vec![F::zero(); (t_len + 1) * h],
                z: vec![F::zero(); t_len * h],
                r: vec![F::zero(); t_len * h],
                n: vec![F::zero(); t_len * h],
                rh: vec![F::zero(); t_len * h],
                input,
            };
            let mut az = vec![F::zero(); h];
            let mut ar = vec![F::zero(); h];
            let mut an = vec![F::zero(); h];
            for t in 0..t_len {
                let xt = &tr.input[t * d..(t + 1) * d];
                let hp = tr.h[t * h..(t + 1) * h].to_vec();
                az.copy_from_slice(&p[ll.b(h, Z)..ll.b(h, Z) + h]);
                ar.copy_from_slice(&p[ll.b(h, R)..ll.b(h, R) + h]);
                an.copy_from_slice(&p[ll.b(h, N)..ll.b(h, N) + h]);
                gemv_acc(&p[ll.w(h, Z)..ll.w(h, Z) + h * d], xt, &mut az);
                gemv_acc(&p[ll.w(h, R)..ll.w(h, R) + h * d], xt, &mut ar);
                gemv_acc(&p[ll.w(h, N)..ll.w(h, N) + h * d], xt, &mut an);
                gemv_acc(&p[ll.u(h, Z)..ll.u(h, Z) + h * h], &hp, &mut az);
                gemv_acc(&p[ll.u(h, R)..ll.u(h, R) + h * h], &hp, &mut ar);
                let row = t * h..(t + 1) * h;
                for i in 0..h {
                    tr.z[t * h + i] = az[i].sigmoid();
                    tr.r[t * h + i] = ar[i].sigmoid();
                    tr.rh[t * h + i] = tr.r[t * h + i] * hp[i];
                }
                gemv_acc(&p[ll.u(h, N)..ll.u(h, N) + h * h], &tr.rh[row.clone()], &mut an);
                for i in 0..h {
                    let n = an[i].tanh();
                    let z = tr.z[t * h + i];
                    tr.n[t * h + i] = n;
                    tr.h[(t + 1) * h + i] = (F::one() - z) * n + z * hp[i];
                }
            }
            traces.push(tr);
        }

        let out_mask = self.dropout_mask(rng, h);
        let last = &traces.last().unwrap().h[t_len * h..];
        let v = &self.params[self.readout..];
        let mut logit = v[h + self.n_static];
        for i in 0..h {
            let hi = match &out_mask {
                Some(m) => last[i] * m[i],
                None => last[i],
            };
            logit += v[i] * hi;
        }
        for j in 0..self.n_static {
            logit += v[h + j] * x.statics[j];
        }
        (traces, masks, out_mask, logit)
    }
}

impl<F: Scalar> Network<F> for GruModel<F> {
    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn segments(&self) -> Vec<Segment> {
        let h = self.hidden;
        let mut out = Vec::new();
        for (l, ll) in self.layers.iter().enumerate() {
            for (g, gate) in GATES.iter().enumerate() {
                out.push(Segment {
                    name: format!("layer{l}.w_{gate}"),
                    shape: vec![h, ll.input],
                    offset: ll.w(h, g),
                });
            }
            for (g, gate) in GATES.iter().enumerate() {
                out.push(Segment {
                    name: format!("layer{l}.u_{gate}"),
                    shape: vec![h, h],
                    offset: ll.u(h, g),
                });
            }
            for (g, gate) in GATES.iter().enumerate() {
                out.push(Segment {
                    name: format!("layer{l}.b_{gate}"),
                    shape: vec![h],
                    offset: ll.b(h, g),
                });
            }
        }
        out.push(Segment {
            name: "readout.weights".into(),
            shape: vec![h + self.n_static],
            offset: self.readout,
        });
        out.push(Segment {
            name: "readout.bias".into(),
            shape: vec![1],
            offset: self.readout + h + self.n_static,
        });
        out
    }

    fn logit(&self, x: &Sample<'_, F>) -> F {
        self.forward(x, None).3
    }

    fn accumulate_grad(
        &self,
        x: &Sample<'_, F>,
        target: F,
        grad: &mut [F],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> F {
        let (h, t_len) = (self.hidden, self.n_bins);
        let (traces, masks, out_mask, logit) = self.forward(x, dropout);
        let (loss, dlogit) = bce_with_logit(logit, target);

        // Readout.
        let last = &traces.last().unwrap().h[t_len * h..];
        let v = &self.params[self.readout..];
        let ro = self.readout;
        let mut d_last = vec![F::zero(); h];
        for i in 0..h {
            let m = out_mask.as_ref().map_or(F::one(), |m| m[i]);
            grad[ro + i] += dlogit * last[i] * m;
            d_last[i] = dlogit * v[i] * m;
        }
        for j in 0..self.n_static {
            grad[ro + h + j] += dlogit * x.statics[j];
        }
        grad[ro + h + self.n_static] += dlogit;

        // Gradient flowing into h_t (t = 1..=T) of the current layer from above.
        let mut inject = vec![F::zero(); t_len * h];
        inject[(t_len - 1) * h..].copy_from_slice(&d_last);

        let p = &self.params;
        let mut dh = vec![F::zero(); h];
        let mut daz = vec![F::zero(); h];
        let mut dar = vec![F::zero(); h];
        let mut dan = vec![F::zero(); h];
        let mut drh = vec![F::zero(); h];
        let mut dhp = vec![F::zero(); h];
        for (l, ll) in self.layers.iter().enumerate().rev() {
            let d = ll.input;
            let tr = &traces[l];
            let mut dx = vec![F::zero(); if l > 0 { t_len * d } else { 0 }];
            let mut carry = vec![F::zero(); h];
            for t in (0..t_len).rev() {
                let hp = &tr.h[t * h..(t + 1) * h];
                let xt = &tr.input[t * d..(t + 1) * d];
                let row = t * h..(t + 1) * h;
                let (z, r, n, rh) = (&tr.z[row.clone()], &tr.r[row.clone()], &tr.n[row.clone()], &tr.rh[row]);
                for i in 0..h {
                    dh[i] = inject[t * h + i] + carry[i];
                    let dn = dh[i] * (F::one() - z[i]);
                    let dz = dh[i] * (hp[i] - n[i]);
                    dhp[i] = dh[i] * z[i];
                    dan[i] = dn * (F::one() - n[i] * n[i]);
                    daz[i] = dz * z[i] * (F::one() - z[i]);
                }
                drh.iter_mut().for_each(|v| *v = F::zero());
                gemv_t_acc(&p[ll.u(h, N)..ll.u(h, N) + h * h], &dan, &mut drh);
                for i in 0..h {
                    let dr = drh[i] * hp[i];
                    dhp[i] += drh[i] * r[i];
                    dar[i] = dr * r[i] * (F::one() - r[i]);
                }
                outer_acc(&daz, xt, &mut grad[ll.w(h, Z)..ll.w(h, Z) + h * d]);
                outer_acc(&dar, xt, &mut grad[ll.w(h, R)..ll.w(h, R) + h * d]);
                outer_acc(&dan, xt, &mut grad[ll.w(h, N)..ll.w(h, N) + h * d]);
                outer_acc(&daz, hp, &mut grad[ll.u(h, Z)..ll.u(h, Z) + h * h]);
                outer_acc(&dar, hp, &mut grad[ll.u(h, R)..ll.u(h, R) + h * h]);
                outer_acc(&dan, rh, &mut grad[ll.u(h, N)..ll.u(h, N) + h * h]);
                for i in 0..h {
                    grad[ll.b(h, Z) + i] += daz[i];
                    grad[ll.b(h, R) + i] += dar[i];
                    grad[ll.b(h, N) + i] += dan[i];
                }
                gemv_t_acc(&p[ll.u(h, Z)..ll.u(h, Z) + h * h], &daz, &mut dhp);
                gemv_t_acc(&p[ll.u(h, R)..ll.u(h, R) + h * h], &dar, &mut dhp);
                if l > 0 {
                    let dxt = &mut dx[t * d..(t + 1) * d];
                    gemv_t_acc(&p[ll.w(h, Z)..ll.w(h, Z) + h * d], &daz, dxt);
                    gemv_t_acc(&p[ll.w(h, R)..ll.w(h, R) + h * d], &dar, dxt);
                    gemv_t_acc(&p[ll.w(h, N)..ll.w(h, N) + h * d], &dan, dxt);
                }
                carry.copy_from_slice(&dhp);
            }
            if l > 0 {
                // Layer l's input is layer l-1's h_t scaled by the dropout mask.
                for t in 0..t_len {
                    for i in 0..h {
                        let m = masks[l].as_ref().map_or(F::one(), |m| m[i]);
                        inject[t * h + i] = dx[t * d + i] * m;
                    }
                }
            }
        }
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_tile_the_parameter_vector() {
        let m = GruModel::<f64>::new(4, 2, 0.0, 2, 3, 5, 1);
        let mut covered = vec![false; m.params().len()];
        for s in m.segments() {
            for c in &mut covered[s.offset..s.offset + s.len()] {
                assert!(!*c, "overlap at {}", s.name);
                *c = true;
            }
        }
        assert!(covered.iter().all(|c| *c));
    }

    #[test]
    fn logit_is_deterministic_and_finite() {
        let m = GruModel::<f64>::new(3, 1, 0.2, 1, 4, 2, 9);
        let temporal = [0.1, -0.4, 0.3, 0.2, 1.5, -1.0, 0.0, 0.7];
        let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let x = Sample {
            statics: &[0.5],
            temporal: &temporal,
            mask: &mask,
        };
        let a = m.logit(&x);
        assert!(a.is_finite());
        assert_eq!(a, m.logit(&x));
    }
}
