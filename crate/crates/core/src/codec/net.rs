//! Small feed-forward networks with explicit reverse-mode gradients.
//!
//! Parameters of a layer live in one flat vector (weights first, then bias),
//! so optimizers and finite-difference checks can treat every layer alike.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::sig17_vec;

/// Geometry of a 2-D convolution over a `channels × height × width` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Forward convolution; output size `⌊(in + 2·pad - kernel)/stride⌋ + 1`.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        let out = |i: usize| (i + 2 * pad - kernel) / stride + 1;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: out(in_h),
            out_w: out(in_w),
        }
    }

    /// Transposed convolution producing exactly `out_h × out_w`.
    pub fn transposed(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    fn input_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn output_len(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }

    fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel
    }

    /// Visits every (input index, output index, weight index) triple connected
    /// by the kernel. Transposed convolutions reuse the same wiring with
    /// roles of input and output swapped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for oc in 0..self.out_ch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let o = (oc * self.out_h + oy) * self.out_w + ox;
                    for ic in 0..self.in_ch {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let i = (ic * self.in_h + iy as usize) * self.in_w + ix as usize;
                                let w = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                                f(i, o, w);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Wiring of the transposed convolution expressed as the forward
    /// convolution it is the adjoint of.
    fn adjoint(&self) -> ConvGeom {
        ConvGeom {
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            in_h: self.out_h,
            in_w: self.out_w,
            out_h: self.in_h,
            out_w: self.in_w,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `y = W x + b` with `W: outputs × inputs`.
    Dense { inputs: usize, outputs: usize },
    Tanh { width: usize },
    /// Pass-through; used by the identity codec fixture.
    Identity { width: usize },
    Conv(ConvGeom),
    ConvTranspose(ConvGeom),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(with = "sig17_vec")]
    pub params: Vec<f64>,
}

impl Layer {
    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`, the usual
    /// default for linear and convolution layers.
    fn uniform_params(count: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..count).map(|_| rng.random_range(-bound..bound)).collect()
    }

    pub fn dense(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            params: Self::uniform_params(inputs * outputs + outputs, inputs, rng),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            kind: LayerKind::Identity { width },
            params: Vec::new(),
        }
    }

    pub fn tanh(width: usize) -> Self {
        Self {
            kind: LayerKind::Tanh { width },
            params: Vec::new(),
        }
    }

    fn conv_params(g: &ConvGeom, rng: &mut impl Rng) -> Vec<f64> {
        Self::uniform_params(g.weight_len() + g.out_ch, g.in_ch * g.kernel * g.kernel, rng)
    }

    pub fn conv(g: ConvGeom, rng: &mut impl Rng) -> Self {
        Self {
            params: Self::conv_params(&g, rng),
            kind: LayerKind::Conv(g),
        }
    }

    pub fn conv_transpose(g: ConvGeom, rng: &mut impl Rng) -> Self {
        Self {
            params: Self::conv_params(&g, rng),
            kind: LayerKind::ConvTranspose(g),
        }
    }

    pub fn input_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Tanh { width } | LayerKind::Identity { width } => *width,
            LayerKind::Conv(g) => g.input_len(),
            LayerKind::ConvTranspose(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { outputs, .. } => *outputs,
            LayerKind::Tanh { width } | LayerKind::Identity { width } => *width,
            LayerKind::Conv(g) => g.output_len(),
            LayerKind::ConvTranspose(g) => g.output_len(),
        }
    }

    fn expected_params(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerKind::Tanh { .. } | LayerKind::Identity { .. } => 0,
            LayerKind::Conv(g) | LayerKind::ConvTranspose(g) => g.weight_len() + g.out_ch,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let (w, b) = self.params.split_at(inputs * outputs);
                (0..*outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect()
            }
            LayerKind::Tanh { .. } => x.iter().map(|v| v.tanh()).collect(),
            LayerKind::Identity { .. } => x.to_vec(),
            LayerKind::Conv(g) => {
                let (w, b) = self.params.split_at(g.weight_len());
                let plane = g.out_h * g.out_w;
                let mut y: Vec<f64> = (0..g.output_len()).map(|o| b[o / plane]).collect();
                g.for_each_tap(|i, o, k| y[o] += w[k] * x[i]);
                y
            }
            LayerKind::ConvTranspose(g) => {
                let (w, b) = self.params.split_at(g.weight_len());
                let plane = g.out_h * g.out_w;
                let mut y: Vec<f64> = (0..g.output_len()).map(|o| b[o / plane]).collect();
                // Adjoint wiring: our input is its output and vice versa.
                g.adjoint().for_each_tap(|yo, xi, k| y[yo] += w[k] * x[xi]);
                y
            }
        }
    }

    /// Given the layer input `x`, its output `y` and `dL/dy`, accumulates
    /// `dL/dθ` into `grad_params` and returns `dL/dx`.
    fn backward(&self, x: &[f64], y: &[f64], gy: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let (w, _) = self.params.split_at(inputs * outputs);
                let (gw, gb) = grad_params.split_at_mut(inputs * outputs);
                let mut gx = vec![0.0; *inputs];
                for o in 0..*outputs {
                    let g = gy[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..*inputs {
                        grow[i] += g * x[i];
                        gx[i] += g * row[i];
                    }
                }
                gx
            }
            LayerKind::Tanh { .. } => y.iter().zip(gy).map(|(t, g)| g * (1.0 - t * t)).collect(),
            LayerKind::Identity { .. } => gy.to_vec(),
            LayerKind::Conv(g) => {
                let (w, _) = self.params.split_at(g.weight_len());
                let (gw, gb) = grad_params.split_at_mut(g.weight_len());
                let plane = g.out_h * g.out_w;
                for (o, &v) in gy.iter().enumerate() {
                    gb[o / plane] += v;
                }
                let mut gx = vec![0.0; g.input_len()];
                g.for_each_tap(|i, o, k| {
                    gw[k] += gy[o] * x[i];
                    gx[i] += gy[o] * w[k];
                });
                gx
            }
            LayerKind::ConvTranspose(g) => {
                let (w, _) = self.params.split_at(g.weight_len());
                let (gw, gb) = grad_params.split_at_mut(g.weight_len());
                let plane = g.out_h * g.out_w;
                for (o, &v) in gy.iter().enumerate() {
                    gb[o / plane] += v;
                }
                let mut gx = vec![0.0; g.input_len()];
                g.adjoint().for_each_tap(|yo, xi, k| {
                    gw[k] += gy[yo] * x[xi];
                    gx[xi] += gy[yo] * w[k];
                });
                gx
            }
        }
    }
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, one vector per layer.
pub type Gradients = Vec<Vec<f64>>;

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.params.len() != l.expected_params() {
                return Err(Error::dim(format!(
                    "layer {i} has {} parameters, expected {}",
                    l.params.len(),
                    l.expected_params()
                )));
            }
            if l.params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].output_len() != w[1].input_len() {
                return Err(Error::dim(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    w[0].output_len(),
                    i + 1,
                    w[1].input_len()
                )));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_len)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_len)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward(&h);
        }
        Ok(h)
    }

    /// Forward pass keeping every intermediate activation; `acts[0]` is the
    /// input and `acts[len]` the output.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_len() {
            return Err(Error::dim("network input length mismatch"));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let next = l.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.layers.iter().map(|l| vec![0.0; l.params.len()]).collect()
    }

    /// Back-propagates `dL/d(output)` through a recorded trace, accumulating
    /// into `grads`, and returns `dL/d(input)`.
    pub fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            g = l.backward(&acts[i], &acts[i + 1], &g, &mut grads[i]);
        }
        g
    }

    /// `θ ← θ - lr·g`
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            for (p, d) in l.params.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
    }

    pub fn params_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Network, x: &[f64], target: &[f64]) -> f64 {
        let y = net.forward(x).unwrap();
        0.5 * y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    fn check_gradients(mut net: Network, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..net.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let acts = net.forward_trace(&x).unwrap();
        let y = acts.last().unwrap();
        let gy: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a - b).collect();
        let mut grads = net.zero_gradients();
        let gx = net.backward(&acts, &gy, &mut grads);
        let analytic: Vec<f64> = grads.concat();

        let h = 1e-5;
        let n = net.param_count();
        let mut worst = 0.0f64;
        for idx in (0..n).step_by((n / 60).max(1)) {
            let orig = *net.params_iter_mut().nth(idx).unwrap();
            *net.params_iter_mut().nth(idx).unwrap() = orig + h;
            let lp = loss(&net, &x, &t);
            *net.params_iter_mut().nth(idx).unwrap() = orig - h;
            let lm = loss(&net, &x, &t);
            *net.params_iter_mut().nth(idx).unwrap() = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "parameter gradient rel err {worst}");

        let mut xp = x.clone();
        for i in 0..x.len().min(20) {
            xp[i] = x[i] + h;
            let lp = loss(&net, &xp, &t);
            xp[i] = x[i] - h;
            let lm = loss(&net, &xp, &t);
            xp[i] = x[i];
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-4 * fd.abs().max(gx[i].abs()).max(1e-6));
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::new(vec![
            Layer::dense(7, 5, &mut rng),
            Layer::tanh(5),
            Layer::dense(5, 3, &mut rng),
        ])
        .unwrap();
        check_gradients(net, 11);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c1 = ConvGeom::conv(1, 2, 3, 2, 1, 6, 5);
        assert_eq!((c1.out_h, c1.out_w), (3, 3));
        let t1 = ConvGeom::transposed(2, 1, 3, 2, 1, 3, 3, 6, 5);
        let mut conv = Layer::conv(c1, &mut rng);
        let mut deconv = Layer::conv_transpose(t1, &mut rng);
        // Non-zero biases so their gradients are exercised too.
        for l in [&mut conv, &mut deconv] {
            let n = l.params.len();
            l.params[n - 1] = 0.3;
        }
        let net = Network::new(vec![conv, Layer::tanh(18), deconv]).unwrap();
        check_gradients(net, 12);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> = <x, convT(y)> with shared weights and zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeom::conv(2, 3, 3, 2, 1, 7, 4);
        let mut conv = Layer::conv(g, &mut rng);
        for b in &mut conv.params[g.weight_len()..] {
            *b = 0.0;
        }
        let t = ConvGeom::transposed(3, 2, 3, 2, 1, g.out_h, g.out_w, 7, 4);
        let mut params = vec![0.0; t.weight_len() + t.out_ch];
        // conv weight [oc][ic][ky][kx] == transposed weight [ic'=oc][oc'=ic][ky][kx]
        params[..g.weight_len()].copy_from_slice(&conv.params[..g.weight_len()]);
        let deconv = Layer {
            kind: LayerKind::ConvTranspose(t),
            params,
        };
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = conv.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = deconv.forward(&y).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Network::new(vec![Layer::dense(3, 4, &mut rng), Layer::tanh(5)]).is_err());
        let net = Network::new(vec![Layer::dense(3, 4, &mut rng)]).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }
}
