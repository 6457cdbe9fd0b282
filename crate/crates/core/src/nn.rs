//! Tiny fully-connected network with tanh hidden layers and a linear head.
//!
//! Parameters live in one flat vector (per layer: weights row-major, then
//! biases) so optimizers and checkpoints can treat a network as a single
//! parameter group.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_traced`] for one input.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    // activations[0] is the input, activations[l] the output of layer l.
    activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

impl Mlp {
    /// Hidden layers get Xavier-uniform weights; the output layer is zero so
    /// the network starts as the zero map.
    pub fn new_zero_output<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs an input and an output size");
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            if l + 1 == layers {
                params.extend(std::iter::repeat_n(0.0, fan_in * fan_out + fan_out));
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
                params.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::param_count_for(sizes)).then(|| Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        self.for_each_layer(|l, w, b, last| {
            x = affine(w, b, &x, self.sizes[l + 1]);
            if !last {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        });
        x
    }

    pub fn forward_traced(&self, input: &[f64]) -> MlpTrace {
        let mut activations = vec![input.to_vec()];
        self.for_each_layer(|l, w, b, last| {
            let mut y = affine(w, b, activations.last().unwrap(), self.sizes[l + 1]);
            if !last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(y);
        });
        MlpTrace { activations }
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients into
    /// `grad_params` and returning the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad_params.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let offsets = self.layer_offsets();
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 != layers {
                let y = &trace.activations[l + 1];
                for (d, yv) in delta.iter_mut().zip(y) {
                    *d *= 1.0 - yv * yv;
                }
            }
            let x = &trace.activations[l];
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                grad_params[b_off + o] += d;
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                let grow = &mut grad_params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * x[i];
                    grad_in[i] += d * row[i];
                }
            }
            delta = grad_in;
        }
        delta
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        offsets
    }

    fn for_each_layer(&self, mut f: impl FnMut(usize, &[f64], &[f64], bool)) {
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            f(l, w, b, l + 1 == layers);
            off += n_in * n_out + n_out;
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect()
}
