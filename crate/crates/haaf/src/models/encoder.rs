//! Shared per-instance feature extractor: a plain MLP over flattened patches
//! by default, or a small 2-conv stem. The convolutions are expressed as
//! matmuls against constant patch-gather matrices so they ride on the same
//! op set as everything else.

use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::nn::{join, LinearLayer, Mlp, Params, TapeBinding};
use crate::tensor::{Graph, Tensor, TensorError, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;

#[derive(Debug, Clone)]
pub enum InstanceEncoder {
    Mlp(Mlp),
    Conv2(ConvStem),
}

impl InstanceEncoder {
    pub fn new_mlp(rng: &mut ChaCha8Rng, patch: usize, hidden: usize, d: usize) -> Self {
        InstanceEncoder::Mlp(Mlp::new(rng, &[patch * patch, hidden, d], false))
    }

    pub fn new_conv2(
        rng: &mut ChaCha8Rng,
        patch: usize,
        channels: usize,
        d: usize,
    ) -> Result<Self, ModelError> {
        Ok(InstanceEncoder::Conv2(ConvStem::new(rng, patch, channels, d)?))
    }

    /// `x: [m, patch*patch] -> [m, d]`, rows independent.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        x: Var,
    ) -> Result<Var, TensorError> {
        match self {
            InstanceEncoder::Mlp(mlp) => {
                let h = mlp.layers[0].forward(g, bind, x)?;
                let h = g.gelu(h)?;
                mlp.layers[1].forward(g, bind, h)
            }
            InstanceEncoder::Conv2(stem) => stem.forward(g, bind, x),
        }
    }
}

impl Params for InstanceEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            InstanceEncoder::Mlp(m) => m.visit(prefix, f),
            InstanceEncoder::Conv2(c) => c.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            InstanceEncoder::Mlp(m) => m.visit_mut(prefix, f),
            InstanceEncoder::Conv2(c) => c.visit_mut(prefix, f),
        }
    }
}

/// conv(3x3, stride 2) + gelu, twice, then a linear projection to `d`.
/// `gather1`/`gather2` are constant 0/1 matrices that rearrange pixels into
/// im2col rows via right-multiplication; they are not parameters.
#[derive(Debug, Clone)]
pub struct ConvStem {
    pub kernel1: LinearLayer, // [k*k, c]
    pub kernel2: LinearLayer, // [k*k*c, c]
    pub proj: LinearLayer,    // [out2*out2*c, d]
    gather1: Tensor,
    gather2: Tensor,
    patch: usize,
    channels: usize,
    out1: usize,
    out2: usize,
}

fn conv_out(size: usize) -> usize {
    (size - KERNEL) / STRIDE + 1
}

impl ConvStem {
    pub fn new(
        rng: &mut ChaCha8Rng,
        patch: usize,
        channels: usize,
        d: usize,
    ) -> Result<Self, ModelError> {
        if patch < 7 {
            return Err(ModelError::PatchTooSmall { patch });
        }
        let out1 = conv_out(patch);
        let out2 = conv_out(out1);
        let kk = KERNEL * KERNEL;
        Ok(ConvStem {
            kernel1: LinearLayer::new(rng, kk, channels),
            kernel2: LinearLayer::new(rng, kk * channels, channels),
            proj: LinearLayer::new(rng, out2 * out2 * channels, d),
            gather1: gather_matrix(patch, 1),
            gather2: gather_matrix(out1, channels),
            patch,
            channels,
            out1,
            out2,
        })
    }

    fn forward(&self, g: &mut Graph, bind: &mut TapeBinding, x: Var) -> Result<Var, TensorError> {
        let m = g.shape(x)[0];
        let kk = KERNEL * KERNEL;
        let c = self.channels;
        let (p1, p2) = (self.out1 * self.out1, self.out2 * self.out2);

        let s1 = g.constant(self.gather1.shape().to_vec(), self.gather1.values().to_vec())?;
        let cols = g.matmul(x, s1)?; // [m, p1*kk]
        let rows = g.reshape(cols, vec![m * p1, kk])?;
        let h = self.kernel1.forward(g, bind, rows)?;
        let h = g.gelu(h)?; // [m*p1, c]
        let map1 = g.reshape(h, vec![m, p1 * c])?;

        let s2 = g.constant(self.gather2.shape().to_vec(), self.gather2.values().to_vec())?;
        let cols2 = g.matmul(map1, s2)?; // [m, p2*kk*c]
        let rows2 = g.reshape(cols2, vec![m * p2, kk * c])?;
        let h2 = self.kernel2.forward(g, bind, rows2)?;
        let h2 = g.gelu(h2)?; // [m*p2, c]
        let map2 = g.reshape(h2, vec![m, p2 * c])?;

        self.proj.forward(g, bind, map2)
    }

    pub fn expected_len(&self) -> usize {
        self.patch * self.patch
    }
}

impl Params for ConvStem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.kernel1.visit(&join(prefix, "conv1"), f);
        self.kernel2.visit(&join(prefix, "conv2"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.kernel1.visit_mut(&join(prefix, "conv1"), f);
        self.kernel2.visit_mut(&join(prefix, "conv2"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Builds the `[size*size*channels, out*out*KERNEL*KERNEL*channels]` 0/1
/// matrix whose right-multiplication turns a (position-major, channel-minor)
/// feature map row into concatenated im2col rows.
fn gather_matrix(size: usize, channels: usize) -> Tensor {
    let out = conv_out(size);
    let kk = KERNEL * KERNEL;
    let in_w = size * size * channels;
    let out_w = out * out * kk * channels;
    let mut values = vec![0.0; in_w * out_w];
    for qy in 0..out {
        for qx in 0..out {
            let q = qy * out + qx;
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let off = dy * KERNEL + dx;
                    let pixel = (qy * STRIDE + dy) * size + (qx * STRIDE + dx);
                    for ch in 0..channels {
                        let row = pixel * channels + ch;
                        let col = q * kk * channels + off * channels + ch;
                        values[row * out_w + col] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![in_w, out_w], values).expect("gather matrix shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;
    use rand::{Rng, SeedableRng};

    /// Direct nested-loop convolution oracle (position-major, channel-minor
    /// output layout, matching the stem).
    fn conv_oracle(
        input: &[Real],
        size: usize,
        c_in: usize,
        kernel: &[Real], // [kk*c_in, c_out] row-major
        bias: &[Real],
        c_out: usize,
    ) -> Vec<Real> {
        let out = conv_out(size);
        let mut result = vec![0.0; out * out * c_out];
        for qy in 0..out {
            for qx in 0..out {
                for co in 0..c_out {
                    let mut acc = bias[co];
                    for dy in 0..KERNEL {
                        for dx in 0..KERNEL {
                            for ci in 0..c_in {
                                let pixel = (qy * STRIDE + dy) * size + (qx * STRIDE + dx);
                                let krow = (dy * KERNEL + dx) * c_in + ci;
                                acc += input[pixel * c_in + ci] * kernel[krow * c_out + co];
                            }
                        }
                    }
                    result[(qy * out + qx) * c_out + co] = acc;
                }
            }
        }
        result
    }

    fn gelu(x: Real) -> Real {
        let c = (2.0 / std::f64::consts::PI).sqrt() as Real;
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    #[test]
    fn stem_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (patch, channels, d) = (10, 3, 5);
        let stem = ConvStem::new(&mut rng, patch, channels, d).unwrap();
        let instance: Vec<Real> =
            (0..patch * patch).map(|_| rng.random::<f64>() as Real).collect();

        // Oracle path: conv1 -> gelu -> conv2 -> gelu -> linear.
        let h1: Vec<Real> = conv_oracle(
            &instance,
            patch,
            1,
            stem.kernel1.w.values(),
            stem.kernel1.b.values(),
            channels,
        )
        .into_iter()
        .map(gelu)
        .collect();
        let h2: Vec<Real> = conv_oracle(
            &h1,
            stem.out1,
            channels,
            stem.kernel2.w.values(),
            stem.kernel2.b.values(),
            channels,
        )
        .into_iter()
        .map(gelu)
        .collect();
        let mut expected = stem.proj.b.values().to_vec();
        for (i, &v) in h2.iter().enumerate() {
            for j in 0..d {
                expected[j] += v * stem.proj.w.values()[i * d + j];
            }
        }

        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let x = g.constant(vec![1, patch * patch], instance).unwrap();
        let y = stem.forward(&mut g, &mut bind, x).unwrap();
        for (a, e) in g.value(y).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn stem_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let stem = ConvStem::new(&mut rng, 8, 2, 4).unwrap();
        let one: Vec<Real> = (0..64).map(|_| rng.random::<f64>() as Real).collect();
        let other: Vec<Real> = (0..64).map(|_| rng.random::<f64>() as Real).collect();

        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let both = [one.clone(), other].concat();
        let x = g.constant(vec![2, 64], both).unwrap();
        let y = stem.forward(&mut g, &mut bind, x).unwrap();
        let batch_row0 = g.value(y)[..4].to_vec();

        let mut g2 = Graph::new();
        let mut bind2 = TapeBinding::new();
        let x1 = g2.constant(vec![1, 64], one).unwrap();
        let y1 = stem.forward(&mut g2, &mut bind2, x1).unwrap();
        assert_eq!(g2.value(y1), &batch_row0[..]);
    }

    #[test]
    fn tiny_patches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        assert!(matches!(
            ConvStem::new(&mut rng, 6, 2, 4),
            Err(ModelError::PatchTooSmall { patch: 6 })
        ));
    }
}
