//! Global gain stage: a thumbnail of the input drives a six-layer conv net
//! whose pooled output becomes one positive multiplier per color channel.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Module, TensorRole};
use crate::tensor::{Scalar, Tensor};

/// Side length of the thumbnail the predictor sees.
pub const GEM_INPUT_SIZE: usize = 32;
/// Coefficients live in `[1/COEFF_MAX, COEFF_MAX]`.
pub const COEFF_MAX: f64 = 64.0;

const WIDTHS: [usize; 7] = [3, 16, 32, 32, 32, 32, 3];
const STRIDES: [usize; 6] = [1, 2, 2, 2, 1, 1];

#[derive(Clone, Debug)]
pub struct GemNetwork {
    pub layers: Vec<Conv2d>,
}

impl GemNetwork {
    /// Kaiming-uniform hidden layers; the last layer is zero so every
    /// coefficient starts at exactly 1.
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(6);
        for i in 0..6 {
            let name = format!("gem.conv{}", i + 1);
            let (cin, cout) = (WIDTHS[i], WIDTHS[i + 1]);
            layers.push(if i == 5 {
                Conv2d::zeroed(name, cin, cout, 3, STRIDES[i], 1)
            } else {
                Conv2d::new(name, cin, cout, 3, STRIDES[i], 1, rng)
            });
        }
        Self { layers }
    }

    /// Coefficients for a `N×3×32×32` thumbnail, shaped `N×3×1×1`.
    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        thumb: Var,
        binder: &mut Binder,
    ) -> Result<Var> {
        let [_, c, h, w] = g.value(thumb).dims4("gem_predict")?;
        if c != 3 || h != GEM_INPUT_SIZE || w != GEM_INPUT_SIZE {
            return Err(Error::shape(
                "gem_predict",
                format!("expected Nx3x{GEM_INPUT_SIZE}x{GEM_INPUT_SIZE}, got channels {c}, size {h}x{w}"),
            ));
        }
        let mut x = thumb;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, binder)?;
            if i < 5 {
                x = g.relu(x);
            }
        }
        let z = g.global_avg_pool(x)?;
        let bound = COEFF_MAX.ln();
        let z = g.clamp(z, -bound, bound);
        Ok(g.exp(z))
    }
}

impl Module for GemNetwork {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

fn check_rgb<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let dims = g.value(x).dims4(op)?;
    if dims[1] != 3 {
        return Err(Error::shape(
            op,
            format!("expected 3 channels on axis 1, got {}", dims[1]),
        ));
    }
    Ok(dims)
}

/// Bilinear thumbnail at the predictor's fixed resolution.
pub fn gem_downsample<T: Scalar>(g: &mut Graph<T>, image: Var) -> Result<Var> {
    check_rgb(g, image, "gem_downsample")?;
    g.bilinear_resize(image, GEM_INPUT_SIZE, GEM_INPUT_SIZE)
}

/// Per-channel scaling of `image` (`N×3×H×W`) by `coeffs` (`N×3×1×1`).
/// The result is not clamped.
pub fn gem_apply<T: Scalar>(g: &mut Graph<T>, image: Var, coeffs: Var) -> Result<Var> {
    let [n, ..] = check_rgb(g, image, "gem_apply")?;
    let cs = g.value(coeffs).shape();
    if cs != [n, 3, 1, 1] {
        return Err(Error::shape(
            "gem_apply",
            format!("coefficients shape {cs:?} does not match batch {n} x 3 channels"),
        ));
    }
    g.mul(image, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::oracle::naive_bilinear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coeffs_of(net: &GemNetwork, img: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(img);
        let t = gem_downsample(&mut g, x).unwrap();
        let a = net.predict(&mut g, t, &mut Binder::frozen()).unwrap();
        g.value(a).clone()
    }

    #[test]
    fn has_six_conv_layers_and_expected_size() {
        let net = GemNetwork::new(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.layers.len(), 6);
        assert_eq!(net.param_count(), 448 + 4640 + 3 * 9248 + 867);
    }

    #[test]
    fn fresh_network_predicts_unit_gains() {
        let net = GemNetwork::new(&mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn([2, 3, 20, 28], |_| rng.gen::<f64>());
        assert!(coeffs_of(&net, img).data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn coefficients_respect_range() {
        let mut net = GemNetwork::new(&mut ChaCha8Rng::seed_from_u64(3));
        let last = net.layers.last_mut().unwrap();
        last.bias = Tensor::new([3], vec![100.0, -100.0, 0.5]).unwrap();
        let a = coeffs_of(&net, Tensor::full([1, 3, 32, 32], 0.5));
        let d = a.data();
        assert!((d[0] - 64.0).abs() < 1e-9);
        assert!((d[1] - 1.0 / 64.0).abs() < 1e-12);
        assert!(d[2] > 1.0 && d[2] < 64.0);
    }

    #[test]
    fn predict_rejects_wrong_size() {
        let net = GemNetwork::new(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3, 16, 16]));
        assert!(net.predict(&mut g, x, &mut Binder::frozen()).is_err());
    }

    #[test]
    fn downsample_constant_and_identity() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([1, 3, 50, 70], 0.3));
        let t = gem_downsample(&mut g, c).unwrap();
        assert!(g.value(t).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let src = Tensor::from_fn([1, 3, 32, 32], |i| (i % 17) as f64 / 17.0);
        let x = g.constant(src.clone());
        let t = gem_downsample(&mut g, x).unwrap();
        assert!(g.value(t).max_abs_diff(&src) < 1e-6);
        let gray = g.constant(Tensor::zeros([1, 1, 8, 8]));
        assert!(gem_downsample(&mut g, gray).is_err());
    }

    #[test]
    fn downsample_split_image_matches_sampling_oracle() {
        let src = Tensor::from_fn([1, 3, 64, 64], |i| if i % 64 < 32 { 0.0 } else { 1.0 });
        let mut g = Graph::<f64>::new();
        let x = g.constant(src.clone());
        let t = gem_downsample(&mut g, x).unwrap();
        let want = naive_bilinear(&src, 32, 32).unwrap();
        assert!(g.value(t).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn apply_is_per_channel_product() {
        let mut g = Graph::<f64>::new();
        let img = g.constant(Tensor::new([1, 3, 1, 1], vec![0.2, 0.4, 0.1]).unwrap());
        let a = g.constant(Tensor::new([1, 3, 1, 1], vec![2.0, 1.0, 3.0]).unwrap());
        let out = gem_apply(&mut g, img, a).unwrap();
        for (v, w) in g.value(out).data().iter().zip([0.4, 0.4, 0.3]) {
            assert!((v - w).abs() < 1e-12);
        }
        let bad = g.constant(Tensor::full([2, 3, 1, 1], 1.0));
        assert!(gem_apply(&mut g, img, bad).is_err());
    }
}
