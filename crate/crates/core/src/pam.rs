//! Pixelwise additive correction (a four-level UNet) and the full two-stage
//! enhancement pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::gem::{gem_apply, gem_downsample, GemNetwork};
use crate::nn::{Binder, Conv2d, ConvBnRelu, ConvTranspose2d, Module, TensorRole};
use crate::tensor::{Scalar, Tensor};

/// Spatial sizes must be multiples of this before entering the UNet.
pub const PAM_MULTIPLE: usize = 16;

const ENC_WIDTHS: [usize; 4] = [16, 32, 64, 128];
const DEC_WIDTHS: [usize; 4] = [64, 32, 16, 8];

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub conv: ConvBnRelu,
    pub down: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub up: ConvTranspose2d,
    pub conv: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct PamNetwork {
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub head: Conv2d,
}

impl PamNetwork {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut encoder = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in ENC_WIDTHS.iter().enumerate() {
            encoder.push(EncoderBlock {
                conv: ConvBnRelu::new(&format!("pam.enc{}.a", i + 1), cin, c, 1, rng),
                down: ConvBnRelu::new(&format!("pam.enc{}.b", i + 1), c, c, 2, rng),
            });
            cin = c;
        }
        let mut decoder = Vec::with_capacity(4);
        for (k, &out) in DEC_WIDTHS.iter().enumerate() {
            let half = cin / 2;
            let skip = ENC_WIDTHS[3 - k];
            decoder.push(DecoderBlock {
                up: ConvTranspose2d::new(format!("pam.dec{}.up", k + 1), cin, half, 2, 2, rng),
                conv: ConvBnRelu::new(&format!("pam.dec{}.c", k + 1), half + skip, out, 1, rng),
            });
            cin = out;
        }
        Self {
            encoder,
            decoder,
            head: Conv2d::zeroed("pam.head", cin, 3, 1, 1, 0),
        }
    }

    /// Adjustment map for a batch whose height and width are multiples of
    /// [`PAM_MULTIPLE`].
    pub fn predict<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4("pam_predict")?;
        if c != 3 {
            return Err(Error::shape(
                "pam_predict",
                format!("expected 3 channels on axis 1, got {c}"),
            ));
        }
        if h % PAM_MULTIPLE != 0 || w % PAM_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "pam_predict",
                format!("size {h}x{w} is not a positive multiple of {PAM_MULTIPLE} (axes 2,3); pad first"),
            ));
        }
        let mut skips = Vec::with_capacity(4);
        let mut y = x;
        for block in &mut self.encoder {
            let s = block.conv.forward(g, y, mode, binder)?;
            skips.push(s);
            y = block.down.forward(g, s, mode, binder)?;
        }
        for block in &mut self.decoder {
            let up = block.up.forward(g, y, binder)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = g.concat_channels(&[up, skip])?;
            y = block.conv.forward(g, cat, mode, binder)?;
        }
        self.head.forward(g, y, binder)
    }

    /// [`predict`](Self::predict) on any size: reflection-pads bottom/right to
    /// the next multiple of [`PAM_MULTIPLE`] and crops the result back.
    pub fn predict_padded<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4("pam_predict")?;
        let pad = |n: usize| n.div_ceil(PAM_MULTIPLE).max(1) * PAM_MULTIPLE - n;
        let padded = g.pad_reflect(x, pad(h), pad(w))?;
        let f = self.predict(g, padded, mode, binder)?;
        g.crop(f, h, w)
    }
}

impl Module for PamNetwork {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        for b in &self.encoder {
            b.conv.visit(f);
            b.down.visit(f);
        }
        for b in &self.decoder {
            b.up.visit(f);
            b.conv.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        for b in &mut self.encoder {
            b.conv.visit_mut(f);
            b.down.visit_mut(f);
        }
        for b in &mut self.decoder {
            b.up.visit_mut(f);
            b.conv.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// `clamp01(global + f_local)`; shapes must match exactly.
pub fn pam_compose<T: Scalar>(g: &mut Graph<T>, global: Var, f_local: Var) -> Result<Var> {
    let (a, b) = (g.value(global).shape(), g.value(f_local).shape());
    if a != b {
        return Err(Error::shape(
            "pam_compose",
            format!("I_global {a:?} vs f_local {b:?}"),
        ));
    }
    let sum = g.add(global, f_local)?;
    Ok(g.clamp01(sum))
}

/// Which enhancer stages are active. A disabled stage is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Gem,
    Pam,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::Gem, Variant::Pam, Variant::Full];

    pub fn from_flags(gem: bool, pam: bool) -> Self {
        match (gem, pam) {
            (false, false) => Variant::None,
            (true, false) => Variant::Gem,
            (false, true) => Variant::Pam,
            (true, true) => Variant::Full,
        }
    }

    pub fn gem_enabled(self) -> bool {
        matches!(self, Variant::Gem | Variant::Full)
    }

    pub fn pam_enabled(self) -> bool {
        matches!(self, Variant::Pam | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Gem => "gem",
            Variant::Pam => "pam",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "No enhancement",
            Variant::Gem => "GEM only",
            Variant::Pam => "PAM only",
            Variant::Full => "GEM + PAM",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected none, gem, pam or full"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub gem: GemNetwork,
    pub pam: PamNetwork,
}

/// Graph nodes produced by one [`Enhancer::enhance`] call.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceNodes {
    pub output: Var,
    /// `N×3×1×1`, absent when the global stage is bypassed.
    pub coeffs: Option<Var>,
    /// Absent when the pixelwise stage is bypassed.
    pub f_local: Option<Var>,
}

/// Scalar summaries for logs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceDiagnostics {
    /// Batch mean of each of the three coefficients.
    pub coeff_mean: [f64; 3],
    pub f_local_rms: f64,
    pub f_local_mean: f64,
}

impl EnhanceNodes {
    pub fn diagnostics<T: Scalar>(&self, g: &Graph<T>) -> EnhanceDiagnostics {
        let mut d = EnhanceDiagnostics {
            coeff_mean: [1.0; 3],
            ..Default::default()
        };
        if let Some(a) = self.coeffs {
            let vals = g.value(a).data();
            let n = vals.len() / 3;
            for (c, m) in d.coeff_mean.iter_mut().enumerate() {
                *m = (0..n).map(|b| vals[b * 3 + c].as_f64()).sum::<f64>() / n as f64;
            }
        }
        if let Some(f) = self.f_local {
            let vals = g.value(f).data();
            let n = vals.len() as f64;
            d.f_local_rms = (vals.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n).sqrt();
            d.f_local_mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        }
        d
    }
}

impl Enhancer {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self {
            gem: GemNetwork::new(rng),
            pam: PamNetwork::new(rng),
        }
    }

    /// Thumbnail → gains → scaled image → adjustment map → clamped sum.
    /// Only enabled stages bind their parameters.
    pub fn enhance<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        variant: Variant,
        binder: &mut Binder,
    ) -> Result<EnhanceNodes> {
        let [_, c, _, _] = g.value(input).dims4("enhance")?;
        if c != 3 {
            return Err(Error::shape(
                "enhance",
                format!("expected 3 channels on axis 1, got {c}"),
            ));
        }
        let (global, coeffs) = if variant.gem_enabled() {
            let thumb = gem_downsample(g, input)?;
            let a = self.gem.predict(g, thumb, binder)?;
            (gem_apply(g, input, a)?, Some(a))
        } else {
            (input, None)
        };
        let (output, f_local) = if variant.pam_enabled() {
            let f = self.pam.predict_padded(g, global, mode, binder)?;
            (pam_compose(g, global, f)?, Some(f))
        } else {
            (g.clamp01(global), None)
        };
        Ok(EnhanceNodes {
            output,
            coeffs,
            f_local,
        })
    }

    /// Eval-mode enhancement outside any training graph.
    pub fn enhance_eval(
        &mut self,
        images: &Tensor<f32>,
        variant: Variant,
    ) -> Result<(Tensor<f32>, EnhanceDiagnostics)> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone());
        let nodes = self.enhance(&mut g, x, Mode::Eval, variant, &mut Binder::frozen())?;
        Ok((g.value(nodes.output).clone(), nodes.diagnostics(&g)))
    }

    /// Records batch-norm running statistics from one train-mode pass over
    /// `images`; weights are untouched.
    pub fn prime_statistics(&mut self, images: &Tensor<f32>) -> Result<()> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone());
        self.enhance(&mut g, x, Mode::Train, Variant::Full, &mut Binder::frozen())
            .map(drop)
    }
}

impl Module for Enhancer {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        self.gem.visit(f);
        self.pam.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        self.gem.visit_mut(f);
        self.pam.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, shape: [usize; 4]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f32>())
    }

    #[test]
    fn parameter_counts() {
        let e = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(e.pam.encoder.len(), 4);
        assert_eq!(e.pam.decoder.len(), 4);
        assert_eq!(e.pam.param_count(), 485_387);
        assert_eq!(e.param_count(), 485_387 + 33_699);
    }

    #[test]
    fn fresh_pam_predicts_zero_and_keeps_shape() {
        let mut pam = PamNetwork::new(&mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_image(1, [2, 3, 32, 32]));
        let f = pam
            .predict(&mut g, x, Mode::Train, &mut Binder::frozen())
            .unwrap();
        assert_eq!(g.value(f).shape(), &[2, 3, 32, 32]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpadded_odd_size_is_rejected() {
        let mut pam = PamNetwork::new(&mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([2, 3, 20, 32]));
        let err = pam
            .predict(&mut g, x, Mode::Train, &mut Binder::frozen())
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn compose_cases() {
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::full([1, 3, 2, 2], 0.5));
        let neg = g.constant(Tensor::full([1, 3, 2, 2], -0.2));
        let out = pam_compose(&mut g, half, neg).unwrap();
        assert!(g.value(out).data().iter().all(|v| (v - 0.3).abs() < 1e-12));

        let hi = g.param(Tensor::full([1, 3, 2, 2], 0.9));
        let plus = g.param(Tensor::full([1, 3, 2, 2], 0.5));
        let out = pam_compose(&mut g, hi, plus).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 1.0));
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(g.grad(hi).unwrap().iter().all(|&v| v == 0.0));

        let small = g.constant(Tensor::zeros([1, 3, 1, 1]));
        assert!(pam_compose(&mut g, half, small).is_err());
    }

    #[test]
    fn fresh_enhancer_is_identity_on_odd_sizes() {
        let mut e = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(9));
        let img = random_image(3, [2, 3, 21, 37]);
        let mut g = Graph::<f32>::new();
        let x = g.constant(img.clone());
        let nodes = e
            .enhance(&mut g, x, Mode::Train, Variant::Full, &mut Binder::frozen())
            .unwrap();
        assert_eq!(g.value(nodes.output).shape(), img.shape());
        assert!(g.value(nodes.output).max_abs_diff(&img) < 1e-6);
        let d = nodes.diagnostics(&g);
        assert_eq!(d.coeff_mean, [1.0; 3]);
        assert_eq!(d.f_local_rms, 0.0);
    }

    #[test]
    fn disabled_stages_bind_nothing() {
        let mut e = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(9));
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_image(3, [2, 3, 16, 16]));
        let mut binder = Binder::trainable();
        e.enhance(&mut g, x, Mode::Train, Variant::Gem, &mut binder)
            .unwrap();
        assert!(binder.bound().iter().all(|(n, _)| n.starts_with("gem.")));
        assert_eq!(binder.bound().len(), 12);
        let mut binder = Binder::trainable();
        e.enhance(&mut g, x, Mode::Train, Variant::None, &mut binder)
            .unwrap();
        assert!(binder.bound().is_empty());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_flags(v.gem_enabled(), v.pam_enabled()), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }
}
