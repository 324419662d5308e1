//! The UV texture generator and its discriminators.
//!
//! Architecture (channel widths are configuration, not contract):
//! two stride-2 encoder convolutions per role (separate parameters for the
//! source and reference encoders), a makeup adjustment stage that gates the
//! reference features against their mirror using a visibility prior, a
//! spatial-attention transfer stage that pulls reference makeup into source
//! positions, and a decoder of two stride-2 transposed convolutions plus a
//! sigmoid projection. Discriminators are three-layer stride-2 patch
//! classifiers with sigmoid heads.
//!
//! All forward functions build autodiff graphs over a [`Binding`], so the
//! same code path serves inference, training and gradient checks.

use crate::autodiff::{
    add_bias, concat_channels, conv2d, conv2d_transpose, global_avg_pool, matmul, matmul_nt,
    mul_channel_mask, softmax_rows, Var,
};
use crate::error::{Error, Result};
use crate::face3d::{UVTexture, VisibilityMap};
use ndarray::{Array2, Array3, ArrayD, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;

const LRELU_SLOPE: f64 = 0.2;

/// Structural configuration of the generator/discriminator stacks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub uv_resolution: usize,
    pub enc_mid: usize,
    pub enc_out: usize,
    pub att_channels: usize,
    pub mam_hidden: usize,
    pub dec_mid: usize,
    pub dec_low: usize,
    pub disc_mid: usize,
    pub disc_high: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            uv_resolution: 64,
            enc_mid: 32,
            enc_out: 64,
            att_channels: 32,
            mam_hidden: 32,
            dec_mid: 64,
            dec_low: 32,
            disc_mid: 32,
            disc_high: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn with_resolution(res: usize) -> Self {
        GeneratorConfig {
            uv_resolution: res,
            ..Default::default()
        }
    }

    /// Spatial side of the bottleneck feature maps (two stride-2 layers).
    pub fn feature_side(&self) -> usize {
        self.uv_resolution / 4
    }
}

/// Named learnable tensors. Deterministic iteration order (BTreeMap) keeps
/// training traces reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn merge(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// Names sharing a dotted prefix, e.g. `gen.` or `d_img.`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.map.keys().filter(move |n| n.starts_with(prefix))
    }
}

/// Per-graph binding of parameters to leaf nodes. Each name binds to one
/// node per graph so gradient accumulation across reuse is correct.
pub struct Binding<'p> {
    params: &'p Params,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'p> Binding<'p> {
    pub fn new(params: &'p Params) -> Self {
        Binding {
            params,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        let mut vars = self.vars.borrow_mut();
        vars.entry(name.to_string())
            .or_insert_with(|| {
                let value = self
                    .params
                    .get(name)
                    .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
                    .clone();
                Var::param(value)
            })
            .clone()
    }

    /// Gradients accumulated by the last backward pass, keyed by name.
    pub fn grads(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g)))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

fn conv_init(rng: &mut ChaCha8Rng, kh: usize, kw: usize, ci: usize, co: usize) -> ArrayD<f64> {
    let bound = (2.0 / (kh * kw * ci) as f64).sqrt();
    uniform(rng, &[kh, kw, ci, co], bound)
}

/// Fresh generator parameters (both encoders, MAM, MTM, decoder).
pub fn init_generator_params(config: &GeneratorConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let c = config;
    for role in ["enc_src", "enc_ref"] {
        p.insert(
            format!("gen.{role}.c1.w"),
            conv_init(&mut rng, 3, 3, 3, c.enc_mid),
        );
        p.insert(format!("gen.{role}.c1.b"), ArrayD::zeros(IxDyn(&[c.enc_mid])));
        p.insert(
            format!("gen.{role}.c2.w"),
            conv_init(&mut rng, 3, 3, c.enc_mid, c.enc_out),
        );
        p.insert(format!("gen.{role}.c2.b"), ArrayD::zeros(IxDyn(&[c.enc_out])));
    }
    p.insert(
        "gen.mam.c1.w",
        conv_init(&mut rng, 3, 3, c.enc_out + 1, c.mam_hidden),
    );
    p.insert("gen.mam.c1.b", ArrayD::zeros(IxDyn(&[c.mam_hidden])));
    p.insert("gen.mam.c2.w", conv_init(&mut rng, 3, 3, c.mam_hidden, 1));
    p.insert("gen.mam.c2.b", ArrayD::zeros(IxDyn(&[1])));
    p.insert(
        "gen.mtm.p.w",
        conv_init(&mut rng, 1, 1, c.enc_out, c.att_channels),
    );
    p.insert("gen.mtm.p.b", ArrayD::zeros(IxDyn(&[c.att_channels])));
    p.insert(
        "gen.mtm.q.w",
        conv_init(&mut rng, 1, 1, c.enc_out, c.att_channels),
    );
    p.insert("gen.mtm.q.b", ArrayD::zeros(IxDyn(&[c.att_channels])));
    p.insert(
        "gen.dec.t1.w",
        conv_init(&mut rng, 4, 4, 2 * c.enc_out, c.dec_mid),
    );
    p.insert("gen.dec.t1.b", ArrayD::zeros(IxDyn(&[c.dec_mid])));
    p.insert(
        "gen.dec.t2.w",
        conv_init(&mut rng, 4, 4, c.dec_mid, c.dec_low),
    );
    p.insert("gen.dec.t2.b", ArrayD::zeros(IxDyn(&[c.dec_low])));
    p.insert("gen.dec.out.w", conv_init(&mut rng, 3, 3, c.dec_low, 3));
    p.insert("gen.dec.out.b", ArrayD::zeros(IxDyn(&[3])));
    p
}

/// Fresh parameters for one patch discriminator under `prefix`
/// (`d_tex_s`, `d_tex_r` or `d_img`).
pub fn init_discriminator_params(config: &GeneratorConfig, seed: u64, prefix: &str) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let c = config;
    p.insert(
        format!("{prefix}.c1.w"),
        conv_init(&mut rng, 3, 3, 3, c.disc_mid),
    );
    p.insert(format!("{prefix}.c1.b"), ArrayD::zeros(IxDyn(&[c.disc_mid])));
    p.insert(
        format!("{prefix}.c2.w"),
        conv_init(&mut rng, 3, 3, c.disc_mid, c.disc_high),
    );
    p.insert(format!("{prefix}.c2.b"), ArrayD::zeros(IxDyn(&[c.disc_high])));
    p.insert(
        format!("{prefix}.c3.w"),
        conv_init(&mut rng, 3, 3, c.disc_high, 1),
    );
    p.insert(format!("{prefix}.c3.b"), ArrayD::zeros(IxDyn(&[1])));
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Source,
    Reference,
}

/// Two stride-2 convolutions distilling texture features; the role selects
/// the (non-shared) parameter set.
pub fn encode(texture: &Var, role: EncoderRole, binding: &Binding) -> Var {
    let prefix = match role {
        EncoderRole::Source => "gen.enc_src",
        EncoderRole::Reference => "gen.enc_ref",
    };
    let h1 = conv2d(
        texture,
        &binding.var(&format!("{prefix}.c1.w")),
        &binding.var(&format!("{prefix}.c1.b")),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    conv2d(
        &h1,
        &binding.var(&format!("{prefix}.c2.w")),
        &binding.var(&format!("{prefix}.c2.b")),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE)
}

/// Area-average downsample of a `[n·f, n·f]` map to `[n, n]`.
pub fn area_downsample(values: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    assert!(h % factor == 0 && w % factor == 0, "factor must divide dims");
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += values[(r * factor + dr, c * factor + dc)];
            }
        }
        acc * scale
    })
}

/// Gated fusion of reference features with their mirror:
/// `mask ⊗ f_ref ⊕ (1 − mask) ⊗ flip(f_ref)` — a convex combination per
/// texel and channel.
pub fn fuse_with_mask(f_ref: &Var, mask: &Var) -> Var {
    let direct = mul_channel_mask(f_ref, mask);
    let inverse = mask.neg().add_scalar(1.0);
    let mirrored = mul_channel_mask(&f_ref.flip_cols(), &inverse);
    direct.add(&mirrored)
}

/// Computes the makeup-quality attention mask from reference features
/// concatenated with the (downsampled) visibility map, then repairs the
/// features by mask-gated fusion with their mirror. Returns
/// `(repaired features, mask)`.
pub fn makeup_adjust(
    f_ref: &Var,
    visibility: &VisibilityMap,
    binding: &Binding,
) -> Result<(Var, Var)> {
    let shape = f_ref.shape();
    let (h, w) = (shape[0], shape[1]);
    let res = visibility.resolution();
    if res % h != 0 {
        return Err(Error::contract(format!(
            "visibility resolution {res} incompatible with feature side {h}"
        )));
    }
    let vis_small = area_downsample(&visibility.values, res / h);
    let vis_var = Var::constant(
        vis_small
            .into_shape_with_order((h, w, 1))
            .unwrap()
            .into_dyn(),
    );
    let stacked = concat_channels(f_ref, &vis_var);
    let h1 = conv2d(
        &stacked,
        &binding.var("gen.mam.c1.w"),
        &binding.var("gen.mam.c1.b"),
        1,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    let mask = conv2d(
        &h1,
        &binding.var("gen.mam.c2.w"),
        &binding.var("gen.mam.c2.b"),
        1,
        1,
    )
    .sigmoid();
    Ok((fuse_with_mask(f_ref, &mask), mask))
}

/// Row-stochastic spatial attention computed from the source features:
/// `softmax(F_p · F_qᵀ)` over flattened positions.
pub fn spatial_attention(f_src: &Var, binding: &Binding) -> Var {
    let shape = f_src.shape();
    let (h, w) = (shape[0], shape[1]);
    let p = conv2d(
        f_src,
        &binding.var("gen.mtm.p.w"),
        &binding.var("gen.mtm.p.b"),
        1,
        0,
    );
    let q = conv2d(
        f_src,
        &binding.var("gen.mtm.q.w"),
        &binding.var("gen.mtm.q.b"),
        1,
        0,
    );
    let ca = p.shape()[2];
    let p_flat = p.reshape(&[h * w, ca]);
    let q_flat = q.reshape(&[h * w, ca]);
    softmax_rows(&matmul_nt(&p_flat, &q_flat))
}

/// Applies a given attention matrix to the repaired reference features and
/// concatenates the result onto the source features.
pub fn transfer_with_attention(f_src: &Var, f_hat: &Var, attention: &Var) -> Var {
    let shape = f_src.shape();
    let (h, w, c) = (shape[0], shape[1], f_hat.shape()[2]);
    let flat = f_hat.reshape(&[h * w, c]);
    let moved = matmul(attention, &flat).reshape(&[h, w, c]);
    concat_channels(f_src, &moved)
}

/// Full makeup transfer stage: attention from the source features routes
/// repaired reference features into source positions.
pub fn makeup_transfer(f_src: &Var, f_hat: &Var, binding: &Binding) -> Var {
    let attention = spatial_attention(f_src, binding);
    transfer_with_attention(f_src, f_hat, &attention)
}

/// Two stride-2 transposed convolutions mirroring the encoder, a 3x3
/// projection and a sigmoid; output texels outside `coverage` are zeroed.
pub fn decode(combined: &Var, coverage: &Array2<bool>, binding: &Binding) -> Var {
    let up1 = conv2d_transpose(
        combined,
        &binding.var("gen.dec.t1.w"),
        &binding.var("gen.dec.t1.b"),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    let up2 = conv2d_transpose(
        &up1,
        &binding.var("gen.dec.t2.w"),
        &binding.var("gen.dec.t2.b"),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    let rgb = conv2d(
        &up2,
        &binding.var("gen.dec.out.w"),
        &binding.var("gen.dec.out.b"),
        1,
        1,
    )
    .sigmoid();
    let (h, w) = coverage.dim();
    let mask = Array3::from_shape_fn((h, w, 1), |(r, c, _)| f64::from(coverage[(r, c)]));
    mul_channel_mask(&rgb, &Var::constant(mask.into_dyn()))
}

/// End-to-end transfer graph `T_t = G(T_src, T_ref)`. Returns the
/// transferred texture node (coverage taken from the source texture) and
/// the makeup-adjustment mask node. Differentiable with respect to the
/// bound parameters and both texture nodes.
pub fn generate_var(
    t_src: &Var,
    t_ref: &Var,
    src_coverage: &Array2<bool>,
    vis_ref: &VisibilityMap,
    binding: &Binding,
) -> Result<(Var, Var)> {
    let f_src = encode(t_src, EncoderRole::Source, binding);
    let f_ref = encode(t_ref, EncoderRole::Reference, binding);
    let (f_hat, mask) = makeup_adjust(&f_ref, vis_ref, binding)?;
    let combined = makeup_transfer(&f_src, &f_hat, binding);
    let t_t = decode(&combined, src_coverage, binding);
    Ok((t_t, mask))
}

/// Inference wrapper over [`generate_var`] for concrete textures.
pub fn generate(
    params: &Params,
    t_src: &UVTexture,
    t_ref: &UVTexture,
    vis_ref: &VisibilityMap,
) -> Result<(UVTexture, Array2<f64>)> {
    let binding = Binding::new(params);
    let src = Var::constant(t_src.texels.clone().into_dyn());
    let rf = Var::constant(t_ref.texels.clone().into_dyn());
    let (t_t, mask) = generate_var(&src, &rf, &t_src.coverage, vis_ref, &binding)?;
    let res = t_src.resolution();
    let texels = t_t
        .value()
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("texture rank");
    let mask_side = mask.shape()[0];
    let mask2d = mask
        .value()
        .clone()
        .into_shape_with_order((mask_side, mask_side))
        .unwrap();
    let _ = res;
    Ok((UVTexture::new(texels, t_src.coverage.clone())?, mask2d))
}

/// Patch discriminator with a sigmoid head: `[h,w,3]` → probability map.
pub fn discriminate(x: &Var, prefix: &str, binding: &Binding) -> Var {
    let h1 = conv2d(
        x,
        &binding.var(&format!("{prefix}.c1.w")),
        &binding.var(&format!("{prefix}.c1.b")),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    let h2 = conv2d(
        &h1,
        &binding.var(&format!("{prefix}.c2.w")),
        &binding.var(&format!("{prefix}.c2.b")),
        2,
        1,
    )
    .leaky_relu(LRELU_SLOPE);
    conv2d(
        &h2,
        &binding.var(&format!("{prefix}.c3.w")),
        &binding.var(&format!("{prefix}.c3.b")),
        2,
        1,
    )
    .sigmoid()
}

/// Mean patch probability, occasionally handy for diagnostics.
pub fn discriminator_score(x: &Var, prefix: &str, binding: &Binding) -> f64 {
    global_avg_pool(&discriminate(x, prefix, binding)).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2 as NdArray2;

    fn full_coverage(res: usize) -> NdArray2<bool> {
        NdArray2::from_elem((res, res), true)
    }

    fn vis_ones(res: usize) -> VisibilityMap {
        VisibilityMap {
            values: NdArray2::from_elem((res, res), 1.0),
        }
    }

    fn random_texture(seed: u64, res: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((res, res, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encode_zero_texture_with_zero_bias_is_zero() {
        let config = GeneratorConfig::with_resolution(16);
        let params = init_generator_params(&config, 1);
        let binding = Binding::new(&params);
        let zero = Var::constant(ArrayD::zeros(IxDyn(&[16, 16, 3])));
        let out = encode(&zero, EncoderRole::Source, &binding);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_output_side_is_quarter_resolution() {
        let config = GeneratorConfig::with_resolution(64);
        let params = init_generator_params(&config, 2);
        let binding = Binding::new(&params);
        let tex = Var::constant(random_texture(3, 64).into_dyn());
        let out = encode(&tex, EncoderRole::Source, &binding);
        assert_eq!(out.shape(), &[16, 16, config.enc_out]);
        assert_eq!(config.feature_side(), 16);
    }

    #[test]
    fn encode_is_deterministic_bytewise() {
        let config = GeneratorConfig::with_resolution(32);
        let params = init_generator_params(&config, 9);
        let tex = random_texture(4, 32);
        let run = || {
            let binding = Binding::new(&params);
            let out = encode(
                &Var::constant(tex.clone().into_dyn()),
                EncoderRole::Reference,
                &binding,
            );
            out.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_roles_have_disjoint_parameters() {
        let config = GeneratorConfig::with_resolution(16);
        let mut params = init_generator_params(&config, 5);
        let tex = random_texture(6, 16);
        let out_before = {
            let binding = Binding::new(&params);
            encode(
                &Var::constant(tex.clone().into_dyn()),
                EncoderRole::Source,
                &binding,
            )
            .value()
            .clone()
        };
        // perturb every reference-encoder tensor
        for (name, value) in params.iter_mut() {
            if name.starts_with("gen.enc_ref") {
                value.mapv_inplace(|v| v + 0.37);
            }
        }
        let out_after = {
            let binding = Binding::new(&params);
            encode(
                &Var::constant(tex.clone().into_dyn()),
                EncoderRole::Source,
                &binding,
            )
            .value()
            .clone()
        };
        assert_eq!(out_before, out_after);
    }

    #[test]
    fn fuse_with_forced_masks_reproduces_identity_cases() {
        let f = Var::constant(random_texture(7, 8).into_dyn());
        let ones = Var::constant(ArrayD::from_elem(IxDyn(&[8, 8, 1]), 1.0));
        let zeros = Var::constant(ArrayD::zeros(IxDyn(&[8, 8, 1])));
        let keep = fuse_with_mask(&f, &ones);
        assert_eq!(keep.value(), f.value());
        let mirrored = fuse_with_mask(&f, &zeros);
        assert_eq!(mirrored.value(), &crate::autodiff::Var::constant(f.value().clone()).flip_cols().value().clone());
        // composition: flipping the input with mask 0 equals mask 1 on the original
        let f_flipped = f.flip_cols();
        let back = fuse_with_mask(&f_flipped, &zeros);
        assert_eq!(back.value(), f.value());
    }

    #[test]
    fn fuse_output_stays_in_convex_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let f = Var::constant(random_texture(100 + trial, 6).into_dyn());
            let mask = Var::constant(ArrayD::from_shape_fn(IxDyn(&[6, 6, 1]), |_| {
                rng.gen_range(0.0..1.0)
            }));
            let fused = fuse_with_mask(&f, &mask);
            let flipped = crate::face3d::flip_uv(
                &f.value()
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap(),
            );
            let fv = f.value();
            let fu = fused.value();
            for r in 0..6 {
                for c in 0..6 {
                    for ch in 0..3 {
                        let a = fv[[r, c, ch]];
                        let b = flipped[(r, c, ch)];
                        let v = fu[[r, c, ch]];
                        assert!(
                            v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12,
                            "({r},{c},{ch}): {v} outside [{}, {}]",
                            a.min(b),
                            a.max(b)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn makeup_adjust_mask_is_sigmoid_bounded() {
        let config = GeneratorConfig::with_resolution(32);
        let params = init_generator_params(&config, 13);
        let binding = Binding::new(&params);
        let f_ref = Var::constant(
            ArrayD::from_shape_fn(IxDyn(&[8, 8, config.enc_out]), |_| 0.3),
        );
        let (f_hat, mask) = makeup_adjust(&f_ref, &vis_ones(32), &binding).unwrap();
        assert_eq!(mask.shape(), &[8, 8, 1]);
        assert!(mask.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(f_hat.shape(), f_ref.shape());
    }

    #[test]
    fn identity_attention_reproduces_repaired_features() {
        let hw = 16;
        let f_src = Var::constant(random_texture(21, 4).into_dyn());
        let f_hat = Var::constant(random_texture(22, 4).into_dyn());
        let eye = Var::constant(ArrayD::from_shape_fn(IxDyn(&[hw, hw]), |ix| {
            f64::from(ix[0] == ix[1])
        }));
        let out = transfer_with_attention(&f_src, &f_hat, &eye);
        // channels [3..6) hold the moved reference features
        let ov = out.value();
        let hv = f_hat.value();
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..3 {
                    assert_eq!(ov[[r, c, 3 + ch]], hv[[r, c, ch]]);
                    assert_eq!(ov[[r, c, ch]], f_src.value()[[r, c, ch]]);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_fix_constant_references() {
        let config = GeneratorConfig::with_resolution(32);
        let params = init_generator_params(&config, 31);
        for trial in 0..5 {
            let binding = Binding::new(&params);
            let f_src = Var::constant(
                ArrayD::from_shape_fn(IxDyn(&[8, 8, config.enc_out]), |_| {
                    (trial as f64 * 0.11).sin() * 0.5 + 0.5
                }),
            );
            let f_src = f_src.add(&Var::constant(random_texture(trial, 8).into_dyn().into_shape_with_order(IxDyn(&[8,8,3])).unwrap()).reshape(&[8,8,3]).mul(&Var::constant(ArrayD::zeros(IxDyn(&[8,8,3])))).add_scalar(0.0).reshape(&[8,8,3]).mul_scalar_var(&Var::scalar(0.0)).reshape(&[8,8,3]).add_scalar(0.0).reshape(&[8,8,3]).mul_scalar_var(&Var::scalar(0.0)));
            let _ = f_src;
            let f_src = Var::constant(ArrayD::from_shape_fn(
                IxDyn(&[8, 8, config.enc_out]),
                |_| rand::Rng::gen_range(&mut ChaCha8Rng::seed_from_u64(trial), -1.0..1.0),
            ));
            let att = spatial_attention(&f_src, &binding);
            let a = att
                .value()
                .clone()
                .into_dimensionality::<Ix2>()
                .unwrap();
            for row in a.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
            // stochastic fixed point: constant reference features pass through
            let c_hat = Var::constant(ArrayD::from_elem(IxDyn(&[8, 8, 4]), 0.42));
            let moved = transfer_with_attention(&f_src, &c_hat, &att);
            for v in moved
                .value()
                .view()
                .into_shape_with_order((64, config.enc_out + 4))
                .unwrap()
                .slice(ndarray::s![.., config.enc_out..])
                .iter()
            {
                assert!((v - 0.42).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_shape_range_and_determinism() {
        let config = GeneratorConfig::with_resolution(32);
        let params = init_generator_params(&config, 41);
        let combined = random_texture(42, 8); // reuse as feature payload
        let mut channels = ArrayD::zeros(IxDyn(&[8, 8, 2 * config.enc_out]));
        for ((r, c, ch), v) in combined.indexed_iter() {
            channels[[r, c, ch]] = *v;
            channels[[r, c, ch + 3]] = v * 0.5;
        }
        let run = || {
            let binding = Binding::new(&params);
            decode(&Var::constant(channels.clone()), &full_coverage(32), &binding)
        };
        let out = run();
        assert_eq!(out.shape(), &[32, 32, 3]);
        assert!(out.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bits = |v: &Var| v.value().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&run()));
    }

    #[test]
    fn generate_has_gradients_in_every_parameter_group() {
        let config = GeneratorConfig::with_resolution(16);
        let params = init_generator_params(&config, 51);
        let binding = Binding::new(&params);
        let t_src = Var::param(random_texture(52, 16).into_dyn());
        let t_ref = Var::param(random_texture(53, 16).into_dyn());
        let (t_t, _) =
            generate_var(&t_src, &t_ref, &full_coverage(16), &vis_ones(16), &binding).unwrap();
        assert!(t_t.value().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        // probe-weighted scalar so attention/mask paths stay active
        let probe = Var::constant(ArrayD::from_shape_fn(IxDyn(&[16, 16, 3]), |ix| {
            ((ix[0] * 7 + ix[1] * 3 + ix[2]) % 5) as f64 * 0.21 - 0.4
        }));
        t_t.mul(&probe).sum_all().backward();
        let grads = binding.grads();
        for group in [
            "gen.enc_src.c1.w",
            "gen.enc_src.c2.w",
            "gen.enc_ref.c1.w",
            "gen.enc_ref.c2.w",
            "gen.mam.c1.w",
            "gen.mam.c2.w",
            "gen.mtm.p.w",
            "gen.mtm.q.w",
            "gen.dec.t1.w",
            "gen.dec.t2.w",
            "gen.dec.out.w",
        ] {
            let g = grads.get(group).unwrap_or_else(|| panic!("no grad for {group}"));
            assert!(
                g.iter().any(|&v| v != 0.0),
                "dead gradient path through {group}"
            );
        }
        assert!(t_src.grad().unwrap().iter().any(|&v| v != 0.0));
        assert!(t_ref.grad().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn generate_end_to_end_gradients_match_finite_differences() {
        let config = GeneratorConfig::with_resolution(16);
        let mut params = init_generator_params(&config, 61);
        let t_src = random_texture(62, 16);
        let t_ref = random_texture(63, 16);
        let vis = vis_ones(16);
        let coverage = full_coverage(16);
        let probe = ArrayD::from_shape_fn(IxDyn(&[16, 16, 3]), |ix| {
            ((ix[0] * 11 + ix[1] * 5 + ix[2] * 3) % 7) as f64 * 0.13 - 0.35
        });

        let loss_with = |params: &Params| -> f64 {
            let binding = Binding::new(params);
            let (t_t, _) = generate_var(
                &Var::constant(t_src.clone().into_dyn()),
                &Var::constant(t_ref.clone().into_dyn()),
                &coverage,
                &vis,
                &binding,
            )
            .unwrap();
            t_t.mul(&Var::constant(probe.clone())).sum_all().scalar_value()
        };

        let grads = {
            let binding = Binding::new(&params);
            let (t_t, _) = generate_var(
                &Var::constant(t_src.clone().into_dyn()),
                &Var::constant(t_ref.clone().into_dyn()),
                &coverage,
                &vis,
                &binding,
            )
            .unwrap();
            t_t.mul(&Var::constant(probe.clone())).sum_all().backward();
            binding.grads()
        };

        let names: Vec<String> = params.names().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 120 {
            let name = &names[rng.gen_range(0..names.len())];
            let len = params.get(name).unwrap().len();
            let flat = rng.gen_range(0..len);
            let orig = params.get(name).unwrap().as_slice().unwrap()[flat];
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig + h;
            let fp = loss_with(&params);
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig - h;
            let fm = loss_with(&params);
            params.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads
                .get(name)
                .map(|g| g.as_slice().unwrap()[flat])
                .unwrap_or(0.0);
            let denom = numeric.abs().max(analytic.abs());
            if denom < 1e-10 {
                continue; // skip parameters the probe never reaches
            }
            assert!(
                ((numeric - analytic) / denom).abs() < 1e-4,
                "{name}[{flat}]: fd {numeric} vs autodiff {analytic}"
            );
            checked += 1;
        }
    }

    #[test]
    fn discriminator_outputs_probability_patches() {
        let config = GeneratorConfig::with_resolution(32);
        let params = init_discriminator_params(&config, 71, "d_tex_s");
        let binding = Binding::new(&params);
        let x = Var::constant(random_texture(72, 32).into_dyn());
        let d = discriminate(&x, "d_tex_s", &binding);
        assert_eq!(d.shape(), &[4, 4, 1]);
        assert!(d.value().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
