//! The end-to-end restoration network: configuration, parameter layout,
//! initialization, serialization and forward passes.

pub mod config;
pub mod layout;
pub mod net;
pub mod weights;

pub use config::ModelConfig;
pub use layout::{Init, Layout, TensorSpec};
pub use net::{Forward, Net};
pub use weights::{read_container, ModelWeights, CONFIG_ENTRY};

/// Parameter count of `ModelConfig::default()`.
pub const DEFAULT_PARAM_COUNT: usize = 1_330_711;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent closed-form count from the layer list.
    fn closed_form(cfg: &ModelConfig) -> usize {
        let c = cfg.in_channels;
        let w = cfg.base_width;
        let d = cfg.state_dim;
        let t = cfg.window_frames;
        let conv_bn = |cin: usize, cout: usize, kv: usize| cout * cin * kv + 2 * cout;
        let deform_bn = |cin: usize, cout: usize| cout * cin * 27 + 81 * cin * 27 + 81 + 2 * cout;
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let kernels = [343, 125, 27, 27];
        let mut n = conv_bn(c, w, 343) + deform_bn(w, w);
        for i in 1..4 {
            n += conv_bn(widths[i - 1], widths[i], 27);
            n += conv_bn(widths[i], widths[i], kernels[i]) + deform_bn(widths[i], widths[i]);
        }
        for i in 0..3 {
            n += deform_bn(widths[i + 1], widths[i]) + conv_bn(2 * widths[i], widths[i], 27);
        }
        n += w * c * 27 + c;

        let ssm = |ch: usize| ch * ch + ch + 2 * d * ch + ch * d + ch;
        let res = |cin: usize, cout: usize| {
            conv_bn(cin, cout, 27)
                + conv_bn(cout, cout, 27)
                + 3 * conv_bn(cout, cout, 1)
                + ssm(cout)
                + if cin != cout { cin * cout } else { 0 }
        };
        let attn = |d: usize| 4 * d + 3 * d * d + (d * d + d) + (2 * d * d + 2 * d) + (2 * d * d + d);
        n += conv_bn(c, w, 27);
        n += res(w, w) + conv_bn(w, w, 27) + res(w, 2 * w) + conv_bn(2 * w, 2 * w, 27) + res(2 * w, 4 * w);
        n += 2 * conv_bn(4 * w, 4 * w, 27);
        n += deform_bn(4 * w, 2 * w) + conv_bn(4 * w, 2 * w, 27) + conv_bn(2 * w, 2 * w, 27);
        n += deform_bn(2 * w, w) + conv_bn(2 * w, w, 27) + conv_bn(w, w, 27);
        n += conv_bn(w, w, t);
        n += 2 * attn(w);
        n += w * c + c;
        n
    }

    fn random_input(cfg: &ModelConfig, h: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, cfg.in_channels, cfg.window_frames, h, h];
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_layer_walk() {
        for cfg in [ModelConfig::default(), ModelConfig::tiny()] {
            let w = ModelWeights::<f32>::init(&cfg).unwrap();
            assert_eq!(w.param_count(), closed_form(&cfg));
        }
        let w = ModelWeights::<f32>::init(&ModelConfig::default()).unwrap();
        assert_eq!(w.param_count(), DEFAULT_PARAM_COUNT);
    }

    #[test]
    fn init_is_deterministic_and_offsets_start_at_zero() {
        let cfg = ModelConfig::tiny();
        let a = ModelWeights::<f32>::init(&cfg).unwrap();
        let b = ModelWeights::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        let other = ModelWeights::<f32>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params, other.params);
        let offsets: Vec<_> = a.params.iter().filter(|(k, _)| k.contains(".offset.")).collect();
        assert!(!offsets.is_empty());
        assert!(offsets.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        for (k, t) in &a.params {
            if k.ends_with("out.weight") || k.ends_with("mlp_out.weight") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{k}");
            }
        }
    }

    #[test]
    fn shapes_through_both_modules() {
        let cfg = ModelConfig {
            in_channels: 3,
            ..ModelConfig::tiny()
        };
        let w = ModelWeights::<f64>::init(&cfg).unwrap();
        let x = random_input(&cfg, 16, 0);
        assert_eq!(w.register(&x, Mode::Train).unwrap().shape(), x.shape());
        let out = w.forward(&x, Mode::Infer).unwrap().output;
        assert_eq!(out.shape(), &[1, 3, 16, 16]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_heads_pass_the_centre_frame_through() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::init(&cfg).unwrap();
        for name in ["sdat.head.weight", "edp.head.weight"] {
            w.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = random_input(&cfg, 8, 1);
        let registered = w.register(&x, Mode::Train).unwrap();
        assert_eq!(registered.data(), x.data());
        let out = w.forward(&x, Mode::Train).unwrap().output;
        assert_eq!(out.data(), &x.data()[64..128]);
    }

    #[test]
    fn forward_is_deterministic_and_train_mode_reports_stats() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::<f64>::init(&cfg).unwrap();
        let x = random_input(&cfg, 8, 2);
        let a = w.forward(&x, Mode::Train).unwrap();
        let b = w.forward(&x, Mode::Train).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.stats.len() * 2, w.buffers.len());
        assert!(w.forward(&x, Mode::Infer).unwrap().stats.is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let mut bytes = Vec::new();
        w.save(&mut bytes).unwrap();
        let back = ModelWeights::<f32>::load(&mut bytes.as_slice(), Some(&cfg)).unwrap();
        assert_eq!(back, w);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(again, bytes);
        let names: Vec<String> = read_container(&mut bytes.as_slice())
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names[0], CONFIG_ENTRY);
    }

    #[test]
    fn load_names_the_bad_parameter() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f32>::init(&cfg).unwrap();
        w.params.insert("edp.head.bias".into(), Tensor::zeros(&[2]).unwrap());
        let mut bytes = Vec::new();
        w.save(&mut bytes).unwrap();
        match ModelWeights::<f32>::load(&mut bytes.as_slice(), None) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "edp.head.bias"),
            other => panic!("{other:?}"),
        }
        let mut w = ModelWeights::<f32>::init(&cfg).unwrap();
        w.params.insert("bogus".into(), Tensor::zeros(&[1]).unwrap());
        let mut bytes = Vec::new();
        w.save(&mut bytes).unwrap();
        assert!(matches!(
            ModelWeights::<f32>::load(&mut bytes.as_slice(), None),
            Err(Error::UnknownParam(n)) if n == "bogus"
        ));
        bytes[0] = b'X';
        assert!(matches!(
            ModelWeights::<f32>::load(&mut bytes.as_slice(), None),
            Err(Error::BadMagic { .. })
        ));
    }
}
