//! The architecture walk: every learnable tensor and buffer with its shape
//! and initialization rule.

use crate::model::config::{ModelConfig, SDAT_DEPTH, SDAT_KERNELS};
use crate::nn::deform::OFFSET_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain·sqrt(1/fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
    /// `ln(k+1)` along the last axis, so that `A = −(k+1)`.
    StateLog,
    /// Inverse softplus of a log-uniform draw in `[0.001, 0.1]`.
    StepBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub params: Vec<TensorSpec>,
    pub buffers: Vec<TensorSpec>,
}

const HE: f64 = std::f64::consts::SQRT_2;

impl Layout {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.params.push(TensorSpec { name, shape, init });
    }

    fn kernel(&mut self, name: String, cout: usize, cin: usize, k: [usize; 3], init: Init) {
        self.param(name, vec![cout, cin, k[0], k[1], k[2]], init);
    }

    fn he(cin: usize, k: [usize; 3]) -> Init {
        Init::Normal {
            fan_in: cin * k[0] * k[1] * k[2],
            gain: HE,
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.param(format!("{prefix}.gamma"), vec![c], Init::Ones);
        self.param(format!("{prefix}.beta"), vec![c], Init::Zeros);
        self.buffers.push(TensorSpec {
            name: format!("{prefix}.running_mean"),
            shape: vec![c],
            init: Init::Zeros,
        });
        self.buffers.push(TensorSpec {
            name: format!("{prefix}.running_var"),
            shape: vec![c],
            init: Init::Ones,
        });
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: [usize; 3]) {
        self.kernel(format!("{prefix}.conv.weight"), cout, cin, k, Self::he(cin, k));
        self.norm(&format!("{prefix}.bn"), cout);
    }

    fn deform_bn(&mut self, prefix: &str, cin: usize, cout: usize) {
        let k = [3; 3];
        self.kernel(format!("{prefix}.deform.weight"), cout, cin, k, Self::he(cin, k));
        self.kernel(format!("{prefix}.deform.offset.weight"), OFFSET_CHANNELS, cin, k, Init::Zeros);
        self.param(format!("{prefix}.deform.offset.bias"), vec![OFFSET_CHANNELS], Init::Zeros);
        self.norm(&format!("{prefix}.bn"), cout);
    }

    fn conv_bias(&mut self, prefix: &str, cin: usize, cout: usize, k: [usize; 3], init: Init) {
        self.kernel(format!("{prefix}.weight"), cout, cin, k, init);
        self.param(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn ssm(&mut self, prefix: &str, c: usize, d: usize) {
        let one = [1; 3];
        self.kernel(
            format!("{prefix}.delta.weight"),
            c,
            c,
            one,
            Init::Normal { fan_in: c, gain: 0.1 },
        );
        self.param(format!("{prefix}.delta.bias"), vec![c], Init::StepBias);
        self.kernel(format!("{prefix}.b.weight"), d, c, one, Init::Normal { fan_in: c, gain: 1.0 });
        self.kernel(format!("{prefix}.c.weight"), d, c, one, Init::Normal { fan_in: c, gain: 1.0 });
        self.param(format!("{prefix}.a_log"), vec![c, d], Init::StateLog);
        self.param(format!("{prefix}.skip"), vec![c], Init::Ones);
    }

    fn res_mamba(&mut self, prefix: &str, cin: usize, cout: usize, d: usize) {
        self.conv_bn(&format!("{prefix}.conv1"), cin, cout, [3; 3]);
        self.conv_bn(&format!("{prefix}.conv2"), cout, cout, [3; 3]);
        for branch in ["inner", "outer", "residual"] {
            self.conv_bn(&format!("{prefix}.mamba.{branch}"), cout, cout, [1; 3]);
        }
        self.ssm(&format!("{prefix}.mamba.ssm"), cout, d);
        if cin != cout {
            self.kernel(format!("{prefix}.skip.weight"), cout, cin, [1; 3], Self::he(cin, [1; 3]));
        }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv_bn(&format!("{prefix}.conv1"), cin, cout, [3; 3]);
        self.conv_bn(&format!("{prefix}.conv2"), cout, cout, [3; 3]);
    }

    fn attn(&mut self, prefix: &str, d: usize) {
        let one = [1; 3];
        let lecun = Init::Normal { fan_in: d, gain: 1.0 };
        self.param(format!("{prefix}.norm1.gamma"), vec![d], Init::Ones);
        self.param(format!("{prefix}.norm1.beta"), vec![d], Init::Zeros);
        for proj in ["query", "key", "value"] {
            self.kernel(format!("{prefix}.{proj}.weight"), d, d, one, lecun);
        }
        self.conv_bias(&format!("{prefix}.out"), d, d, one, Init::Zeros);
        self.param(format!("{prefix}.norm2.gamma"), vec![d], Init::Ones);
        self.param(format!("{prefix}.norm2.beta"), vec![d], Init::Zeros);
        self.conv_bias(&format!("{prefix}.mlp_in"), d, 2 * d, one, Self::he(d, one));
        self.conv_bias(&format!("{prefix}.mlp_out"), 2 * d, d, one, Init::Zeros);
    }

    /// Full parameter and buffer list for `cfg`, sorted by name.
    pub fn of(cfg: &ModelConfig) -> Self {
        let mut l = Layout::default();
        let c = cfg.in_channels;
        let w = |i: usize| cfg.sdat_width(i);
        for i in 0..SDAT_DEPTH {
            let lvl = i + 1;
            let cin = if i == 0 { c } else { w(i) };
            if i > 0 {
                l.conv_bn(&format!("sdat.down{lvl}"), w(i - 1), w(i), [3; 3]);
            }
            let k = SDAT_KERNELS[i];
            l.conv_bn(&format!("sdat.enc{lvl}.pre"), cin, w(i), [k; 3]);
            l.deform_bn(&format!("sdat.enc{lvl}.deform"), w(i), w(i));
        }
        for i in (0..SDAT_DEPTH - 1).rev() {
            let lvl = i + 1;
            l.deform_bn(&format!("sdat.dec{lvl}.up"), w(i + 1), w(i));
            l.conv_bn(&format!("sdat.dec{lvl}.fuse"), 2 * w(i), w(i), [3; 3]);
        }
        l.conv_bias("sdat.head", w(0), c, [3; 3], Layout::he(w(0), [3; 3]));

        let e = |i: usize| cfg.edp_width(i);
        let d = cfg.state_dim;
        l.conv_bn("edp.entry", c, e(0), [3; 3]);
        l.res_mamba("edp.enc1", e(0), e(0), d);
        l.conv_bn("edp.down2", e(0), e(0), [3; 3]);
        l.res_mamba("edp.enc2", e(0), e(1), d);
        l.conv_bn("edp.down3", e(1), e(1), [3; 3]);
        l.res_mamba("edp.enc3", e(1), e(2), d);
        l.double_conv("edp.bottom", e(2), e(2));
        for i in (0..2).rev() {
            let lvl = i + 1;
            l.deform_bn(&format!("edp.dec{lvl}.up"), e(i + 1), e(i));
            l.double_conv(&format!("edp.dec{lvl}"), 2 * e(i), e(i));
        }
        l.conv_bn("edp.exit", e(0), e(0), [cfg.window_frames, 1, 1]);
        for a in 1..=2 {
            l.attn(&format!("edp.attn{a}"), e(0));
        }
        l.conv_bias("edp.head", e(0), c, [1; 3], Layout::he(e(0), [1; 3]));

        l.params.sort_by(|a, b| a.name.cmp(&b.name));
        l.buffers.sort_by(|a, b| a.name.cmp(&b.name));
        l
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}
