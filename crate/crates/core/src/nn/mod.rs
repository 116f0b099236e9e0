//! Network primitives: convolutions, deformable sampling, normalization,
//! windowed attention and the selective state-space layer.

pub mod attention;
pub mod conv;
pub mod deform;
pub mod layers;
pub mod norm;
pub mod ssm;

pub use attention::{attn_block, window_attention, AttnBlockParams};
pub use conv::{conv3d, upsample_nearest, Conv3dParams, ConvGeometry};
pub use deform::{deform_conv3d, deform_sample_conv, upconv3d, DeformConv3dParams};
pub use layers::{ConvBn, DeformBn, NormCtx};
pub use norm::{batchnorm3d, channel_norm, Mode, NormParams, RunningStats};
pub use ssm::{
    discretize, mamba_in_conv, multidirectional_ssm, res_mamba_block, selective_params, selective_scan, ssm_scan,
    MambaBlockParams, ResMambaParams, ScanOrder, SsmParams,
};
