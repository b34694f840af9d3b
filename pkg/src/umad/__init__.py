"""Motion-aware diffusion for temporally consistent video restoration."""

from .backbone import DenoiserConfig, UMambaDenoiser, denoiser_forward, glam, mamba_block, ssm_scan
from .context import gcm, ptcm, tsc_block
from .data_synth import (DatasetManifest, DegradationSpec, FlowField, FrameSequence, crop_patches, degrade,
                         downsample, generate_synthetic_sequence, load_manifest, read_flow_file,
                         sample_training_window, write_flow_file)
from .diffusion import NoiseSchedule, SamplerConfig, cosine_schedule, p_sample_step, q_sample, restore
from .errors import FlowStateError, FormatError, TopologyError, TrainingError, UmadError
from .flow import block_match_oracle, correlation_volume, encode_features, estimate_flow, flow_update, warp
from .harness import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .losses import (LossReport, LossWeights, charbonnier, flow_consistency_loss, temporal_consistency_loss,
                     total_loss)
from .metrics import MetricsReport, mean_flow_magnitude, psnr, ssim, tof
from .model import UMAD, ModelConfig
from .umse import UMSE, StructuralPriors, broadcast_spatial, embed_structural, fuse

__version__ = "0.1.0"
