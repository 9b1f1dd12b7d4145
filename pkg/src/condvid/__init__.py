"""Desk-scale, training-free conditional video generation.

A toy 2D latent diffusion model plus control branch is trained on synthetic
moving-shape scenes, then inflated to video and sampled with sparse
bi-directional temporal attention, frame-shared background/condition noise,
and optional DDIM-inverted scenery latents.
"""

from .attention import (AttentionWeights, CostAccount, FrameSamplingPlan,
                        cost_account, run_cost_benchmark, sbist_frame_indices,
                        temporal_attention)
from .lab import (SceneConfig, SyntheticScene, TrainConfig, gen_moving_shapes,
                  train_control_branch, train_image_denoiser)
from .metrics import (GrayscaleGridEmbedder, condition_accuracy_iou,
                      frame_consistency, run_ablation)
from .network import (ControlBranch, ControlResiduals, ImageModel, LatentCodec,
                      ModelConfig, VideoModel, control_forward, encode_condition,
                      encode_text, inflate_2d_to_3d, load_checkpoint,
                      save_checkpoint, unet_denoise)
from .numerics import (SeededRng, gaussian_noise, load_cvt1, matmul, save_cvt1,
                       softmax_lastdim)
from .sampler import (BackgroundLatent, GenerationRequest, GenerationResult,
                      ModelSet, generate, invert_reference, make_background_noise,
                      make_condition_input)
from .schedule import (NoiseSchedule, StepPlan, ddim_invert, ddim_invert_step,
                       ddim_step, forward_marginal, make_linear_schedule,
                       make_step_plan)

__version__ = "0.1.0"
