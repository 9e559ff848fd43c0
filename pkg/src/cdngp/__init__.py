"""Continual dynamic neural graphics primitives: a multi-branch, hash-encoded
radiance-field trainer and renderer for dynamic multi-view video, with
chunk-by-chunk continual training, parameter isolation, and exact
size/bandwidth accounting."""

from .accounting import (BandwidthReport, SizeReport, bandwidth_report,
                         param_count, size_report)
from .continual import (ChunkSchedule, ModelRepo, RaySampler, TrainConfig,
                        importance_sample_rays, init_branch, new_repo,
                        plan_chunks, run_continual, train_branch,
                        train_next_chunk)
from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import (EncoderConfig, EncoderTables, encode, encode_4d,
                       encode_merf, encode_plane, encode_temporal,
                       encoder_backward, hash_index, level_resolutions)
from .field import (Branch, SpatialTables, TemporalEncoder, compose_fields,
                    encode_direction, fuse_features, query_field)
from .losses import (LossWeights, distortion_loss, distortion_loss_bruteforce,
                     opacity_entropy, photometric_loss, spatial_l1, total_loss)
from .numerics import (AdamState, Mlp, adam_step, cosine_lr, finite_diff_check,
                       leaky_relu, linear_forward, mlp_forward_backward)
from .renderer import (OccupancyGrid, RayBatch, RenderOutput, generate_rays,
                       march_ray, march_rays, render_image, update_occupancy,
                       volume_render)
from .scene_io import (Camera, SceneDataset, SynthSceneSpec, default_scene_spec,
                       dssim, generate_dataset, load_dataset, oracle_field,
                       oracle_render, psnr)

__version__ = "0.1.0"
