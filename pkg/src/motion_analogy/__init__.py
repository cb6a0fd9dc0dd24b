"""Motion transfer between synthetic sprite videos with a small latent video diffusion model."""
from ._validation import CheckpointError, ClipIOError, NotFittedError, ValidationError
from .codec import LatentClip, LatentCodec, decode, encode, train_codec
from .diffusion import (NoiseSchedule, VideoDenoiser, ddim_invert, ddim_sample, denoise_loss,
                        make_schedule, q_sample, train_base)
from .evaluation import (CodecEmbedder, build_prototypes, class_score, frame_consistency,
                         motion_fidelity)
from .finetune import (AblationVariant, DisentangledFinetuner, FinetuneConfig, LoRAAdapter, WarpedClip,
                       attach_lora, build_warped_clip, finetune, finetune_ablation_variant)
from .flow import (DenseFlow, LatentFlowNet, adapt_keypoints, convex_hull, lofnet_forward, train_lofnet,
                   warp)
from .synthdata import (KeypointSet, MotionScript, SpriteSpec, VideoClip, demo_pair, generate_sprite_video,
                        load_clip, make_dataset, make_script, save_clip)
from .transfer import (TransferConfig, TransferModels, TransferResult, histogram_match, single_frame_transfer,
                       transfer)

__version__ = "0.1.0"
