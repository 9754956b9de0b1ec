"""diffteach: a frozen denoising-diffusion backbone teaching a cross-domain
object detector through pseudo-labeled self-training."""

from .backbone import (
    ConvBackbone,
    DiffusionBackbone,
    FeatureExtractionConfig,
    FeaturePyramid,
    extract_taps,
)
from .boxes import BoxSet
from .data import (
    DetectionDataset,
    DomainPairSpec,
    SHIFT_PRESETS,
    ShiftSpec,
    generate_domain_pair,
    read_dataset,
    write_dataset,
)
from .denoiser import DenoiserConfig, TinyUNet, denoise_with_taps, load_denoiser, save_denoiser
from .detector import DetectorConfig, MiniDetector, detect, detection_loss
from .diffusion_pretrain import PretrainConfig, pretrain_denoiser
from .evaluation import (
    EvalReport,
    average_precision,
    error_taxonomy,
    evaluate_detections,
    iou,
    relative_cross_domain,
)
from .schedules import NoiseSchedule, build_schedule, forward_diffuse
from .selftrain import (
    SelfTrainer,
    SelfTrainingConfig,
    TeacherTrainConfig,
    ema_update,
    generate_pseudo_labels,
    train_diffusion_teacher,
)

__version__ = "0.1.0"
