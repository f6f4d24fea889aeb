"""Identity extractors, the identification head, and its two training regimes."""

from .backbone import STAGES, BackboneSpec, EmbeddingBackend, embed_images, to_tensor
from .masks import (
    AttentionMask,
    NonDifferentiableBackend,
    apply_mask,
    attention_mask_from_gradients,
    blocks_from_map,
    input_gradient_maps,
)
from .model import IdentificationModel, IdProbDist, load_backbone, load_checkpoint, predict, save_backbone, save_checkpoint
from .training import (
    EmptyIdentity,
    FakeInTrainSet,
    IndexOutOfRange,
    SmoothedLabel,
    TrainConfig,
    finetune_attention,
    fit_attention,
    fit_frozen,
    smooth_label,
    train_baseline,
)
