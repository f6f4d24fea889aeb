"""Face-swap detection from the confusion of a closed-set face identification model."""

__version__ = "0.1.0"

from .core import DatasetManifest, IdentitySet, SampleRecord, sample_training_set
from .kernels import BACKEND as KERNEL_BACKEND
