"""outfitnet: outfit compatibility prediction, diagnosis and revision.

A small numpy-based library built around four pieces:

* a reverse-mode autodiff tensor engine (:mod:`outfitnet.autodiff`),
* a four-stage convolutional backbone whose per-stage GAP vectors are
  compared pairwise under type-conditioned learned masks
  (:mod:`outfitnet.backbone`, :mod:`outfitnet.comparison`),
* an MLP score head with joint classification / regularizer / visual-
  semantic losses (:mod:`outfitnet.predictor`, :mod:`outfitnet.vse`),
* gradient-based diagnosis of incompatible pairs and items plus greedy
  revision (:mod:`outfitnet.diagnosis`).

Synthetic data with a planted compatibility rule
(:mod:`outfitnet.data`) makes all of it end-to-end testable on a CPU.
"""

from .autodiff import Tensor, backward, finite_diff_check, from_values, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .comparison import ItemType, MaskBank, NormStats
from .config import TrainConfig
from .data import GeneratorConfig, Item, Outfit, generate, load_dataset, save_dataset
from .diagnosis import DiagnosisReport, diagnose, revise
from .evaluation import EvalReport, auc, evaluate
from .model import Model
from .predictor import LossWeights
from .training import train
from .vse import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_check", "from_values", "no_grad",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ItemType", "MaskBank", "NormStats", "TrainConfig",
    "GeneratorConfig", "Item", "Outfit", "generate", "load_dataset", "save_dataset",
    "DiagnosisReport", "diagnose", "revise",
    "EvalReport", "auc", "evaluate",
    "Model", "LossWeights", "train", "Vocabulary",
    "__version__",
]
