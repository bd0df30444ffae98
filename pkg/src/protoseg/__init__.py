"""Cross-modal zero-shot segmentation via prototype inheritance, with a
synthetic two-modality phantom benchmark harness."""

__version__ = "0.1.0"

from .datagen import (DatasetBundle, LabeledSample, LabelMap, LayoutConfig,
                      ModalityProfile, build_bundle, default_layout,
                      default_profiles)
from .losses import LossBundle, LossWeights
from .metrics import MetricReport, assd, dice, evaluate
from .nets import NetworkConfig
from .training import (AblationSwitches, OptimizerConfig, configure_ablation,
                       train_prior, train_zeroshot)
