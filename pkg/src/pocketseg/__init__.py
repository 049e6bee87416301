"""Two-stage constant-width 3D segmentation pipeline.

Preprocessing (reorient, resample, window, normalize), a pocket-width
encoder-decoder network with a doubling baseline, deep-supervision dice+CE
training with cosine-scheduled ADAM, containment-constrained organ->tumor
inference, DSC/Haus95 evaluation, and a synthetic phantom generator for
end-to-end validation.
"""

from .geometry import Geometry, OrientationError, direction_matrix
from .volume import (LabelVolume, Volume, physical_extent, reorient, resample,
                     resample_to_reference)
from .nifti import read_label_volume, read_volume, write_volume
from .preprocess import (CaseRecord, DatasetManifest, Patch, PreprocessConfig,
                         derive_patch_size, preprocess_case, preprocess_dataset,
                         sample_patch, window_normalize)
from .network import (ArchSpec, PocketNet, build_network, count_parameters,
                      load_checkpoint, save_checkpoint)
from .losses import (deep_supervision_loss, deep_supervision_weights,
                     dice_ce_loss, l2_penalty)
from .training import (FoldSplit, TrainCase, TrainConfig, TrainHistory,
                       cosine_lr, make_folds, train)
from .inference import (SlidingWindowConfig, TwoStageResult, largest_component,
                        restore_to_original, sliding_window_predict,
                        two_stage_segment)
from .metrics import CaseMetrics, SummaryStats, dice, evaluate_case, haus95, summarize
from .phantom import PhantomConfig, PhantomSampler, generate_dataset, generate_phantom
from .report import boxplot_figure, summary_block, write_report

__version__ = "0.1.0"
