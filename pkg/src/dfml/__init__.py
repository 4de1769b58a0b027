"""Data-free meta-learning toolkit.

Synthesizes pseudo few-shot episodes from frozen pre-trained classifiers
via curriculum-driven model inversion, meta-trains an initialization on
them, and calibrates adapted models at test time.
"""

from .curriculum import FeedbackMonitor, eci_dataset_update, feedback_update, gradient_switch
from .data import (Episode, LabeledDataset, SplitSpec, load_dataset,
                   make_synthetic_blobs, sample_episode_from_dataset, split_classes)
from .episodic import (HyperParams, MetaState, init_meta_state, inner_adapt,
                       meta_update, outer_loss, sample_pseudo_episode)
from .errors import (ConfigError, DataIOError, DfmlError, InputError, InternalError,
                     NumericError, ScenarioError, TrainingFailure)
from .icfil import (AdaptedModel, EvalReport, IcfilConfig, calibration_loss, evaluate,
                    fast_adapt_test, icfil_calibrate, predict)
from .inversion import (DynamicDataset, InversionWeights, bn_feature_loss, dataset_step,
                        init_dynamic_dataset, inversion_loss, l2_prior,
                        synthesize_from_model, tv_prior)
from .nets import (ArchSpec, ForwardTrace, NetworkParams, build_network, forward,
                   load_checkpoint, save_checkpoint)
from .runner import (ExperimentConfig, emit_plots, parse_config, run_evaluation,
                     run_meta_training, serialize_config)
from .zoo import (ModelZoo, ModelZooEntry, average_models, build_zoo, load_zoo,
                  random_init_baseline, save_zoo)

__version__ = "0.1.0"
