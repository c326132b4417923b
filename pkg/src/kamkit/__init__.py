"""kamkit: multi-teacher knowledge amalgamation for compact CNN classifiers.

Train several small teacher classifiers on disjoint (or overlapping) class
subsets, then learn a single compact student covering the union of all
classes using only the teachers' outputs: channel-autoencoder feature
amalgamation followed by layer-wise and joint parameter learning.
"""

from .amalgam import (AmalgamPlan, ChannelAutoencoder, FeatureBank, LabelMap,
                      amalgamate_dfa, amalgamate_ifa, amalgamate_pair,
                      amalgamate_scores, encode, merge_overlapping_at_test,
                      train_autoencoder)
from .checkpoint import load_network, read_container, save_network, write_container
from .config import Config, ConfigError, load_config, parse_config
from .data import (ClassSplit, LabeledSet, TransferSet, batch_indices, equal_split,
                   gen_synthetic, load_idx, make_transfer_set, split_classes)
from .engine import (NumericError, Param, ShapeMismatch, Tape, conv1x1, conv2d,
                     grad_check, l2_loss, linear, nonparam, sgd_step, softmax,
                     softmax_xent)
from .estimators import (AmalgamatedClassifier, ChannelCompressor, ConvNetClassifier,
                         DistilledClassifier)
from .learn import (ensemble_predict, evaluate, fit_classifier_head, joint_finetune,
                    kd_baseline, layerwise_stage, run_layerwise)
from .nets import (FeatureTap, LayerSpec, Network, NetworkSpec, build_network,
                   conv_stack_spec, count_params, forward_collect, make_student_spec,
                   train_classifier)
from .records import EvalReport, TrainHyper, TrainLog
from .rng import Rng

__version__ = "0.1.0"
