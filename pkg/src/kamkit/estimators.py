"""Scikit-learn style estimators wrapping the amalgamation toolkit.

`ConvNetClassifier` trains one small CNN on labeled images (a teacher).
`ChannelCompressor` is the 1x1-conv channel autoencoder as a transformer.
`AmalgamatedClassifier` learns a student covering all teachers' classes from
unlabeled images only; `DistilledClassifier` is the Hinton-style baseline.
All follow the fit/predict/transform conventions and compose with
sklearn tooling (get_params, set_params, clone).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import learn
from .amalgam import ChannelAutoencoder, LabelMap, default_plan, encode_stream, \
    merge_overlapping_at_test, train_autoencoder
from .data import LabeledSet, TransferSet
from .nets import build_network, conv_stack_spec, make_student_spec, train_classifier
from .records import TrainHyper
from .rng import Rng
from .validation import check_feature_maps, check_images, check_is_fitted, check_labels


class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """Small conv-stack image classifier trained with softmax cross entropy.

    Parameters mirror the default desk-scale architecture: conv blocks with
    relu + 2x2 max pooling, one hidden fc layer, and a linear classifier.
    """

    def __init__(self, conv_channels=(16, 32, 48), kernel=3, hidden=(128,),
                 lr=0.01, momentum=0.9, weight_decay=5e-4, epochs=15,
                 batch_size=32, seed=0):
        self.conv_channels = conv_channels
        self.kernel = kernel
        self.hidden = hidden
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        spec = conv_stack_spec(X.shape[1:], tuple(self.conv_channels), self.kernel,
                               tuple(self.hidden), len(self.classes_))
        rng = Rng(self.seed)
        net = build_network(spec, rng.stream("init"))
        dataset = LabeledSet(X, y, tuple(int(c) for c in self.classes_))
        hyper = TrainHyper(self.lr, self.momentum, self.weight_decay,
                           self.epochs, self.batch_size)
        self.network_, self.history_ = train_classifier(net, dataset, None, hyper,
                                                        rng.stream("train"))
        self.input_shape_ = tuple(X.shape[1:])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.input_shape_)
        return self.network_.scores(X, self.batch_size)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class ChannelCompressor(BaseEstimator, TransformerMixin):
    """Linear channel autoencoder: compresses [N, C, H, W] to fewer channels.

    `out_channels` fixes the compressed width; otherwise it is
    round(ratio * C), and must stay below the input width.
    """

    def __init__(self, out_channels=None, ratio=0.75, lr=0.5, momentum=0.9,
                 weight_decay=5e-4, epochs=15, batch_size=32, seed=0):
        self.out_channels = out_channels
        self.ratio = ratio
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_feature_maps(X)
        cin = X.shape[1]
        cout = self.out_channels if self.out_channels is not None else int(round(self.ratio * cin))
        hyper = TrainHyper(self.lr, self.momentum, self.weight_decay,
                           self.epochs, self.batch_size)
        self.autoencoder_, self.loss_curve_ = train_autoencoder(
            X, cout, hyper, Rng(self.seed).stream("ae"))
        self.n_channels_in_ = cin
        return self

    def transform(self, X):
        check_is_fitted(self, "autoencoder_")
        X = check_feature_maps(X)
        return encode_stream(self.autoencoder_, X, self.batch_size)

    def inverse_transform(self, X):
        check_is_fitted(self, "autoencoder_")
        X = check_feature_maps(X)
        from . import engine
        return engine.conv1x1(X, self.autoencoder_.dec.value)


class _StudentMixin:
    """Shared prediction surface for entry-score students."""

    def decision_function(self, X):
        check_is_fitted(self, "student_")
        X = check_images(X, self.input_shape_)
        scores = self.student_.scores(X, self.batch_size)
        return merge_overlapping_at_test(scores, self.label_map_)

    def predict(self, X):
        merged = self.decision_function(X)
        return self.classes_[merged.argmax(axis=1)]

    def _teacher_views(self):
        teachers = list(self.teachers)
        if not teachers:
            raise ValueError("pass at least two fitted ConvNetClassifier teachers")
        nets, class_lists = [], []
        for t in teachers:
            check_is_fitted(t, "network_")
            nets.append(t.network_)
            class_lists.append([int(c) for c in t.classes_])
        return nets, class_lists


class AmalgamatedClassifier(_StudentMixin, BaseEstimator, ClassifierMixin):
    """Student covering the union of the teachers' classes, fit on unlabeled images.

    Feature amalgamation (channel autoencoders per layer, pairwise/ifa/dfa)
    followed by layer-wise stages and joint fine-tuning against the
    concatenated teacher scores. Overlapping classes are merged (max) at
    predict time.
    """

    def __init__(self, teachers=(), mode="dfa", width_ratio=0.65, amalgam_ratio=0.75,
                 fam=True, lr_ae=0.5, lr_layerwise=0.5, lr_joint=0.3, momentum=0.9,
                 weight_decay=5e-4, epochs_ae=10, epochs_layerwise=10, epochs_joint=30,
                 batch_size=32, seed=0):
        self.teachers = teachers
        self.mode = mode
        self.width_ratio = width_ratio
        self.amalgam_ratio = amalgam_ratio
        self.fam = fam
        self.lr_ae = lr_ae
        self.lr_layerwise = lr_layerwise
        self.lr_joint = lr_joint
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs_ae = epochs_ae
        self.epochs_layerwise = epochs_layerwise
        self.epochs_joint = epochs_joint
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        nets, class_lists = self._teacher_views()
        label_map = LabelMap.from_teacher_classes(class_lists)
        teacher_spec = nets[0].spec
        student_spec = make_student_spec(teacher_spec, len(nets), self.width_ratio,
                                         label_map.n_entries())
        plan = default_plan(teacher_spec, len(nets),
                            [l.out_ch for l in student_spec.layers[:-1]],
                            self.mode, self.amalgam_ratio)
        rng = Rng(self.seed)
        transfer = TransferSet(X)
        stage_hyper = TrainHyper(self.lr_layerwise, self.momentum, self.weight_decay,
                                 self.epochs_layerwise, self.batch_size)
        ae_hyper = TrainHyper(self.lr_ae, self.momentum, self.weight_decay,
                              self.epochs_ae, self.batch_size)
        result = learn.run_layerwise(nets, transfer, plan, student_spec, self.fam,
                                     stage_hyper, rng.stream("layerwise"), ae_hyper)
        joint_hyper = TrainHyper(self.lr_joint, self.momentum, self.weight_decay,
                                 self.epochs_joint, self.batch_size)
        self.student_, self.log_ = learn.joint_finetune(
            result.student, nets, transfer, label_map, joint_hyper, rng.stream("joint"))
        self.layerwise_student_ = result.student
        self.stages_ = result.stages
        self.autoencoders_ = result.autoencoders
        self.label_map_ = label_map
        self.classes_ = np.asarray(label_map.global_classes)
        self.input_shape_ = tuple(X.shape[1:])
        return self


class DistilledClassifier(_StudentMixin, BaseEstimator, ClassifierMixin):
    """Hinton-style distillation baseline: one student, concatenated soft targets."""

    def __init__(self, teachers=(), temperature=4.0, width_ratio=0.65, lr=0.01,
                 momentum=0.9, weight_decay=5e-4, epochs=30, batch_size=32,
                 raw_logit_l2=False, seed=0):
        self.teachers = teachers
        self.temperature = temperature
        self.width_ratio = width_ratio
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.raw_logit_l2 = raw_logit_l2
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        nets, class_lists = self._teacher_views()
        label_map = LabelMap.from_teacher_classes(class_lists)
        student_spec = make_student_spec(nets[0].spec, len(nets), self.width_ratio,
                                         label_map.n_entries())
        hyper = TrainHyper(self.lr, self.momentum, self.weight_decay,
                           self.epochs, self.batch_size)
        self.student_, self.log_ = learn.kd_baseline(
            student_spec, nets, TransferSet(X), label_map, self.temperature, hyper,
            Rng(self.seed).stream("kd"), raw_logit_l2=self.raw_logit_l2)
        self.label_map_ = label_map
        self.classes_ = np.asarray(label_map.global_classes)
        self.input_shape_ = tuple(X.shape[1:])
        return self
