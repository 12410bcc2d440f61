"""scikit-learn compatible classifier around the incremental trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, split, to_float
from .growth import GrowthConfig, GrowthController
from .model import predict_logits
from .optim import OptimConfig
from .partition import Partition, partition_by_filter_groups
from .specs import NetworkSpec, builtin_network
from .tensor import softmax
from .training import EVAL_BATCH_SIZE, TrainConfig


class IncrementalCNNClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier trained by growing its backbone one sub-network at a time.

    Parameters mirror the experiment config keys. ``network`` is a built-in
    name (``"desk6"``, ``"vgg16"``, ``"tiny"``) or a :class:`NetworkSpec`;
    ``partition`` is ``"heuristic"`` or a list of group sizes; ``mode="regular"``
    trains the whole network from the start.

    ``X`` may be ``(n_samples, C, H, W)`` or flattened ``(n_samples, C*H*W)``;
    uint8 pixels are scaled to [0, 1]. A ``validation_fraction`` slice of the
    training data drives the growth criterion.

    Attributes set by ``fit``: ``classes_``, ``model_``, ``partition_``,
    ``history_`` (list of MetricsRecord), ``growth_state_``.
    """

    def __init__(self, network="desk6", partition="heuristic", mode="incremental",
                 init_mode="lookahead", window_size=5, gamma=0.75, lookahead_epochs=3,
                 max_epochs_per_stage=100, min_windows_per_stage=2, stop_final_stage=False,
                 epochs=60, batch_size=128, learning_rate=1e-4, rms_decay=0.9, epsilon=1e-7,
                 weight_decay=1e-4, validation_fraction=0.1, augment=True, random_state=0):
        self.network = network
        self.partition = partition
        self.mode = mode
        self.init_mode = init_mode
        self.window_size = window_size
        self.gamma = gamma
        self.lookahead_epochs = lookahead_epochs
        self.max_epochs_per_stage = max_epochs_per_stage
        self.min_windows_per_stage = min_windows_per_stage
        self.stop_final_stage = stop_final_stage
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rms_decay = rms_decay
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.random_state = random_state

    def _spec(self, n_classes: int) -> NetworkSpec:
        if isinstance(self.network, NetworkSpec):
            if self.network.num_classes != n_classes:
                raise ValueError(
                    f"network has {self.network.num_classes} outputs but y has {n_classes} classes"
                )
            return self.network
        return builtin_network(self.network, n_classes)

    def _partition(self, spec: NetworkSpec) -> Partition:
        if self.mode == "regular":
            return Partition(((0, len(spec.backbone)),))
        if self.mode != "incremental":
            raise ValueError(f"mode must be 'regular' or 'incremental', got {self.mode!r}")
        if isinstance(self.partition, str):
            if self.partition != "heuristic":
                raise ValueError(f"unknown partition {self.partition!r}")
            return partition_by_filter_groups(spec)
        return Partition.from_sizes(self.partition)

    def _images(self, X, input_shape) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            X = X.reshape(len(X), *input_shape)
        if X.shape[1:] != tuple(input_shape):
            raise ValueError(f"X has per-sample shape {X.shape[1:]}, network expects {input_shape}")
        return X

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return 0
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        return int(rs.randint(0, 2**31 - 1))

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        spec = self._spec(len(self.classes_))
        images = self._images(X, spec.input_shape)
        data = split(Dataset(images, self._le.transform(y)), self.validation_fraction,
                     self._seed())
        growth = GrowthConfig(self.window_size, self.gamma, self.lookahead_epochs, self.init_mode,
                              self.max_epochs_per_stage, self.min_windows_per_stage,
                              self.stop_final_stage)
        optim = OptimConfig(self.learning_rate, self.rms_decay, self.epsilon, self.weight_decay)
        train = TrainConfig(self.batch_size, self.epochs, self._seed(), self.augment)
        controller = GrowthController(spec, self._partition(spec), data, growth, optim, train)
        self.history_, self.model_, self.growth_state_ = controller.run()
        self.partition_ = controller.partition
        self.n_features_in_ = int(np.prod(spec.input_shape))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=None)
        images = to_float(self._images(X, self.model_.spec.input_shape), self.model_.dtype)
        return predict_logits(self.model_, images, EVAL_BATCH_SIZE)

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
