"""scikit-learn style wrapper around the adversarial trainer.

``fit(X, y, X_target=...)`` trains on labeled source images and unlabeled
target images; ``predict`` returns label maps from the main head and
``score`` reports mIoU.  Images are channel-first arrays ``[N, 3, H, W]``
with values in [0, 1].
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import metrics
from . import tensor as T
from .exceptions import ConfigurationError, DataError
from .losses import IGNORE_LABEL
from .synth import SOURCE_DOMAIN, Sample
from .trainer import DEFAULT_LR_D, DEFAULT_LR_G, TrainConfig, train


def check_images(X):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ConfigurationError(f"expected images shaped [N, 3, H, W], got {X.shape}")
    if X.shape[2] % 8 or X.shape[3] % 8:
        raise ConfigurationError(f"image size {X.shape[2]}x{X.shape[3]} must be divisible by 8")
    if X.min() < 0 or X.max() > 1:
        raise DataError("pixel values must lie in [0, 1]")
    return X


def check_label_maps(y, X, n_classes=None):
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ConfigurationError(f"label maps {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError("label maps must be integer")
    valid = y[y != IGNORE_LABEL]
    if valid.size and valid.min() < 0:
        raise DataError("negative label")
    if n_classes is not None and valid.size and valid.max() >= n_classes:
        raise DataError(f"label {int(valid.max())} outside [0, {n_classes - 1}]")
    return y.astype(np.uint8)


class OutputSpaceAdapter(ClassifierMixin, BaseEstimator):
    def __init__(self, mode="single_level", gan="vanilla", lambda_seg=None, lambda_adv=None,
                 total_steps=1500, seed=0, lr_g=DEFAULT_LR_G, lr_d=DEFAULT_LR_D, n_classes=None,
                 widths=(16, 32, 64, 64, 64)):
        self.mode = mode
        self.gan = gan
        self.lambda_seg = lambda_seg
        self.lambda_adv = lambda_adv
        self.total_steps = total_steps
        self.seed = seed
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.n_classes = n_classes
        self.widths = widths

    def _config(self, n_classes):
        return TrainConfig(mode=self.mode, gan=self.gan, lambda_seg=self.lambda_seg,
                           lambda_adv=self.lambda_adv, total_steps=self.total_steps,
                           seed=self.seed, lr_g=self.lr_g, lr_d=self.lr_d,
                           n_classes=n_classes, widths=tuple(self.widths))

    def fit(self, X, y, X_target=None):
        X = check_images(X)
        y = check_label_maps(y, X, self.n_classes)
        n_classes = self.n_classes
        if n_classes is None:
            valid = y[y != IGNORE_LABEL]
            n_classes = max(int(valid.max()) + 1 if valid.size else 2, 2)
        config = self._config(n_classes)
        target = None
        if config.mode != "source_only":
            if X_target is None:
                raise ConfigurationError(f"mode {config.mode} needs unlabeled X_target")
            Xt = check_images(X_target)
            target = list(Xt)
        source = [Sample(image=img, labels=lab, domain=SOURCE_DOMAIN, n_classes=n_classes)
                  for img, lab in zip(X, y)]
        self.trainer_, self.history_ = train(config, source, target)
        self.config_ = config
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = 3
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "trainer_")
        X = check_images(X)
        return np.stack([self.trainer_.G(T.Tensor(img[None]))["P1"].data[0] for img in X])

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def transform(self, X):
        """Main-head class probabilities, [N, C, H, W]."""
        return self.predict_proba(X)

    def score(self, X, y, sample_weight=None):
        """Mean IoU of the main head on labeled images."""
        check_is_fitted(self, "trainer_")
        X = check_images(X)
        y = check_label_maps(y, X, len(self.classes_))
        cm = metrics.ConfusionMatrix(len(self.classes_))
        for pred, gt in zip(self.predict(X), y):
            cm.accumulate(pred, gt)
        return metrics.iou_report(cm, len(X)).miou
