"""Minibatch training of the field regressor and keypoint evaluation."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig, augment_sample
from .cloud import AnnotatedSample, PointCloud
from .errors import ConfigMismatch, EmptyDataset, InvalidParams
from .field import KeypointPrediction, extract_keypoints, mse_loss, rbf_map
from .io import load_dataset
from .regressor import DEFAULT_WIDTHS, RegressorParams, forward, loss_and_grad, mean_gradients, save_params, sgd_step, subsample

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "test_loss", "test_rmse_cm")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 1
    subsample_n: int = 1024
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    augmentation_enabled: bool = True
    widths: tuple = DEFAULT_WIDTHS

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if isinstance(self.augmentation, dict):
            object.__setattr__(self, "augmentation", AugmentationConfig.from_dict(self.augmentation))
        if not self.learning_rate > 0:
            raise InvalidParams("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidParams("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidParams("epochs and batch_size must be >= 1")
        if self.subsample_n < len(self.augmentation.flip_permutation):
            raise InvalidParams("subsample_n must be at least the number of keypoints")
        if min(self.widths) < 1 or len(self.widths) != 3:
            raise InvalidParams("widths must be three positive layer sizes")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TrainingHistory:
    rows: list
    best_params: RegressorParams
    final_params: RegressorParams
    best_epoch: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.csv").write_text(self.to_csv())
        save_params(out_dir / "best.mkrw", self.best_params)
        save_params(out_dir / "final.mkrw", self.final_params)

    def last(self, column):
        return self.rows[-1][column]


def read_history(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def predict(params: RegressorParams, cloud) -> KeypointPrediction:
    return extract_keypoints(forward(params, cloud))


def keypoint_errors(pred_indices, cloud, truth_positions):
    """Euclidean distance (m) between predicted points and annotated keypoint positions."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    return np.linalg.norm(points[np.asarray(pred_indices)] - np.asarray(truth_positions, dtype=np.float64), axis=1)


def rmse_cm(errors):
    """Aggregate and per-keypoint RMSE in cm from an (samples x m) matrix of errors in meters."""
    e = np.asarray(errors, dtype=np.float64)
    return 100.0 * float(np.sqrt(np.mean(e * e))), (100.0 * np.sqrt(np.mean(e * e, axis=0))).tolist()


def sample_targets(sample: AnnotatedSample, epsilon):
    if sample.geodesic is None:
        raise InvalidParams("sample has no geodesic field")
    return rbf_map(sample.geodesic, epsilon).values


def evaluate(params: RegressorParams, samples, epsilon):
    """Mean test loss over full clouds, per-sample keypoint errors (m) and confidences."""
    losses, errors, conf = [], [], []
    for s in samples:
        y = forward(params, s.cloud)
        losses.append(mse_loss(y, sample_targets(s, epsilon)))
        pred = extract_keypoints(y)
        errors.append(keypoint_errors(pred.indices, s.cloud, s.keypoints.positions))
        conf.append(pred.confidences)
    return float(np.mean(losses)), np.array(errors), np.array(conf)


def _check_m(samples, m, where):
    for s in samples:
        if s.keypoints.m != m:
            raise ConfigMismatch(f"{where} sample has {s.keypoints.m} keypoints, expected {m}")


def train_samples(train_set, test_set, config: TrainConfig, progress=None) -> TrainingHistory:
    """Train on in-memory samples. Every random stream derives from ``config.seed``."""
    if not train_set:
        raise EmptyDataset("training set is empty")
    if not test_set:
        raise EmptyDataset("test set is empty")
    m = train_set[0].keypoints.m
    _check_m(train_set, m, "training")
    _check_m(test_set, m, "test")
    if len(config.augmentation.flip_permutation) != m:
        raise ConfigMismatch(f"flip permutation covers {len(config.augmentation.flip_permutation)} keypoints, data has {m}")
    eps = config.augmentation.epsilon
    plain = [sample_targets(s, eps) for s in train_set]

    params = RegressorParams.init(m, np.random.default_rng([config.seed, 0]), config.widths)
    velocity = params.zeros_like()
    best, best_loss, best_epoch = params, np.inf, 0
    rows = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            grads, losses = [], []
            for i in order[start:start + config.batch_size]:
                rng = np.random.default_rng([config.seed, 2, epoch, int(i)])
                if config.augmentation_enabled:
                    cloud, targets = augment_sample(train_set[i], None, config.augmentation, rng)
                else:
                    cloud, targets = train_set[i].cloud, plain[i]
                x, t = subsample(cloud, targets, config.subsample_n, rng)
                loss, g = loss_and_grad(params, x, t)
                grads.append(g)
                losses.append(loss)
            params, velocity = sgd_step(params, mean_gradients(grads), velocity, config.learning_rate, config.momentum)
            batch_losses.append(float(np.mean(losses)))
        test_loss, errors, _ = evaluate(params, test_set, eps)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "test_loss": test_loss,
            "test_rmse_cm": rmse_cm(errors)[0],
        }
        rows.append(row)
        if progress is not None:
            progress(row)
        if test_loss < best_loss:
            best, best_loss, best_epoch = params, test_loss, epoch
    return TrainingHistory(rows, best, params, best_epoch)


def train(dataset_dir, test_dir, config: TrainConfig, out_dir=None, progress=None) -> TrainingHistory:
    """Load precomputed datasets, train, and optionally write history and parameters to ``out_dir``."""
    train_set = load_dataset(dataset_dir, require_geodesic=True)
    test_set = load_dataset(test_dir, require_geodesic=True)
    history = train_samples(train_set, test_set, config, progress)
    if out_dir is not None:
        history.save(out_dir)
    return history


def drop_cameras(sample: AnnotatedSample, cameras) -> PointCloud:
    """The sample's cloud without the points of the given cameras."""
    keep = ~np.isin(sample.cloud.camera_id, np.asarray(list(cameras), dtype=np.int64))
    return sample.cloud.subset(np.flatnonzero(keep))
