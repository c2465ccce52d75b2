"""Patient-level training, prediction, metrics and latency benchmarking."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Diagnosis, split_dataset
from .errors import ConfigError, TrainingDivergedError
from .loss import AdamState, cce_grad_logits, class_weights_from_counts, softmax, weighted_cce
from .model import MsNetArch, init_model

log = logging.getLogger(__name__)

N_CLASSES = len(Diagnosis)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    seed: int = 0
    class_weighting: str = "balanced"
    val_fraction: float = 0.3
    shuffle_each_epoch: bool = True

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if self.class_weighting not in ("balanced", "none"):
            raise ConfigError(f"class_weighting must be 'balanced' or 'none', got {self.class_weighting!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    class_weights: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


@dataclass
class TrainResult:
    model: object
    log: TrainingLog


def _features(item):
    vol = item[0]
    return getattr(vol, "features", vol)


def label_from_probs(probs):
    # np.argmax returns the first maximum, so exact ties go to the lowest index
    return Diagnosis(int(np.argmax(probs)))


def predict(model, volume, precision="float64"):
    """``(label, probs)`` for one volume; precision is ``"float64"`` or ``"float32"``."""
    if precision not in ("float64", "float32"):
        raise ConfigError(f"precision must be float64 or float32, got {precision!r}")
    if model.params.dtype != np.dtype(precision):
        model = model.astype(precision)
    probs = softmax(model.logits(volume))
    return label_from_probs(probs), probs


def accuracy(model, labelled):
    correct = sum(int(label_from_probs(model.logits(_features(item))) == item[1])
                  for item in labelled)
    return correct / len(labelled)


def train(dataset, config=None, val_set=None, arch=None):
    """Fit a fresh model one patient at a time and keep the best-validation state.

    ``dataset`` is a list of ``(volume, label)`` pairs. Without ``val_set`` it is
    split with :func:`split_dataset` using ``config.val_fraction``. The model
    with the highest validation accuracy is returned; ties keep the earliest
    epoch.
    """
    config = config or TrainConfig()
    config.validate()
    if val_set is None:
        train_set, val_set = split_dataset(dataset, config.val_fraction, config.seed)
    else:
        train_set = list(dataset)
    if not train_set or not val_set:
        raise ConfigError(f"train ({len(train_set)}) and val ({len(val_set)}) splits must be non-empty")

    if arch is None:
        arch = MsNetArch(input_channels=_features(train_set[0]).shape[1])
    model = init_model(arch, seed=config.seed)
    labels = np.array([int(item[1]) for item in train_set])
    if config.class_weighting == "balanced":
        weights = class_weights_from_counts(np.bincount(labels, minlength=N_CLASSES))
    else:
        weights = np.ones(N_CLASSES)
    # samples whose class weight is zero contribute nothing
    active = [i for i in range(len(train_set)) if weights[labels[i]] > 0]

    state = AdamState.zeros(model.params.size, lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    history = TrainingLog(class_weights=weights.tolist(), config=asdict(config))
    best = model.copy()
    prev_params = model.params.copy()
    order = np.array(active)

    for epoch in range(1, int(config.epochs) + 1):
        if config.shuffle_each_epoch:
            order = rng.permutation(active)
        total = 0.0
        for i in order:
            x, y = _features(train_set[i]), int(train_set[i][1])
            probs, cache = model.forward(x)
            loss = weighted_cce(probs, y, weights)
            grad = None
            if np.isfinite(loss) and np.all(np.isfinite(probs)):
                grad = model.backward(cache, cce_grad_logits(probs, y, weights))
            if grad is None or not np.all(np.isfinite(grad)):
                # a non-finite loss condemns the current parameters, a bad gradient does not
                last = model.copy()
                if grad is None:
                    last.set_params(prev_params)
                raise TrainingDivergedError(
                    f"non-finite loss or gradient at epoch {epoch} on patient index {i}",
                    model=last, log=history)
            total += loss
            prev_params = model.params.copy()
            model.apply_adam(grad, state)
        val_acc = accuracy(model, val_set)
        rec = EpochRecord(epoch, total / max(len(order), 1), val_acc)
        history.epochs.append(rec)
        if history.best_epoch == 0 or val_acc > history.best_val_accuracy:
            history.best_epoch, history.best_val_accuracy = epoch, val_acc
            best = model.copy()
        log.info("epoch %d loss %.6f val_acc %.4f", epoch, rec.train_loss, val_acc)
    return TrainResult(best, history)


@dataclass
class TimingSummary:
    total_seconds: float
    mean_seconds: float
    p50_seconds: float
    p95_seconds: float
    n_volumes: int
    repetitions: int = 1

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalReport:
    confusion: np.ndarray
    n_volumes: int
    timing: TimingSummary = None

    @property
    def sensitivity(self):
        """Per-class recall; ``None`` where the class has no ground-truth volumes."""
        rows = self.confusion.sum(axis=1)
        return [float(self.confusion[c, c] / rows[c]) if rows[c] else None
                for c in range(self.confusion.shape[0])]

    @property
    def accuracy(self):
        return float(np.trace(self.confusion) / self.confusion.sum())

    def counts(self):
        """``{class name: (correct, total)}`` in the style of per-subset tables."""
        return {Diagnosis(c).name: (int(self.confusion[c, c]), int(self.confusion[c].sum()))
                for c in range(self.confusion.shape[0])}

    def to_dict(self):
        return {
            "confusion": self.confusion.tolist(),
            "sensitivity": self.sensitivity,
            "accuracy": self.accuracy,
            "n_volumes": self.n_volumes,
            "timing": self.timing.to_dict() if self.timing else None,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def summary(self):
        lines = []
        for c, s in enumerate(self.sensitivity):
            name = Diagnosis(c).name
            correct, total = self.counts()[name]
            pct = "NA" if s is None else f"{100 * s:.2f}%"
            lines.append(f"{name:<7} {correct}/{total}  sensitivity {pct}")
        lines.append(f"overall {int(np.trace(self.confusion))}/{self.n_volumes}  accuracy {100 * self.accuracy:.2f}%")
        return "\n".join(lines)


def confusion_matrix(truth, predicted, n_classes=N_CLASSES):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(predicted, dtype=int)), 1)
    return cm


def evaluate(model, labelled, precision="float64"):
    labelled = list(labelled)
    if not labelled:
        raise ConfigError("cannot evaluate an empty set")
    if model.params.dtype != np.dtype(precision):
        model = model.astype(precision)
    preds = [predict(model, _features(item), precision)[0] for item in labelled]
    cm = confusion_matrix([int(item[1]) for item in labelled], preds)
    return EvalReport(cm, len(labelled))


@dataclass
class BenchmarkResult:
    timing: TimingSummary
    predictions: list
    deterministic: bool


def benchmark(model, volumes, repetitions=1, warmup=3):
    """Time float32 inference per volume, features already in memory.

    The first ``warmup`` volumes are run once untimed. Each volume's time is
    averaged over ``repetitions``; total, mean, p50 and p95 derive from those.
    """
    if not volumes:
        raise ConfigError("benchmark needs at least one volume")
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    m32 = model.astype(np.float32)
    xs = [np.ascontiguousarray(getattr(v, "features", v), dtype=np.float32) for v in volumes]
    for x in xs[:warmup]:
        m32.logits(x)
    times = np.empty((repetitions, len(xs)))
    preds = np.empty((repetitions, len(xs)), dtype=int)
    clock = time.perf_counter
    for r in range(repetitions):
        for j, x in enumerate(xs):
            t0 = clock()
            z = m32.logits(x)
            times[r, j] = clock() - t0
            preds[r, j] = int(np.argmax(z))
    per_volume = times.mean(axis=0)
    total = float(per_volume.sum())
    timing = TimingSummary(
        total_seconds=total,
        mean_seconds=total / len(xs),
        p50_seconds=float(np.percentile(per_volume, 50)),
        p95_seconds=float(np.percentile(per_volume, 95)),
        n_volumes=len(xs),
        repetitions=repetitions,
    )
    deterministic = bool(np.all(preds == preds[0]))
    return BenchmarkResult(timing, [Diagnosis(p) for p in preds[0]], deterministic)
