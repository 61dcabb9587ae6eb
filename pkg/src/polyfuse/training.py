"""Training loop: Adam, gradient clipping, early stopping, 10-fold runs.

Bit determinism: for fixed (config, spec, data, seed) the loop draws the
same batch order per epoch, the same dropout masks per step, and therefore
produces identical losses, weights, and reported metrics. Wall-clock time
is the only field allowed to vary between runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import FoldBundle, MultimodalDataset
from .errors import ConfigError, DivergedError, PolyfuseError
from .metrics import EpochTimer, MetricsReport, cross_entropy, macro_f1, mae, multiclass_accuracy
from .model import Model, ModelConfig, build, count_params
from .numerics import (
    MemoryProbe,
    ParamStore,
    STREAM_BATCH,
    cross_entropy_with_logits,
    keyed_generator,
    no_grad,
    softmax_rows,
)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 40
    batch_size: int = 24
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.8
    patience: int = 10
    seed: int = 0

    def validate(self) -> "TrainSpec":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        return self

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "clip_norm": self.clip_norm,
            "patience": self.patience,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainSpec":
        if not isinstance(doc, dict):
            raise ConfigError("train spec document must be a JSON object")
        unknown = set(doc) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown train spec fields: {sorted(unknown)}")
        return cls(**doc).validate()

    @classmethod
    def from_json(cls, text: str) -> "TrainSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"train spec is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass
class RunHistory:
    """Per-epoch train/val losses and wall seconds, plus the best epoch."""

    train_loss: list[float]
    val_loss: list[float]
    epoch_seconds: list[float]
    best_epoch: int

    @property
    def num_epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for e in range(self.num_epochs):
                writer.writerow([
                    e,
                    f"{self.train_loss[e]:.6f}",
                    f"{self.val_loss[e]:.6f}",
                    f"{self.epoch_seconds[e]:.6f}",
                ])
        return out

    @classmethod
    def from_csv(cls, path) -> "RunHistory":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        train = [float(r["train_loss"]) for r in rows]
        val = [float(r["val_loss"]) for r in rows]
        secs = [float(r["seconds"]) for r in rows]
        best = int(np.argmin(val)) if val else 0
        return cls(train, val, secs, best)


class Adam:
    """Adam with bias correction, iterating parameters in name order."""

    def __init__(self, params: ParamStore, learning_rate: float, beta1: float,
                 beta2: float, eps: float):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params}
        self._v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so the global norm is at most max_norm. Returns pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def _batch_arrays(dataset: MultimodalDataset, rows: np.ndarray):
    xs = [arr[rows].astype(np.float64) for arr in dataset.modalities]
    ys = dataset.labels[rows].astype(np.int64)
    return xs, ys


def predict_probs(model: Model, dataset: MultimodalDataset, batch_size: int):
    """Class probabilities and labels for a dataset, eval mode, no graph."""
    n = dataset.num_samples
    out = np.zeros((n, model.config.num_classes), dtype=np.float64)
    with no_grad():
        for start in range(0, n, batch_size):
            rows = np.arange(start, min(start + batch_size, n))
            xs, _ = _batch_arrays(dataset, rows)
            logits = model.forward(xs, train_flag=False)
            out[rows] = softmax_rows(logits).data
    return out, dataset.labels.astype(np.int64)


def _dataset_loss(model: Model, dataset: MultimodalDataset, batch_size: int) -> float:
    n = dataset.num_samples
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            rows = np.arange(start, min(start + batch_size, n))
            xs, ys = _batch_arrays(dataset, rows)
            loss = cross_entropy_with_logits(model.forward(xs, train_flag=False), ys)
            total += loss.item() * len(rows)
    return total / n


def train_fold(config: ModelConfig, spec: TrainSpec,
               bundle: FoldBundle) -> tuple[Model, RunHistory, MetricsReport]:
    """Train on one fold; return the best-validation model and its test report."""
    config.validate()
    spec.validate()
    timer = EpochTimer()
    probe = MemoryProbe()
    train_losses: list[float] = []
    val_losses: list[float] = []
    with probe:
        model = build(config, seed=spec.seed)
        optimizer = Adam(model.params, spec.learning_rate, spec.beta1,
                         spec.beta2, spec.adam_eps)
        n_train = bundle.train.num_samples
        best_val = math.inf
        best_epoch = -1
        best_state: dict[str, np.ndarray] | None = None
        epochs_since_best = 0
        step = 0
        for epoch in range(spec.epochs):
            with timer.epoch():
                order = keyed_generator(spec.seed, STREAM_BATCH, epoch).permutation(n_train)
                epoch_loss = 0.0
                for start in range(0, n_train, spec.batch_size):
                    rows = order[start:start + spec.batch_size]
                    xs, ys = _batch_arrays(bundle.train, rows)
                    logits = model.forward(xs, train_flag=True, seed=spec.seed, step=step)
                    loss = cross_entropy_with_logits(logits, ys)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise DivergedError(
                            f"training loss became non-finite at epoch {epoch}", epoch=epoch
                        )
                    optimizer.zero_grad()
                    loss.backward()
                    clip_gradients(model.params, spec.clip_norm)
                    optimizer.step()
                    epoch_loss += value * len(rows)
                    step += 1
                val_loss = _dataset_loss(model, bundle.val, spec.batch_size)
            if not math.isfinite(val_loss):
                raise DivergedError(
                    f"validation loss became non-finite at epoch {epoch}", epoch=epoch
                )
            train_losses.append(epoch_loss / n_train)
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = model.params.state_dict()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if epochs_since_best >= spec.patience:
                break
        # Model selection: restore the epoch with minimal validation loss.
        if best_state is not None:
            model.params.load_state_dict(best_state)
        probs, labels = predict_probs(model, bundle.test, spec.batch_size)
    history = RunHistory(train_losses, val_losses, list(timer.seconds), best_epoch)
    report = MetricsReport(
        loss=cross_entropy(probs, labels),
        mae=mae(probs, labels),
        accuracy=multiclass_accuracy(probs.argmax(axis=1), labels, config.num_classes),
        f1=macro_f1(probs.argmax(axis=1), labels, config.num_classes),
        train_time_h=timer.hours,
        memory_mb=probe.peak_mb,
        params=count_params(model),
    ).validate()
    return model, history, report


@dataclass
class CvResult:
    mean: MetricsReport
    fold_reports: list[MetricsReport]
    histories: list[RunHistory]


def run_cv(config: ModelConfig, spec: TrainSpec,
           bundles: list[FoldBundle]) -> CvResult:
    """Train every fold; aggregate via MetricsReport.mean."""
    if not bundles:
        raise ConfigError("run_cv needs at least one fold bundle")
    reports: list[MetricsReport] = []
    histories: list[RunHistory] = []
    for i, bundle in enumerate(bundles):
        try:
            _, history, report = train_fold(config, spec, bundle)
        except PolyfuseError as exc:
            raise _with_fold_context(exc, i) from exc
        reports.append(report)
        histories.append(history)
    return CvResult(MetricsReport.mean(reports), reports, histories)


def _with_fold_context(exc: PolyfuseError, fold_index: int) -> PolyfuseError:
    message = f"fold {fold_index}: {exc}"
    if isinstance(exc, DivergedError):
        return DivergedError(message, epoch=exc.epoch)
    return type(exc)(message)


def derive_trial_spec(spec: TrainSpec, trial_index: int) -> TrainSpec:
    """Independent per-trial seed so concurrent trials share no streams."""
    from .numerics import STREAM_TRIAL

    child = int(keyed_generator(spec.seed, STREAM_TRIAL, trial_index)
                .integers(0, 2**32 - 1))
    return replace(spec, seed=child)
