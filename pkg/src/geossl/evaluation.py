"""Linear evaluation on frozen encoders, learning curves and trial aggregation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats
from torch import nn

from .config import EvalConfig
from .data import DatasetHandle
from .model import ModelBundle
from .training import CheckpointSeries, load_checkpoint, parameter_hash


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    accuracy: float
    per_class: list
    confusion: np.ndarray
    n_test: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            "n_test": self.n_test,
            "config": self.config,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(raw["accuracy"], raw["per_class"], np.asarray(raw["confusion"], np.int64),
                   raw["n_test"], raw.get("config", {}))

    def confusion_csv(self, class_names=None) -> str:
        c = self.confusion.shape[0]
        names = list(class_names) if class_names else [str(i) for i in range(c)]
        lines = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


@torch.no_grad()
def extract_embeddings(source, images, dataset: DatasetHandle | None = None, batch_size: int = 256):
    """Encoder outputs for ``images`` (NxHxWxC in [0, 1]) with no augmentation.

    ``source`` is a :class:`ModelBundle` or a checkpoint path.
    """
    if isinstance(source, (str, Path)):
        bundle, _ = load_checkpoint(source, dataset)
    else:
        bundle = source
    was_training = bundle.training
    bundle.eval()
    images = np.asarray(images, dtype=np.float32)
    chunks = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size].transpose(0, 3, 1, 2)))
        chunks.append(bundle.encode(x).numpy())
    bundle.train(was_training)
    return np.concatenate(chunks).astype(np.float64)


def linear_eval(train_x, train_y, test_x, test_y, cfg: EvalConfig | None = None, seed: int = 0,
                num_classes: int | None = None) -> EvalReport:
    """Fit one affine layer with softmax cross-entropy on frozen features."""
    cfg = cfg or EvalConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if train_x.ndim != 2 or test_x.ndim != 2 or train_x.shape[1] != test_x.shape[1]:
        raise EvaluationError("train and test features must be 2-D with matching widths")
    c = num_classes or int(max(train_y.max(), test_y.max()) + 1)
    if len(np.unique(train_y)) < 2:
        raise EvaluationError("linear evaluation needs at least two classes in the training set")
    if cfg.standardize:
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd[sd < 1e-8] = 1.0
        train_x = (train_x - mu) / sd
        test_x = (test_x - mu) / sd

    gen = torch.Generator().manual_seed(seed)
    layer = nn.Linear(train_x.shape[1], c)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(train_x.shape[1])
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.Adam(layer.parameters(), lr=cfg.lr)
    xt = torch.tensor(train_x, dtype=torch.float32)
    yt = torch.from_numpy(train_y)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(yt), generator=gen)
        for i in range(0, len(yt), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            opt.zero_grad()
            loss_fn(layer(xt[idx]), yt[idx]).backward()
            opt.step()
    with torch.no_grad():
        pred = layer(torch.tensor(test_x, dtype=torch.float32)).argmax(dim=1).numpy()
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (test_y, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / counts[i]) if counts[i] else float("nan") for i in range(c)]
    accuracy = float(np.trace(confusion) / confusion.sum())
    snapshot = {"epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
                "standardize": cfg.standardize, "seed": seed}
    return EvalReport(accuracy, per_class, confusion, int(len(test_y)), snapshot)


def evaluate_bundle(bundle: ModelBundle, dataset: DatasetHandle, cfg: EvalConfig | None = None,
                    seed: int = 0) -> EvalReport:
    before = parameter_hash(bundle, include_buffers=True)
    tr = extract_embeddings(bundle, dataset.train_images)
    te = extract_embeddings(bundle, dataset.test_images)
    report = linear_eval(tr, dataset.train_labels, te, dataset.test_labels, cfg, seed, dataset.num_classes)
    if parameter_hash(bundle, include_buffers=True) != before:
        raise EvaluationError("encoder changed during linear evaluation")
    report.config["dataset"] = dataset.name
    return report


def evaluate_checkpoint(path, dataset: DatasetHandle, cfg: EvalConfig | None = None, seed: int = 0) -> EvalReport:
    bundle, payload = load_checkpoint(path, dataset)
    report = evaluate_bundle(bundle, dataset, cfg, seed)
    report.config["epoch"] = payload["epoch"]
    report.config["checkpoint"] = Path(path).name
    return report


def learning_curve(series, dataset: DatasetHandle, cfg: EvalConfig | None = None, seed: int = 0):
    """Linear-eval accuracy per checkpoint epoch, as ``[(epoch, mean, std), ...]``.

    ``series`` is one :class:`CheckpointSeries` or a list of them (one per seed);
    std is the population std across series and is 0 for a single series.
    """
    all_series = [series] if isinstance(series, CheckpointSeries) else list(series)
    if not all_series or any(len(s) == 0 for s in all_series):
        raise EvaluationError("learning curve needs non-empty checkpoint series")
    per_epoch: dict[int, list] = {}
    for s in all_series:
        for entry in s:
            acc = evaluate_checkpoint(entry.path, dataset, cfg, seed).accuracy
            per_epoch.setdefault(entry.epoch, []).append(acc)
    return [(e, float(np.mean(v)), float(np.std(v))) for e, v in sorted(per_epoch.items())]


def aggregate_trials(accuracies, confidence: float = 0.99) -> tuple[float, float]:
    """Mean and Student-t confidence half-width; half-width is NaN for a single trial."""
    # sorted so the result does not depend on trial order
    values = np.sort(np.asarray(list(accuracies), dtype=np.float64))
    if values.size == 0:
        raise EvaluationError("no trials to aggregate")
    if not 0.0 < confidence < 1.0:
        raise EvaluationError("confidence must lie in (0, 1)")
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, float("nan")
    if values[0] == values[-1]:
        # np.std leaves rounding residue on constant input
        return mean, 0.0
    sem = float(np.std(values, ddof=1)) / np.sqrt(values.size)
    crit = float(stats.t.ppf(0.5 + confidence / 2.0, df=values.size - 1))
    return mean, float(crit * sem)
