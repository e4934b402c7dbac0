"""Training: subject-grouped k-fold splits, anchor/exemplar batch
sampling, the Adam optimization loop, and checkpoint plumbing.

Splits are grouped by subject so no subject contributes to both the
train and validation side of a fold.  Each optimization step draws one
anchor volume plus one exemplar volume per class (the anchor excluded
from its own class's draw), runs the autoencoder on all of them in one
graph, and minimizes reconstruction loss plus the weighted
discriminative term.  Training normally uses only the extreme ordinal
grades (0 and 4), remapped to compact labels {0, 1}.

Everything is deterministic given the config seed: fixed sampling
sequence, fixed parameter init, sequential float64 updates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .cae import Model, load_model, save_model
from .errors import DataError, NumericError, UsageError
from .loss import LossConfig, discriminative_loss, embedded_similarity, recon_loss
from .ndgrad import ParamStore, Tensor, flatten
from .volio import CaseRecord, Volume, read_volume

EXTREME_LOW = 0
EXTREME_HIGH = 4

TRACE_HEADER = ["step", "recon_loss", "disc_loss", "total_loss"]


@dataclass(frozen=True)
class TrainCase:
    """One training example: subject, compact class label, volume."""

    subject_id: str
    label: int
    volume: Volume


@dataclass(frozen=True)
class FoldSplit:
    """k folds of (train, validation) case lists, subject-disjoint."""

    folds: tuple[tuple[tuple[CaseRecord, ...], tuple[CaseRecord, ...]], ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


@dataclass(frozen=True)
class BatchSample:
    """Anchor case plus one exemplar case per class."""

    anchor: TrainCase
    exemplars: tuple[TrainCase, ...]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and Adam hyperparameters."""

    epochs: int = 30
    batch_steps_per_epoch: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_steps_per_epoch < 1:
            raise UsageError(
                f"batch_steps_per_epoch must be >= 1, got {self.batch_steps_per_epoch}"
            )
        if self.learning_rate <= 0.0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise UsageError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise UsageError("adam_eps must be positive")


def group_kfold(cases: list[CaseRecord], k: int, seed: int) -> FoldSplit:
    """Split cases into k subject-disjoint folds, stratified by class.

    Distinct subjects of each class are shuffled with the seed and dealt
    round-robin to folds; all of a subject's cases travel together.
    """
    if k < 2:
        raise UsageError(f"k must be >= 2, got {k}")
    if not cases:
        raise DataError("no cases to split")
    subject_class: dict[str, int] = {}
    by_class: dict[int, list[str]] = {}
    for rec in cases:
        if rec.subject_id not in subject_class:
            subject_class[rec.subject_id] = rec.class_label
            by_class.setdefault(rec.class_label, []).append(rec.subject_id)
    rng = np.random.Generator(np.random.PCG64(seed))
    fold_of: dict[str, int] = {}
    for label in sorted(by_class):
        subjects = by_class[label]
        if len(subjects) < k:
            raise DataError(
                f"class {label} has {len(subjects)} subjects, fewer than k={k}"
            )
        order = list(rng.permutation(len(subjects)))
        for slot, idx in enumerate(order):
            fold_of[subjects[idx]] = slot % k
    folds = []
    for j in range(k):
        val = tuple(r for r in cases if fold_of[r.subject_id] == j)
        train = tuple(r for r in cases if fold_of[r.subject_id] != j)
        folds.append((train, val))
    return FoldSplit(tuple(folds))


def select_training_extremes(
    cases: list[CaseRecord], low: int = EXTREME_LOW, high: int = EXTREME_HIGH
) -> list[CaseRecord]:
    """Keep only the extreme grades, remapped to compact labels {0, 1}."""
    if low >= high:
        raise UsageError(f"low grade {low} must be below high grade {high}")
    out = []
    for rec in cases:
        if rec.class_label == low:
            out.append(CaseRecord(rec.subject_id, 0, rec.volume_path))
        elif rec.class_label == high:
            out.append(CaseRecord(rec.subject_id, 1, rec.volume_path))
    return out


def load_cases(records: list[CaseRecord]) -> list[TrainCase]:
    """Materialize case volumes into memory for training."""
    return [
        TrainCase(r.subject_id, r.class_label, read_volume(r.volume_path))
        for r in records
    ]


def _classes_of(trainset: list[TrainCase]) -> list[int]:
    labels = sorted({c.label for c in trainset})
    if labels != list(range(len(labels))) or len(labels) < 2:
        raise DataError(f"training labels must be compact 0..c-1, got {labels}")
    return labels


def sample_batch(trainset: list[TrainCase], rng: np.random.Generator) -> BatchSample:
    """Draw a uniform anchor plus one uniform exemplar per class.

    The anchor is excluded from its own class's exemplar draw, so that
    class needs at least two cases.
    """
    if not trainset:
        raise DataError("empty training set")
    labels = _classes_of(trainset)
    anchor_idx = int(rng.integers(len(trainset)))
    anchor = trainset[anchor_idx]
    exemplars = []
    for label in labels:
        pool = [
            i
            for i, c in enumerate(trainset)
            if c.label == label and i != anchor_idx
        ]
        if not pool:
            raise DataError(
                f"class {label} exhausted: no exemplar candidate besides the anchor"
            )
        exemplars.append(trainset[pool[int(rng.integers(len(pool)))]])
    return BatchSample(anchor, tuple(exemplars))


class Adam:
    """Adam with bias correction over a ParamStore, fixed iteration order."""

    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.state = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in params.items()
        }

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m, v = self.state[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def fit(
    model: Model, trainset: list[TrainCase], cfg: TrainConfig
) -> tuple[Model, list[tuple[int, float, float, float]]]:
    """Run the optimization loop; returns the model and per-step trace.

    Each trace row is (step, recon_loss, disc_loss, total_loss).  The run
    is fully determined by ``cfg.rng_seed`` and the model's initial
    parameters.  Raises on non-finite losses with the failing step in the
    message.
    """
    total_steps = cfg.epochs * cfg.batch_steps_per_epoch
    if total_steps == 0:
        return model, []
    if cfg.loss.alpha > 0.0:
        labels = _classes_of(trainset)
        if len(labels) != cfg.loss.class_count:
            raise DataError(
                f"trainset has {len(labels)} classes, loss expects {cfg.loss.class_count}"
            )
    for case in trainset:
        if case.volume.dims != model.spec.input_dims:
            raise UsageError(
                f"case {case.subject_id}: dims {case.volume.dims} != "
                f"model {model.spec.input_dims}"
            )
    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    opt = Adam(model.params, cfg)
    trace = []
    for step in range(1, total_steps + 1):
        batch = sample_batch(trainset, rng)
        try:
            x = model.input_tensor(batch.anchor.volume)
            z, x_hat = model.forward_graph(x)
            recon = recon_loss(x, x_hat)
            if cfg.loss.alpha > 0.0:
                embedded = []
                for case in batch.exemplars:
                    ez, _ = model.encode_graph(model.input_tensor(case.volume))
                    embedded.append(ez)
                probs = embedded_similarity(z, embedded)
                disc = discriminative_loss(probs, batch.anchor.label)
                total = recon + cfg.loss.alpha * disc
                disc_val = disc.item()
            else:
                total = recon
                disc_val = 0.0
            if not np.isfinite(total.item()):
                raise NumericError("loss is not finite")
            model.params.zero_grad()
            total.backward()
            opt.step()
        except NumericError as exc:
            raise NumericError(f"training aborted at step {step}: {exc}") from exc
        trace.append((step, recon.item(), disc_val, total.item()))
    return model, trace


def write_trace(trace: list[tuple[int, float, float, float]], path) -> None:
    """Emit the loss trace as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for step, recon, disc, total in trace:
            writer.writerow([step, f"{recon:.10g}", f"{disc:.10g}", f"{total:.10g}"])


def save_checkpoint(model: Model, path) -> None:
    """Write the model as a DDCK checkpoint (bit-exact round trip)."""
    save_model(model, path)


def load_checkpoint(path) -> Model:
    """Load a DDCK checkpoint, validating structure against its spec."""
    return load_model(path)
