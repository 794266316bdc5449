"""Episodic meta-training loop.

Each meta-episode draws a task shape ``(k, n)`` uniformly from the configured
ranges, samples one episode and takes ``epochs_per_episode`` Adam steps on
that episode's query loss.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import atomic_write_text
from .datapipe import AugmentationConfig, ImageStore
from .episodic import InsufficientClassesError, InsufficientImagesError
from .episodic import DISTANCES, episode_loss, sample_episode

log = logging.getLogger(__name__)

LOG_FIELDS = ("episode", "epoch", "loss", "k", "n", "seconds")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    meta_episodes: int = 200
    epochs_per_episode: int = 40
    learning_rate: float = 0.002
    dropout_rate: float = 0.3
    k_range: tuple[int, int] = (5, 10)
    n_range: tuple[int, int] = (1, 15)
    query_count: int = 5
    seed: int = 0
    augment: bool = True
    grad_clip: float | None = None
    metric: str = "sqeuclidean"
    normalize_embeddings: bool = False

    def __post_init__(self):
        self.k_range = tuple(int(v) for v in self.k_range)
        self.n_range = tuple(int(v) for v in self.n_range)
        for name in ("meta_episodes", "epochs_per_episode", "query_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        for name in ("k_range", "n_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be an ordered pair of positive integers")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.metric not in DISTANCES:
            raise ValueError(f"unknown metric {self.metric!r}, expected one of {sorted(DISTANCES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_range"] = list(self.k_range)
        d["n_range"] = list(self.n_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LogEntry:
    episode: int
    epoch: int
    loss: float
    k: int
    n: int
    seconds: float


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)

    def losses(self) -> list[float]:
        return [e.loss for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for e in self.entries:
            writer.writerow([e.episode, e.epoch, repr(e.loss), e.k, e.n, f"{e.seconds:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([LogEntry(int(r["episode"]), int(r["epoch"]), float(r["loss"]),
                             int(r["k"]), int(r["n"]), float(r["seconds"])) for r in rows])


@dataclass
class TrainResult:
    model: nn.Module
    log: TrainingLog
    optimizer_state: dict


def set_dropout(model: nn.Module, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.p = rate


def check_feasible(dataset: Mapping[Hashable, Sequence], config: TrainingConfig) -> None:
    k_max = config.k_range[1]
    need = config.n_range[1] + config.query_count
    if len(dataset) < k_max:
        raise InsufficientClassesError(
            f"k_range upper bound {k_max} exceeds the {len(dataset)} classes available")
    enough = sum(1 for items in dataset.values() if len(items) >= need)
    if enough < k_max:
        raise InsufficientImagesError(
            f"need {k_max} classes with >= {need} images (max shot + queries), have {enough}")


def make_optimizer(model: nn.Module, lr: float, state: dict | None = None):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if state:
        opt.load_state_dict(state)
    return opt


def meta_train(model: nn.Module, dataset: Mapping[Hashable, Sequence], config: TrainingConfig,
               store: ImageStore | None = None, augmentation: AugmentationConfig | None = None,
               optimizer_state: dict | None = None,
               callback: Callable[[LogEntry], None] | None = None) -> TrainResult:
    """Meta-train ``model`` on ``dataset`` (label -> image paths or tensors).

    Items that are tensors are used as-is; anything else is treated as an
    image path and loaded through ``store``. Augmentation, when enabled, is
    drawn once per meta-episode and shared by its optimization steps.
    """
    check_feasible(dataset, config)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    store = store or ImageStore(getattr(getattr(model, "config", None), "input_size", 100))
    augmentation = augmentation or AugmentationConfig()
    set_dropout(model, config.dropout_rate)
    optimizer = make_optimizer(model, config.learning_rate, optimizer_state)
    params = [p for p in model.parameters() if p.requires_grad]
    train_log = TrainingLog()

    for ep in range(config.meta_episodes):
        k = int(rng.integers(config.k_range[0], config.k_range[1] + 1))
        n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
        episode = sample_episode(dataset, k, n, config.query_count, rng)
        items = [i for label in episode.labels for i in episode.support[label]]
        items += [i for i, _ in episode.query]
        if isinstance(items[0], torch.Tensor):
            images = torch.stack(items)
        elif config.augment:
            images = store.augmented_batch(items, augmentation, rng)
        else:
            images = store.batch(items)

        def fetch(batch_items, images=images):
            # episode_loss requests support-then-query, the order used above
            return images

        for epoch in range(config.epochs_per_episode):
            start = time.perf_counter()
            model.train()
            optimizer.zero_grad()
            loss, _ = episode_loss(episode, model, fetch, config.metric,
                                   config.normalize_embeddings)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at episode {ep} epoch {epoch} (k={k}, n={n}); "
                    "try a lower learning rate or grad_clip")
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            entry = LogEntry(ep, epoch, value, k, n, time.perf_counter() - start)
            train_log.append(entry)
            if callback is not None:
                callback(entry)
        log.debug("episode %d k=%d n=%d loss=%.4f", ep, k, n, train_log.entries[-1].loss)

    model.eval()
    return TrainResult(model, train_log, optimizer.state_dict())


def load_run_config(path) -> tuple[dict, TrainingConfig]:
    """Read a run config file: ``{"backbone": {...}, "training": {...}}``.

    The backbone section may be inline fields or ``{"path": "<config file>"}``.
    """
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    unknown = set(data) - {"backbone", "backbone_name", "training", "augmentation"}
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}")
    backbone = data.get("backbone", {})
    if "path" in backbone:
        ref = Path(backbone["path"])
        if not ref.is_absolute():
            ref = path.parent / ref
        backbone = json.loads(ref.read_text(encoding="utf-8"))
    return {"name": data.get("backbone_name", "lpn"), "config": backbone,
            "augmentation": data.get("augmentation")}, TrainingConfig.from_dict(
                data.get("training", {}))

