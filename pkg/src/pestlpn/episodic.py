"""Prototypical-network core: episodes, prototypes, distance softmax, loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence
from urllib.parse import quote, unquote

import numpy as np
import torch
import torch.nn.functional as F

PROTOSET_MAGIC = "protoset"
PROTOSET_VERSION = "v1"


class EpisodeError(ValueError):
    """Base class for episode construction failures."""


class InsufficientClassesError(EpisodeError):
    pass


class InsufficientImagesError(EpisodeError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass
class Episode:
    """A k-way n-shot task.

    ``support`` maps each label to its n support items and ``query`` lists
    ``(item, label)`` pairs. Items are whatever the dataset stores (paths,
    indices or image tensors).
    """

    way: int
    shot: int
    query_count: int
    support: dict[Hashable, list]
    query: list[tuple[object, Hashable]]

    @property
    def labels(self) -> list:
        return list(self.support)

    def query_labels(self) -> list:
        return [label for _, label in self.query]


@dataclass
class PrototypeSet:
    labels: list
    vectors: torch.Tensor  # (k, dim)

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] != len(self.labels):
            raise DimensionMismatchError(
                f"{len(self.labels)} labels but vectors of shape {tuple(self.vectors.shape)}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.labels)

    def save(self, path) -> None:
        """Write the ``protoset v1 <k> <dim>`` text format (17 significant digits)."""
        vecs = self.vectors.detach().to(torch.float64).cpu().numpy()
        lines = [f"{PROTOSET_MAGIC} {PROTOSET_VERSION} {len(self.labels)} {self.dim}"]
        for label, row in zip(self.labels, vecs):
            values = " ".join(format(float(v), ".17g") for v in row)
            lines.append(f"{quote(str(label), safe='')} {values}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PrototypeSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty protoset file")
        header = lines[0].split()
        if len(header) != 4 or header[0] != PROTOSET_MAGIC:
            raise ValueError(f"{path}: not a protoset file")
        if header[1] != PROTOSET_VERSION:
            raise ValueError(f"{path}: unsupported protoset version {header[1]}")
        k, dim = int(header[2]), int(header[3])
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != k:
            raise ValueError(f"{path}: header announces {k} prototypes, found {len(body)}")
        labels, rows = [], []
        for lineno, line in enumerate(body, start=2):
            parts = line.split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values")
            labels.append(unquote(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        vectors = torch.tensor(rows, dtype=torch.float64).reshape(k, dim)
        return cls(labels, vectors)


@dataclass
class ClassDistribution:
    labels: list
    probabilities: torch.Tensor  # (k,)
    log_probabilities: torch.Tensor | None = field(default=None, repr=False)

    def argmax(self) -> int:
        # torch.argmax returns the first maximal index: lowest label index wins ties
        return int(torch.argmax(self.probabilities))

    def top_label(self):
        return self.labels[self.argmax()]

    def max_probability(self) -> float:
        return float(self.probabilities.max())

    def as_dict(self) -> dict:
        return {label: float(p) for label, p in zip(self.labels, self.probabilities)}


def compute_prototypes(embeddings: Mapping[Hashable, Sequence | torch.Tensor]) -> PrototypeSet:
    """Mean embedding per class, in the mapping's label order."""
    labels, protos, dim = [], [], None
    for label, vectors in embeddings.items():
        if isinstance(vectors, torch.Tensor):
            stacked = vectors if vectors.dim() == 2 else vectors.reshape(-1, vectors.shape[-1])
        else:
            if len(vectors) == 0:
                raise EpisodeError(f"class {label!r} has no embeddings")
            stacked = torch.stack([torch.as_tensor(v) for v in vectors])
        if stacked.shape[0] == 0:
            raise EpisodeError(f"class {label!r} has no embeddings")
        if dim is None:
            dim = stacked.shape[1]
        elif stacked.shape[1] != dim:
            raise DimensionMismatchError(
                f"class {label!r} embeddings have dim {stacked.shape[1]}, expected {dim}")
        labels.append(label)
        # summing sorted columns makes the mean independent of support order
        protos.append(stacked.sort(dim=0).values.sum(dim=0) / stacked.shape[0])
    if not labels:
        raise EpisodeError("no classes given")
    return PrototypeSet(labels, torch.stack(protos))


def squared_distances(queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Pairwise squared Euclidean distances, ``(Q, D) x (k, D) -> (Q, k)``."""
    if queries.shape[-1] != prototypes.shape[-1]:
        raise DimensionMismatchError(
            f"query dim {queries.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    diff = queries.unsqueeze(-2) - prototypes.unsqueeze(0)
    return (diff * diff).sum(-1)


def cosine_distances(queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    if queries.shape[-1] != prototypes.shape[-1]:
        raise DimensionMismatchError(
            f"query dim {queries.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    q = F.normalize(queries, dim=-1)
    p = F.normalize(prototypes, dim=-1)
    return 1.0 - q @ p.T


DISTANCES: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "sqeuclidean": squared_distances,
    "cosine": cosine_distances,
}


def query_log_probs(queries: torch.Tensor, prototypes: PrototypeSet | torch.Tensor,
                    metric: str = "sqeuclidean") -> torch.Tensor:
    """Log-softmax over negative distances, ``(Q, k)``."""
    protos = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    if queries.dim() == 1:
        queries = queries.unsqueeze(0)
    protos = protos.to(queries.dtype)
    # log_softmax subtracts the max logit internally
    return torch.log_softmax(-DISTANCES[metric](queries, protos), dim=-1)


def classify_query(query: torch.Tensor, prototypes: PrototypeSet,
                   metric: str = "sqeuclidean") -> ClassDistribution:
    logp = query_log_probs(torch.as_tensor(query), prototypes, metric)[0]
    return ClassDistribution(list(prototypes.labels), logp.exp(), logp)


def classify_batch(queries: torch.Tensor, prototypes: PrototypeSet,
                   metric: str = "sqeuclidean") -> list[ClassDistribution]:
    logp = query_log_probs(queries, prototypes, metric)
    labels = list(prototypes.labels)
    return [ClassDistribution(labels, row.exp(), row) for row in logp]


def _default_fetch(items: Sequence) -> torch.Tensor:
    return torch.stack([torch.as_tensor(item) for item in items])


def episode_loss(episode: Episode, embed: Callable[[torch.Tensor], torch.Tensor],
                 fetch: Callable[[Sequence], torch.Tensor] | None = None,
                 metric: str = "sqeuclidean", normalize: bool = False):
    """Mean query cross-entropy under prototype classification.

    Support and query images go through ``embed`` in a single batch.
    Returns ``(loss, distributions)`` where the loss is a differentiable
    scalar tensor.
    """
    fetch = fetch or _default_fetch
    labels = episode.labels
    support_items = [item for label in labels for item in episode.support[label]]
    query_items = [item for item, _ in episode.query]
    images = fetch(support_items + query_items)
    emb = embed(images)
    if normalize:
        emb = F.normalize(emb, dim=-1)
    n_support = len(support_items)
    support_emb, query_emb = emb[:n_support], emb[n_support:]
    per_class, start = {}, 0
    for label in labels:
        count = len(episode.support[label])
        per_class[label] = support_emb[start:start + count]
        start += count
    protos = compute_prototypes(per_class)
    logp = query_log_probs(query_emb, protos, metric)
    index = {label: i for i, label in enumerate(labels)}
    targets = torch.tensor([index[label] for label in episode.query_labels()], dtype=torch.long)
    per_query = F.nll_loss(logp, targets, reduction="none")
    # mean around a detached pivot: exact when every query has the same loss
    pivot = per_query[0].detach()
    loss = pivot + (per_query - pivot).mean()
    dists = [ClassDistribution(labels, row.detach().exp(), row.detach()) for row in logp]
    return loss, dists


def sample_episode(dataset: Mapping[Hashable, Sequence], k: int, n: int, q: int,
                   seed: int | np.random.Generator | None = None) -> Episode:
    """Draw a k-way n-shot episode with q queries per class.

    Classes and per-class items are drawn uniformly without replacement, so
    support and query items never overlap within an episode. Labels are
    considered in sorted order before sampling, which makes the result a pure
    function of ``seed``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = sorted(dataset, key=str)
    if k < 1 or n < 1 or q < 0:
        raise EpisodeError(f"invalid episode shape k={k} n={n} q={q}")
    if len(labels) < k:
        raise InsufficientClassesError(f"need {k} classes, dataset has {len(labels)}")
    need = n + q
    eligible = [label for label in labels if len(dataset[label]) >= need]
    if len(eligible) < k:
        short = [label for label in labels if len(dataset[label]) < need]
        raise InsufficientImagesError(
            f"need {k} classes with >= {need} images, only {len(eligible)} qualify "
            f"(short: {short[:5]})")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=k, replace=False)]
    support, query = {}, []
    for label in chosen:
        items = dataset[label]
        picks = rng.permutation(len(items))[:need]
        support[label] = [items[i] for i in picks[:n]]
        query.extend((items[i], label) for i in picks[n:])
    return Episode(way=k, shot=n, query_count=q, support=support, query=query)


def uniform_loss(k: int) -> float:
    """Loss of an embedding that carries no class information."""
    return math.log(k)
