"""Nested-support few-shot evaluation, per-class metrics, paired t-tests.

Each testing assignment draws five support images per class. The 1-shot set
is the first of them, the 3-shot set the first three and the 5-shot set all
five, so larger shots only ever add support images. All other images of the
class form the query pool.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
import torch
from scipy import special

from .checkpoint import atomic_write_text
from .episodic import compute_prototypes, query_log_probs

SHOTS = (1, 3, 5)
DEFAULT_ASSIGNMENTS = 10
ALPHA = 0.05
OVERALL = "ALL"

Embedder = Callable[[Sequence], torch.Tensor]


class EvaluationError(ValueError):
    pass


@dataclass
class NestedSupports:
    supports: dict[Hashable, list]
    query_pool: list[tuple[object, Hashable]]

    @property
    def labels(self) -> list:
        return list(self.supports)

    def shot(self, n: int) -> dict[Hashable, list]:
        if n > min(len(v) for v in self.supports.values()):
            raise EvaluationError(f"only {min(len(v) for v in self.supports.values())} "
                                  f"supports per class, {n}-shot requested")
        return {label: items[:n] for label, items in self.supports.items()}


def build_nested_supports(dataset: Mapping[Hashable, Sequence], seed=None,
                          max_shot: int = 5) -> NestedSupports:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    supports, pool = {}, []
    for label in sorted(dataset, key=str):
        items = list(dataset[label])
        if len(items) < max_shot + 1:
            raise EvaluationError(
                f"class {label!r} has {len(items)} images, needs >= {max_shot + 1}")
        order = rng.permutation(len(items))
        supports[label] = [items[i] for i in order[:max_shot]]
        pool.extend((items[i], label) for i in sorted(order[max_shot:]))
    if not supports:
        raise EvaluationError("empty test dataset")
    return NestedSupports(supports, pool)


@dataclass
class AssignmentResult:
    labels: list
    tp: dict
    fp: dict
    fn: dict
    total: dict
    predictions: list = field(default_factory=list)

    @property
    def correct(self) -> int:
        return sum(self.tp.values())

    @property
    def n_queries(self) -> int:
        return sum(self.total.values())

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_queries if self.n_queries else 0.0


def evaluate_assignment(embed: Embedder, supports: NestedSupports, shot: int,
                        query_pool: Sequence[tuple[object, Hashable]] | None = None,
                        metric: str = "sqeuclidean") -> AssignmentResult:
    """Classify every pool query against prototypes built from ``shot`` supports.

    ``embed`` maps a list of dataset items to a ``(len, D)`` tensor.
    """
    if shot not in SHOTS:
        raise EvaluationError(f"shot must be one of {SHOTS}, got {shot}")
    query_pool = supports.query_pool if query_pool is None else query_pool
    chosen = supports.shot(shot)
    labels = list(chosen)
    protos = compute_prototypes({label: embed(items) for label, items in chosen.items()})
    q_emb = embed([item for item, _ in query_pool])
    logp = query_log_probs(q_emb, protos, metric)
    pred_idx = torch.argmax(logp, dim=1).tolist()  # first max wins ties
    tp = dict.fromkeys(labels, 0)
    fp = dict.fromkeys(labels, 0)
    fn = dict.fromkeys(labels, 0)
    total = dict.fromkeys(labels, 0)
    predictions = []
    for (_, truth), idx in zip(query_pool, pred_idx):
        pred = labels[idx]
        predictions.append(pred)
        total[truth] += 1
        if pred == truth:
            tp[truth] += 1
        else:
            fp[pred] += 1
            fn[truth] += 1
    return AssignmentResult(labels, tp, fp, fn, total, predictions)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n: int
    undefined: int = 0


def summarize(values: Sequence[float], undefined: int = 0) -> MetricSummary:
    """Mean and sample (n-1) standard deviation, exactly invariant to order."""
    n = len(values)
    if n == 0:
        raise EvaluationError("no values to summarize")
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return MetricSummary(mean, std, n, undefined)


def per_class_metrics(result: AssignmentResult) -> dict:
    """``{label: {"accuracy", "recall", "precision", "precision_undefined"}}``.

    Per-class accuracy is the fraction of that class's queries classified
    correctly, which coincides with recall.
    """
    out = {}
    for label in result.labels:
        recall, _ = _ratio(result.tp[label], result.tp[label] + result.fn[label])
        precision, undefined = _ratio(result.tp[label], result.tp[label] + result.fp[label])
        accuracy, _ = _ratio(result.tp[label], result.total[label])
        out[label] = {"accuracy": accuracy, "recall": recall, "precision": precision,
                      "precision_undefined": undefined}
    return out


def aggregate(assignments: Sequence[AssignmentResult]) -> dict:
    """Per-class and overall metric summaries across assignments.

    Returns ``{class: {metric: MetricSummary}}`` plus an ``OVERALL`` entry
    holding overall accuracy.
    """
    if not assignments:
        raise EvaluationError("no assignments to aggregate")
    labels = assignments[0].labels
    per = [per_class_metrics(a) for a in assignments]
    report = {}
    for label in labels:
        report[label] = {
            m: summarize([p[label][m] for p in per],
                         sum(p[label]["precision_undefined"] for p in per)
                         if m == "precision" else 0)
            for m in ("accuracy", "recall", "precision")
        }
    report[OVERALL] = {"accuracy": summarize([a.accuracy for a in assignments])}
    return report


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_difference: float
    significant: bool
    degenerate: bool = False


def t_two_sided_p(t: float, df: int) -> float:
    """Two-tailed p-value of Student's t via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(special.betainc(df / 2.0, 0.5, x))


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("paired samples must be 1-d and of equal length")
    n = a.size
    if n < 2:
        raise EvaluationError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, 0.0, False)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, mean, True, True)
    t = mean / math.sqrt(var / n)
    p = t_two_sided_p(t, n - 1)
    return TTestResult(t, p, n - 1, mean, p < alpha)


class CachedEmbedder:
    """Embed dataset items with a model in inference mode, memoizing per item."""

    def __init__(self, model: torch.nn.Module, fetch: Callable[[Sequence], torch.Tensor],
                 batch_size: int = 64):
        self.model = model
        self.fetch = fetch
        self.batch_size = batch_size
        self._cache: dict = {}

    def __call__(self, items: Sequence) -> torch.Tensor:
        missing = [i for i in dict.fromkeys(items) if i not in self._cache]
        if missing:
            was_training = self.model.training
            self.model.eval()
            with torch.no_grad():
                for start in range(0, len(missing), self.batch_size):
                    chunk = missing[start:start + self.batch_size]
                    out = self.model(self.fetch(chunk))
                    for item, vec in zip(chunk, out):
                        self._cache[item] = vec
            self.model.train(was_training)
        return torch.stack([self._cache[i] for i in items])


@dataclass
class EvalReport:
    """Evaluation of one or more models over repeated nested-support assignments."""

    assignments: int
    shots: tuple[int, ...]
    summaries: dict = field(default_factory=dict)   # (model, shot) -> aggregate()
    raw: dict = field(default_factory=dict)         # (model, shot) -> [AssignmentResult]
    significance: list = field(default_factory=list)  # (model_a, model_b, shot, TTestResult)

    def accuracies(self, model: str, shot: int) -> list[float]:
        return [r.accuracy for r in self.raw[(model, shot)]]

    def mean_accuracy(self, model: str, shot: int) -> float:
        return self.summaries[(model, shot)][OVERALL]["accuracy"].mean

    def models(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.summaries))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "shot", "class", "metric", "mean", "std", "assignments", "undefined"])
        for (model, shot), summary in self.summaries.items():
            for label, metrics in summary.items():
                for metric, s in metrics.items():
                    w.writerow([model, shot, label, metric, repr(s.mean), repr(s.std), s.n,
                                s.undefined])
        return buf.getvalue()

    def table_csv(self) -> str:
        """Wide per-class accuracy table in percent, cells formatted ``mean ± std``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        labels = None
        for (model, shot), summary in self.summaries.items():
            if labels is None:
                labels = [k for k in summary if k != OVERALL]
                w.writerow(["model", "shot", *labels, OVERALL])
            cells = [f"{100 * summary[k]['accuracy'].mean:.2f} ± "
                     f"{100 * summary[k]['accuracy'].std:.2f}" for k in [*labels, OVERALL]]
            w.writerow([model, f"{shot}-shot", *cells])
        return buf.getvalue()

    def significance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_a", "model_b", "shot", "t", "p", "df", "mean_difference",
                    "significant", "degenerate"])
        for a, b, shot, r in self.significance:
            w.writerow([a, b, shot, repr(r.t), repr(r.p), r.df, repr(r.mean_difference),
                        int(r.significant), int(r.degenerate)])
        return buf.getvalue()

    def series_csv(self) -> str:
        """Per-assignment recall and precision per class, for external plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "shot", "assignment", "class", "recall", "precision"])
        for (model, shot), results in self.raw.items():
            for i, r in enumerate(results):
                for label, m in per_class_metrics(r).items():
                    w.writerow([model, shot, i, label, repr(m["recall"]), repr(m["precision"])])
        return buf.getvalue()

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {
            "metrics": (out_dir / "metrics.csv", self.metrics_csv()),
            "table": (out_dir / "accuracy_table.csv", self.table_csv()),
            "significance": (out_dir / "significance.csv", self.significance_csv()),
            "series": (out_dir / "recall_precision_series.csv", self.series_csv()),
        }
        for path, text in files.values():
            atomic_write_text(path, text)
        return {k: v[0] for k, v in files.items()}


def run_protocol(embedders: Mapping[str, Embedder], dataset: Mapping[Hashable, Sequence],
                 assignments: int = DEFAULT_ASSIGNMENTS, shots: Sequence[int] = SHOTS,
                 seed: int = 0, metric: str = "sqeuclidean") -> EvalReport:
    """Evaluate every model on the same ``assignments`` nested-support draws.

    Assignment ``i`` uses seed ``(seed, i)`` so all models and shots see the
    same supports and query pool, which is what makes the t-tests paired.
    """
    if assignments < 2:
        raise EvaluationError("need at least 2 assignments for a standard deviation")
    shots = tuple(shots)
    draws = [build_nested_supports(dataset, np.random.default_rng([seed, i]), max(shots))
             for i in range(assignments)]
    report = EvalReport(assignments, shots)
    for name, embed in embedders.items():
        for shot in shots:
            results = [evaluate_assignment(embed, d, shot, metric=metric) for d in draws]
            report.raw[(name, shot)] = results
            report.summaries[(name, shot)] = aggregate(results)
    for a, b in itertools.combinations(list(embedders), 2):
        for shot in shots:
            report.significance.append(
                (a, b, shot, paired_t_test(report.accuracies(a, shot), report.accuracies(b, shot))))
    return report
