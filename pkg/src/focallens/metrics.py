"""Retrieval metrics, rank correlation, and the evaluation protocols built on them.

Rankings everywhere sort by descending similarity and break ties by ascending
gallery index, so every score is bit-reproducible.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

LR_SWEEP = (1e-2, 7.5e-3, 5e-3, 2.5e-3, 1e-4)
PROBE_EPOCHS = 100


class NoPositives(ValueError):
    """A query has no relevant item in its gallery."""


class ConstantInput(ValueError):
    """Rank correlation is undefined for a constant vector."""


def thread_count() -> int:
    raw = os.environ.get("FOCAL_LENS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"FOCAL_LENS_THREADS must be an integer, got {raw!r}") from None


def _chunked_map(fn: Callable[[np.ndarray], np.ndarray], n: int, threads: int) -> np.ndarray:
    """Apply ``fn`` to index chunks, concatenating results in index order."""
    chunks = np.array_split(np.arange(n), max(1, min(threads, n)))
    if threads <= 1 or len(chunks) == 1:
        return np.concatenate([fn(c) for c in chunks])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, chunks)))


def _encode_labels(*label_lists: Sequence[Hashable]) -> list[np.ndarray]:
    table: dict = {}
    out = []
    for labels in label_lists:
        out.append(np.array([table.setdefault(_hashable(l), len(table)) for l in labels]))
    return out


def _hashable(label):
    if isinstance(label, (list, np.ndarray)):
        return tuple(_hashable(x) for x in label)
    return label


# ---------------------------------------------------------------------------
# ranking metrics


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = rel.sum()
    if hits == 0:
        raise NoPositives("average precision needs at least one relevant item")
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float(precision[rel].sum() / hits)


@dataclass
class RetrievalTask:
    """Queries ranked against a gallery by cosine similarity.

    With ``leave_one_out`` the query and gallery are the same pool and each
    query's own entry is removed from its gallery.
    """

    query_embeddings: np.ndarray
    query_labels: Sequence
    gallery_embeddings: np.ndarray
    gallery_labels: Sequence
    condition: str = ""
    metric: str = "map"
    leave_one_out: bool = False

    def __post_init__(self):
        self.query_embeddings = np.atleast_2d(np.asarray(self.query_embeddings, dtype=np.float64))
        self.gallery_embeddings = np.atleast_2d(
            np.asarray(self.gallery_embeddings, dtype=np.float64)
        )
        if len(self.query_labels) == 0 or len(self.gallery_labels) == 0:
            raise ValueError("retrieval task needs nonempty query and gallery labels")
        if self.query_embeddings.shape[1] != self.gallery_embeddings.shape[1]:
            raise ValueError(
                f"embedding dims differ: {self.query_embeddings.shape[1]} vs "
                f"{self.gallery_embeddings.shape[1]}"
            )
        if len(self.query_labels) != len(self.query_embeddings):
            raise ValueError("one label per query embedding required")
        if len(self.gallery_labels) != len(self.gallery_embeddings):
            raise ValueError("one label per gallery embedding required")
        if self.leave_one_out and len(self.query_labels) != len(self.gallery_labels):
            raise ValueError("leave-one-out needs identical query and gallery pools")
        if self.metric not in ("map", "scaled_map", "recall_at_k"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @classmethod
    def from_pool(cls, embeddings, labels, condition: str = "", metric: str = "map") -> "RetrievalTask":
        return cls(embeddings, labels, embeddings, labels, condition, metric, leave_one_out=True)

    @property
    def gallery_size(self) -> int:
        n = len(self.gallery_labels)
        return n - 1 if self.leave_one_out else n

    def similarities(self) -> np.ndarray:
        return _cosine(self.query_embeddings, self.gallery_embeddings)

    def ranked_relevance(self, rows: Optional[np.ndarray] = None, sims=None) -> np.ndarray:
        """Boolean relevance of each query's gallery in rank order, (n_rows, gallery_size)."""
        if sims is None:
            sims = self.similarities()
        rows = np.arange(len(self.query_labels)) if rows is None else rows
        ql, gl = _encode_labels(self.query_labels, self.gallery_labels)
        s = -sims[rows]
        if self.leave_one_out:
            s[np.arange(rows.size), rows] = np.inf
        order = np.argsort(s, axis=1, kind="stable")
        if self.leave_one_out:
            order = order[:, :-1]
        return gl[order] == ql[rows][:, None]


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = np.linalg.norm(a, axis=1, keepdims=True)
    bn = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(an == 0) or np.any(bn == 0):
        raise ValueError("cosine similarity undefined for zero embeddings")
    return (a / an) @ (b / bn).T


def per_query_ap(task: RetrievalTask, threads: Optional[int] = None) -> np.ndarray:
    """AP of every query; NaN marks a query without positives."""
    sims = task.similarities()

    def chunk(rows):
        rel = task.ranked_relevance(rows, sims)
        hits = rel.sum(axis=1)
        precision = np.cumsum(rel, axis=1) / np.arange(1, rel.shape[1] + 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ap = (precision * rel).sum(axis=1) / hits
        ap[hits == 0] = np.nan
        return ap

    return _chunked_map(chunk, len(task.query_labels), threads or thread_count())


def mean_ap(task: RetrievalTask, threads: Optional[int] = None) -> float:
    ap = per_query_ap(task, threads)
    if np.all(np.isnan(ap)):
        raise NoPositives("no query has a positive in its gallery")
    return float(np.mean(ap[~np.isnan(ap)]))


def random_baseline_map(labels: Sequence, n_shuffles: int = 100, seed: int = 0) -> float:
    """mAP of uniformly random rankings in the leave-one-out protocol."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    (codes,) = _encode_labels(labels)
    scores = []
    for _ in range(n_shuffles):
        s = rng.random((n, n))
        s[np.arange(n), np.arange(n)] = np.inf
        order = np.argsort(s, axis=1, kind="stable")[:, :-1]
        rel = codes[order] == codes[:, None]
        hits = rel.sum(axis=1)
        keep = hits > 0
        precision = np.cumsum(rel, axis=1) / np.arange(1, n)
        scores.append(((precision * rel).sum(axis=1)[keep] / hits[keep]).mean())
    return float(np.mean(scores))


def scaled_map(p: float, r: float) -> float:
    """Rescale so chance level maps to 0 and perfect retrieval to 1."""
    if r >= 1:
        raise ValueError(f"random-guess mAP must be < 1, got {r}")
    return (p - r) / (1 - r)


def recall_at_k(task: RetrievalTask, k: int, threads: Optional[int] = None) -> float:
    """Share of queries with a positive among their top ``k``; queries without positives are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > task.gallery_size:
        raise ValueError(f"k={k} exceeds gallery size {task.gallery_size}")
    sims = task.similarities()

    def chunk(rows):
        rel = task.ranked_relevance(rows, sims)
        out = rel[:, :k].any(axis=1).astype(np.float64)
        out[~rel.any(axis=1)] = np.nan
        return out

    hits = _chunked_map(chunk, len(task.query_labels), threads or thread_count())
    if np.all(np.isnan(hits)):
        raise NoPositives("no query has a positive in its gallery")
    return float(np.mean(hits[~np.isnan(hits)]))


# ---------------------------------------------------------------------------
# rank correlation


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    boundaries = np.flatnonzero(np.diff(sorted_v)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [v.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman_rank_correlation(model_sims: Sequence[float], truth_sims: Sequence[float]) -> float:
    a, b = np.asarray(model_sims, dtype=np.float64), np.asarray(truth_sims, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman: need two equal-length vectors of length >= 2")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        raise ConstantInput("spearman: rank correlation undefined for constant input")
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def continuous_color_correlation(
    embeddings: np.ndarray, rgb: np.ndarray, threads: Optional[int] = None
) -> tuple[float, list[int]]:
    """Mean per-query Spearman rho between cosine similarity and negative RGB distance.

    Each query is compared to every other item. Returns the mean over
    queries and the indices of skipped (constant-input) queries.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    n = len(embeddings)
    if n < 3 or rgb.shape != (n, 3):
        raise ValueError("need >= 3 items with one RGB triple each")
    sims = _cosine(embeddings, embeddings)
    dist = np.linalg.norm(rgb[:, None, :] - rgb[None, :, :], axis=-1)

    def chunk(rows):
        out = np.empty(rows.size)
        for j, i in enumerate(rows):
            others = np.arange(n) != i
            try:
                out[j] = spearman_rank_correlation(sims[i, others], -dist[i, others])
            except ConstantInput:
                out[j] = np.nan
        return out

    rho = _chunked_map(chunk, n, threads or thread_count())
    skipped = [int(i) for i in np.flatnonzero(np.isnan(rho))]
    if len(skipped) == n:
        raise ConstantInput("every query had constant similarities")
    return float(np.mean(rho[~np.isnan(rho)])), skipped


# ---------------------------------------------------------------------------
# linear probing


def k_shot_split(labels: Sequence, k_shot: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of ``k_shot`` training items per class and the rest as test."""
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    labels = [_hashable(l) for l in labels]
    rng = np.random.default_rng(seed)
    classes = list(dict.fromkeys(labels))
    train = []
    for c in classes:
        members = np.flatnonzero([l == c for l in labels])
        if members.size < k_shot + 1:
            raise ValueError(
                f"class {c!r} has {members.size} items; k_shot={k_shot} needs at least {k_shot + 1}"
            )
        train.extend(rng.choice(members, size=k_shot, replace=False).tolist())
    train_idx = np.array(sorted(train))
    test_idx = np.setdiff1d(np.arange(len(labels)), train_idx)
    return train_idx, test_idx


def linear_probe_sweep(
    features: np.ndarray,
    labels: Sequence,
    k_shot: int,
    seed: int = 0,
    learning_rates: Sequence[float] = LR_SWEEP,
    epochs: int = PROBE_EPOCHS,
) -> dict[float, float]:
    """Test accuracy of a k-shot softmax probe at each learning rate."""
    from .estimators import LinearProbeClassifier

    features = np.asarray(features, dtype=np.float64)
    train_idx, test_idx = k_shot_split(labels, k_shot, seed)
    y = np.array([_hashable(l) for l in labels], dtype=object)
    (codes,) = _encode_labels(list(y))
    results = {}
    for lr in learning_rates:
        clf = LinearProbeClassifier(learning_rate=lr, epochs=epochs, random_state=seed)
        clf.fit(features[train_idx], codes[train_idx])
        results[lr] = float(clf.score(features[test_idx], codes[test_idx]))
    return results


def linear_probe(
    features: np.ndarray,
    labels: Sequence,
    k_shot: int,
    seed: int = 0,
    learning_rates: Sequence[float] = LR_SWEEP,
    epochs: int = PROBE_EPOCHS,
) -> float:
    """Best test accuracy over the learning-rate sweep."""
    return max(linear_probe_sweep(features, labels, k_shot, seed, learning_rates, epochs).values())


# ---------------------------------------------------------------------------
# reports


REPORT_VERSION = 1


@dataclass
class MetricReport:
    scores: dict = field(default_factory=dict)
    averages: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    continuous: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"report is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ValueError("report must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(raw) - known)
        if extra:
            raise ValueError(f"unknown report field {extra[0]!r}")
        for name, typ in (("scores", dict), ("averages", dict), ("counts", dict), ("version", int)):
            if name not in raw:
                raise ValueError(f"report is missing field {name!r}")
            if not isinstance(raw[name], typ):
                raise ValueError(f"report field {name!r} must be {typ.__name__}")
        if raw["version"] != REPORT_VERSION:
            raise ValueError(f"report field 'version': unsupported {raw['version']}")
        for group, scores in raw["scores"].items():
            if not isinstance(scores, dict) or not all(
                isinstance(v, (int, float)) for v in scores.values()
            ):
                raise ValueError(f"report field 'scores.{group}' must map conditions to numbers")
        return cls(**raw)


Embedder = Callable[[np.ndarray, str], np.ndarray]


def evaluate_colorshape(
    embed: Embedder,
    specs: Sequence,
    images: np.ndarray,
    conditions: Sequence[str] = ("color", "shape", "both"),
    neutral_instruction: Optional[str] = None,
    threads: Optional[int] = None,
) -> MetricReport:
    """Leave-one-out mAP per condition for conditioned and neutral-instruction embeddings.

    ``embed(images, instruction_text)`` returns one embedding per image.
    """
    from .data import INSTRUCTIONS, NEUTRAL_INSTRUCTION

    neutral_instruction = neutral_instruction or NEUTRAL_INSTRUCTION
    for c in conditions:
        if c not in ("color", "shape", "both"):
            raise ValueError(f"unknown retrieval condition {c!r}")
    if not conditions:
        raise ValueError("need at least one condition")
    control = embed(images, neutral_instruction)
    report = MetricReport(scores={"conditional": {}, "control": {}, "random": {}, "scaled": {}})
    for c in conditions:
        labels = [s.label(c) for s in specs]
        cond_task = RetrievalTask.from_pool(embed(images, INSTRUCTIONS[c]), labels, c)
        ctrl_task = RetrievalTask.from_pool(control, labels, c)
        ap_cond = per_query_ap(cond_task, threads)
        ap_ctrl = per_query_ap(ctrl_task, threads)
        skipped = [int(i) for i in np.flatnonzero(np.isnan(ap_cond))]
        report.scores["conditional"][c] = float(np.nanmean(ap_cond))
        report.scores["control"][c] = float(np.nanmean(ap_ctrl))
        r = random_baseline_map(labels)
        report.scores["random"][c] = r
        report.scores["scaled"][c] = scaled_map(report.scores["conditional"][c], r)
        report.skipped[c] = skipped
        report.counts[c] = {"queries": len(labels), "skipped": len(skipped)}
    for group in ("conditional", "control"):
        vals = [report.scores[group][c] for c in conditions]
        report.averages[group] = float(sum(vals) / len(vals))
    return report


def evaluate_continuous(
    embed: Embedder, specs: Sequence, images: np.ndarray, threads: Optional[int] = None
) -> dict:
    from .data import INSTRUCTIONS, NEUTRAL_INSTRUCTION

    rgb = np.array([s.rgb for s in specs])
    cond, skipped_c = continuous_color_correlation(embed(images, INSTRUCTIONS["continuous"]), rgb, threads)
    ctrl, skipped_n = continuous_color_correlation(embed(images, NEUTRAL_INSTRUCTION), rgb, threads)
    return {
        "conditional": cond,
        "control": ctrl,
        "queries": len(specs),
        "skipped_conditional": skipped_c,
        "skipped_control": skipped_n,
    }


def evaluate_probe(
    embed: Embedder,
    specs: Sequence,
    images: np.ndarray,
    ks: Sequence[int] = (5, 10, 15),
    seed: int = 0,
) -> dict:
    """k-shot probe accuracy on (color, shape) labels, "both"-conditioned vs neutral features."""
    from .data import INSTRUCTIONS, NEUTRAL_INSTRUCTION

    labels = [s.label("both") for s in specs]
    feats = {
        "conditional": embed(images, INSTRUCTIONS["both"]),
        "control": embed(images, NEUTRAL_INSTRUCTION),
    }
    out = {"k": list(ks)}
    for name, f in feats.items():
        out[name] = [linear_probe(f, labels, k, seed) for k in ks]
    return out
