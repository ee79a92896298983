"""Teacher topic mining: weighted multimodal kernel k-means over records.

Text enters through l2-normalized bag-of-words vectors, the feature side
through the concatenated modality vectors; both views use a cosine kernel and
are fused additively.  Cluster geometry is turned into soft topic
distributions so that a record near two clusters gets probability mass on
both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, VideoRecord, bag_of_words
from .numerics import _softmax_val


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, defined as 0 whenever either vector is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def combined_kernel(
    bow_a: np.ndarray,
    vis_a: np.ndarray,
    bow_b: np.ndarray,
    vis_b: np.ndarray,
    w_text: float = 1.0,
    w_vis: float = 0.2,
) -> float:
    """Additive fusion of the text and feature cosine kernels."""
    return w_text * cosine(bow_a, bow_b) + w_vis * cosine(vis_a, vis_b)


def build_kernel_matrix(
    records: list[VideoRecord],
    vocabulary,
    stopwords,
    w_text: float = 1.0,
    w_vis: float = 0.2,
) -> np.ndarray:
    """Pairwise combined-kernel matrix over the given records."""
    stop = frozenset(stopwords)
    bows = np.stack([bag_of_words(r, vocabulary, stop)[0] for r in records])
    vis = np.stack([r.features() for r in records])
    vis_norms = np.linalg.norm(vis, axis=1)
    nonzero = vis_norms > 0
    vis_unit = np.zeros_like(vis)
    vis_unit[nonzero] = vis[nonzero] / vis_norms[nonzero, None]
    kernel = w_text * (bows @ bows.T) + w_vis * (vis_unit @ vis_unit.T)
    return (kernel + kernel.T) / 2.0


@dataclass
class TopicAssignment:
    """Result of one mining run: hard labels, soft teachers, and the final
    within-cluster distortion (with its per-sweep history)."""

    labels: np.ndarray
    teacher: np.ndarray
    objective: float
    k: int
    objective_history: list[float] = field(default_factory=list)


def _distances(kernel: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Squared kernel-space distance of every point to every cluster mean.

    d2(i, c) = K_ii - 2/|c| * sum_{j in c} K_ij + 1/|c|^2 * sum_{j,l in c} K_jl
    Empty clusters get +inf so they are never chosen.
    """
    n = kernel.shape[0]
    members = np.zeros((n, k))
    members[np.arange(n), labels] = 1.0
    sizes = members.sum(axis=0)
    point_to_cluster = kernel @ members
    cluster_self = np.einsum("nc,nm,mc->c", members, kernel, members)
    d2 = np.full((n, k), np.inf)
    occupied = sizes > 0
    d2[:, occupied] = (
        np.diag(kernel)[:, None]
        - 2.0 * point_to_cluster[:, occupied] / sizes[occupied]
        + cluster_self[occupied] / sizes[occupied] ** 2
    )
    return d2


def _objective(kernel: np.ndarray, labels: np.ndarray, k: int) -> float:
    d2 = _distances(kernel, labels, k)
    return float(d2[np.arange(len(labels)), labels].sum())


def kernel_kmeans(
    k: int,
    kernel: np.ndarray,
    restarts: int = 10,
    max_iters: int = 100,
    seed: int = 0,
    temperature: float = 1.0,
) -> TopicAssignment:
    """Lloyd iterations in kernel space, best of ``restarts`` random starts.

    Each restart initializes with uniform random labels, iterates reassignment
    to a label fixed point (or ``max_iters``), and reseeds any emptied cluster
    with the point farthest from its own center.  Restarts are ranked by final
    objective; ties go to the earliest restart.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    n = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("kernel matrix must be square")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    rng = np.random.default_rng(seed)

    best: tuple[float, np.ndarray, list[float]] | None = None
    for _ in range(restarts):
        labels = rng.integers(0, k, size=n)
        history: list[float] = []
        for _ in range(max_iters):
            d2 = _distances(kernel, labels, k)
            new_labels = np.argmin(d2, axis=1)
            for cluster in range(k):
                if not np.any(new_labels == cluster):
                    own = _distances(kernel, new_labels, k)
                    dist_to_own = own[np.arange(n), new_labels]
                    new_labels[int(np.argmax(dist_to_own))] = cluster
            history.append(_objective(kernel, new_labels, k))
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        objective = history[-1]
        if best is None or objective < best[0] - 1e-12:
            best = (objective, labels.copy(), history)

    objective, labels, history = best
    teacher = soft_assign(kernel, labels, k, temperature)
    return TopicAssignment(
        labels=labels, teacher=teacher, objective=objective, k=k, objective_history=history
    )


def soft_assign(
    kernel: np.ndarray, labels: np.ndarray, k: int, temperature: float = 1.0
) -> np.ndarray:
    """Soft topic distributions from hard cluster geometry.

    Each record gets softmax(-d2 / (T * dbar)) over clusters, where dbar is
    the mean squared distance of records to their own cluster.  The argmax
    always agrees with the hard label; if every record coincides with its
    center the distributions degenerate to one-hot.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    labels = np.asarray(labels)
    n = len(labels)
    d2 = _distances(kernel, labels, k)
    dbar = float(d2[np.arange(n), labels].mean())
    if dbar <= 0.0:
        teacher = np.zeros((n, k))
        teacher[np.arange(n), labels] = 1.0
        return teacher
    return _softmax_val(-d2 / (temperature * dbar), axis=-1)


def mine_topics(
    corpus: Corpus,
    k: int,
    w_text: float = 1.0,
    w_vis: float = 0.2,
    temperature: float = 1.0,
    restarts: int = 10,
    max_iters: int = 100,
    seed: int = 0,
) -> tuple[dict[str, np.ndarray], TopicAssignment]:
    """Mine teacher topics on the training split only."""
    train = corpus.split("train")
    if not train:
        raise ValueError("corpus has no training records to mine")
    kernel = build_kernel_matrix(train, corpus.vocabulary, corpus.stopwords, w_text, w_vis)
    assignment = kernel_kmeans(
        k, kernel, restarts=restarts, max_iters=max_iters, seed=seed, temperature=temperature
    )
    teachers = {r.id: assignment.teacher[i] for i, r in enumerate(train)}
    return teachers, assignment


def save_topics(
    path,
    teachers: dict[str, np.ndarray],
    k: int,
    w_text: float,
    w_vis: float,
    temperature: float,
    seed: int,
    objective: float,
) -> None:
    header = {
        "k": k,
        "w_text": w_text,
        "w_vis": w_vis,
        "temperature": temperature,
        "seed": seed,
        "objective": objective,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record_id in teachers:
            line = {"id": record_id, "topic": np.asarray(teachers[record_id]).tolist()}
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def load_topics(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty topics file")
    try:
        header = json.loads(lines[0])
        k = int(header["k"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path} line 1: bad topics header ({exc})") from None
    teachers = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            vec = np.asarray(obj["topic"], dtype=np.float64)
            record_id = obj["id"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path} line {lineno}: malformed topic line ({exc})") from None
        if vec.shape != (k,):
            raise ValueError(f"{path} line {lineno}: topic vector length != {k}")
        teachers[record_id] = vec
    return teachers, header
