"""Student topic predictor: a two-layer perceptron from multimodal features
to a distribution over latent topics, trained to match mined teacher topics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import Corpus
from .numerics import Tensor


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


@dataclass
class PredictorParams:
    w1: Tensor  # (hidden, input)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (k, hidden)
    b2: Tensor  # (k,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def k(self) -> int:
        return self.w2.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("pred.w1", self.w1),
            ("pred.b1", self.b1),
            ("pred.w2", self.w2),
            ("pred.b2", self.b2),
        ]

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.value = values[name].copy()


def init_predictor(input_dim: int, hidden: int, k: int, rng: np.random.Generator) -> PredictorParams:
    return PredictorParams(
        w1=nm.parameter(glorot(rng, hidden, input_dim), "pred.w1"),
        b1=nm.parameter(np.zeros(hidden), "pred.b1"),
        w2=nm.parameter(glorot(rng, k, hidden), "pred.w2"),
        b2=nm.parameter(np.zeros(k), "pred.b2"),
    )


def predict_logits(params: PredictorParams, x: Tensor | np.ndarray) -> Tensor:
    """Batched topic logits: w2 @ relu(w1 @ x + b1) + b2, rows are records."""
    x = x if isinstance(x, Tensor) else nm.constant(np.atleast_2d(x))
    if x.shape[-1] != params.input_dim:
        raise ValueError(
            f"feature dim {x.shape[-1]} does not match predictor input {params.input_dim}"
        )
    hidden = nm.relu(nm.matmul(x, params.w1.t()) + params.b1)
    return nm.matmul(hidden, params.w2.t()) + params.b2


def predict_topics(x: np.ndarray, params: PredictorParams) -> np.ndarray:
    """Topic distribution for one feature vector."""
    with nm.no_grad():
        logits = predict_logits(params, np.atleast_2d(x))
    return nm.softmax(logits.value[0])


def predict_topics_batch(params: PredictorParams, features: np.ndarray) -> np.ndarray:
    with nm.no_grad():
        logits = predict_logits(params, features)
    return nm.softmax(logits.value, axis=-1)


def _validate_simplex(v: np.ndarray, what: str) -> None:
    if abs(float(v.sum()) - 1.0) > 1e-6 or np.any(v < -1e-9):
        raise ValueError(f"{what} is not on the probability simplex")


def topic_loss(z: np.ndarray, z_teacher: np.ndarray, kind: str = "l2") -> float:
    """Distance from a predicted topic distribution to its teacher.

    ``l2`` is the squared euclidean distance; ``kl`` is sum(t * log(t / z))
    over the teacher's support.
    """
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(z_teacher, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError("prediction and teacher have different lengths")
    _validate_simplex(z, "predicted topics")
    _validate_simplex(t, "teacher topics")
    if kind == "l2":
        d = z - t
        return float(np.dot(d, d))
    if kind == "kl":
        support = t > 0
        if np.any(z[support] <= 0):
            raise ValueError("kl topic loss needs z > 0 wherever the teacher has mass")
        return float(np.sum(t[support] * (np.log(t[support]) - np.log(z[support]))))
    raise ValueError(f"unknown topic loss kind {kind!r}")


def topic_loss_graph(logits: Tensor, teacher: np.ndarray, kind: str = "l2") -> Tensor:
    """Tape node for the mean topic loss of a batch; ``teacher`` rows are constants."""
    teacher = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    if kind == "l2":
        diff = nm.softmax(logits) - nm.constant(teacher)
        per_row = nm.tsum(diff * diff, axis=1)
    elif kind == "kl":
        log_probs = nm.log_softmax(logits)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(teacher > 0, teacher * np.log(np.where(teacher > 0, teacher, 1.0)), 0.0)
        per_row = nm.constant(ent.sum(axis=1)) - nm.tsum(log_probs * nm.constant(teacher), axis=1)
    else:
        raise ValueError(f"unknown topic loss kind {kind!r}")
    return per_row.mean()


def train_predictor(
    corpus: Corpus,
    teachers: dict[str, np.ndarray],
    config,
    rng: np.random.Generator | None = None,
) -> tuple[PredictorParams, list[dict]]:
    """Fit the predictor to the mined teachers with Adam.

    A fixed slice of the teacher-covered records (every tenth) is held out for
    validation and early stopping; the returned parameters are the ones with
    the best holdout loss.  Fully deterministic given the config seed.
    """
    from .trainer import Adam  # local import to avoid a cycle

    train = corpus.split("train")
    missing = [r.id for r in train if r.id not in teachers]
    if missing:
        raise ValueError(f"missing teacher topics for {len(missing)} records (e.g. {missing[0]})")
    if rng is None:
        rng = np.random.default_rng([config.seed, 1])

    features = np.stack([r.features() for r in train])
    targets = np.stack([teachers[r.id] for r in train])
    n = len(train)
    holdout_idx = np.arange(9, n, 10) if n >= 10 else np.array([n - 1])
    holdout = np.zeros(n, dtype=bool)
    holdout[holdout_idx] = True
    fit_idx = np.flatnonzero(~holdout)
    val_idx = np.flatnonzero(holdout)

    params = init_predictor(features.shape[1], config.predictor_hidden, config.k, rng)
    optimizer = Adam(params.named_parameters(), lr=config.lr)
    batch_size = config.predictor_batch_size
    kind = config.loss_kind

    def eval_loss(idx) -> float:
        with nm.no_grad():
            logits = predict_logits(params, features[idx])
            return float(topic_loss_graph(logits, targets[idx], kind).value)

    history: list[dict] = []
    best_values = params.copy_values()
    best_val = eval_loss(val_idx)
    bad_epochs = 0
    for epoch in range(config.stage1_epochs):
        start = time.perf_counter()
        order = rng.permutation(fit_idx)
        train_losses = []
        diverged = False
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            logits = predict_logits(params, features[batch])
            loss = topic_loss_graph(logits, targets[batch], kind)
            if not np.isfinite(loss.value):
                diverged = True
                break
            nm.backward(loss)
            optimizer.step()
            train_losses.append(float(loss.value))
        if diverged:
            history.append({"stage": 1, "epoch": epoch, "diverged": True})
            break
        val_loss = eval_loss(val_idx)
        history.append(
            {
                "stage": 1,
                "epoch": epoch,
                "train_topic": float(np.mean(train_losses)) if train_losses else None,
                "val_topic": val_loss,
                "wall_time": time.perf_counter() - start,
            }
        )
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_values = params.copy_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    params.load_values(best_values)
    return params, history
