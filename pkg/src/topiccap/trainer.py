"""Losses, the Adam optimizer, and the three-stage training scheme.

Stage 1 fits the topic predictor to the mined teachers, stage 2 trains the
topic-aware decoder with topics from the frozen predictor, and stage 3
fine-tunes everything jointly under the blended loss
(1 - lam) * caption + lam * topic.  A plain decoder without topics trains
through the same machinery for baselines.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nm
from .corpus import Corpus
from .decoder import (
    TgmParams,
    VanillaParams,
    batch_nll_graph,
    init_tgm,
    init_vanilla,
    sentence_log_prob,
    sequence_nll_graph,
)
from .inference import greedy_decode_batch
from .metrics import bleu4
from .numerics import Tensor
from .predictor import (
    PredictorParams,
    predict_logits,
    predict_topics_batch,
    topic_loss_graph,
    train_predictor,
)


@dataclass
class TrainConfig:
    k: int = 5
    n_h: int = 64
    n_f: int = 16
    lam: float = 0.25
    loss_kind: str = "l2"
    lr: float = 1e-4
    dropout: float = 0.5
    batch_size: int = 16
    predictor_batch_size: int = 32
    predictor_hidden: int = 64
    stage1_epochs: int = 200
    stage2_epochs: int = 100
    stage3_epochs: int = 50
    beam_width: int = 5
    seed: int = 0
    w_text: float = 1.0
    w_vis: float = 0.2
    temperature: float = 1.0
    restarts: int = 10
    kmeans_max_iters: int = 100
    factorize_recurrent: bool = True
    grad_clip: float = 5.0
    patience: int = 20
    max_len: int = 20
    length_normalize: bool = False
    history_beam_width: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lam must lie in [0, 1)")
        if self.loss_kind not in ("l2", "kl"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("k", "n_h", "n_f", "batch_size", "beam_width", "max_len",
                     "predictor_hidden", "predictor_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**raw)
        config.validate()
        return config


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(
    params: list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> bool:
    """One bias-corrected Adam update in place.

    Returns False (and leaves parameters and moments untouched) when any
    gradient entry is non-finite; the skip is counted on the state.
    """
    for name, _ in params:
        if not np.all(np.isfinite(grads[name])):
            state.skipped += 1
            return False
    state.t += 1
    correct1 = 1.0 - state.beta1**state.t
    correct2 = 1.0 - state.beta2**state.t
    for name, p in params:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value = p.value - lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return True


class Adam:
    """Optimizer bound to a parameter list, with global-norm gradient clipping."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float, clip_norm: float = 0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = AdamState()

    def step(self) -> bool:
        grads = {
            name: (np.zeros_like(p.value) if p.grad is None else p.grad)
            for name, p in self.named_params
        }
        if self.clip_norm > 0:
            nm.clip_gradient_norm(list(grads.values()), self.clip_norm)
        return adam_step(self.named_params, grads, self.state, self.lr)


def caption_loss(token_ids: list[int], features: np.ndarray, z, params) -> float:
    """Negative log likelihood of a sentence; the training caption objective."""
    return -sentence_log_prob(token_ids, features, z, params)


def multi_task_loss_graph(
    token_ids: list[int],
    z_teacher: np.ndarray,
    features: np.ndarray,
    decoder_params: TgmParams,
    predictor_params: PredictorParams,
    lam: float,
    kind: str = "l2",
) -> Tensor:
    """Tape node for (1 - lam) * caption + lam * topic on one record.

    The predicted topic distribution feeds both terms, so gradients reach the
    predictor through the caption path as well as the topic path.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError("lam must lie in [0, 1)")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    logits = predict_logits(predictor_params, x)
    z = nm.softmax(logits)
    nll = sequence_nll_graph(decoder_params, x, token_ids, z)
    topic = topic_loss_graph(logits, z_teacher, kind)
    return (1.0 - lam) * nll + lam * topic


def multi_task_loss(
    token_ids, z_teacher, features, decoder_params, predictor_params, lam, kind="l2"
) -> float:
    with nm.no_grad():
        loss = multi_task_loss_graph(
            token_ids, z_teacher, features, decoder_params, predictor_params, lam, kind
        )
    return float(loss.value)


@dataclass
class PipelineResult:
    predictor: PredictorParams | None
    decoder: TgmParams | VanillaParams
    history: list[dict]
    # Best-validation parameter values at the end of stage 2 (the single-task
    # state that stage 3 fine-tunes), kept for per-stage checkpointing.
    stage2_values: dict[str, np.ndarray] | None = None


def _caption_pairs(records) -> list[tuple[int, list[int]]]:
    return [(i, cap) for i, r in enumerate(records) for cap in range(len(r.captions))]


def _encode_records(records, vocabulary):
    features = np.stack([r.features() for r in records]) if records else np.zeros((0, 0))
    token_ids = [[vocabulary.encode_all(c) for c in r.captions] for r in records]
    return features, token_ids


def _eval_caption_loss(params, features, token_ids, z, chunk: int = 128) -> float:
    """Mean per-sentence NLL over all (record, caption) pairs, dropout off."""
    pairs = [(i, c) for i in range(len(token_ids)) for c in range(len(token_ids[i]))]
    total = 0.0
    with nm.no_grad():
        for lo in range(0, len(pairs), chunk):
            batch = pairs[lo : lo + chunk]
            rows = [i for i, _ in batch]
            sents = [token_ids[i][c] for i, c in batch]
            z_batch = None if z is None else z[rows]
            total += float(batch_nll_graph(params, features[rows], sents, z_batch).value)
    return total / len(pairs)


def _val_bleu(params, records, features, z, vocabulary, config) -> float:
    if not records:
        return 0.0
    decoded = greedy_decode_batch(params, features, z, max_len=config.max_len)
    candidates = [vocabulary.decode_all(ids) for ids in decoded]
    references = [r.captions for r in records]
    return bleu4(candidates, references)


def _train_decoder_stage(
    decoder,
    corpus: Corpus,
    config: TrainConfig,
    *,
    stage: int,
    epochs: int,
    rng: np.random.Generator,
    predictor: PredictorParams | None = None,
    teachers: dict[str, np.ndarray] | None = None,
    joint: bool = False,
) -> list[dict]:
    """Shared decoder training loop.

    Modes: no topics (plain decoder), frozen predictor topics (the predictor
    supplies constant per-record distributions), or joint (the predictor is
    trained through both loss terms).  Model selection is on validation
    caption loss, initialized from the pre-training state so a stage that
    never improves returns its input parameters.
    """
    vocab = corpus.vocabulary
    train = corpus.split("train")
    val = corpus.split("val")
    train_x, train_tokens = _encode_records(train, vocab)
    val_x, val_tokens = _encode_records(val, vocab)
    pairs = _caption_pairs(train)
    uses_topics = isinstance(decoder, TgmParams)

    teacher_rows = None
    if joint:
        if predictor is None or teachers is None:
            raise ValueError("joint training needs a predictor and teacher topics")
        missing = [r.id for r in train if r.id not in teachers]
        if missing:
            raise ValueError(f"missing teacher topics for {len(missing)} records")
        teacher_rows = np.stack([teachers[r.id] for r in train])

    frozen_train_z = None
    if uses_topics and not joint:
        if predictor is None:
            raise ValueError("topic-aware decoder training needs a predictor")
        frozen_train_z = predict_topics_batch(predictor, train_x)

    trainable = list(decoder.named_parameters())
    if joint:
        trainable += predictor.named_parameters()
    optimizer = Adam(trainable, lr=config.lr, clip_norm=config.grad_clip)

    def val_topics():
        if not uses_topics or len(val) == 0:
            return None
        return predict_topics_batch(predictor, val_x)

    def snapshot():
        values = decoder.copy_values()
        if joint:
            values.update(predictor.copy_values())
        return values

    def restore(values):
        decoder.load_values({k: v for k, v in values.items() if k.startswith("dec.")})
        if joint:
            predictor.load_values({k: v for k, v in values.items() if k.startswith("pred.")})

    history: list[dict] = []
    best_values = snapshot()
    best_val = (
        _eval_caption_loss(decoder, val_x, val_tokens, val_topics()) if val else float("inf")
    )
    bad_epochs = 0
    for epoch in range(epochs):
        start = time.perf_counter()
        order = rng.permutation(len(pairs))
        cap_sum = 0.0
        topic_sum = 0.0
        n_pairs = 0
        diverged = False
        for lo in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[lo : lo + config.batch_size]]
            rows = [i for i, _ in batch]
            sents = [train_tokens[i][c] for i, c in batch]
            x = train_x[rows]
            b = len(batch)
            if joint:
                logits = predict_logits(predictor, x)
                z = nm.softmax(logits)
                nll = batch_nll_graph(
                    decoder, x, sents, z, dropout_rate=config.dropout, rng=rng
                )
                topic = topic_loss_graph(logits, teacher_rows[rows], config.loss_kind)
                loss = (1.0 - config.lam) * (1.0 / b) * nll + config.lam * topic
                topic_sum += float(topic.value) * b
            else:
                z = None if frozen_train_z is None else frozen_train_z[rows]
                nll = batch_nll_graph(
                    decoder, x, sents, z, dropout_rate=config.dropout, rng=rng
                )
                loss = (1.0 / b) * nll
            if not np.isfinite(loss.value):
                diverged = True
                break
            nm.backward(loss)
            optimizer.step()
            cap_sum += float(nll.value)
            n_pairs += b
        if diverged:
            history.append({"stage": stage, "epoch": epoch, "diverged": True})
            break

        train_caption = cap_sum / max(1, n_pairs)
        train_topic = (topic_sum / max(1, n_pairs)) if joint else None
        train_combined = (
            (1.0 - config.lam) * train_caption + config.lam * train_topic
            if joint
            else train_caption
        )
        val_z = val_topics()
        val_caption = _eval_caption_loss(decoder, val_x, val_tokens, val_z) if val else None
        val_score = _val_bleu(decoder, val, val_x, val_z, vocab, config) if val else None
        history.append(
            {
                "stage": stage,
                "epoch": epoch,
                "train_caption": train_caption,
                "train_topic": train_topic,
                "train_combined": train_combined,
                "val_caption": val_caption,
                "val_topic": None,
                "val_bleu4": val_score,
                "wall_time": time.perf_counter() - start,
            }
        )
        if val and val_caption < best_val - 1e-12:
            best_val = val_caption
            best_values = snapshot()
            bad_epochs = 0
        elif val:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    if val:
        restore(best_values)
    return history


def train_vanilla(corpus: Corpus, config: TrainConfig) -> PipelineResult:
    """Baseline: the standard decoder with no topic machinery."""
    config.validate()
    feature_dim = sum(corpus.feature_dims)
    rng_init = np.random.default_rng([config.seed, 10])
    decoder = init_vanilla(len(corpus.vocabulary), config.n_h, feature_dim, rng_init)
    history = _train_decoder_stage(
        decoder,
        corpus,
        config,
        stage=2,
        epochs=config.stage2_epochs,
        rng=np.random.default_rng([config.seed, 11]),
    )
    return PipelineResult(predictor=None, decoder=decoder, history=history)


def train_pipeline(
    corpus: Corpus, teachers: dict[str, np.ndarray], config: TrainConfig
) -> PipelineResult:
    """The full three-stage scheme.

    Stage 1 pretrains the predictor on the topic loss, stage 2 pretrains the
    topic-aware decoder with topics from the frozen predictor, and stage 3
    (skipped when its epoch budget is zero) fine-tunes both jointly.
    """
    config.validate()
    train = corpus.split("train")
    missing = [r.id for r in train if r.id not in teachers]
    if missing:
        raise ValueError(
            f"missing teacher topics for {len(missing)} training records (e.g. {missing[0]})"
        )
    for record_id, vec in teachers.items():
        if np.asarray(vec).shape != (config.k,):
            raise ValueError(f"teacher for {record_id} has length != k={config.k}")

    predictor, hist1 = train_predictor(
        corpus, teachers, config, rng=np.random.default_rng([config.seed, 1])
    )
    feature_dim = sum(corpus.feature_dims)
    decoder = init_tgm(
        len(corpus.vocabulary),
        config.n_h,
        config.n_f,
        config.k,
        feature_dim,
        np.random.default_rng([config.seed, 2]),
        factorize_recurrent=config.factorize_recurrent,
    )
    hist2 = _train_decoder_stage(
        decoder,
        corpus,
        config,
        stage=2,
        epochs=config.stage2_epochs,
        rng=np.random.default_rng([config.seed, 3]),
        predictor=predictor,
    )
    stage2_values = {**decoder.copy_values(), **predictor.copy_values()}
    hist3: list[dict] = []
    if config.stage3_epochs > 0:
        hist3 = _train_decoder_stage(
            decoder,
            corpus,
            config,
            stage=3,
            epochs=config.stage3_epochs,
            rng=np.random.default_rng([config.seed, 4]),
            predictor=predictor,
            teachers=teachers,
            joint=True,
        )
    return PipelineResult(
        predictor=predictor,
        decoder=decoder,
        history=hist1 + hist2 + hist3,
        stage2_values=stage2_values,
    )


def lambda_ratios() -> list[float]:
    """The swept ratios lam / (1 - lam): 0.1 through 1.0 in steps of 0.1."""
    return [round(0.1 * i, 1) for i in range(1, 11)]


def sweep_lambda(
    corpus: Corpus,
    teachers: dict[str, np.ndarray],
    config: TrainConfig,
    ratios: list[float] | None = None,
) -> list[dict]:
    """Share stages 1-2, then run stage 3 once per blend ratio.

    Returns one entry per ratio with the stage-3 history and final parameter
    values; every run restarts from the same stage-2 snapshot.
    """
    config.validate()
    if ratios is None:
        ratios = lambda_ratios()
    base_config = TrainConfig(**{**config.to_dict(), "stage3_epochs": 0})
    base = train_pipeline(corpus, teachers, base_config)
    pred_values = base.predictor.copy_values()
    dec_values = base.decoder.copy_values()

    results = []
    for ratio in ratios:
        lam = ratio / (1.0 + ratio)
        run_config = TrainConfig(**{**config.to_dict(), "lam": lam})
        base.predictor.load_values(pred_values)
        base.decoder.load_values(dec_values)
        hist3 = _train_decoder_stage(
            base.decoder,
            corpus,
            run_config,
            stage=3,
            epochs=run_config.stage3_epochs,
            rng=np.random.default_rng([config.seed, 4]),
            predictor=base.predictor,
            teachers=teachers,
            joint=True,
        )
        results.append(
            {
                "ratio": ratio,
                "lam": lam,
                "history": hist3,
                "predictor_values": base.predictor.copy_values(),
                "decoder_values": base.decoder.copy_values(),
            }
        )
    base.predictor.load_values(pred_values)
    base.decoder.load_values(dec_values)
    results.append(
        {
            "ratio": 0.0,
            "lam": 0.0,
            "history": [],
            "predictor_values": pred_values,
            "decoder_values": dec_values,
            "baseline": True,
        }
    )
    return results


def save_history(path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_history(path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    return entries
