"""Sentence generation from trained decoders: beam search, batched greedy
decoding, and the caption entry point with its three topic modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import BOS_ID, EOS_ID, UNK_ID, Vocabulary
from .decoder import TgmParams, _bind_stepper, _init_state_graph
from .predictor import PredictorParams, predict_topics


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    truncated: bool = False


def beam_search(
    features: np.ndarray,
    z: np.ndarray | None,
    params,
    width: int = 5,
    max_len: int = 20,
    length_normalize: bool = False,
) -> list[Hypothesis]:
    """Beam decode one record; returns up to ``width`` completed hypotheses.

    Candidates at each step are ranked by total log probability with ties
    broken by token id then by parent beam.  A hypothesis completes when the
    end marker ranks inside the top ``width`` candidates; completed hypotheses
    retire and the beam keeps the best ``width`` incomplete ones.  The unknown
    marker is never expanded.  If nothing completes within ``max_len`` steps
    the best unfinished hypothesis is returned with ``truncated`` set.
    """
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be at least 1")
    with nm.no_grad():
        stepper = _bind_stepper(params, z)
        h0, c0 = _init_state_graph(params, np.atleast_2d(features))

        active_tokens: list[list[int]] = [[]]
        active_scores = np.zeros(1)
        h_val, c_val = h0.value, c0.value
        last = np.array([BOS_ID], dtype=np.intp)  # begin marker seeds the single starting beam
        done: list[tuple[float, list[int]]] = []

        for _ in range(max_len):
            x = nm.take_rows(params.embedding, last)
            h_t, c_t = stepper.step(x, nm.constant(h_val), nm.constant(c_val))
            log_probs = nm.log_softmax(stepper.logits(h_t)).value
            log_probs[:, UNK_ID] = -np.inf
            n_beams, vocab = log_probs.shape
            cand = active_scores[:, None] + log_probs
            flat = cand.reshape(-1)
            toks = np.tile(np.arange(vocab), n_beams)
            beams = np.repeat(np.arange(n_beams), vocab)
            order = np.lexsort((beams, toks, -flat))

            new_tokens: list[list[int]] = []
            new_scores: list[float] = []
            new_rows: list[int] = []
            for rank, idx in enumerate(order):
                score = float(flat[idx])
                if score == -np.inf:
                    break
                tok = int(toks[idx])
                beam = int(beams[idx])
                if tok == EOS_ID:
                    if rank < width:
                        done.append((score, active_tokens[beam]))
                    continue
                if len(new_tokens) < width:
                    new_tokens.append(active_tokens[beam] + [tok])
                    new_scores.append(score)
                    new_rows.append(beam)
                if len(new_tokens) >= width and rank >= width:
                    break

            done.sort(key=lambda item: (-item[0], item[1]))
            done = done[:width]
            if not new_tokens:
                break
            active_tokens = new_tokens
            active_scores = np.array(new_scores)
            h_val = h_t.value[new_rows]
            c_val = c_t.value[new_rows]
            last = np.array([seq[-1] for seq in active_tokens], dtype=np.intp)
            if len(done) >= width and active_scores.max() <= done[-1][0]:
                break  # no unfinished hypothesis can still enter the result

    if done:
        key = (
            (lambda item: (-item[0] / max(1, len(item[1]) + 1), item[1]))
            if length_normalize
            else (lambda item: (-item[0], item[1]))
        )
        done.sort(key=key)
        return [Hypothesis(tokens=list(t), log_prob=s) for s, t in done[:width]]
    best = int(np.argmax(active_scores))
    return [Hypothesis(tokens=list(active_tokens[best]), log_prob=float(active_scores[best]), truncated=True)]


def greedy_decode_batch(
    params, features: np.ndarray, z: np.ndarray | None, max_len: int = 20
) -> list[list[int]]:
    """Width-1 decoding for a whole batch of records at once."""
    features = np.atleast_2d(features)
    n = features.shape[0]
    with nm.no_grad():
        stepper = _bind_stepper(params, z)
        h, c = _init_state_graph(params, features)
        h_val, c_val = h.value, c.value
        last = np.full(n, BOS_ID, dtype=np.intp)
        finished = np.zeros(n, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(n)]
        for _ in range(max_len):
            x = nm.take_rows(params.embedding, last)
            h_t, c_t = stepper.step(x, nm.constant(h_val), nm.constant(c_val))
            log_probs = nm.log_softmax(stepper.logits(h_t)).value
            log_probs[:, UNK_ID] = -np.inf
            nxt = np.argmax(log_probs, axis=1)
            for i in range(n):
                if not finished[i]:
                    if nxt[i] == EOS_ID:
                        finished[i] = True
                    else:
                        outputs[i].append(int(nxt[i]))
            if finished.all():
                break
            h_val, c_val = h_t.value, c_t.value
            last = np.where(finished, EOS_ID, nxt).astype(np.intp)
    return outputs


MODES = ("vanilla", "predicted", "assigned")


def caption(
    features: np.ndarray,
    vocabulary: Vocabulary,
    decoder_params,
    predictor_params: PredictorParams | None,
    mode: str,
    beam_width: int = 5,
    max_len: int = 20,
    assigned_topic: np.ndarray | None = None,
    length_normalize: bool = False,
) -> dict:
    """Generate one sentence; returns tokens, score, and the topic used.

    ``vanilla`` ignores topics entirely, ``predicted`` uses the checkpoint's
    predictor, and ``assigned`` substitutes the given distribution verbatim.
    """
    if mode not in MODES:
        raise ValueError(f"unknown caption mode {mode!r}")
    z = None
    if mode == "predicted":
        if predictor_params is None:
            raise ValueError("predicted-topic mode needs a trained predictor")
        z = predict_topics(features, predictor_params)
    elif mode == "assigned":
        if assigned_topic is None:
            raise ValueError("assigned-topic mode needs a topic distribution")
        z = np.asarray(assigned_topic, dtype=np.float64)
        if isinstance(decoder_params, TgmParams) and z.shape != (decoder_params.k,):
            raise ValueError(
                f"assigned topic has length {z.shape[0]}, decoder expects {decoder_params.k}"
            )
        if abs(float(z.sum()) - 1.0) > 1e-6 or np.any(z < -1e-9):
            raise ValueError("assigned topic is not on the probability simplex")
    if not isinstance(decoder_params, TgmParams):
        z = None  # vanilla decoders take no topic input
    hyps = beam_search(
        features, z, decoder_params, width=beam_width, max_len=max_len,
        length_normalize=length_normalize,
    )
    best = hyps[0]
    return {
        "tokens": vocabulary.decode_all(best.tokens),
        "log_prob": best.log_prob,
        "mode": mode,
        "topic": None if z is None else np.asarray(z).tolist(),
        "truncated": best.truncated,
    }


def save_captions(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_captions(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path} line {lineno}: malformed caption line ({exc})") from None
    return rows
