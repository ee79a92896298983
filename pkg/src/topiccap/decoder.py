"""Sentence decoders sharing one step interface.

Two variants: a standard LSTM, and a topic-aware LSTM whose gate
transformations are three-way factorized mixtures over latent topics.  The
factorized form W_a @ diag(W_b z) @ W_c is never materialized during a step;
``factorized_matrix`` exists as the equivalence oracle.

The output projection is the transpose of the input word embedding (tied
weights), which requires the embedding width to equal the hidden size.
Feature vectors condition the decoder only through the initial hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import BOS_ID, EOS_ID
from .numerics import Tensor

GATES = ("i", "f", "o", "g")


@dataclass
class DecoderState:
    hidden: np.ndarray
    cell: np.ndarray
    t: int = 0


@dataclass
class StepDropout:
    """Pre-scaled multiplicative masks for one step (inverted dropout)."""

    input_mask: np.ndarray
    output_mask: np.ndarray


@dataclass
class VanillaParams:
    embedding: Tensor  # (vocab, n_h); output projection is its transpose
    w_in: dict[str, Tensor]  # per gate, (n_h, n_h)
    u_rec: dict[str, Tensor]  # per gate, (n_h, n_h)
    b: dict[str, Tensor]  # per gate, (n_h,)
    init_w: Tensor  # (n_h, feature_dim)
    init_b: Tensor  # (n_h,)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def n_h(self) -> int:
        return self.embedding.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.init_w.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("dec.embedding", self.embedding), ("dec.init.w", self.init_w), ("dec.init.b", self.init_b)]
        for g in GATES:
            out += [(f"dec.{g}.in", self.w_in[g]), (f"dec.{g}.rec", self.u_rec[g]), (f"dec.{g}.b", self.b[g])]
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.value = values[name].copy()


@dataclass
class TgmParams:
    embedding: Tensor
    fac_in: dict[str, tuple[Tensor, Tensor, Tensor]]  # per gate, (W_a, W_b, W_c)
    fac_rec: dict[str, tuple[Tensor, Tensor, Tensor]] | None
    u_rec: dict[str, Tensor] | None  # plain recurrent weights when not factorized
    b: dict[str, Tensor]
    init_w: Tensor
    init_b: Tensor

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def n_h(self) -> int:
        return self.embedding.shape[1]

    @property
    def n_f(self) -> int:
        return self.fac_in["i"][0].shape[1]

    @property
    def k(self) -> int:
        return self.fac_in["i"][1].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.init_w.shape[1]

    @property
    def factorize_recurrent(self) -> bool:
        return self.fac_rec is not None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("dec.embedding", self.embedding), ("dec.init.w", self.init_w), ("dec.init.b", self.init_b)]
        for g in GATES:
            wa, wb, wc = self.fac_in[g]
            out += [(f"dec.{g}.in.a", wa), (f"dec.{g}.in.b", wb), (f"dec.{g}.in.c", wc)]
            if self.fac_rec is not None:
                ua, ub, uc = self.fac_rec[g]
                out += [(f"dec.{g}.rec.a", ua), (f"dec.{g}.rec.b", ub), (f"dec.{g}.rec.c", uc)]
            else:
                out.append((f"dec.{g}.rec", self.u_rec[g]))
            out.append((f"dec.{g}.b", self.b[g]))
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.value = values[name].copy()


def parameter_count(params) -> int:
    return sum(p.value.size for _, p in params.named_parameters())


def init_vanilla(
    vocab_size: int, n_h: int, feature_dim: int, rng: np.random.Generator
) -> VanillaParams:
    from .predictor import glorot

    return VanillaParams(
        embedding=nm.parameter(glorot(rng, vocab_size, n_h), "dec.embedding"),
        w_in={g: nm.parameter(glorot(rng, n_h, n_h), f"dec.{g}.in") for g in GATES},
        u_rec={g: nm.parameter(glorot(rng, n_h, n_h), f"dec.{g}.rec") for g in GATES},
        b={g: nm.parameter(np.zeros(n_h), f"dec.{g}.b") for g in GATES},
        init_w=nm.parameter(glorot(rng, n_h, feature_dim), "dec.init.w"),
        init_b=nm.parameter(np.zeros(n_h), "dec.init.b"),
    )


def init_tgm(
    vocab_size: int,
    n_h: int,
    n_f: int,
    k: int,
    feature_dim: int,
    rng: np.random.Generator,
    factorize_recurrent: bool = True,
) -> TgmParams:
    from .predictor import glorot

    def triple(tag: str, n_in: int) -> tuple[Tensor, Tensor, Tensor]:
        return (
            nm.parameter(glorot(rng, n_h, n_f), f"{tag}.a"),
            nm.parameter(glorot(rng, n_f, k) + 1.0, f"{tag}.b"),
            nm.parameter(glorot(rng, n_f, n_in), f"{tag}.c"),
        )

    fac_in = {g: triple(f"dec.{g}.in", n_h) for g in GATES}
    if factorize_recurrent:
        fac_rec = {g: triple(f"dec.{g}.rec", n_h) for g in GATES}
        u_rec = None
    else:
        fac_rec = None
        u_rec = {g: nm.parameter(glorot(rng, n_h, n_h), f"dec.{g}.rec") for g in GATES}
    return TgmParams(
        embedding=nm.parameter(glorot(rng, vocab_size, n_h), "dec.embedding"),
        fac_in=fac_in,
        fac_rec=fac_rec,
        u_rec=u_rec,
        b={g: nm.parameter(np.zeros(n_h), f"dec.{g}.b") for g in GATES},
        init_w=nm.parameter(glorot(rng, n_h, feature_dim), "dec.init.w"),
        init_b=nm.parameter(np.zeros(n_h), "dec.init.b"),
    )


def factorized_matrix(z: np.ndarray, factors: tuple[Tensor, Tensor, Tensor]) -> np.ndarray:
    """Materialize W_a @ diag(W_b z) @ W_c for a single topic distribution.

    This is the equivalence oracle for the factored-order step computation;
    the mixture is linear in z.
    """
    z = np.asarray(z, dtype=np.float64)
    wa, wb, wc = (f.value for f in factors)
    if z.shape != (wb.shape[1],):
        raise ValueError(f"topic vector length {z.shape} does not match factors ({wb.shape[1]})")
    if abs(float(z.sum()) - 1.0) > 1e-6 or np.any(z < -1e-9):
        raise ValueError("topic distribution is not on the probability simplex")
    return wa @ np.diag(wb @ z) @ wc


class _VanillaStepper:
    """One forward pass worth of bound tape nodes for the standard LSTM."""

    def __init__(self, params: VanillaParams):
        self.params = params
        self.w_t = {g: params.w_in[g].t() for g in GATES}
        self.u_t = {g: params.u_rec[g].t() for g in GATES}
        self.emb_t = params.embedding.t()

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        pre = {
            g: nm.matmul(x, self.w_t[g]) + nm.matmul(h, self.u_t[g]) + self.params.b[g]
            for g in GATES
        }
        gate_i = nm.sigmoid(pre["i"])
        gate_f = nm.sigmoid(pre["f"])
        gate_o = nm.sigmoid(pre["o"])
        gate_g = nm.tanh(pre["g"])
        c_new = gate_i * gate_g + gate_f * c
        h_new = gate_o * nm.tanh(c_new)
        return h_new, c_new

    def logits(self, h: Tensor) -> Tensor:
        return nm.matmul(h, self.emb_t)


class _TgmStepper:
    """Bound tape nodes for the topic-factorized LSTM with a fixed z.

    The per-gate mixing vectors W_b z are computed once per forward pass and
    reused at every step; gate transformations stay in the factored order
    W_a @ (W_b z (*) W_c v).
    """

    def __init__(self, params: TgmParams, z: Tensor):
        self.params = params
        self.emb_t = params.embedding.t()
        self.in_parts = {}
        for g in GATES:
            wa, wb, wc = params.fac_in[g]
            self.in_parts[g] = (wa.t(), nm.matmul(z, wb.t()), wc.t())
        if params.factorize_recurrent:
            self.rec_parts = {}
            for g in GATES:
                ua, ub, uc = params.fac_rec[g]
                self.rec_parts[g] = (ua.t(), nm.matmul(z, ub.t()), uc.t())
            self.u_t = None
        else:
            self.rec_parts = None
            self.u_t = {g: params.u_rec[g].t() for g in GATES}

    def _path(self, parts, v: Tensor) -> Tensor:
        wa_t, zmix, wc_t = parts
        return nm.matmul(zmix * nm.matmul(v, wc_t), wa_t)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        pre = {}
        for g in GATES:
            term = self._path(self.in_parts[g], x)
            if self.rec_parts is not None:
                term = term + self._path(self.rec_parts[g], h)
            else:
                term = term + nm.matmul(h, self.u_t[g])
            pre[g] = term + self.params.b[g]
        gate_i = nm.sigmoid(pre["i"])
        gate_f = nm.sigmoid(pre["f"])
        gate_o = nm.sigmoid(pre["o"])
        gate_g = nm.tanh(pre["g"])
        c_new = gate_i * gate_g + gate_f * c
        h_new = gate_o * nm.tanh(c_new)
        return h_new, c_new

    def logits(self, h: Tensor) -> Tensor:
        return nm.matmul(h, self.emb_t)


def _bind_stepper(params, z):
    # A vanilla decoder silently ignores any topic it is handed.
    if isinstance(params, TgmParams):
        if z is None:
            raise ValueError("topic-aware decoder needs a topic distribution")
        z_t = z if isinstance(z, Tensor) else nm.constant(np.atleast_2d(z))
        return _TgmStepper(params, z_t)
    return _VanillaStepper(params)


def _init_state_graph(params, features: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
    x = features if isinstance(features, Tensor) else nm.constant(np.atleast_2d(features))
    if x.shape[-1] != params.feature_dim:
        raise ValueError(
            f"feature dim {x.shape[-1]} does not match decoder input {params.feature_dim}"
        )
    h = nm.tanh(nm.matmul(x, params.init_w.t()) + params.init_b)
    c = nm.constant(np.zeros_like(h.value))
    return h, c


def init_state(x: np.ndarray, params) -> DecoderState:
    """Initial decoder state from a feature vector: h = tanh(W x + b), c = 0."""
    with nm.no_grad():
        h, c = _init_state_graph(params, np.atleast_2d(x))
    return DecoderState(hidden=h.value[0], cell=c.value[0], t=0)


def _validate_token(params, token_id: int) -> None:
    if not 0 <= token_id < params.vocab_size:
        raise ValueError(f"token id {token_id} outside vocabulary of size {params.vocab_size}")


def _single_step(params, state: DecoderState, token_id: int, z, dropout: StepDropout | None):
    _validate_token(params, token_id)
    if not np.all(np.isfinite(state.hidden)) or not np.all(np.isfinite(state.cell)):
        raise ValueError("decoder state contains non-finite entries")
    with nm.no_grad():
        stepper = _bind_stepper(params, z)
        x = nm.take_rows(params.embedding, [token_id])
        if dropout is not None:
            x = x * nm.constant(np.atleast_2d(dropout.input_mask))
        h = nm.constant(np.atleast_2d(state.hidden))
        c = nm.constant(np.atleast_2d(state.cell))
        h_new, c_new = stepper.step(x, h, c)
        h_out = h_new
        if dropout is not None:
            h_out = h_out * nm.constant(np.atleast_2d(dropout.output_mask))
        probs = nm.softmax(stepper.logits(h_out)).value[0]
    return probs, DecoderState(hidden=h_new.value[0], cell=c_new.value[0], t=state.t + 1)


def lstm_step(
    state: DecoderState, w_prev: int, params: VanillaParams, dropout: StepDropout | None = None
):
    """One standard LSTM step: returns (next-word distribution, new state)."""
    return _single_step(params, state, w_prev, None, dropout)


def tgm_step(
    state: DecoderState,
    w_prev: int,
    z: np.ndarray,
    params: TgmParams,
    dropout: StepDropout | None = None,
):
    """One topic-conditioned step; z must lie on the probability simplex."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.k,):
        raise ValueError(f"topic vector length {z.shape} does not match decoder ({params.k})")
    if abs(float(z.sum()) - 1.0) > 1e-6 or np.any(z < -1e-9):
        raise ValueError("topic distribution is not on the probability simplex")
    return _single_step(params, state, w_prev, z, dropout)


def sequence_nll_graph(
    params,
    features: np.ndarray,
    token_ids: list[int],
    z=None,
    input_masks: np.ndarray | None = None,
    output_masks: np.ndarray | None = None,
) -> Tensor:
    """Tape node for the negative log likelihood of one sentence.

    The begin marker is prepended as the first input and the end marker
    appended as the final target, so a sentence of L tokens contributes L+1
    log-probability terms.  Optional masks are (L+1, n_h) arrays applied to
    the step input and output (training-time dropout).
    """
    if len(token_ids) == 0:
        raise ValueError("empty token sequence")
    for tok in token_ids:
        _validate_token(params, int(tok))
    inputs = [BOS_ID] + [int(t) for t in token_ids]
    targets = [int(t) for t in token_ids] + [EOS_ID]
    stepper = _bind_stepper(params, z)
    h, c = _init_state_graph(params, features)
    total = None
    for t, (w_in, w_target) in enumerate(zip(inputs, targets)):
        x = nm.take_rows(params.embedding, [w_in])
        if input_masks is not None:
            x = x * nm.constant(input_masks[t : t + 1])
        h, c = stepper.step(x, h, c)
        h_out = h
        if output_masks is not None:
            h_out = h_out * nm.constant(output_masks[t : t + 1])
        log_probs = nm.log_softmax(stepper.logits(h_out))
        term = -nm.take_at(log_probs, [0], [w_target]).sum()
        total = term if total is None else total + term
    return total


def sentence_log_prob(token_ids: list[int], features: np.ndarray, z, params) -> float:
    """Total log probability of a sentence (end marker included); always <= 0."""
    with nm.no_grad():
        nll = sequence_nll_graph(params, features, token_ids, z)
    return -float(nll.value)


def batch_nll_graph(
    params,
    features: np.ndarray,
    sentences: list[list[int]],
    z=None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Tape node for the summed NLL of a batch of sentences.

    Sentences are padded to a common length; padded positions are masked out
    of the loss.  With a positive dropout rate (training), fresh pre-scaled
    masks are drawn per step for the step input and output.
    """
    n = len(sentences)
    if n == 0:
        raise ValueError("empty batch")
    steps = max(len(s) for s in sentences) + 1
    n_h = params.n_h
    inputs = np.full((n, steps), EOS_ID, dtype=np.intp)
    targets = np.full((n, steps), EOS_ID, dtype=np.intp)
    mask = np.zeros((n, steps))
    inputs[:, 0] = BOS_ID
    for i, sent in enumerate(sentences):
        ln = len(sent)
        inputs[i, 1 : ln + 1] = sent
        targets[i, :ln] = sent
        targets[i, ln] = EOS_ID
        mask[i, : ln + 1] = 1.0

    use_dropout = dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout needs an rng")
    keep = 1.0 - dropout_rate

    stepper = _bind_stepper(params, z)
    h, c = _init_state_graph(params, features)
    rows = np.arange(n)
    total = None
    for t in range(steps):
        x = nm.take_rows(params.embedding, inputs[:, t])
        if use_dropout:
            x = x * nm.constant((rng.random((n, n_h)) < keep) / keep)
        h, c = stepper.step(x, h, c)
        h_out = h
        if use_dropout:
            h_out = h_out * nm.constant((rng.random((n, n_h)) < keep) / keep)
        log_probs = nm.log_softmax(stepper.logits(h_out))
        picked = nm.take_at(log_probs, rows, targets[:, t])
        term = -(picked * nm.constant(mask[:, t])).sum()
        total = term if total is None else total + term
    return total
