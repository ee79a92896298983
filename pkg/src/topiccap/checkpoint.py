"""Headered text checkpoints: config snapshot, vocabulary, and named
parameter blocks with 17-significant-digit values (exact float64 round trip).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import Vocabulary
from .decoder import GATES, TgmParams, VanillaParams
from .predictor import PredictorParams
from .trainer import TrainConfig

FORMAT_VERSION = 1
MAGIC = "topiccap-checkpoint"

VARIANTS = ("vanilla", "tgm", "mm-tgm")


@dataclass
class Checkpoint:
    variant: str
    config: dict
    vocab_tokens: list[str]
    params: dict[str, np.ndarray]
    stage: int
    seed: int


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def checkpoint_from_models(
    variant: str,
    config: TrainConfig,
    vocabulary: Vocabulary,
    decoder,
    predictor: PredictorParams | None = None,
    stage: int = 0,
) -> Checkpoint:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    params = {name: p.value.copy() for name, p in decoder.named_parameters()}
    if predictor is not None:
        params.update({name: p.value.copy() for name, p in predictor.named_parameters()})
    return Checkpoint(
        variant=variant,
        config=config.to_dict(),
        vocab_tokens=list(vocabulary.tokens),
        params=params,
        stage=stage,
        seed=config.seed,
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"variant {ck.variant}", f"stage {ck.stage}", f"seed {ck.seed}"]
    config_items = sorted(ck.config.items())
    lines.append(f"config {len(config_items)}")
    for key, value in config_items:
        lines.append(f"{key} = {_format_scalar(value)}")
    lines.append(f"vocab {len(ck.vocab_tokens)}")
    lines.extend(ck.vocab_tokens)
    for name in sorted(ck.params):
        arr = ck.params[name]
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {arr.ndim} {dims}")
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        for row in rows:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    cursor = 0

    def next_line() -> str:
        nonlocal cursor
        if cursor >= len(lines):
            raise ValueError(f"{path}: truncated checkpoint (unexpected end of file)")
        line = lines[cursor]
        cursor += 1
        return line

    head = next_line().split()
    if len(head) != 2 or head[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")

    def expect(tag: str) -> list[str]:
        parts = next_line().split()
        if not parts or parts[0] != tag:
            raise ValueError(f"{path}: expected {tag!r} block")
        return parts

    variant = expect("variant")[1]
    if variant not in VARIANTS:
        raise ValueError(f"{path}: unknown variant {variant!r}")
    stage = int(expect("stage")[1])
    seed = int(expect("seed")[1])

    n_config = int(expect("config")[1])
    config: dict = {}
    for _ in range(n_config):
        line = next_line()
        key, _, raw = line.partition(" = ")
        if not _:
            raise ValueError(f"{path}: malformed config line {line!r}")
        config[key] = _parse_scalar(raw)

    n_vocab = int(expect("vocab")[1])
    vocab_tokens = [next_line() for _ in range(n_vocab)]

    params: dict[str, np.ndarray] = {}
    while True:
        line = next_line()
        if line == "end":
            break
        parts = line.split()
        if parts[0] != "param" or len(parts) < 3:
            raise ValueError(f"{path}: malformed parameter header {line!r}")
        name = parts[1]
        ndim = int(parts[2])
        dims = tuple(int(d) for d in parts[3 : 3 + ndim])
        if len(dims) != ndim:
            raise ValueError(f"{path}: parameter {name}: bad shape header")
        n_rows = 1 if ndim == 1 else dims[0]
        rows = []
        for _ in range(n_rows):
            rows.append(np.array([float(x) for x in next_line().split()], dtype=np.float64))
        arr = np.stack(rows) if ndim > 1 else rows[0]
        if arr.shape != dims:
            raise ValueError(f"{path}: parameter {name}: values do not match shape {dims}")
        params[name] = arr
    return Checkpoint(
        variant=variant, config=config, vocab_tokens=vocab_tokens, params=params, stage=stage, seed=seed
    )


def rebuild_models(ck: Checkpoint):
    """Reconstruct (config, vocabulary, decoder, predictor) from a checkpoint.

    Parameter shapes are cross-checked against the config snapshot; a
    mismatch is refused.
    """
    config = TrainConfig.from_dict(ck.config)
    vocabulary = Vocabulary(tokens=list(ck.vocab_tokens), min_count=0)
    p = ck.params

    def tensor(name: str) -> nm.Tensor:
        if name not in p:
            raise ValueError(f"checkpoint is missing parameter {name}")
        return nm.parameter(p[name].copy(), name)

    embedding = tensor("dec.embedding")
    if embedding.shape[0] != len(vocabulary):
        raise ValueError("embedding rows do not match the stored vocabulary")
    if embedding.shape[1] != config.n_h:
        raise ValueError("embedding width does not match configured hidden size")

    if ck.variant == "vanilla":
        decoder = VanillaParams(
            embedding=embedding,
            w_in={g: tensor(f"dec.{g}.in") for g in GATES},
            u_rec={g: tensor(f"dec.{g}.rec") for g in GATES},
            b={g: tensor(f"dec.{g}.b") for g in GATES},
            init_w=tensor("dec.init.w"),
            init_b=tensor("dec.init.b"),
        )
    else:
        factorized_rec = "dec.i.rec.a" in p
        decoder = TgmParams(
            embedding=embedding,
            fac_in={
                g: (tensor(f"dec.{g}.in.a"), tensor(f"dec.{g}.in.b"), tensor(f"dec.{g}.in.c"))
                for g in GATES
            },
            fac_rec=(
                {
                    g: (tensor(f"dec.{g}.rec.a"), tensor(f"dec.{g}.rec.b"), tensor(f"dec.{g}.rec.c"))
                    for g in GATES
                }
                if factorized_rec
                else None
            ),
            u_rec=None if factorized_rec else {g: tensor(f"dec.{g}.rec") for g in GATES},
            b={g: tensor(f"dec.{g}.b") for g in GATES},
            init_w=tensor("dec.init.w"),
            init_b=tensor("dec.init.b"),
        )
        if decoder.k != config.k or decoder.n_f != config.n_f:
            raise ValueError("factor shapes do not match the configured k / n_f")

    predictor = None
    if "pred.w1" in p:
        predictor = PredictorParams(
            w1=tensor("pred.w1"), b1=tensor("pred.b1"), w2=tensor("pred.w2"), b2=tensor("pred.b2")
        )
        if predictor.k != config.k:
            raise ValueError("predictor output does not match configured k")
    return config, vocabulary, decoder, predictor
