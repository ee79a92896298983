"""Gradient verification suite for every trainable model surface.

Runs ``grad_check`` (central finite differences) on small randomly
initialized configurations of the predictor, both decoders, and the combined
multi-task loss, including the gradient with respect to the topic
distribution itself.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .decoder import init_tgm, init_vanilla, sequence_nll_graph
from .numerics import grad_check
from .predictor import init_predictor, predict_logits, topic_loss_graph
from .trainer import multi_task_loss_graph


def gradient_suite(
    n_h: int = 8,
    n_f: int = 4,
    k: int = 3,
    vocab_size: int = 20,
    feature_dim: int = 6,
    sentence_len: int = 5,
    seed: int = 0,
    eps: float = 1e-4,
) -> dict[str, float]:
    """Max relative gradient error per model surface; all should be < 1e-4.

    The default step keeps central differences in their float64 sweet spot for
    sentence-scale losses (magnitude ~10): smaller steps hit cancellation noise
    on near-zero gradient entries before truncation error matters.
    """
    rng = np.random.default_rng(seed)
    features = rng.normal(size=feature_dim)
    tokens = [int(t) for t in rng.integers(3, vocab_size, size=sentence_len)]
    teacher = nm.softmax(rng.normal(size=k))

    results: dict[str, float] = {}

    predictor = init_predictor(feature_dim, 6, k, rng)
    pred_params = [p for _, p in predictor.named_parameters()]
    for kind in ("l2", "kl"):
        results[f"predictor_{kind}"] = grad_check(
            lambda kind=kind: topic_loss_graph(predict_logits(predictor, features), teacher, kind),
            pred_params,
            eps=eps,
        )

    vanilla = init_vanilla(vocab_size, n_h, feature_dim, rng)
    results["vanilla_sentence"] = grad_check(
        lambda: sequence_nll_graph(vanilla, features, tokens),
        [p for _, p in vanilla.named_parameters()],
        eps=eps,
    )

    tgm = init_tgm(vocab_size, n_h, n_f, k, feature_dim, rng)
    z_param = nm.parameter(nm.softmax(rng.normal(size=k)).reshape(1, k), "z")
    results["tgm_sentence"] = grad_check(
        lambda: sequence_nll_graph(tgm, features, tokens, z=z_param),
        [p for _, p in tgm.named_parameters()],
        eps=eps,
    )
    results["tgm_wrt_topics"] = grad_check(
        lambda: sequence_nll_graph(tgm, features, tokens, z=z_param), [z_param], eps=eps
    )

    joint_params = [p for _, p in tgm.named_parameters()] + pred_params
    results["multi_task"] = grad_check(
        lambda: multi_task_loss_graph(tokens, teacher, features, tgm, predictor, lam=0.3),
        joint_params,
        eps=eps,
    )
    return results
