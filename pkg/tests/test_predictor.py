import numpy as np
import pytest

from topiccap import numerics as nm
from topiccap.mining import mine_topics
from topiccap.numerics import grad_check
from topiccap.predictor import (
    PredictorParams,
    init_predictor,
    predict_logits,
    predict_topics,
    predict_topics_batch,
    topic_loss,
    topic_loss_graph,
    train_predictor,
)
from topiccap.synthetic import GeneratorConfig, generate_synthetic_corpus
from topiccap.trainer import TrainConfig


def zero_predictor(input_dim=6, hidden=4, k=3) -> PredictorParams:
    return PredictorParams(
        w1=nm.parameter(np.zeros((hidden, input_dim)), "pred.w1"),
        b1=nm.parameter(np.zeros(hidden), "pred.b1"),
        w2=nm.parameter(np.zeros((k, hidden)), "pred.w2"),
        b2=nm.parameter(np.zeros(k), "pred.b2"),
    )


class TestPredictTopics:
    def test_zero_params_give_uniform(self):
        params = zero_predictor(k=4)
        z = predict_topics(np.ones(6), params)
        np.testing.assert_allclose(z, np.full(4, 0.25), atol=1e-12)

    def test_output_on_simplex(self):
        rng = np.random.default_rng(0)
        params = init_predictor(8, 5, 6, rng)
        for _ in range(50):
            z = predict_topics(rng.normal(size=8) * 3, params)
            assert np.all(z > 0)
            assert abs(z.sum() - 1.0) < 1e-9

    def test_dim_mismatch_rejected(self):
        params = zero_predictor(input_dim=6)
        with pytest.raises(ValueError, match="feature dim"):
            predict_topics(np.ones(5), params)


class TestTopicLoss:
    def test_zero_at_identity(self):
        z = np.array([0.2, 0.3, 0.5])
        assert topic_loss(z, z, "l2") == 0.0
        assert topic_loss(z, z, "kl") == pytest.approx(0.0, abs=1e-12)

    def test_l2_between_opposite_corners(self):
        assert topic_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), "l2") == 2.0

    def test_kl_uniform_vs_one_hot(self):
        uniform = np.full(4, 0.25)
        one_hot = np.array([1.0, 0.0, 0.0, 0.0])
        assert topic_loss(uniform, one_hot, "kl") == pytest.approx(np.log(4.0), abs=1e-12)

    def test_kl_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            z = rng.dirichlet(np.ones(5)) + 1e-12
            z /= z.sum()
            t = rng.dirichlet(np.ones(5))
            assert topic_loss(z, t, "kl") >= -1e-12

    def test_simplex_violation_rejected(self):
        with pytest.raises(ValueError, match="simplex"):
            topic_loss(np.array([0.6, 0.6]), np.array([0.5, 0.5]), "l2")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            topic_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5]), "cosine")

    def test_graph_matches_public_values(self):
        rng = np.random.default_rng(2)
        params = init_predictor(6, 5, 4, rng)
        x = rng.normal(size=6)
        teacher = rng.dirichlet(np.ones(4))
        z = predict_topics(x, params)
        for kind in ("l2", "kl"):
            with nm.no_grad():
                graph_value = float(
                    topic_loss_graph(predict_logits(params, x), teacher, kind).value
                )
            assert graph_value == pytest.approx(topic_loss(z, teacher, kind), abs=1e-10)


class TestPredictorGradients:
    def test_both_loss_kinds_pass_grad_check(self):
        rng = np.random.default_rng(3)
        params = init_predictor(7, 6, 4, rng)
        x = rng.normal(size=(3, 7))
        teacher = rng.dirichlet(np.ones(4), size=3)
        tensors = [p for _, p in params.named_parameters()]
        for kind in ("l2", "kl"):
            err = grad_check(
                lambda kind=kind: topic_loss_graph(predict_logits(params, x), teacher, kind),
                tensors,
                eps=1e-5,
            )
            assert err < 1e-4


def _mined_corpus(seed=17):
    config = GeneratorConfig(
        k_true=3, train_per_topic=20, val_per_topic=4, test_per_topic=4,
        separation=6.0, mix_fraction=0.0,
    )
    corpus = generate_synthetic_corpus(config, seed=seed)
    teachers, _ = mine_topics(corpus, k=3, restarts=10, seed=seed)
    return corpus, teachers


class TestTrainPredictor:
    def test_zero_epochs_is_a_no_op(self):
        corpus, teachers = _mined_corpus()
        config = TrainConfig(k=3, stage1_epochs=0, seed=5)
        rng = np.random.default_rng([5, 1])
        reference = init_predictor(sum(corpus.feature_dims), config.predictor_hidden, 3, rng)
        params, history = train_predictor(corpus, teachers, config)
        assert history == []
        for (_, got), (_, want) in zip(params.named_parameters(), reference.named_parameters()):
            np.testing.assert_array_equal(got.value, want.value)

    def test_loss_decreases_over_first_epochs(self):
        corpus, teachers = _mined_corpus()
        config = TrainConfig(k=3, stage1_epochs=5, lr=1e-3, seed=6)
        _, history = train_predictor(corpus, teachers, config)
        losses = [h["train_topic"] for h in history]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_seed_determinism(self):
        corpus, teachers = _mined_corpus()
        config = TrainConfig(k=3, stage1_epochs=8, lr=1e-3, seed=7)
        params_a, hist_a = train_predictor(corpus, teachers, config)
        params_b, hist_b = train_predictor(corpus, teachers, config)
        assert hist_a == hist_b or all(
            a["train_topic"] == b["train_topic"] for a, b in zip(hist_a, hist_b)
        )
        for (_, a), (_, b) in zip(params_a.named_parameters(), params_b.named_parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_missing_teacher_rejected(self):
        corpus, teachers = _mined_corpus()
        teachers = dict(teachers)
        first = corpus.split("train")[0].id
        del teachers[first]
        with pytest.raises(ValueError, match="missing teacher"):
            train_predictor(corpus, teachers, TrainConfig(k=3))

    def test_holdout_fidelity_on_separable_corpus(self):
        corpus, teachers = _mined_corpus()
        config = TrainConfig(k=3, stage1_epochs=200, lr=1e-3, seed=8, patience=50)
        params, _ = train_predictor(corpus, teachers, config)
        train = corpus.split("train")
        holdout = [train[i] for i in range(9, len(train), 10)]
        z = predict_topics_batch(params, np.stack([r.features() for r in holdout]))
        gaps = [
            topic_loss(z[i], teachers[r.id], "l2") for i, r in enumerate(holdout)
        ]
        assert float(np.mean(gaps)) <= 0.1
