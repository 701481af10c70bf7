import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from src.errors import ArgumentError, DomainError, SizeError
from src.state import SyntheticMarketConfig, TrainConfig
from src.tools.nn_model import (
    PARAM_NAMES,
    LstmRecommender,
    LstmState,
    ModelParams,
    StepOutput,
    adam_step,
    embed,
    forward_session,
    grad,
    init_adam,
    init_params,
    load_checkpoint,
    loss_and_grad,
    loss_bpr,
    loss_ce,
    lstm_step,
    output_step,
    recommend,
    save_checkpoint,
    total_loss,
    train,
    write_loss_trace,
)
from src.tools.synthgen import generate_market

from .helpers import random_sessions


def _random_params(rng: np.random.Generator, n_x: int, n1: int, n2: int, scale: float = 0.5) -> ModelParams:
    template = init_params(n_x, n1, n2, seed=0)
    return ModelParams.from_arrays({k: rng.normal(0.0, scale, size=v.shape) for k, v in template.arrays().items()})


def _negatives(rng: np.random.Generator, sessions, n_x: int, n_neg: int):
    out = []
    for s in sessions:
        rows = []
        for target in s[1:]:
            choices = [j for j in range(n_x) if j != target]
            rows.append(rng.choice(choices, size=n_neg, replace=True))
        out.append(np.asarray(rows))
    return out


def _numeric_grad(params: ModelParams, sessions, config: TrainConfig, negatives=None, h: float = 1e-5) -> ModelParams:
    numeric = params.zeros_like()
    for name in PARAM_NAMES:
        base = getattr(params, name)
        out = getattr(numeric, name)
        for idx in np.ndindex(base.shape):
            original = base[idx]
            base[idx] = original + h
            plus = total_loss(params, sessions, config, negatives)
            base[idx] = original - h
            minus = total_loss(params, sessions, config, negatives)
            base[idx] = original
            out[idx] = (plus - minus) / (2 * h)
    return numeric


class TestInitParams:
    def test_xavier_bounds(self):
        p = init_params(30, 20, 50, seed=3)
        assert np.all(np.abs(p.W3) <= np.sqrt(6.0 / (50 + 30)))
        assert np.all(np.abs(p.W1) <= np.sqrt(6.0 / (20 + 30)))
        assert np.all(np.abs(p.V) <= np.sqrt(6.0 / (50 + 50)))

    def test_biases_zero(self):
        p = init_params(7, 3, 4, seed=1)
        for name in ("b", "bf", "bg", "bq", "b3"):
            assert np.all(getattr(p, name) == 0.0)

    def test_deterministic(self):
        a, b = init_params(9, 3, 4, seed=5), init_params(9, 3, 4, seed=5)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_shapes(self):
        p = init_params(11, 3, 4)
        assert p.W1.shape == (3, 11)
        assert p.U.shape == (4, 3) and p.V.shape == (4, 4) and p.b.shape == (4,)
        assert p.W3.shape == (11, 4) and p.b3.shape == (11,)
        assert (p.n_x, p.n1, p.n2) == (11, 3, 4)


class TestEmbed:
    def test_column_lookup(self):
        p = init_params(6, 3, 4, seed=2)
        np.testing.assert_array_equal(embed(p, 4), p.W1[:, 4])

    def test_identical_columns(self):
        p = init_params(6, 3, 4, seed=2)
        p.W1[:, 1] = p.W1[:, 2]
        np.testing.assert_array_equal(embed(p, 1), embed(p, 2))

    def test_zero_embedding(self):
        p = init_params(6, 3, 4).zeros_like()
        assert not embed(p, 5).any()

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            embed(init_params(6, 3, 4), 6)


class TestLstmStep:
    def test_zero_params_gates_are_half(self):
        p = init_params(5, 3, 4).zeros_like()
        s0 = np.array([1.0, -2.0, 0.5, 0.0])
        state = lstm_step(p, np.ones(3), LstmState(s=s0, h=np.ones(4)))
        # all gates and the candidate are sigmoid(0) = 0.5
        expected_s = 0.5 * s0 + 0.25
        np.testing.assert_allclose(state.s, expected_s, atol=1e-15)
        np.testing.assert_allclose(state.h, 0.5 * np.tanh(expected_s), atol=1e-15)

    def test_matches_scalar_oracle(self, rng):
        p = _random_params(rng, 5, 3, 4)
        h1, s_prev, h_prev = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        state = lstm_step(p, h1, LstmState(s=s_prev, h=h_prev))
        for i in range(4):
            def pre(U, V, b):
                return sum(U[i, j] * h1[j] for j in range(3)) + sum(V[i, j] * h_prev[j] for j in range(4)) + b[i]

            f = 1.0 / (1.0 + np.exp(-pre(p.Uf, p.Vf, p.bf)))
            g = 1.0 / (1.0 + np.exp(-pre(p.Ug, p.Vg, p.bg)))
            q = 1.0 / (1.0 + np.exp(-pre(p.Uq, p.Vq, p.bq)))
            c = 1.0 / (1.0 + np.exp(-pre(p.U, p.V, p.b)))
            s = f * s_prev[i] + g * c
            assert abs(state.s[i] - s) < 1e-12
            assert abs(state.h[i] - q * np.tanh(s)) < 1e-12

    def test_batched_matches_single(self, rng):
        p = _random_params(rng, 5, 3, 4)
        h1 = rng.normal(size=(6, 3))
        prev = LstmState(s=rng.normal(size=(6, 4)), h=rng.normal(size=(6, 4)))
        batched = lstm_step(p, h1, prev)
        for r in range(6):
            single = lstm_step(p, h1[r], LstmState(s=prev.s[r], h=prev.h[r]))
            np.testing.assert_allclose(batched.h[r], single.h, atol=1e-14)


class TestOutputStep:
    def test_uniform(self):
        p = init_params(4, 3, 2).zeros_like()
        np.testing.assert_allclose(output_step(p, np.ones(2)).y_hat, [0.25] * 4)

    def test_two_logits(self):
        p = init_params(2, 3, 2).zeros_like()
        p.b3[:] = [1.0, 2.0]
        np.testing.assert_allclose(output_step(p, np.zeros(2)).y_hat, [0.2689414, 0.7310586], atol=1e-7)

    def test_shift_invariance(self, rng):
        p = _random_params(rng, 6, 3, 4)
        h2 = rng.normal(size=4)
        before = output_step(p, h2).y_hat
        p.b3 += 123.0
        np.testing.assert_allclose(output_step(p, h2).y_hat, before, atol=1e-12)

    def test_probabilities(self, rng):
        p = _random_params(rng, 8, 3, 4, scale=3.0)
        y = output_step(p, rng.normal(size=4)).y_hat
        assert np.all(y > 0)
        assert abs(y.sum() - 1.0) < 1e-9


class TestForwardSession:
    def test_output_counts(self):
        p = init_params(70, 3, 4)
        assert len(forward_session(p, [0, 1])) == 1
        assert len(forward_session(p, list(range(64)))) == 63

    def test_shared_prefix(self, rng):
        p = _random_params(rng, 6, 3, 4)
        a = forward_session(p, [1, 2, 3, 0])
        b = forward_session(p, [1, 2, 3, 5, 5])
        for x, y in zip(a[:3], b[:3]):
            np.testing.assert_array_equal(x.y_hat, y.y_hat)

    def test_too_short(self):
        with pytest.raises(SizeError):
            forward_session(init_params(5, 3, 4), [1])


class TestLosses:
    def test_ce_uniform(self):
        assert loss_ce(np.full(4, 0.25), 2) == pytest.approx(np.log(4.0))

    def test_ce_perfect(self):
        assert loss_ce(np.array([0.0, 1.0]), 1) == 0.0

    def test_ce_tenth(self):
        assert loss_ce(np.array([0.9, 0.1]), 1) == pytest.approx(2.302585, abs=1e-6)

    def test_ce_clamped(self):
        assert loss_ce(np.array([1.0, 0.0]), 1) == pytest.approx(-np.log(1e-12))

    def test_bpr_equal_scores(self):
        step = StepOutput(z=np.array([0.5, 0.5, 0.0]), y_hat=np.array([0.4, 0.3, 0.3]))
        assert loss_bpr(step, 0, [1]) == pytest.approx(-np.log(0.3 * 0.5), abs=1e-12)

    def test_bpr_large_margin(self):
        step = StepOutput(z=np.array([60.0, 0.0]), y_hat=np.array([0.7, 0.3]))
        assert loss_bpr(step, 0, [1]) == pytest.approx(-np.log(0.3), abs=1e-9)

    def test_bpr_duplicates_add(self):
        z = np.array([0.2, -0.1, 0.4, 1.0])
        y = np.exp(z) / np.exp(z).sum()
        step = StepOutput(z=z, y_hat=y)
        negs = [1, 1, 3]
        oracle = sum(y[j] * expit(z[0] - z[j]) for j in negs)
        assert loss_bpr(step, 0, negs) == pytest.approx(-np.log(oracle), abs=1e-12)

    def test_bpr_target_in_negatives(self):
        step = StepOutput(z=np.zeros(3), y_hat=np.full(3, 1 / 3))
        with pytest.raises(ArgumentError):
            loss_bpr(step, 1, [0, 1])


class TestGrad:
    @pytest.mark.parametrize("seed", range(20))
    def test_cross_entropy_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        n_x, n1, n2 = int(rng.integers(3, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        params = _random_params(rng, n_x, n1, n2)
        sessions = random_sessions(rng, 2, n_x, max_len=6)
        config = TrainConfig(loss="cross-entropy")
        analytic = grad(params, sessions, config)
        numeric = _numeric_grad(params, sessions, config)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(analytic, name), getattr(numeric, name), rtol=1e-4, atol=1e-7, err_msg=name)

    @pytest.mark.parametrize("seed", range(20))
    def test_bpr_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        n_x, n1, n2 = int(rng.integers(3, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        params = _random_params(rng, n_x, n1, n2)
        sessions = random_sessions(rng, 2, n_x, max_len=6)
        negatives = _negatives(rng, sessions, n_x, n_neg=int(rng.integers(1, n_x)))
        config = TrainConfig(loss="bpr", neg_samples=n_x - 1)
        analytic = grad(params, sessions, config, negatives=negatives)
        numeric = _numeric_grad(params, sessions, config, negatives)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(analytic, name), getattr(numeric, name), rtol=1e-4, atol=1e-7, err_msg=name)

    def test_tight_tolerance_single_session(self):
        rng = np.random.default_rng(7)
        params = _random_params(rng, 5, 3, 4)
        sessions = [[0, 3, 1, 4]]
        config = TrainConfig()
        analytic = grad(params, sessions, config)
        numeric = _numeric_grad(params, sessions, config)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(analytic, name), getattr(numeric, name), rtol=1e-5, atol=1e-8)

    def test_empty_batch(self):
        params = init_params(5, 3, 4)
        loss, steps, g = loss_and_grad(params, [], TrainConfig())
        assert (loss, steps) == (0.0, 0)
        assert all(not v.any() for v in g.arrays().values())

    def test_additive_over_sessions(self, rng):
        params = _random_params(rng, 6, 3, 4)
        a, b = [0, 1, 2, 5], [3, 4]
        config = TrainConfig()
        both = grad(params, [a, b], config)
        split = grad(params, [a], config) + grad(params, [b], config)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(getattr(both, name), getattr(split, name), atol=1e-12)

    def test_batched_loss_matches_per_session(self, rng):
        params = _random_params(rng, 7, 3, 4)
        sessions = random_sessions(rng, 5, 7, max_len=8)
        loss, steps, _ = loss_and_grad(params, sessions, TrainConfig())
        assert loss == pytest.approx(total_loss(params, sessions, TrainConfig()), rel=1e-12)
        assert steps == sum(len(s) - 1 for s in sessions)


class TestAdam:
    def test_first_step_magnitude(self):
        w = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.array([0.5, -4.0, 1e-3])}
        new, state = adam_step(init_adam(w), w, g)
        np.testing.assert_allclose(new["w"] - w["w"], -1e-3 * np.sign(g["w"]), rtol=1e-4)
        assert state.t == 1

    def test_zero_gradient_keeps_params(self):
        w = {"w": np.array([0.3, 0.7])}
        adam = init_adam(w)
        for _ in range(10):
            w_next, adam = adam_step(adam, w, {"w": np.zeros(2)})
            np.testing.assert_array_equal(w_next["w"], w["w"])

    def test_quadratic_convergence(self):
        config = TrainConfig(lr=0.1)
        w = {"w": np.array([1.0])}
        adam = init_adam(w, config)
        for _ in range(200):
            w, adam = adam_step(adam, w, {"w": 2.0 * w["w"]})
        assert abs(w["w"][0]) < 0.05

    def test_inputs_untouched(self):
        params = init_params(4, 2, 3, seed=1)
        before = params.copy()
        gradient = ModelParams.from_arrays({k: np.ones_like(v) for k, v in params.arrays().items()})
        adam = init_adam(params)
        adam_step(adam, params, gradient)
        assert adam.t == 0
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(params, name), getattr(before, name))


class TestTrain:
    def test_overfits_small_set(self):
        sessions = [[i, 10 + i, 10 + (i + 3) % 10, (i + 7) % 10] for i in range(10)]
        config = TrainConfig(epochs=200, batch_size=1, lr=0.01, seed=0)
        params, trace = train(sessions, 20, config)
        assert len(trace) == 200
        assert trace[-1] < 0.1
        for s in sessions:
            for t in range(1, len(s)):
                assert recommend(params, s[:t], 1) == [s[t]]

    def test_deterministic(self, tiny_train):
        rng = np.random.default_rng(0)
        sessions = random_sessions(rng, 40, 9)
        a, trace_a = train(sessions, 9, tiny_train)
        b, trace_b = train(sessions, 9, tiny_train)
        assert trace_a == trace_b
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_bpr_runs_and_is_deterministic(self, tiny_train):
        config = tiny_train.model_copy(update={"loss": "bpr"})
        sessions = random_sessions(np.random.default_rng(1), 30, 9)
        a, _ = train(sessions, 9, config)
        b, _ = train(sessions, 9, config)
        np.testing.assert_array_equal(a.W3, b.W3)

    def test_loss_decreases_early(self):
        market, _ = generate_market(SyntheticMarketConfig(n_x=50, n_sessions=2000, temperature=0.3, seed=4))
        _, trace = train(market.sessions, 50, TrainConfig(epochs=5, n1=8, n2=16, seed=0))
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_empty(self, tiny_train):
        with pytest.raises(SizeError):
            train([], 5, tiny_train)

    def test_bpr_needs_fewer_negatives_than_catalog(self, tiny_train):
        config = tiny_train.model_copy(update={"loss": "bpr", "neg_samples": 5})
        with pytest.raises(ArgumentError):
            train([[0, 1]], 5, config)


class TestRecommend:
    def _params_with_scores(self, scores):
        p = init_params(len(scores), 2, 3).zeros_like()
        p.b3[:] = np.log(scores)
        return p

    def test_argmax_order(self):
        assert recommend(self._params_with_scores([0.1, 0.4, 0.2, 0.3]), [0], 2) == [1, 3]

    def test_full_catalog_permutation(self):
        p = init_params(7, 2, 3, seed=4)
        assert sorted(recommend(p, [1, 2], 7)) == list(range(7))

    def test_tie_goes_to_lower_index(self):
        p = self._params_with_scores([0.1, 0.1, 0.3, 0.1, 0.1, 0.3])
        assert recommend(p, [0], 2) == [2, 5]
        assert recommend(p, [0], 1) == [2]

    def test_k_too_large(self):
        with pytest.raises(ArgumentError):
            recommend(init_params(4, 2, 3), [0], 5)

    def test_cached_recommender_matches(self, rng):
        p = _random_params(rng, 8, 3, 4)
        cached = LstmRecommender(p)
        session = [3, 1, 7, 0, 2]
        for t in range(1, len(session)):
            assert cached(session[:t], 3) == recommend(p, session[:t], 3)
        assert cached([5, 5], 3) == recommend(p, [5, 5], 3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(6, 3, 4, seed=8)
        config = TrainConfig(loss="bpr", neg_samples=3, seed=8)
        save_checkpoint(tmp_path / "m.npz", params, config, id_map="m.idmap.csv")
        loaded, loaded_config, meta = load_checkpoint(tmp_path / "m.npz")
        assert loaded_config == config
        assert meta["id_map"] == "m.idmap.csv"
        assert (meta["n_x"], meta["n1"], meta["n2"]) == (6, 3, 4)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))

    def test_loss_trace_csv(self, tmp_path):
        write_loss_trace(tmp_path / "trace.csv", [2.5, 1.25])
        frame = pd.read_csv(tmp_path / "trace.csv")
        assert list(frame.columns) == ["epoch", "mean_loss"]
        assert frame["epoch"].tolist() == [1, 2]
        np.testing.assert_allclose(frame["mean_loss"], [2.5, 1.25])

    def test_loss_trace_reads_back_exactly(self, tmp_path):
        trace = [0.1 + 0.2, 1 / 3, 2.0 / 7.0]
        write_loss_trace(tmp_path / "trace.csv", trace)
        frame = pd.read_csv(tmp_path / "trace.csv", float_precision="round_trip")
        assert frame["mean_loss"].tolist() == trace
