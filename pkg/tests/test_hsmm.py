import numpy as np
import pytest

from serpbandit.hsmm import (
    HsmmModel,
    ZeroLikelihood,
    backward,
    filter_posterior,
    fit,
    forward,
    forward_scaled,
    log_likelihood,
    predict_next,
    reestimate,
)
from serpbandit.errors import SerpBanditError


# ---------------------------------------------------------------------------
# Brute-force enumeration oracle: every quantity below is computed by
# summing over all explicit segmentations, independent of the recursions.
# ---------------------------------------------------------------------------


def segmentations(T, n_states, max_duration):
    """All [(state, duration), ...] covering exactly T steps, no repeats."""
    out = []

    def extend(prefix, covered):
        if covered == T:
            out.append(tuple(prefix))
            return
        for d in range(1, min(max_duration, T - covered) + 1):
            for j in range(n_states):
                if prefix and prefix[-1][0] == j:
                    continue
                prefix.append((j, d))
                extend(prefix, covered + d)
                prefix.pop()

    extend([], 0)
    return out


def block_prob(model, state, obs_block):
    p = 1.0
    for symbol in obs_block:
        p *= model.emit[state, symbol]
    return p


def path_prob(model, obs, path):
    j0, d0 = path[0]
    p = model.init[j0, d0 - 1] * block_prob(model, j0, obs[:d0])
    pos = d0
    prev = (j0, d0)
    for j, d in path[1:]:
        p *= model.trans[prev[0], prev[1] - 1, j, d - 1]
        p *= block_prob(model, j, obs[pos : pos + d])
        pos += d
        prev = (j, d)
    return p


def brute_likelihood(model, obs):
    return sum(
        path_prob(model, obs, path)
        for path in segmentations(len(obs), model.n_states, model.max_duration)
    )


def brute_filter(model, obs, t):
    """Posterior over the last segment of complete segmentations of obs[:t]."""
    table = np.zeros((model.n_states, model.max_duration))
    for path in segmentations(t, model.n_states, model.max_duration):
        j, d = path[-1]
        table[j, d - 1] += path_prob(model, obs[:t], path)
    return table / table.sum()


def brute_predict(model, obs, t):
    """Posterior over the next segment after a prefix of length t."""
    table = np.zeros((model.n_states, model.max_duration))
    total = 0.0
    for path in segmentations(t, model.n_states, model.max_duration):
        p = path_prob(model, obs[:t], path)
        total += p
        i, dp = path[-1]
        table += p * model.trans[i, dp - 1]
    return table / total


def brute_expected_counts(model, obs):
    """Posterior-weighted transition and per-step emission counts."""
    exp_trans = np.zeros_like(model.trans)
    exp_emit = np.zeros_like(model.emit)
    Z = brute_likelihood(model, obs)
    for path in segmentations(len(obs), model.n_states, model.max_duration):
        w = path_prob(model, obs, path) / Z
        pos = 0
        for k, (j, d) in enumerate(path):
            if k > 0:
                i, dp = path[k - 1]
                exp_trans[i, dp - 1, j, d - 1] += w
            for s in range(pos, pos + d):
                exp_emit[j, obs[s]] += w
            pos += d
    return exp_trans, exp_emit


def hmm_forward(pi, A, emit, obs):
    """Reference forward pass of a plain HMM (used for the D=1 reduction)."""
    alpha = pi * emit[:, obs[0]]
    for symbol in obs[1:]:
        alpha = (alpha @ A) * emit[:, symbol]
    return alpha


def random_instance(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 4))
    D = int(rng.integers(1, 4))
    V = int(rng.integers(2, 4))
    T = int(rng.integers(1, 7))
    model = HsmmModel.random(M, D, V, seed=seed)
    obs = [int(v) for v in rng.integers(0, V, size=T)]
    return model, obs


# ---------------------------------------------------------------------------


class TestForward:
    def test_t1_base_case(self):
        model = HsmmModel.random(2, 3, 2, seed=1)
        obs = [1]
        _, loglik = forward(model, obs)
        expected = sum(model.init[j, 0] * model.emit[j, 1] for j in range(2))
        assert np.exp(loglik) == pytest.approx(expected, abs=1e-12)

    def test_uniform_model_quarter(self):
        # uniform everything with durations pinned to 1: emissions contribute
        # (1/V)^T and the state sum telescopes to 1
        M, V = 2, 2
        init = np.full((M, 1), 1.0 / M)
        trans = np.zeros((M, 1, M, 1))
        for i in range(M):
            for j in range(M):
                if i != j:
                    trans[i, 0, j, 0] = 1.0 / (M - 1)
        emit = np.full((M, V), 1.0 / V)
        model = HsmmModel(M, 1, V, init, trans, emit)
        model.validate()
        _, loglik = forward(model, [0, 1])
        assert np.exp(loglik) == pytest.approx(0.25, abs=1e-12)

    def test_duration_one_reduces_to_hmm(self):
        rng = np.random.default_rng(8)
        M, V, T = 2, 3, 5
        model = HsmmModel.random(M, 1, V, seed=8)
        obs = [int(v) for v in rng.integers(0, V, size=T)]
        pi = model.init[:, 0]
        A = model.trans[:, 0, :, 0]
        alpha_hmm = hmm_forward(pi, A, model.emit, obs)
        _, loglik = forward(model, obs)
        assert np.exp(loglik) == pytest.approx(alpha_hmm.sum(), rel=1e-12)

    def test_matches_enumeration(self):
        model = HsmmModel.random(2, 2, 2, seed=3)
        obs = [0, 1, 1, 0]
        _, loglik = forward(model, obs)
        assert abs(np.exp(loglik) - brute_likelihood(model, obs)) < 1e-10

    def test_zero_likelihood_raises(self):
        M, V = 2, 2
        init = np.full((M, 1), 0.5)
        trans = np.zeros((M, 1, M, 1))
        trans[0, 0, 1, 0] = 1.0
        trans[1, 0, 0, 0] = 1.0
        emit = np.array([[1.0, 0.0], [1.0, 0.0]])  # symbol 1 is impossible
        model = HsmmModel(M, 1, V, init, trans, emit)
        with pytest.raises(ZeroLikelihood):
            forward(model, [0, 1])

    def test_rejects_out_of_vocab_symbol(self):
        model = HsmmModel.random(2, 2, 2, seed=0)
        with pytest.raises(SerpBanditError):
            forward(model, [0, 5])


class TestBackward:
    def test_boundary_is_one(self):
        model = HsmmModel.random(3, 2, 2, seed=5)
        obs = [0, 1, 0]
        lb = backward(model, obs)
        assert (lb[len(obs)] == 0.0).all()

    def test_forward_backward_covering_identity(self):
        # summing alpha * beta over all segments covering time t gives the
        # total likelihood at every t
        model = HsmmModel.random(2, 3, 2, seed=11)
        obs = [0, 1, 1, 0, 1]
        T = len(obs)
        la, loglik = forward(model, obs)
        lb = backward(model, obs)
        ab = np.exp(la[1:] + lb[1:])  # (T, M, D), index e-1 = segment end
        for t in range(1, T + 1):
            total = 0.0
            for end in range(t, T + 1):
                for d in range(1, model.max_duration + 1):
                    if end - d + 1 <= t <= end:
                        total += ab[end - 1, :, d - 1].sum()
            assert total == pytest.approx(np.exp(loglik), rel=1e-10)


class TestPosteriors:
    def test_filter_normalizes(self):
        model = HsmmModel.random(3, 3, 3, seed=2)
        obs = [0, 1, 2, 1]
        la, _ = forward(model, obs)
        for t in range(1, len(obs) + 1):
            assert filter_posterior(model, la, t).sum() == pytest.approx(1.0)

    def test_filter_matches_enumeration(self):
        model = HsmmModel.random(2, 2, 2, seed=7)
        obs = [0, 1, 1, 0]
        la, _ = forward(model, obs)
        for t in (1, 2, 3, 4):
            expected = brute_filter(model, obs, t)
            assert np.abs(filter_posterior(model, la, t) - expected).max() < 1e-10

    def test_filter_single_possible_segmentation(self):
        M, V = 2, 2
        init = np.zeros((M, 1))
        init[0, 0] = 1.0
        trans = np.zeros((M, 1, M, 1))
        trans[0, 0, 1, 0] = 1.0
        trans[1, 0, 0, 0] = 1.0
        emit = np.array([[1.0, 0.0], [0.0, 1.0]])
        model = HsmmModel(M, 1, V, init, trans, emit)
        la, _ = forward(model, [0, 1, 0])
        post = filter_posterior(model, la, 3)
        assert post[0, 0] == pytest.approx(1.0)

    def test_predict_normalizes(self):
        model = HsmmModel.random(3, 2, 2, seed=4)
        obs = [0, 1, 1]
        la, _ = forward(model, obs)
        for t in (1, 2, 3):
            assert predict_next(model, la, t).sum() == pytest.approx(1.0)

    def test_predict_matches_enumeration(self):
        model = HsmmModel.random(2, 2, 2, seed=9)
        obs = [1, 0, 1, 1]
        la, _ = forward(model, obs)
        for t in (1, 2, 3, 4):
            expected = brute_predict(model, obs, t)
            assert np.abs(predict_next(model, la, t) - expected).max() < 1e-10

    def test_predict_deterministic_successor(self):
        M, V = 2, 2
        init = np.zeros((M, 2))
        init[0, 1] = 1.0  # start in state 0 for two steps
        trans = np.zeros((M, 2, M, 2))
        trans[0, :, 1, 0] = 1.0  # state 0 -> state 1, duration 1
        trans[1, :, 0, 1] = 1.0  # state 1 -> state 0, duration 2
        emit = np.array([[0.5, 0.5], [0.5, 0.5]])
        model = HsmmModel(M, 2, V, init, trans, emit)
        model.validate()
        la, _ = forward(model, [0, 1])
        prediction = predict_next(model, la, 2)
        assert prediction[1, 0] == pytest.approx(1.0)


class TestScaledForward:
    def test_agrees_with_log_domain(self):
        for seed in range(10):
            model, obs = random_instance(seed)
            _, log_ll = forward(model, obs)
            _, _, scaled_ll = forward_scaled(model, obs)
            assert abs(log_ll - scaled_ll) < 1e-8

    def test_scaled_slices_match_filter(self):
        model = HsmmModel.random(2, 3, 2, seed=6)
        obs = [0, 0, 1, 1]
        la, _ = forward(model, obs)
        alpha_s, _, _ = forward_scaled(model, obs)
        for t in range(1, len(obs) + 1):
            assert np.abs(
                alpha_s[t] / alpha_s[t].sum() - filter_posterior(model, la, t)
            ).max() < 1e-10


class TestReestimation:
    def deterministic_model(self):
        M, D, V = 2, 2, 2
        init = np.zeros((M, D))
        init[0, 1] = 1.0
        trans = np.zeros((M, D, M, D))
        trans[0, :, 1, 0] = 1.0
        trans[1, :, 0, 1] = 1.0
        emit = np.array([[1.0, 0.0], [0.0, 1.0]])
        model = HsmmModel(M, D, V, init, trans, emit)
        model.validate()
        return model

    def test_fixed_point_on_generating_model(self):
        model = self.deterministic_model()
        corpus = [[0, 0, 1]]  # the only sequence the model can emit for T=3
        updated = reestimate(model, corpus)
        assert np.allclose(updated.init, model.init)
        assert np.allclose(updated.trans, model.trans)
        assert np.allclose(updated.emit, model.emit)

    def test_expected_counts_match_enumeration(self):
        model = HsmmModel.random(2, 2, 2, seed=21)
        obs = [0, 1, 1, 0]
        exp_trans, exp_emit = brute_expected_counts(model, obs)
        updated = reestimate(model, [obs])
        for i in range(2):
            for dp in range(2):
                mass = exp_trans[i, dp].sum()
                if mass > 0:
                    assert np.abs(updated.trans[i, dp] - exp_trans[i, dp] / mass).max() < 1e-10
                else:
                    assert np.allclose(updated.trans[i, dp], model.trans[i, dp])
        for j in range(2):
            assert np.abs(updated.emit[j] - exp_emit[j] / exp_emit[j].sum()).max() < 1e-10

    def test_monotone_log_likelihood(self):
        rng = np.random.default_rng(17)
        model = HsmmModel.random(3, 3, 4, seed=17)
        corpus = [[int(v) for v in rng.integers(0, 4, size=rng.integers(4, 12))] for _ in range(20)]
        _, history = fit(model, corpus, iterations=10)
        diffs = np.diff(history)
        assert (diffs >= -1e-9).all()
        assert len(history) == 11

    def test_invariants_preserved(self):
        rng = np.random.default_rng(23)
        model = HsmmModel.random(2, 3, 3, seed=23)
        corpus = [[int(v) for v in rng.integers(0, 3, size=6)] for _ in range(5)]
        updated = reestimate(model, corpus)
        updated.validate()

    def test_empty_corpus_rejected(self):
        with pytest.raises(SerpBanditError):
            reestimate(HsmmModel.random(2, 2, 2, seed=0), [])


class TestModelLifecycle:
    def test_random_model_validates(self):
        HsmmModel.random(3, 4, 5, seed=12).validate()

    def test_single_state_rejected(self):
        with pytest.raises(SerpBanditError):
            HsmmModel.random(1, 2, 2, seed=0)

    def test_save_load_round_trip(self, tmp_path):
        model = HsmmModel.random(3, 2, 4, seed=31)
        path = str(tmp_path / "model.bin")
        model.save(path)
        loaded = HsmmModel.load(path)
        assert loaded.n_states == 3 and loaded.max_duration == 2 and loaded.n_symbols == 4
        assert (loaded.init == model.init).all()
        assert (loaded.trans == model.trans).all()
        assert (loaded.emit == model.emit).all()

    def test_log_likelihood_sums_sequences(self):
        model = HsmmModel.random(2, 2, 2, seed=2)
        corpus = [[0, 1], [1, 0, 1]]
        total = log_likelihood(model, corpus)
        parts = sum(forward(model, obs)[1] for obs in corpus)
        assert total == pytest.approx(parts)
