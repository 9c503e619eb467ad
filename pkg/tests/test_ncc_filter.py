import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vc_intervene.confounder_dict import ConfounderDictionary
from vc_intervene.errors import UntrainedModel
from vc_intervene.ncc_filter import (
    NccModel,
    collider_intensity,
    filter_samples,
    load_ncc,
    make_filter,
    ncc_accuracy,
    ncc_corpus,
    ncc_score,
    ncc_scores,
    save_ncc,
    standardize,
    synth_pairs,
)
from vc_intervene.vc_head import HeadParams, PairBatch


def planted_collider():
    """x and y both cause the single dictionary entry z (coordinate-wise)."""
    s = synth_pairs("additive-noise", 16, seed=32, noise_scale=0.1)
    x = s.u
    y = s.u + 0.01 * np.random.default_rng(32).standard_normal(16)
    bystander = np.random.default_rng(33).standard_normal(16)
    batch = PairBatch(x[None, :], [0], np.stack([y, bystander]), [0, 0], [0, 0])
    dct = ConfounderDictionary(s.v[None, :], [1.0])
    return batch, dct, HeadParams.init(1, 16, 4, 0)


class TestPairs:
    def test_independent_uncorrelated(self):
        m = 400
        for seed in range(5):
            s = synth_pairs("independent", m, seed)
            assert abs(np.corrcoef(s.u, s.v)[0, 1]) < 3 / np.sqrt(m)
            assert s.label == 0

    def test_deterministic(self):
        a, b = synth_pairs("additive-noise", 30, 4), synth_pairs("additive-noise", 30, 4)
        assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)

    def test_noise_free_is_function(self):
        s = synth_pairs("additive-noise", 50, 6, noise_scale=0.0)
        order = np.argsort(s.u)
        dv = np.diff(s.v[order])
        assert (dv >= 0).all() or (dv <= 0).all()
        assert s.label == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            synth_pairs("additive-noise", 1, 0)
        with pytest.raises(ValueError):
            synth_pairs("mystery", 10, 0)

    def test_corpus_balance(self):
        U, V, y = ncc_corpus(30, 12, 0)
        assert U.shape == (30, 12) and y.mean() == pytest.approx(1 / 3)
        np.testing.assert_allclose(U.mean(axis=1), 0, atol=1e-12)

    def test_standardize_constant(self):
        assert not standardize(np.ones(5)).any()


class TestModel:
    def test_gradients(self):
        model = NccModel.init(6, 1)
        rng = np.random.default_rng(0)
        for k in ("b1", "b2"):
            # keep pre-activations off the ReLU kink at exactly zero
            model.weights[k] = rng.normal(0, 0.5, model.weights[k].shape)
        U, V, y = ncc_corpus(9, 7, 2)
        _, g = model.grads(U, V, y)
        h = 1e-6
        for k, W in model.weights.items():
            num = np.zeros_like(W)
            for idx in np.ndindex(W.shape):
                o = W[idx]
                W[idx] = o + h
                up = model.grads(U, V, y)[0]
                W[idx] = o - h
                num[idx] = (up - model.grads(U, V, y)[0]) / (2 * h)
                W[idx] = o
            assert np.abs(num - g[k]).max() <= 1e-6 * max(1.0, np.abs(num).max()), k

    def test_untrained(self):
        with pytest.raises(UntrainedModel):
            ncc_score(NccModel.init(4), np.arange(5.0), np.arange(5.0))

    def test_accuracy(self, ncc_model):
        assert ncc_accuracy(ncc_model) > 0.70

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, ncc_model, seed):
        s = synth_pairs("additive-noise", 40, seed)
        perm = np.random.default_rng(seed).permutation(40)
        assert ncc_score(ncc_model, s.u[perm], s.v[perm]) == pytest.approx(ncc_score(ncc_model, s.u, s.v), abs=1e-12)

    def test_identical_sequences(self, ncc_model):
        score = ncc_score(ncc_model, np.arange(10.0), np.arange(10.0))
        assert 0 < score < 1
        assert 0 < ncc_score(ncc_model, np.ones(10), np.ones(10)) < 1

    def test_batch_matches_single(self, ncc_model):
        U, V, _ = ncc_corpus(6, 20, 7)
        batch = ncc_scores(ncc_model, U, V)
        assert [ncc_score(ncc_model, u, v) for u, v in zip(U, V)] == pytest.approx(batch.tolist(), abs=1e-12)

    def test_save_load(self, ncc_model, tmp_path):
        save_ncc(ncc_model, tmp_path / "m")
        back = load_ncc(tmp_path / "m")
        assert back.trained and back.hidden == ncc_model.hidden
        s = synth_pairs("additive-noise", 48, 3)
        # weights are stored at single precision
        assert ncc_score(back, s.u, s.v) == pytest.approx(ncc_score(ncc_model, s.u, s.v), abs=1e-4)


class TestFilter:
    def test_planted_scores(self, ncc_model):
        batch, dct, _ = planted_collider()
        z = dct.Z[0]
        assert ncc_score(ncc_model, batch.X[0], z) > 0.8
        assert ncc_score(ncc_model, batch.Y[0], z) > 0.8
        assert ncc_score(ncc_model, batch.Y[1], z) < 0.8

    def test_planted_dropped(self, ncc_model):
        batch, dct, params = planted_collider()
        kept = filter_samples(batch, dct, ncc_model, 0.8, params)
        assert kept.n_pairs == 1
        np.testing.assert_array_equal(kept.Y[0], batch.Y[1])

    def test_tau_one_keeps_everything(self, ncc_model):
        batch, dct, params = planted_collider()
        assert filter_samples(batch, dct, ncc_model, 1.0, params) is batch

    def test_tau_zero_empties(self, ncc_model):
        batch, dct, params = planted_collider()
        out = filter_samples(batch, dct, ncc_model, 0.0, params)
        assert out.n_pairs == 0 and out.n_centers == 0

    def test_tau_range(self, ncc_model):
        batch, dct, params = planted_collider()
        with pytest.raises(ValueError):
            filter_samples(batch, dct, ncc_model, 1.5, params)

    def test_monotone_in_tau(self, ncc_model):
        rng = np.random.default_rng(0)
        n, d = 5, 12
        dct = ConfounderDictionary(rng.standard_normal((n, d)), rng.dirichlet(np.ones(n)))
        batch = PairBatch(rng.standard_normal((6, d)), rng.integers(0, n, 6), rng.standard_normal((18, d)),
                          rng.integers(0, n, 18), np.repeat(np.arange(6), 3))
        params = HeadParams.init(n, d, 4, 0)
        intensity = collider_intensity(ncc_model, batch, dct, params)
        assert intensity.shape == (18, 3)
        taus = np.linspace(0, 1, 11)
        kept = [set(np.nonzero(~(intensity > t).any(axis=1))[0]) for t in taus]
        for a, b in zip(kept, kept[1:]):
            assert a <= b
        sizes = [filter_samples(batch, dct, ncc_model, t, params).n_pairs for t in taus]
        assert sizes == sorted(sizes)
        assert sizes == [len(k) for k in kept]

    def test_make_filter(self, ncc_model):
        batch, dct, params = planted_collider()
        assert make_filter(ncc_model, 0.8)(batch, dct, params).n_pairs == 1
