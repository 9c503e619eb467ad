import json

import numpy as np
import pytest

from vc_intervene.annot_ingest import parse_tsv, presence_sets
from vc_intervene.discrete_intervention import presence_tables
from vc_intervene.errors import InvalidWorld, UnreachableCondition
from vc_intervene.scm_sim import (
    ScmWorld,
    deconfounded_world,
    fixture_world,
    joint_table,
    load_world,
    oracle_conditional,
    oracle_intervention,
    oracle_marginal,
    oracle_tables,
    sample_scenes,
    save_world,
)


def world(n, h, priors, parents, probs, effects=None, **kw):
    return ScmWorld(n, h, priors, parents, probs, effects, **kw)


def independent_world():
    return world(3, 2, [0.3, 0.6], [[0], [1], []], [[0.2, 0.7], [0.1, 0.5], [0.4]])


def empirical_cond(presence, n):
    p = presence.astype(float)
    both = p.T @ p
    return both / np.diag(both)[:, None]


class TestSampling:
    def test_all_ones(self):
        w = world(3, 1, [0.5], [[0], [], [0]], [[1.0, 1.0], [1.0], [1.0, 1.0]])
        assert sample_scenes(w, 50, 0).presence.all()

    def test_deterministic(self, reference_world):
        a = sample_scenes(reference_world, 1000, 7)
        b = sample_scenes(reference_world, 1000, 7)
        np.testing.assert_array_equal(a.presence, b.presence)
        np.testing.assert_array_equal(a.confounders, b.confounders)

    def test_conditional_at_200k(self, reference_world):
        s = sample_scenes(reference_world, 200_000, 11)
        cond, _ = oracle_tables(reference_world)
        emp = empirical_cond(s.presence, reference_world.n_categories)
        assert np.abs(emp - cond).max() < 0.01

    @pytest.mark.slow
    def test_conditional_at_one_million(self, reference_world):
        s = sample_scenes(reference_world, 1_000_000, 12)
        cond, _ = oracle_tables(reference_world)
        emp = empirical_cond(s.presence, reference_world.n_categories)
        assert np.abs(emp - cond).max() < 0.005

    def test_zero_scenes(self, reference_world):
        s = sample_scenes(reference_world, 0, 0)
        assert s.presence.shape == (0, 6)
        assert s.to_tsv(reference_world.names) == ""

    def test_tsv_through_ingest(self, reference_world):
        s = sample_scenes(reference_world, 200, 1)
        ds = parse_tsv(s.to_tsv(reference_world.names))
        sets = dict(presence_sets(ds, 1))
        for i, row in enumerate(s.presence):
            names = {reference_world.names[c] for c in np.nonzero(row)[0]}
            assert {ds.categories.names[c] for c in sets.get(i, ())} == names


class TestOracles:
    def test_joint_sums_to_one(self, reference_world):
        _, w = joint_table(reference_world)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        _, w = joint_table(reference_world, clamp={3: True})
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_independent_world(self):
        w = independent_world()
        for x in range(3):
            for y in range(3):
                if x != y:
                    assert oracle_conditional(w, x, y) == pytest.approx(oracle_marginal(w, y), abs=1e-12)
                    assert oracle_intervention(w, x, y) == pytest.approx(oracle_marginal(w, y), abs=1e-12)

    def test_unreachable(self):
        w = world(2, 0, [], [[], []], [[0.0], [0.5]])
        with pytest.raises(UnreachableCondition):
            oracle_conditional(w, 0, 1)

    def test_direct_effect_only(self):
        eff = np.zeros((2, 2))
        eff[0, 1] = 1.3
        w = world(2, 0, [], [[], []], [[0.4], [0.3]], eff)
        expect = 1 / (1 + np.exp(-(np.log(0.3 / 0.7) + 1.3)))
        assert oracle_intervention(w, 0, 1) == pytest.approx(expect, abs=1e-12)
        assert oracle_conditional(w, 0, 1) == pytest.approx(expect, abs=1e-12)

    def test_designed_gap(self, reference_world):
        cond = oracle_conditional(reference_world, 2, 3)
        do = oracle_intervention(reference_world, 2, 3)
        assert cond == pytest.approx(0.644, abs=1e-12)
        assert do == pytest.approx(0.47, abs=1e-12)
        assert abs(cond - do) >= 0.05

    def test_prior_invariance(self, reference_world):
        # under do(sink), street_tag descends from confounder 1 only
        d = reference_world.to_dict()
        d["confounder_priors"] = [0.9, 0.4]
        moved = ScmWorld.from_dict(d)
        assert oracle_intervention(moved, 2, 1) == pytest.approx(oracle_intervention(reference_world, 2, 1), abs=1e-12)
        assert oracle_intervention(moved, 2, 3) != pytest.approx(oracle_intervention(reference_world, 2, 3), abs=1e-3)

    def test_unshared_confounders_give_equal_tables(self):
        w = world(3, 2, [0.3, 0.6], [[0], [1], [1]], [[0.2, 0.7], [0.1, 0.5], [0.3, 0.8]])
        assert oracle_conditional(w, 0, 1) == pytest.approx(oracle_intervention(w, 0, 1), abs=1e-12)
        assert oracle_conditional(w, 1, 2) != pytest.approx(oracle_intervention(w, 1, 2), abs=1e-3)

    def test_tables_match_scalar_oracles(self, reference_world):
        cond, do = oracle_tables(reference_world)
        assert cond[3, 4] == pytest.approx(oracle_conditional(reference_world, 3, 4), abs=1e-12)
        assert do[2, 4] == pytest.approx(oracle_intervention(reference_world, 2, 4), abs=1e-12)
        np.testing.assert_allclose(np.diag(do), 1.0)


class TestBackdoor:
    def test_proxy_world_recovers_intervention(self, reference_world):
        s = sample_scenes(reference_world, 200_000, 0)
        _, do = oracle_tables(reference_world)
        for x in range(2, 6):
            _, est = presence_tables(s.presence, reference_world.adjustment_set(x), rows=[x])
            assert np.nanmax(np.abs(est[x] - do[x])) < 0.02

    def test_noisy_proxies_fail(self):
        w = fixture_world("noisy_proxy_world")
        s = sample_scenes(w, 200_000, 0)
        _, do = oracle_tables(w)
        _, est = presence_tables(s.presence, w.adjustment_set(2), rows=[2])
        assert abs(est[2, 3] - do[2, 3]) > 0.05

    def test_adjustment_set(self, reference_world):
        assert reference_world.adjustment_set(4) == [0, 1, 2]
        assert reference_world.adjustment_set(0) == [1]


class TestWorldFiles:
    def test_round_trip(self, tmp_path, reference_world):
        save_world(reference_world, tmp_path / "w.json")
        again = load_world(tmp_path / "w.json")
        assert again.to_dict() == reference_world.to_dict()

    def test_bad_json(self, tmp_path):
        p = tmp_path / "w.json"
        p.write_text("{")
        with pytest.raises(InvalidWorld):
            load_world(p)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "w.json"
        p.write_text(json.dumps({"n_categories": 2}))
        with pytest.raises(InvalidWorld):
            load_world(p)

    @pytest.mark.parametrize("change", [
        {"confounder_priors": [1.5, 0.4]},
        {"presence_probs": [[0, 1], [0, 1], [0.2], [0.1, 0.7, 0.3, 0.85], [0.15, 0.5, 0.35, 0.6], [0.2, 0.6]]},
        {"parent_map": [[0], [1], [0], [0, 3], [0, 1], [1]]},
        {"names": ["a", "a", "b", "c", "d", "e"]},
    ])
    def test_invalid(self, reference_world, change):
        d = dict(reference_world.to_dict(), **change)
        with pytest.raises(InvalidWorld):
            ScmWorld.from_dict(d)

    def test_cycle(self):
        eff = np.zeros((2, 2))
        eff[0, 1] = eff[1, 0] = 1.0
        with pytest.raises(InvalidWorld):
            world(2, 0, [], [[], []], [[0.5], [0.5]], eff)

    def test_self_loop(self):
        with pytest.raises(InvalidWorld):
            world(2, 0, [], [[], []], [[0.5], [0.5]], np.eye(2))


def test_deconfounded_world(reference_world):
    flat = deconfounded_world(reference_world)
    for c in range(6):
        assert oracle_marginal(flat, c) == pytest.approx(oracle_marginal(reference_world, c), abs=1e-12)
    cond, do = oracle_tables(flat)
    np.testing.assert_allclose(cond, do, atol=1e-12)
