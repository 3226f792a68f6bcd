import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnq.data import LabeledSet, gen_synthetic, split_random, train_test_split
from unlearnq.metrics import (
    CSV_COLUMNS, accuracy, average_gap, csv_row, evaluate, fit_threshold, make_eval_sets, mia_score,
    nonmember_rate, write_report,
)
from unlearnq.net import Layer, NetConfig, ParameterSet
from unlearnq.unlearner import TrainConfig, train_original

from oracles import brute_force_threshold


def identity_net(k):
    """Logits equal the input features."""
    return ParameterSet([Layer("fc0", np.eye(k), np.zeros(k))]), NetConfig((k, k))


def constant_net(k, logits=None):
    logits = np.zeros(k) if logits is None else np.asarray(logits, dtype=np.float64)
    return ParameterSet([Layer("fc0", np.zeros((2, k)), logits)]), NetConfig((2, k))


class TestAccuracy:
    def test_all_correct(self):
        params, cfg = identity_net(3)
        y = np.array([0, 1, 2, 1])
        assert accuracy(params, LabeledSet(np.eye(3)[y], y, 3), cfg) == 100.0

    def test_one_wrong_in_ten(self):
        params, cfg = identity_net(2)
        y = np.array([0, 1] * 5)
        pred = y.copy()
        pred[4] = 1 - pred[4]
        assert accuracy(params, LabeledSet(np.eye(2)[pred], y, 2), cfg) == 90.0

    def test_uniform_ties_go_to_class_zero(self, rng):
        params, cfg = constant_net(4)
        y = rng.integers(0, 4, size=37)
        data = LabeledSet(rng.standard_normal((37, 2)), y, 4)
        oracle = 100.0 * sum(1 for label in y if label == 0) / len(y)
        assert accuracy(params, data, cfg) == pytest.approx(oracle)

    def test_empty(self):
        params, cfg = constant_net(2)
        with pytest.raises(ValueError):
            accuracy(params, LabeledSet(np.zeros((0, 2)), np.zeros(0, int), 2), cfg)


class TestThreshold:
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
           st.lists(st.integers(0, 20), min_size=1, max_size=30))
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force(self, mem, non):
        # coarse integer grid forces ties and shared values
        mem, non = np.array(mem) / 20.0, np.array(non) / 20.0
        t, ba = fit_threshold(mem, non)
        bt, bba = brute_force_threshold(mem.tolist(), non.tolist())
        assert ba == pytest.approx(bba, abs=1e-15)
        assert t == bt

    def test_separable(self):
        t, ba = fit_threshold([0.9, 0.95, 0.99], [0.5, 0.6])
        assert ba == 1.0 and 0.6 < t < 0.9


class TestMIA:
    def test_constant_confidence_is_degenerate(self, rng):
        params, cfg = constant_net(3)
        s = LabeledSet(rng.standard_normal((10, 2)), rng.integers(0, 3, 10), 3)
        res = mia_score(params, s, s, s, cfg)
        assert res.score == 50.0 and res.degenerate

    def test_empty_rejected(self, rng):
        params, cfg = constant_net(3)
        s = LabeledSet(rng.standard_normal((10, 2)), rng.integers(0, 3, 10), 3)
        empty = s.subset([])
        with pytest.raises(ValueError):
            mia_score(params, empty, s, s, cfg)

    def test_direction(self):
        # members confident, non-members not; forget samples look like non-members
        params, cfg = identity_net(2)
        member = LabeledSet([[5.0, 0.0], [4.0, 0.0], [6.0, 0.0]], [0, 0, 0], 2)
        nonmember = LabeledSet([[0.1, 0.0], [0.0, 0.2], [0.3, 0.0]], [0, 1, 0], 2)
        forget = LabeledSet([[0.0, 0.0], [7.0, 0.0]], [0, 0], 2)
        res = mia_score(params, forget, nonmember, member, cfg)
        assert res.balanced_accuracy == 1.0
        assert res.score == 50.0
        assert nonmember_rate(params, nonmember, res.threshold, cfg) == 100.0

    def test_fitted_attacker_is_exhaustive_optimum(self):
        data = gen_synthetic("moons", 2, 400, noise=0.3, seed=0)
        train, test = train_test_split(data, 0.3, 0)
        split = split_random(train, 0.1, 0, test=test)
        params, cfg = train_original(train, NetConfig((2, 16, 2)), TrainConfig(epochs=10, seed=0))
        sets = make_eval_sets(split, 0)
        raw = evaluate(params, cfg, split, sets)
        from unlearnq.metrics import confidence
        mem = confidence(params, sets.attack_member.features, cfg)
        non = confidence(params, sets.attack_nonmember.features, cfg)
        bt, bba = brute_force_threshold(mem.tolist(), non.tolist())
        assert raw["mia_threshold"] == bt
        assert raw["mia_balanced_accuracy"] == pytest.approx(bba, abs=1e-15)


class TestEvalSets:
    def test_partition(self):
        data = gen_synthetic("blobs", 3, 300, seed=0)
        train, test = train_test_split(data, 0.3, 0)
        split = split_random(train, 0.2, 0, test=test)
        sets = make_eval_sets(split, 0)
        a, b = set(sets.attack_nonmember.indices.tolist()), set(sets.test_probe.indices.tolist())
        assert not a & b and a | b == set(test.indices.tolist())
        assert set(sets.attack_member.indices.tolist()) <= set(split.retain.indices.tolist())
        assert len(sets.attack_member) == len(sets.attack_nonmember)


class TestAverageGap:
    def test_identity(self):
        r = {"fa": 90.0, "ra": 95.0, "ta": 88.0, "mia": 20.0}
        rep = average_gap(r, r)
        assert rep.ag == 0.0

    def test_paper_row(self):
        retrain = {"fa": 0.0, "ra": 0.0, "ta": 0.0, "mia": 0.0}
        method = {"fa": 0.20, "ra": 0.14, "ta": 0.33, "mia": 1.64}
        rep = average_gap(method, retrain)
        assert rep.ag == pytest.approx(0.5775, abs=1e-12)
        assert round(rep.ag, 2) == 0.58

    def test_simple(self):
        rep = average_gap({"fa": 11, "ra": 8, "ta": 3, "mia": 0}, {"fa": 10, "ra": 10, "ta": 6, "mia": 4})
        assert rep.gaps == {"fa": 1, "ra": 2, "ta": 3, "mia": 4}
        assert rep.ag == 2.5

    @given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
    def test_symmetric(self, v):
        a = dict(zip(("fa", "ra", "ta", "mia"), v[:4]))
        b = dict(zip(("fa", "ra", "ta", "mia"), v[4:]))
        ab, ba = average_gap(a, b), average_gap(b, a)
        assert ab.ag == ba.ag
        assert ab.ag == pytest.approx(sum(ab.gaps.values()) / 4, abs=1e-9)

    def test_missing_key(self):
        with pytest.raises(ValueError):
            average_gap({"fa": 1}, {"fa": 1, "ra": 1, "ta": 1, "mia": 1})


class TestReport:
    def test_write(self, tmp_path):
        rep = average_gap({"fa": 1, "ra": 2, "ta": 3, "mia": 4}, {"fa": 0, "ra": 0, "ta": 0, "mia": 0})
        row = csv_row(rep, "oeu", 3, "abc", 1.5)
        j, c = write_report(tmp_path / "out", "oeu_seed3", {"metrics": rep.to_dict()}, row)
        assert json.loads(j.read_text())["metrics"]["ag"] == 2.5
        with c.open() as fh:
            reader = csv.reader(fh)
            header = next(reader)
            values = next(reader)
        assert tuple(header) == CSV_COLUMNS
        assert values[:3] == ["oeu", "3", "abc"]
        assert not list((tmp_path / "out").glob(".*tmp"))
