import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedil.data import LabeledSet, gen_synthetic
from fedil.errors import ConfigurationError, ProtocolError
from fedil.model import ModelArch, accuracy, init_params
from fedil.server import aggregate, cosine_gate, select_clients, server_supervised_update


def naive_aggregate(theta_prime, theta0, uploads, threshold=0.0):
    """Scalar-loop evaluation of the gated mean."""
    P = len(theta_prime)
    v = [theta0[i] - theta_prime[i] for i in range(P)]
    nv = math.sqrt(sum(x * x for x in v))
    acc = [0.0] * P
    kept = 0
    bits = []
    for up in uploads:
        u = [up[i] - theta_prime[i] for i in range(P)]
        nu = math.sqrt(sum(x * x for x in u))
        s = 1.0 if nu == 0 or nv == 0 else sum(a * b for a, b in zip(u, v)) / (nu * nv)
        bit = s >= threshold
        bits.append(bit)
        if bit:
            kept += 1
            acc = [a + b for a, b in zip(acc, u)]
    delta = [a / kept for a in acc] if kept else acc
    return np.array([theta_prime[i] + delta[i] for i in range(P)]), bits


class TestCosine:
    def test_self_similarity(self):
        tp = np.zeros(3)
        assert cosine_gate(np.array([1.0, 2, 3]), tp, np.array([1.0, 2, 3])) == (1.0, 1)

    def test_antiparallel(self):
        s, g = cosine_gate(np.array([1.0, 0, 0]), np.zeros(3), np.array([-1.0, 0, 0]))
        assert s == -1.0 and g == 0

    def test_hand_value(self):
        s, g = cosine_gate(np.array([1.0, 1, 0]), np.zeros(3), np.array([1.0, 0, 0]))
        assert s == pytest.approx(1 / math.sqrt(2), abs=1e-12) and g == 1
        assert s == pytest.approx(0.7071, abs=1e-4)

    def test_zero_vectors_open(self):
        tp = np.ones(2)
        assert cosine_gate(tp.copy(), tp, np.array([0.0, 5.0])) == (1.0, 1)
        assert cosine_gate(np.array([0.0, 5.0]), tp, tp.copy()) == (1.0, 1)

    def test_threshold_knob(self):
        u, v = np.array([1.0, 1, 0]), np.array([1.0, 0, 0])
        assert cosine_gate(u, np.zeros(3), v, 0.8)[1] == 0
        assert cosine_gate(-u, np.zeros(3), v, -1.0)[1] == 1

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)),
           st.floats(1e-3, 1e3))
    def test_scale_invariance(self, u, v, c):
        tp = np.linspace(-1, 1, 6)
        s1, g1 = cosine_gate(tp + u, tp, tp + v)
        s2, g2 = cosine_gate(tp + c * u, tp, tp + c * v)
        if abs(s1) > 1e-9:
            assert g1 == g2
        assert s1 == pytest.approx(s2, abs=1e-9)


class TestAggregate:
    def test_single_upload(self):
        tp, t0 = np.zeros(3), np.ones(3)
        star = np.array([0.5, 0.2, 0.1])
        nxt, report, _ = aggregate(tp, t0, {4: star})
        np.testing.assert_array_equal(nxt, star)
        assert report.included_count == 1 and report.decisions[0].client_id == 4

    def test_hand_average(self):
        tp, t0 = np.zeros(2), np.array([1.0, 1.0])
        nxt, report, delta = aggregate(tp, t0, {0: np.array([2.0, 0]), 1: np.array([0.0, 2])})
        np.testing.assert_array_equal(delta, [1.0, 1.0])
        assert report.delta_norm == pytest.approx(math.sqrt(2))

    def test_all_rejected_keeps_global(self):
        tp, t0 = np.ones(2), np.array([2.0, 1.0])
        nxt, report, delta = aggregate(tp, t0, {0: np.array([0.0, 1.0]), 1: np.array([-3.0, 1.0])})
        np.testing.assert_array_equal(nxt, tp)
        assert report.included_count == 0 and report.delta_norm == 0.0

    def test_protocol_errors(self):
        with pytest.raises(ProtocolError):
            aggregate(np.zeros(2), np.ones(2), {})
        with pytest.raises(ProtocolError, match="client 7") as exc:
            aggregate(np.zeros(2), np.ones(2), {1: np.ones(2), 7: np.ones(3)})
        assert exc.value.client_id == 7

    def test_all_open_is_plain_average(self):
        rng = np.random.default_rng(4)
        tp, t0 = rng.normal(size=10), rng.normal(size=10)
        ups = {i: rng.normal(size=10) for i in range(6)}
        nxt, report, _ = aggregate(tp, t0, ups, threshold=-1.0)
        assert report.included_count == 6
        plain = tp + np.mean([u - tp for u in ups.values()], axis=0)
        np.testing.assert_allclose(nxt, plain, rtol=0, atol=1e-14)

    def test_matches_naive(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            P = int(rng.integers(1, 20))
            tp, t0 = rng.normal(size=P), rng.normal(size=P)
            ups = [rng.normal(size=P) for _ in range(int(rng.integers(1, 6)))]
            nxt, report, _ = aggregate(tp, t0, dict(enumerate(ups)))
            want, bits = naive_aggregate(tp, t0, ups)
            np.testing.assert_allclose(nxt, want, rtol=0, atol=1e-12)
            assert [d.gate == 1 for d in report.decisions] == bits

    def test_convex_hull(self):
        rng = np.random.default_rng(2)
        tp, t0 = np.zeros(2), np.array([1.0, 0.0])
        ups = {i: rng.normal(size=2) + [1, 0] for i in range(5)}
        nxt, report, _ = aggregate(tp, t0, ups)
        kept = [ups[d.client_id] for d in report.decisions if d.gate]
        lo, hi = np.min(kept, axis=0), np.max(kept, axis=0)
        assert np.all(nxt >= lo - 1e-12) and np.all(nxt <= hi + 1e-12)


class TestSelection:
    def test_distinct_in_range(self):
        ids = select_clients(100, 5, 0, 1)
        assert len(set(ids)) == 5 and all(0 <= i < 100 for i in ids)

    def test_full_selection(self):
        assert select_clients(7, 7, 3, 2) == list(range(7))

    def test_replay(self):
        assert select_clients(100, 5, 9, 4) == select_clients(100, 5, 9, 4)
        assert select_clients(100, 5, 9, 4) != select_clients(100, 5, 9, 5)

    def test_too_many(self):
        with pytest.raises(ConfigurationError):
            select_clients(3, 4, 0, 1)

    def test_uniform_marginals(self):
        counts = np.zeros(10)
        for t in range(2000):
            counts[select_clients(10, 3, 0, t)] += 1
        # each id expected 600 times; binomial sd ~ 20.5
        assert np.all(np.abs(counts - 600) < 5 * 20.5)


class TestServerUpdate:
    def labeled(self):
        d = gen_synthetic(3, 30, 4, 5.0, 0)
        return LabeledSet(d.ids, d.features, d.labels, 3)

    def test_improves_fit_and_keeps_input(self):
        lab = self.labeled()
        arch = ModelArch(4, (8,), 3)
        theta = init_params(arch, 0)
        before = theta.copy()
        out = server_supervised_update(theta, arch, lab, 20, 0.1, 16, seed=1)
        np.testing.assert_array_equal(theta, before)
        assert accuracy(out, arch, lab.features, lab.labels) > accuracy(theta, arch, lab.features, lab.labels)

    def test_zero_epochs_and_determinism(self):
        lab = self.labeled()
        arch = ModelArch(4, (), 3)
        theta = init_params(arch, 0)
        np.testing.assert_array_equal(server_supervised_update(theta, arch, lab, 0, 0.1), theta)
        a = server_supervised_update(theta, arch, lab, 2, 0.1, 8, seed=5)
        b = server_supervised_update(theta, arch, lab, 2, 0.1, 8, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_empty_labeled_set(self):
        arch = ModelArch(4, (), 3)
        empty = LabeledSet(np.zeros(0, int), np.zeros((0, 4)), np.zeros(0, int), 3)
        with pytest.raises(ConfigurationError):
            server_supervised_update(np.zeros(arch.num_params), arch, empty, 1, 0.1)
