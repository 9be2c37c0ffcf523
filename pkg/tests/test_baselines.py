"""Nearest mean, streaming LDA, reservoir buffer and discriminative MLPs."""

import math

import numpy as np
import pytest

from pec_cil import baselines as B
from pec_cil import data


class TestNearestMean:
    def test_one_sample_per_class(self):
        x = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        m = B.NearestMean(3, 2).update(x, [0, 1, 2])
        np.testing.assert_array_equal(m.predict(x), [0, 1, 2])

    def test_brute_force_oracle(self):
        pts = np.array([[0, 0], [1, 0], [0, 1], [4, 4], [5, 4], [4, 6], [-3, 2], [-4, 3], [-3, 3], [2, -5]], float)
        labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
        m = B.NearestMean(3, 2)
        for p, y in zip(pts, labels):
            m.update(p, y)
        means = np.array([pts[labels == c].mean(axis=0) for c in range(3)])
        np.testing.assert_allclose(m.means, means, atol=1e-12)
        q = np.random.default_rng(0).uniform(-6, 6, (200, 2))
        brute = [int(np.argmin([math.dist(v, mu) for mu in means])) for v in q]
        np.testing.assert_array_equal(m.predict(q), brute)

    def test_unseen_classes_excluded(self):
        m = B.NearestMean(3, 1).update([[10.0]], [2])
        assert m.predict([[0.0]])[0] == 2  # class 0 mean is still at the origin but unseen

    def test_predict_before_update(self):
        with pytest.raises(RuntimeError):
            B.NearestMean(2, 2).predict([[0.0, 0.0]])


def pooled_scatter(x, y):
    s = np.zeros((x.shape[1], x.shape[1]))
    for c in np.unique(y):
        xc = x[y == c] - x[y == c].mean(axis=0)
        s += xc.T @ xc
    return s


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestSLDA:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.y = rng.integers(0, 3, 200)
        self.x = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5)) + 2.0 * self.y[:, None]

    def test_single_sample(self):
        m = B.SLDA(2, 3).update([[1.0, 2.0, 3.0]], [1])
        np.testing.assert_array_equal(m.means[1], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(m.covariance, np.eye(3) / 2)

    def test_matches_batch_covariance(self):
        m = B.SLDA(3, 5)
        for xi, yi in zip(self.x, self.y):
            m.update(xi, yi)
        S = pooled_scatter(self.x, self.y)
        assert rel_frob(m.scatter, S) < 1e-6
        assert rel_frob(m.covariance, (np.eye(5) + S) / 201) < 1e-6
        assert rel_frob(m.scatter / 200, np.cov(np.concatenate(
            [self.x[self.y == c] - self.x[self.y == c].mean(0) for c in range(3)]).T, bias=True)) < 1e-6

    def test_chunked_equals_streaming(self):
        a, b = B.SLDA(3, 5), B.SLDA(3, 5)
        for xi, yi in zip(self.x, self.y):
            a.update(xi, yi)
        for i in range(0, 200, 37):
            b.update(self.x[i : i + 37], self.y[i : i + 37])
        np.testing.assert_allclose(a.scatter, b.scatter, atol=1e-10)
        np.testing.assert_allclose(a.means, b.means, atol=1e-12)

    def test_order_independent(self):
        a, b = B.SLDA(3, 5), B.SLDA(3, 5)
        for xi, yi in zip(self.x, self.y):
            a.update(xi, yi)
        order = np.argsort(self.y, kind="stable")
        for i in order:
            b.update(self.x[i], self.y[i])
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-8)
        np.testing.assert_allclose(a.means, b.means, atol=1e-8)

    def test_symmetric(self):
        m = B.SLDA(3, 5).update(self.x, self.y)
        np.testing.assert_array_equal(m.covariance, m.covariance.T)

    def test_identity_covariance_midpoint(self):
        m = B.SLDA(2, 2, epsilon=1.0)  # eps = 1 makes the precision exactly I
        m.update([[-5.0, 0.0], [5.0, 0.0]], [0, 1])
        np.testing.assert_array_equal(m.predict([[-0.1, 3.0], [0.1, -3.0]]), [0, 1])

    def test_score_formula(self):
        m = B.SLDA(2, 2, epsilon=0.3).update(self.x[:50, :2], self.y[:50] % 2)
        P = np.linalg.inv(0.7 * m.covariance + 0.3 * np.eye(2))
        xq = np.array([[0.5, -1.0]])
        expect = [xq[0] @ P @ mu - 0.5 * mu @ P @ mu for mu in m.means]
        np.testing.assert_allclose(m.scores(xq)[0], expect, rtol=1e-10)

    def test_closed_form_boundary(self):
        """Decision boundary normal equals P (mu1 - mu0) from batch estimates."""
        rng = np.random.default_rng(1)
        L = np.array([[1.0, 0.0], [0.8, 0.6]])
        y = np.repeat([0, 1], 500)
        x = rng.normal(size=(1000, 2)) @ L.T + np.where(y[:, None] == 1, [2.0, 1.0], [0.0, 0.0])
        eps = 0.1
        m = B.SLDA(2, 2, eps).update(x, y)
        mu = np.array([x[y == c].mean(0) for c in range(2)])
        sigma = (np.eye(2) + pooled_scatter(x, y)) / (len(x) + 1)
        normal = np.linalg.solve((1 - eps) * sigma + eps * np.eye(2), mu[1] - mu[0])
        W, _ = m._linear(eps)
        got = W[:, 1] - W[:, 0]
        assert -got[0] / got[1] == pytest.approx(-normal[0] / normal[1], abs=1e-4)

    def test_unseen_excluded(self):
        m = B.SLDA(3, 2).update([[0.0, 0.0], [1.0, 1.0]], [0, 0])
        assert set(m.predict(np.random.default_rng(0).normal(size=(20, 2)))) == {0}

    def test_epsilon_range(self):
        with pytest.raises(ValueError):
            B.SLDA(2, 2, epsilon=0.0)


class TestReservoir:
    def test_underfull_keeps_all(self):
        buf = B.ReplayBuffer(500)
        buf.insert_batch(np.zeros((300, 2)), np.arange(300))
        assert sorted(buf.y) == list(range(300))

    def test_size_bounded(self):
        buf = B.ReplayBuffer(7, seed=1)
        for i in range(100):
            buf.insert(np.zeros(1), i)
            assert len(buf) <= 7
        buf.insert_batch(np.zeros((100, 1)), np.arange(100))
        assert len(buf) == 7 and buf.seen == 200

    def test_retention_frequency(self):
        """Capacity 10, 10,000 inserts, 10,000 trials: each item kept with p = 10/n."""
        n, cap, trials = 10_000, 10, 10_000
        counts = np.zeros(n)
        xs, ys = np.zeros((n, 1)), np.arange(n)
        for t in range(trials):
            buf = B.ReplayBuffer(cap, seed=t)
            buf.insert_batch(xs, ys)
            counts[buf.y] += 1
        p = cap / n
        sigma = math.sqrt(p * (1 - p) / trials)
        freq = counts / trials
        # per item: the share outside 3 sigma must match the tail mass (about 0.3%)
        assert np.mean(np.abs(freq - p) > 3 * sigma) < 0.01
        # per decile of arrival time: aggregated frequencies within 3 sigma
        dec = freq.reshape(10, -1).mean(axis=1)
        dec_sigma = math.sqrt(p * (1 - p) / (trials * n / 10))
        assert np.all(np.abs(dec - p) < 3 * dec_sigma * 1.5)

    def test_batch_insert_matches_single_insert_distribution(self):
        singles, batched = np.zeros(50), np.zeros(50)
        for t in range(2000):
            a, b = B.ReplayBuffer(5, seed=t), B.ReplayBuffer(5, seed=t + 10**6)
            for i in range(50):
                a.insert(np.zeros(1), i)
            b.insert_batch(np.zeros((50, 1)), np.arange(50))
            singles[a.y] += 1
            batched[b.y] += 1
        np.testing.assert_allclose(singles / 2000, 0.1, atol=0.03)
        np.testing.assert_allclose(batched / 2000, 0.1, atol=0.03)

    def test_sample_without_replacement(self):
        buf = B.ReplayBuffer(10, seed=0)
        buf.insert_batch(np.zeros((10, 1)), np.arange(10))
        _, y = buf.sample(10)
        assert sorted(y) == list(range(10))

    def test_sample_with_replacement_when_small(self):
        buf = B.ReplayBuffer(10, seed=0)
        buf.insert_batch(np.zeros((2, 1)), np.arange(2))
        x, y = buf.sample(5)
        assert len(y) == 5 and x.shape == (5, 1)

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            B.ReplayBuffer(3).sample(1)


class TestDiscriminative:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(8, 6)).astype(np.float32)
        self.y = np.array([0, 1, 2, 0, 1, 2, 0, 1])

    def test_hidden_layers(self):
        m = B.DiscriminativeMLP(784, 10)
        assert m.param_count() == 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10

    def test_labels_trick_all_classes_is_finetune(self):
        a = B.DiscriminativeMLP(6, 3, "finetune", hidden=(5,), seed=1)
        b = B.DiscriminativeMLP(6, 3, "labels_trick", hidden=(5,), seed=1)
        for _ in range(3):
            la = a.train_step(self.x, self.y, 0.01)
            lb = b.train_step(self.x, self.y, 0.01, current_classes=(0, 1, 2))
            assert la == lb
        np.testing.assert_array_equal(a.net.flat, b.net.flat)

    def test_labels_trick_leaves_other_columns(self):
        m = B.DiscriminativeMLP(6, 3, "labels_trick", hidden=(5,), seed=1)
        last = m.net.params[-1]
        w_before = last["W"][:, 2].copy()
        m.train_step(self.x[:2], [0, 1], 0.01, current_classes=(0, 1))
        np.testing.assert_array_equal(last["W"][:, 2], w_before)

    def test_labels_trick_needs_classes(self):
        m = B.DiscriminativeMLP(6, 3, "labels_trick")
        with pytest.raises(ValueError):
            m.train_step(self.x, self.y, 0.01, current_classes=())

    def test_er_needs_buffer(self):
        with pytest.raises(ValueError):
            B.DiscriminativeMLP(6, 3, "er").train_step(self.x, self.y, 0.01)

    def test_er_draws_b_extra(self, monkeypatch):
        m = B.DiscriminativeMLP(6, 3, "er", hidden=(5,))
        buf = B.ReplayBuffer(10, seed=0)
        buf.insert_batch(self.x, self.y)
        seen = []
        real = B.nn.cross_entropy
        monkeypatch.setattr(B.nn, "cross_entropy", lambda z, y, c=None: seen.append(len(y)) or real(z, y, c))
        m.train_step(self.x[:3], self.y[:3], 0.01, buffer=buf)
        assert seen == [6]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            B.DiscriminativeMLP(6, 3, "ewc")

    def test_finetune_collapses_to_last_task(self):
        train, test = data.synthetic_gaussians(3, 10, 6.0, 5000, seed=0, n_test_per_class=200)
        m = B.DiscriminativeMLP(10, 3, "finetune", hidden=(20,), seed=0)
        for task in data.split_tasks(train, 3, 1):
            for k in range(len(task)):
                m.train_step(task.x[k : k + 1], task.y[k : k + 1], 0.01)
        assert np.mean(m.predict(test.x) == 2) > 0.95
