import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamcast.errors import Diverged, ParseError
from beamcast.fusion_net import (
    BatchNorm, Dense, FusionNetwork, TrainSettings, read_dataset, train_fusion, write_dataset,
)


def randomize(net, rng):
    """Give every parameter and running statistic a generic random value."""
    for sub in net.subnets:
        for layer in sub.layers:
            if isinstance(layer, Dense):
                layer.W[...] = rng.normal(0, 0.6, layer.W.shape)
                layer.b[...] = rng.normal(0, 0.3, layer.b.shape)
            elif isinstance(layer, BatchNorm):
                layer.gamma[...] = rng.uniform(0.5, 1.5, layer.gamma.shape)
                layer.beta[...] = rng.normal(0, 0.3, layer.beta.shape)
                layer.running_mean[...] = rng.normal(0, 0.3, layer.running_mean.shape)
                layer.running_var[...] = rng.uniform(0.5, 2.0, layer.running_var.shape)
    return net


def force_weights(net, logit_x, logit_v=0.0):
    """Constant weight-subnet outputs and zero biases by editing the output layers."""
    for sub, logit in ((net.wx, logit_x), (net.wv, logit_v)):
        sub.layers[-1].W[...] = 0.0
        sub.layers[-1].b[...] = logit
    for sub in (net.bx, net.bv):
        sub.layers[-1].W[...] = 0.0
        sub.layers[-1].b[...] = 0.0
    return net


def reference_forward(net, X):
    """Independent step-by-step inference pass."""
    s = net.scales
    Z = X / np.array([s[0], s[1], s[0], s[1]])

    def run(sub):
        h = Z
        for layer in sub.layers:
            name = type(layer).__name__
            if name == "Dense":
                h = h @ layer.W + layer.b
            elif name == "BatchNorm":
                h = layer.gamma * (h - layer.running_mean) / np.sqrt(layer.running_var
                                                                      + layer.eps) + layer.beta
            else:
                h = np.maximum(h, 0.0)
        return h

    w_x = 1 / (1 + np.exp(-run(net.wx)[:, 0]))
    w_v = 1 / (1 + np.exp(-run(net.wv)[:, 0]))
    b_x = run(net.bx) * s[2]
    b_v = run(net.bv) * s[3]
    x = w_x * (X[:, 0] - b_x[:, 0]) + (1 - w_x) * (X[:, 2] - b_x[:, 1])
    v = w_v * (X[:, 1] - b_v[:, 0]) + (1 - w_v) * (X[:, 3] - b_v[:, 1])
    return x, v


def sample_inputs(rng, n):
    return np.column_stack([rng.uniform(-100, 100, n), rng.uniform(-150, 150, n),
                            rng.uniform(-100, 100, n), rng.uniform(-150, 150, n)])


class TestForward:
    def test_topology(self):
        net = FusionNetwork()
        dense = [[l.W.shape for l in sub.layers if isinstance(l, Dense)] for sub in net.subnets]
        assert dense[0] == [(4, 32), (32, 32), (32, 1)]
        assert dense[1] == [(4, 32), (32, 32), (32, 2)]
        assert len(net.batchnorms()) == 8

    def test_pilot_endpoint(self, rng):
        net = force_weights(randomize(FusionNetwork(), rng), 50.0)
        X = sample_inputs(rng, 20)
        out = net.forward(X)
        assert np.array_equal(out.x, X[:, 0])

    def test_measurement_endpoint(self, rng):
        net = force_weights(randomize(FusionNetwork(), rng), -50.0)
        X = sample_inputs(rng, 20)
        assert np.allclose(net.forward(X).x, X[:, 2], atol=1e-12)

    def test_matches_reference(self, rng):
        net = randomize(FusionNetwork(), rng)
        X = sample_inputs(rng, 50)
        out = net.forward(X)
        x, v = reference_forward(net, X)
        assert np.allclose(out.x, x, atol=1e-10, rtol=0)
        assert np.allclose(out.v, v, atol=1e-10, rtol=0)

    def test_weights_in_unit_interval(self, rng):
        out = randomize(FusionNetwork(), rng).forward(sample_inputs(rng, 200))
        assert np.all((out.w_x > 0) & (out.w_x < 1) & (out.w_v > 0) & (out.w_v < 1))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.floats(-4, 4))
    def test_convex_without_bias(self, vals, logit):
        net = force_weights(FusionNetwork(), logit, logit)
        x, v = net(*vals)
        assert min(vals[0], vals[2]) - 1e-9 <= x <= max(vals[0], vals[2]) + 1e-9
        assert min(vals[1], vals[3]) - 1e-9 <= v <= max(vals[1], vals[3]) + 1e-9

    def test_inference_deterministic(self, rng):
        net = randomize(FusionNetwork(), rng)
        X = sample_inputs(rng, 10)
        a, b = net.forward(X), net.forward(X)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)

    def test_scalar_call(self):
        x, v = force_weights(FusionNetwork(), 50.0, -50.0)(10.0, 20.0, 30.0, 40.0)
        assert isinstance(x, float) and x == 10.0 and v == pytest.approx(40.0)


class TestLoss:
    def net(self):
        return force_weights(FusionNetwork(), 50.0, 50.0)

    def test_perfect(self, rng):
        X = sample_inputs(rng, 8)
        assert self.net().loss(X, X[:, :2]) == 0.0

    def test_single(self):
        X = np.array([[5.0, 7.0, 0.0, 0.0]])
        assert self.net().loss(X, np.array([[3.0, 7.0]])) == pytest.approx(4.0)

    def test_pair(self):
        X = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0]])
        assert self.net().loss(X, np.zeros((2, 2))) == pytest.approx(5.0)

    def test_sample_weights(self):
        X = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0]])
        W = np.array([[2.0, 1.0], [1.0, 0.5]])
        assert self.net().loss(X, np.zeros((2, 2)), weights=W) == pytest.approx((2 + 4.5) / 2)


class TestGradients:
    def analytic(self, net, X, T, W=None):
        net.forward(X, train=True, update_stats=False)
        net.backward(T, W)
        return [g.copy() for _, g in net.params()]

    @pytest.mark.parametrize("weighted", [False, True])
    def test_finite_differences(self, weighted):
        rng = np.random.default_rng(2024)
        net = randomize(FusionNetwork(rng), rng)
        X = sample_inputs(rng, 12)
        T = X[:, :2] + rng.normal(0, 5, (12, 2))
        W = rng.uniform(0.2, 2.0, (12, 2)) if weighted else None
        grads = self.analytic(net, X, T, W)
        h = 1e-6
        # a Dense layer feeding batch normalisation has an offset with exactly zero
        # gradient (the batch mean cancels it); finite differences only see round-off there
        pre_bn = {id(sub.layers[k].b) for sub in net.subnets for k in (0, 3)}
        checked = 0
        for (p, _), g in zip(net.params(), grads):
            if id(p) in pre_bn:
                assert np.all(np.abs(g) < 1e-9)
                continue
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                up = net.loss(X, T, train=True, update_stats=False, weights=W)
                p[i] = old - h
                dn = net.loss(X, T, train=True, update_stats=False, weights=W)
                p[i] = old
                num[i] = (up - dn) / (2 * h)
            rel = np.linalg.norm(num - g) / (np.linalg.norm(num) + np.linalg.norm(g))
            assert rel < 1e-4
            checked += 1
        assert checked == len(net.params()) - len(pre_bn)

    def test_dead_relu_paths(self, rng):
        net = FusionNetwork(rng)
        for sub in net.subnets:
            for layer in sub.layers[:-1]:
                if isinstance(layer, Dense):
                    layer.W[...] = 0.0
                    layer.b[...] = 0.0
        X = sample_inputs(rng, 6)
        grads = self.analytic(net, X, X[:, :2] + 1.0)
        first_dense = [g for (p, _), g in zip(net.params(), grads)
                       if p is net.wx.layers[0].W or p is net.bx.layers[0].W]
        assert all(np.all(g == 0) for g in first_dense)

    def test_zero_residual_zero_gradient(self, rng):
        net = randomize(FusionNetwork(rng), rng)
        X = sample_inputs(rng, 4)
        out = net.forward(X, train=True, update_stats=False)
        T = np.column_stack([out.x, out.v])
        for g in self.analytic(net, X, T):
            assert np.all(g == 0)


class TestTraining:
    def test_separable_prefers_exact_source(self):
        rng = np.random.default_rng(1)
        n = 3000
        x, v = rng.uniform(-100, 100, n), rng.uniform(60, 80, n)
        # the measurement columns carry no information about the target
        X = np.column_stack([x, v, rng.uniform(-100, 100, n), rng.uniform(-200, 200, n)])
        res = train_fusion(X, np.column_stack([x, v]), TrainSettings(max_epochs=100), rng)
        out = res.net.forward(X[res.val_idx])
        assert np.mean(out.w_x) > 0.9

    def test_symmetric_dataset(self):
        rng = np.random.default_rng(2)
        n = 2000
        x, v = rng.uniform(-100, 100, n), rng.uniform(60, 80, n)
        X = np.column_stack([x, v, x, v])
        res = train_fusion(X, np.column_stack([x, v]), TrainSettings(max_epochs=60), rng)
        va = res.val_idx
        out = res.net.forward(X[va])
        assert np.all(np.abs(out.x - x[va]) <= 0.01 * np.maximum(np.abs(x[va]), 1.0))
        assert np.all(np.abs(out.v - v[va]) <= 0.01 * np.abs(v[va]))

    def test_bn_freeze_consistency(self, rng):
        X = sample_inputs(rng, 500)
        net = randomize(FusionNetwork(rng), rng)
        net.freeze_statistics(X)
        batch = net.forward(X, train=True, update_stats=False)
        frozen = net.forward(X, train=False)
        scale = np.abs(batch.x) + 1.0
        assert np.all(np.abs(batch.x - frozen.x) / scale < 1e-3)

    def test_diverges(self):
        rng = np.random.default_rng(3)
        X = sample_inputs(rng, 400)
        with pytest.raises(Diverged), np.errstate(over="ignore", invalid="ignore"):
            train_fusion(X, X[:, :2] * 50, TrainSettings(lr=1e4, optimizer="sgd", max_epochs=20),
                         rng)

    def test_rejects_bad_weights(self, rng):
        X = sample_inputs(rng, 10)
        with pytest.raises(ValueError):
            train_fusion(X, X[:, :2], weights=-np.ones((10, 2)))


class TestIO:
    def test_save_load_bitwise(self, tmp_path, rng):
        net = randomize(FusionNetwork(bias_x_scale=2.0), rng)
        net.save(tmp_path / "n.fusn")
        back = FusionNetwork.load(tmp_path / "n.fusn")
        for a, b in zip(net.arrays(), back.arrays()):
            assert np.array_equal(a, b)
        X = sample_inputs(rng, 7)
        assert np.array_equal(net.forward(X).x, back.forward(X).x)
        assert (tmp_path / "n.fusn").read_bytes()[:5] == b"FUSN1"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE")
        with pytest.raises(ParseError):
            FusionNetwork.load(tmp_path / "bad")

    def test_truncated(self, tmp_path, rng):
        FusionNetwork().save(tmp_path / "n.fusn")
        data = (tmp_path / "n.fusn").read_bytes()
        (tmp_path / "t.fusn").write_bytes(data[:-12])
        with pytest.raises(ParseError):
            FusionNetwork.load(tmp_path / "t.fusn")

    def test_dataset_round_trip(self, tmp_path, rng):
        X, T = sample_inputs(rng, 5), rng.normal(size=(5, 2))
        write_dataset(tmp_path / "d.csv", X, T)
        X2, T2 = read_dataset(tmp_path / "d.csv")
        assert np.array_equal(X, X2) and np.array_equal(T, T2)
        assert (tmp_path / "d.csv").read_text().startswith("x_p,v_p,x_m,v_m,x_tar,v_tar\n")

    def test_dataset_bad_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ParseError):
            read_dataset(tmp_path / "d.csv")
