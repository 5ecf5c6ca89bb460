"""Low-rank factorization: factor quality, projected-cell behavior,
dense equivalence at full rank, gradients, and parameter arithmetic."""

import warnings

import numpy as np
import pytest

from rnnpack import cells, counters, lowrank
from rnnpack.errors import ParameterError, ShapeError
from util import numeric_grad, rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)


def matrix_param_count(model):
    return sum(a.size for a in model.param_arrays().values() if a.ndim == 2)


def model_loss(model, ids, targets):
    probs, _, _ = cells.forward_sequence(model, ids)
    return cells.sequence_loss(probs, targets)


def check_model_grads(model, ids, targets, tol=1e-4):
    probs, _, cache = cells.forward_sequence(model, ids)
    grads = cells.backward_sequence(model, cache, targets)
    params = model.param_arrays()
    assert grads.keys() == params.keys()
    for name, arr in params.items():
        num = numeric_grad(lambda: model_loss(model, ids, targets), arr)
        err = rel_error(grads[name], num)
        assert err < tol, f"{name}: rel error {err}"


def compress_quiet(model, r_cells, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return lowrank.compress_model_lr(model, r_cells, **kw)


class TestFactorize:
    def test_recovers_constructed_rank(self, rng):
        w = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 6))
        pair = lowrank.factorize_matrix(w, 3)
        assert pair.a.shape == (8, 3) and pair.b.shape == (3, 6)
        assert np.max(np.abs(pair.reconstruct() - w)) < 1e-8

    def test_full_rank_is_exact(self, rng):
        w = rng.normal(size=(7, 5))
        pair = lowrank.factorize_matrix(w, 5)
        assert np.max(np.abs(pair.reconstruct() - w)) < 1e-10

    def test_error_is_monotone_in_rank(self, rng):
        w = rng.normal(size=(9, 9))
        errs = [
            np.linalg.norm(lowrank.factorize_matrix(w, r).reconstruct() - w)
            for r in range(1, 10)
        ]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-10

    def test_singular_values_split_evenly(self, rng):
        w = rng.normal(size=(6, 4))
        pair = lowrank.factorize_matrix(w, 3)
        col = np.linalg.norm(pair.a, axis=0)
        row = np.linalg.norm(pair.b, axis=1)
        np.testing.assert_allclose(col, row, rtol=1e-10)

    def test_rank_out_of_range_rejected(self, rng):
        w = rng.normal(size=(5, 4))
        with pytest.raises(ParameterError):
            lowrank.factorize_matrix(w, 0)
        with pytest.raises(ParameterError):
            lowrank.factorize_matrix(w, 5)

    def test_mismatched_factors_rejected(self):
        with pytest.raises(ShapeError):
            lowrank.LowRankPair(np.zeros((4, 2)), np.zeros((3, 4)))

    def test_square_compression_ratio(self):
        pair = lowrank.LowRankPair(np.zeros((650, 128)), np.zeros((128, 650)))
        assert pair.param_count() == 166_400
        assert pair.param_count() / 650**2 == pytest.approx(0.394, abs=5e-4)


class TestLrGruLayer:
    def make_layer(self, rng, k=5, r=3, r_in=None):
        return lowrank.lr_gru_layer(rng, k, r, r_in=r_in, init_scale=0.4)

    def test_window_matches_manual_recurrence(self, rng):
        layer = self.make_layer(rng)
        T = 4
        x = rng.normal(size=(T, 3))
        out, st, _ = layer.forward_window(x, layer.init_state())
        h = np.zeros(3)
        for t in range(T):
            z = 1.0 / (1.0 + np.exp(-(layer.w_z @ x[t] + layer.u_z @ h + layer.b_z)))
            rg = 1.0 / (1.0 + np.exp(-(layer.w_r @ x[t] + layer.u_r @ h + layer.b_r)))
            gk = np.tanh(layer.w_h @ x[t] + layer.u_h @ (rg * h) + layer.b_h)
            h = (1.0 - z) * h + z * (layer.w_p @ gk)
            np.testing.assert_allclose(out[t], h, atol=1e-12)
        np.testing.assert_allclose(st, h, atol=1e-12)

    def test_state_carry_matches_one_shot(self, rng):
        layer = self.make_layer(rng)
        x = rng.normal(size=(6, 3))
        full, _, _ = layer.forward_window(x, layer.init_state())
        first, st, _ = layer.forward_window(x[:3], layer.init_state())
        second, _, _ = layer.forward_window(x[3:], st)
        np.testing.assert_allclose(np.vstack([first, second]), full, atol=1e-12)

    def test_empty_window(self, rng):
        layer = self.make_layer(rng)
        out, st, _ = layer.forward_window(np.zeros((0, 3)), layer.init_state())
        assert out.shape == (0, 3)
        np.testing.assert_array_equal(st, np.zeros(3))

    def test_mac_count(self, rng):
        k, r = 7, 3
        layer = self.make_layer(rng, k=k, r=r)
        assert layer.mac_count_per_step() == 4 * r * r + 3 * k * r
        T = 5
        with counters.count_macs() as c:
            layer.forward_window(rng.normal(size=(T, r)), layer.init_state())
        assert c["macs"] == T * layer.mac_count_per_step()

    def test_shape_validation(self, rng):
        k, r = 4, 2
        good = self.make_layer(rng, k=k, r=r)
        with pytest.raises(ShapeError):
            lowrank.LrGruLayer(
                good.w_z, good.w_r, good.w_h,
                np.zeros((r, r + 1)), good.u_r, good.u_h, good.w_p,
                good.b_z, good.b_r, good.b_h,
            )
        with pytest.raises(ShapeError):
            lowrank.LrGruLayer(
                good.w_z, good.w_r, good.w_h,
                good.u_z, good.u_r, good.u_h, np.zeros((k, r)),
                good.b_z, good.b_r, good.b_h,
            )


class TestStepFunctions:
    def test_rnn_step(self, rng):
        model = cells.new_model("rnn", 8, 5, num_layers=1, seed=3)
        lr = compress_quiet(model, 3, init="random", seed=4)
        layer = lr.layers[0]
        x = rng.normal(size=3)
        h0 = rng.normal(size=5)
        m, h = lowrank.lr_rnn_step(layer, x, h0)
        w, u, p = layer.ops["w"].w, layer.ops["u"].w, layer.proj.w
        h_ref = np.tanh(w @ x + u @ (p @ h0) + layer.bias["b"])
        np.testing.assert_allclose(h, h_ref, atol=1e-12)
        np.testing.assert_allclose(m, p @ h_ref, atol=1e-12)

    def test_lstm_step(self, rng):
        model = cells.new_model("lstm", 8, 4, num_layers=1, seed=5)
        lr = compress_quiet(model, 2, init="random", seed=6)
        layer = lr.layers[0]
        x = rng.normal(size=2)
        h0, c0 = rng.normal(size=4), rng.normal(size=4)
        m, h, c = lowrank.lr_lstm_step(layer, x, h0, c0)
        out, st, _ = layer.forward_window(x[None], (h0, c0))
        np.testing.assert_allclose(m, out[0], atol=1e-12)
        np.testing.assert_allclose(h, st[0], atol=1e-12)
        np.testing.assert_allclose(c, st[1], atol=1e-12)

    def test_gru_step(self, rng):
        layer = lowrank.lr_gru_layer(rng, 5, 3, init_scale=0.3)
        x = rng.normal(size=3)
        h0 = rng.normal(size=3)
        h = lowrank.lr_gru_step(layer, x, h0)
        out, _, _ = layer.forward_window(x[None], h0)
        np.testing.assert_allclose(h, out[0], atol=1e-12)


class TestDenseEquivalence:
    """Full-rank factors reproduce the dense model exactly."""

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_full_rank_svd_matches_dense(self, kind, rng):
        V, k = 11, 7
        model = cells.new_model(kind, V, k, num_layers=2, seed=9, init_scale=0.3)
        lr = compress_quiet(model, k, r_io=k, init="svd")
        ids = rng.integers(0, V, size=12)
        ref, ref_state, _ = cells.forward_sequence(model, ids)
        got, got_state, _ = cells.forward_sequence(lr, ids)
        np.testing.assert_allclose(got, ref, atol=1e-10)
        ids2 = rng.integers(0, V, size=7)
        ref2, _, _ = cells.forward_sequence(model, ids2, state=ref_state)
        got2, _, _ = cells.forward_sequence(lr, ids2, state=got_state)
        np.testing.assert_allclose(got2, ref2, atol=1e-10)

    def test_reduced_rank_exact_on_constructed_model(self, rng):
        """When every map already factors through the shared subspaces,
        svd compression at the constructed ranks changes nothing."""
        V, k, r, r_io = 9, 6, 3, 2
        base = cells.new_model("lstm", V, k, num_layers=2, seed=13, init_scale=0.3)
        d0 = rng.normal(size=(r, k))
        d1 = rng.normal(size=(r_io, k))
        params = base.param_arrays()
        params["emb"][:] = rng.normal(size=(V, r_io)) @ rng.normal(size=(r_io, k))
        for g in ("i", "f", "c", "o"):
            params[f"layers.0.u_{g}"][:] = rng.normal(size=(k, r)) @ d0
            params[f"layers.1.w_{g}"][:] = rng.normal(size=(k, r)) @ d0
            params[f"layers.1.u_{g}"][:] = rng.normal(size=(k, r_io)) @ d1
        params["out.w"][:] = rng.normal(size=(V, r_io)) @ d1
        lr = compress_quiet(base, r, r_io=r_io, init="svd")
        assert lr.layers[0].proj.w.shape == (r, k)
        assert lr.layers[1].proj.w.shape == (r_io, k)
        ids = rng.integers(0, V, size=10)
        ref, _, _ = cells.forward_sequence(base, ids)
        got, _, _ = cells.forward_sequence(lr, ids)
        np.testing.assert_allclose(got, ref, atol=1e-8)


class TestGradients:
    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_random_init_gradients(self, kind, rng):
        V, k, r = 9, 6, 3
        dense = cells.new_model(kind, V, k, num_layers=2, seed=21)
        model = compress_quiet(dense, r, init="random", seed=22, init_scale=0.7)
        ids = rng.integers(0, V, size=5)
        targets = rng.integers(0, V, size=5)
        check_model_grads(model, ids, targets)

    def test_distinct_io_rank_gradients(self, rng):
        V, k = 8, 6
        dense = cells.new_model("lstm", V, k, num_layers=2, seed=23)
        model = compress_quiet(dense, 3, r_io=2, init="random", seed=24,
                               init_scale=0.7)
        assert model.embedding.shape == (V, 2)
        assert model.output.w.shape == (V, 2)
        ids = rng.integers(0, V, size=4)
        targets = rng.integers(0, V, size=4)
        check_model_grads(model, ids, targets)


class TestCompressModel:
    def test_lstm_650_matrix_params(self):
        dense = cells.new_model("lstm", 10_000, 650, num_layers=2, seed=0)
        lr = lowrank.compress_model_lr(dense, 128, seed=1)
        count = matrix_param_count(lr)
        assert count == 4_057_600
        assert abs(count / 4.2e6 - 1.0) < 0.05
        per_layer = sum(
            a.size for a in lr.layers[0].param_arrays().values() if a.ndim == 2
        )
        assert per_layer == 748_800
        assert lr.layers[0].mac_count_per_step() == 748_800

    def test_gru_650_matrix_params(self):
        dense = cells.new_model("gru", 10_000, 650, num_layers=2, seed=0)
        lr = lowrank.compress_model_lr(dense, 128, seed=1)
        assert matrix_param_count(lr) == 3_190_272
        per_layer = 4 * 128 * 128 + 3 * 650 * 128
        assert lr.layers[0].mac_count_per_step() == per_layer

    @pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
    def test_param_count_decreases_below_half_rank(self, kind):
        V, k = 50, 12
        dense = cells.new_model(kind, V, k, num_layers=2, seed=2)
        for r in (2, 5):
            lr = lowrank.compress_model_lr(dense, r, seed=3)
            assert lr.param_count() < dense.param_count()

    def test_full_rank_warns(self):
        dense = cells.new_model("rnn", 9, 5, num_layers=1, seed=4)
        with pytest.warns(UserWarning):
            lowrank.compress_model_lr(dense, 5, seed=5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            lowrank.compress_model_lr(dense, 2, seed=5)

    def test_single_projection_per_layer(self):
        dense = cells.new_model("lstm", 9, 6, num_layers=2, seed=6)
        lr = compress_quiet(dense, 3, seed=7)
        for layer in lr.layers:
            names = [n for n in layer.param_arrays() if n == "proj"]
            assert names == ["proj"]

    def test_rank_bounds_rejected(self):
        dense = cells.new_model("lstm", 9, 6, num_layers=1, seed=8)
        with pytest.raises(ParameterError):
            lowrank.compress_model_lr(dense, 7)
        with pytest.raises(ParameterError):
            lowrank.compress_model_lr(dense, 0)
        with pytest.raises(ParameterError):
            compress_quiet(dense, 6, r_io=8)
        with pytest.raises(ParameterError):
            lowrank.compress_model_lr(dense, 3, init="qr")

    def test_gru_constraints(self):
        dense = cells.new_model("gru", 9, 6, num_layers=1, seed=9)
        with pytest.raises(ParameterError):
            lowrank.compress_model_lr(dense, 2, r_io=3)
        with pytest.raises(ParameterError):
            lowrank.compress_model_lr(dense, 2, init="svd")
        blended = cells.new_model(
            "gru", 9, 6, num_layers=1, seed=9, gru_blend_input=True
        )
        with pytest.raises(ParameterError):
            compress_quiet(blended, 6, init="svd")

    def test_instrumented_macs_match_analytic(self, rng):
        dense = cells.new_model("lstm", 9, 6, num_layers=2, seed=10)
        lr = compress_quiet(dense, 3, seed=11)
        ids = rng.integers(0, 9, size=4)
        with counters.count_macs() as c:
            cells.forward_sequence(lr, ids, want_cache=False)
        assert c["macs"] == 4 * lr.mac_count_per_step()
