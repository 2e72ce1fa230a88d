import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechprompt import diffmath as dm
from speechprompt.diffmath import ParamSet, Tensor, backprop, backward, finite_diff_check


def make_params(arrays):
    ps = ParamSet(seed=0)
    for name, arr in arrays.items():
        ps.add(name, arr.shape, init=np.asarray(arr, dtype=np.float64))
    return ps


def fd_check_op(build_loss, arrays, tol=1e-4, step=1e-4):
    """Per-coordinate five-point central differences vs backprop.

    Coordinates whose gradient sits at the FD roundoff floor (|g| ~ 1e-8 with
    |loss| ~ 1) are exempted by an absolute 1e-9 bound; the relative tolerance
    applies everywhere else.
    """
    ps = make_params(arrays)
    analytic = backprop(build_loss(ps), ps)
    for p in ps.trainable_items():
        flat = p.tensor.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def at(d):
                flat[i] = orig + d
                val = float(build_loss(ps).data)
                flat[i] = orig
                return val

            numeric = (at(-2 * step) - 8 * at(-step) + 8 * at(step) - at(2 * step)) / (12 * step)
            ga = float(analytic[p.name].reshape(-1)[i])
            abs_err = abs(ga - numeric)
            rel = abs_err / max(abs(ga), abs(numeric), 1e-8)
            assert rel < tol or abs_err < 1e-9, (p.name, i, ga, numeric)


small_floats = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False, width=64)
pos_floats = st.floats(min_value=0.1, max_value=3.0, allow_nan=False, width=64)


def arrays(shape_strategy, elements=small_floats):
    return shape_strategy.flatmap(
        lambda shp: st.lists(
            elements, min_size=int(np.prod(shp)), max_size=int(np.prod(shp))
        ).map(lambda xs: np.array(xs).reshape(shp))
    )


shapes_2d = st.tuples(st.integers(1, 4), st.integers(1, 4))
shapes_1d = st.tuples(st.integers(1, 6))


class TestPrimitiveGradients:
    """Every supported primitive matches central finite differences (< 1e-4)."""

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d), arrays(shapes_2d))
    def test_add_sub_mul(self, a, b):
        if a.shape != b.shape:
            b = np.resize(b, a.shape)
        r = np.random.default_rng(0).normal(size=a.shape)
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.add(ps["a"], ps["b"]), dm.const(r)))
            + dm.tsum(dm.sub(ps["a"], ps["b"])),
            {"a": a, "b": b},
        )

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d), arrays(shapes_2d, pos_floats))
    def test_div(self, a, b):
        if a.shape != b.shape:
            b = np.resize(b, a.shape)
        fd_check_op(lambda ps: dm.tsum(dm.div(ps["a"], ps["b"])), {"a": a, "b": b})

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3))
    def test_matmul_2d(self, n, k, m):
        rng = np.random.default_rng(n * 100 + k * 10 + m)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        r = rng.normal(size=(n, m))
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.matmul(ps["a"], ps["b"]), dm.const(r))),
            {"a": a, "b": b},
        )

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
    def test_matmul_batched(self, B, n, k, m):
        rng = np.random.default_rng(B * 1000 + n * 100 + k * 10 + m)
        a, b = rng.normal(size=(B, n, k)), rng.normal(size=(B, k, m))
        r = rng.normal(size=(B, n, m))
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.matmul(ps["a"], ps["b"]), dm.const(r))),
            {"a": a, "b": b},
        )

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d))
    def test_sigmoid_tanh_exp(self, a):
        r = np.random.default_rng(1).normal(size=a.shape)
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.sigmoid(ps["a"]), dm.const(r)))
            + dm.tsum(dm.tanh(ps["a"]))
            + dm.tsum(dm.exp(ps["a"])),
            {"a": a},
        )

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d, pos_floats))
    def test_log(self, a):
        fd_check_op(lambda ps: dm.tsum(dm.log(ps["a"])), {"a": a})

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_1d, st.floats(min_value=0.05, max_value=2.0).flatmap(
        lambda x: st.sampled_from([x, -x]))))
    def test_abs_away_from_kink(self, a):
        fd_check_op(lambda ps: dm.tsum(dm.tabs(ps["a"])), {"a": a})

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d))
    def test_softmax_and_log_softmax(self, a):
        r = np.random.default_rng(2).normal(size=a.shape)
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.softmax(ps["a"]), dm.const(r)))
            + dm.tsum(dm.mul(dm.log_softmax(ps["a"]), dm.const(r))),
            {"a": a},
        )

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d))
    def test_logsumexp(self, a):
        r = np.random.default_rng(5).normal(size=a.shape[1])
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.logsumexp(ps["a"], axis=0), dm.const(r))),
            {"a": a},
        )

    def test_logsumexp_matches_numpy(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        got = dm.logsumexp(dm.const(x), axis=0).data
        expect = np.log(np.exp(x).sum(axis=0))
        assert np.max(np.abs(got - expect)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(arrays(shapes_2d))
    def test_sum_mean_cumsum(self, a):
        r0 = np.random.default_rng(3).normal(size=a.shape)
        fd_check_op(
            lambda ps: dm.tsum(dm.mul(dm.cumsum(ps["a"], axis=0), dm.const(r0)))
            + dm.tsum(ps["a"], axis=1).__getitem__(0)
            + dm.tmean(ps["a"]),
            {"a": a},
        )

    @settings(max_examples=15, deadline=None)
    @given(arrays(shapes_2d), arrays(shapes_2d))
    def test_concat_slice_reshape_swap(self, a, b):
        if a.shape[1] != b.shape[1]:
            b = np.resize(b, (b.shape[0], a.shape[1]))
        r = np.random.default_rng(4).normal(size=(a.shape[0] + b.shape[0], a.shape[1]))

        def loss(ps):
            c = dm.concat([ps["a"], ps["b"]], axis=0)
            c = dm.mul(c, dm.const(r))
            c = dm.swapaxes(c, 0, 1)
            c = dm.reshape(c, (-1,))
            return dm.tsum(c[1:]) + dm.tsum(c[:1])

        fd_check_op(loss, {"a": a, "b": b})

    def test_advanced_indexing_accumulates_duplicates(self):
        a = np.arange(4.0).reshape(4, 1)
        idx = np.array([0, 0, 2])
        ps = make_params({"a": a})
        loss = dm.tsum(ps["a"][idx])
        grads = backprop(loss, ps)
        assert np.array_equal(grads["a"], np.array([[2.0], [0.0], [1.0], [0.0]]))


class TestBackpropExamples:
    def test_linear_identity_case(self):
        # loss = sum(W @ x), W = I2, x = (1, 1) -> dL/dW = ones(2, 2)
        ps = make_params({"W": np.eye(2)})
        x = dm.const(np.array([[1.0], [1.0]]))
        grads = backprop(dm.tsum(ps["W"] @ x), ps)
        assert np.allclose(grads["W"], np.ones((2, 2)))

    def test_logistic_derivative_at_zero(self):
        ps = make_params({"x": np.array([0.0])})
        grads = backprop(dm.tsum(dm.sigmoid(ps["x"])), ps)
        assert abs(grads["x"][0] - 0.25) < 1e-15

    def test_frozen_params_get_no_gradient(self):
        ps = ParamSet(seed=0)
        w = ps.add("w", (2, 2), init=np.eye(2))
        f = ps.add("frozen", (2, 2), init=np.eye(2), trainable=False)
        loss = dm.tsum(w @ f)
        grads = backprop(loss, ps)
        assert "frozen" not in grads
        assert "w" in grads

    def test_rejects_nonfinite_loss(self):
        t = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(dm.GraphError):
            backward(dm.tsum(t))

    def test_rejects_shape_mismatch(self):
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.zeros((4, 2)), requires_grad=True)
        with pytest.raises(dm.GraphError):
            dm.matmul(a, b)

    def test_bit_identical_gradients_across_runs(self):
        def run():
            ps = ParamSet(seed=42)
            w = ps.add("w", (8, 8))
            v = ps.add("v", (8, 4))
            loss = dm.tsum(dm.tanh(w @ v) @ dm.swapaxes(dm.softmax(v, axis=0), 0, 1))
            return backprop(loss, ps)

        g1, g2 = run(), run()
        for k in g1:
            assert np.array_equal(g1[k], g2[k])


class TestFiniteDiffCheck:
    def test_quadratic_bowl(self):
        ps = make_params({"w": np.array([1.0, 2.0])})

        def forward():
            w = ps["w"]
            return dm.tsum(dm.mul(w, w))

        report = finite_diff_check(forward, ps, step=1e-6)
        grads = backprop(forward(), ps)
        assert np.allclose(grads["w"], [2.0, 4.0], atol=1e-12)
        assert report.max_rel_err < 1e-9

    def test_frozen_params_absent_from_report(self):
        ps = ParamSet(seed=0)
        ps.add("w", (3,), init=np.array([1.0, -1.0, 0.5]))
        ps.add("lm", (3,), init=np.array([2.0, 2.0, 2.0]), trainable=False)

        report = finite_diff_check(lambda: dm.tsum(dm.mul(ps["w"], ps["lm"])), ps)
        assert "lm" not in report.entries
        assert "w" in report.entries

    def test_rejects_nonfinite_perturbed_loss(self):
        ps = make_params({"x": np.array([1e-7])})
        with pytest.raises(dm.GraphError):
            finite_diff_check(lambda: dm.tsum(dm.log(ps["x"])), ps, step=1e-5)

    def test_subsampling_large_param(self):
        rng = np.random.default_rng(9)
        ps = make_params({"big": rng.normal(size=(30, 30))})
        report = finite_diff_check(lambda: dm.tsum(dm.tanh(ps["big"])), ps, max_scalars=200)
        assert report.entries["big"].n_checked == 200
        assert report.max_rel_err < 1e-6


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = ParamSet(seed=0)
        ps.add("w", (2,))
        with pytest.raises(dm.GraphError):
            ps.add("w", (2,))

    def test_seeded_init_deterministic(self):
        a = ParamSet(seed=7).add("w", (4, 4)).data
        b = ParamSet(seed=7).add("w", (4, 4)).data
        assert np.array_equal(a, b)
        bound = 1.0 / 2.0
        assert np.all(np.abs(a) <= bound)

    def test_checksum_changes_with_values(self):
        ps = ParamSet(seed=0)
        ps.add("w", (2, 2), init=np.eye(2))
        c1 = ps.checksum()
        ps["w"].data[0, 0] += 1.0
        assert ps.checksum() != c1

    def test_no_grad_builds_no_graph(self):
        ps = ParamSet(seed=0)
        w = ps.add("w", (2, 2))
        with dm.no_grad():
            out = dm.tsum(w @ w)
        assert not out.requires_grad


class TestAdam:
    def test_descends_quadratic(self):
        ps = make_params({"w": np.array([5.0, -3.0])})
        opt = dm.Adam(ps, lr=0.1)
        for _ in range(300):
            grads = backprop(dm.tsum(dm.mul(ps["w"], ps["w"])), ps)
            opt.step(grads)
        assert np.all(np.abs(ps["w"].data) < 1e-2)

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = dm.clip_grad_norm(grads, 1.0)
        assert abs(norm - 5.0) < 1e-12
        assert abs(np.linalg.norm(grads["a"]) - 1.0) < 1e-12

    def test_state_roundtrip(self):
        ps = make_params({"w": np.array([1.0, 2.0])})
        opt = dm.Adam(ps, lr=0.05)
        grads = backprop(dm.tsum(dm.mul(ps["w"], ps["w"])), ps)
        opt.step(grads)
        state = opt.state_arrays()

        ps2 = make_params({"w": np.array([1.0, 2.0])})
        opt2 = dm.Adam(ps2, lr=0.05)
        opt2.load_state_arrays(state)
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["w"], opt.m["w"])
