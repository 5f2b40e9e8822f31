import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2md import tensor as T
from t2md.gradcheck import LAYER_CASES, gradient_error, run_case
from t2md.ssm import Axis, MambaMixer, ScanOrder, discretize, scan_chunked, scan_sequential
from t2md.verify import random_scan_case, scan_oracle_error


def test_discretize_examples():
    a, b = discretize(0.0, [1.0, 2.0], 0.3)
    assert a == 1.0 and np.allclose(b, [0.3, 0.6])
    a, b = discretize(-1.0, [2.0], 0.5)
    assert abs(a - 0.6065306597) < 1e-9 and abs(b[0] - 0.7869386806) < 1e-9
    with pytest.raises(ValueError):
        discretize(-1.0, [1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, -1e-3), st.floats(1e-3, 5))
def test_negative_decay_gives_contraction(A, dt):
    a, _ = discretize(A, [1.0], dt)
    assert 0 < a < 1


def test_single_step_scan_is_outer_product():
    rng = np.random.default_rng(0)
    with T.precision(np.float64):
        x, dt, A, B, C = random_scan_case(rng, 1, heads=1, head_dim=3)
        y = scan_sequential(x, dt, A, B, C).data
        _, bbar = discretize(A[0], B[0, 0], dt[0, 0, 0])
        assert np.allclose(y[0, 0, 0], x[0, 0, 0] * (bbar @ C[0, 0]))


def test_unit_decay_grows_linearly():
    L = 6
    with T.precision(np.float64):
        y = scan_sequential(np.ones((L, 1)), np.full(L, 0.5), np.zeros(1), np.ones((L, 2)), np.ones((L, 2))).data
    assert np.allclose(np.diff(y[:, 0]), y[0, 0])


def test_chunk_one_is_bit_identical():
    rng = np.random.default_rng(1)
    with T.precision(np.float64):
        args = random_scan_case(rng, 23, batch=2)
        assert scan_chunked(*args, chunk=1).data.tobytes() == scan_sequential(*args).data.tobytes()


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_chunked_scan_matches_oracle(dtype, tol):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(25):
        L = int(rng.integers(1, 97))
        for chunk in (4, 8, L):
            worst = max(worst, scan_oracle_error(rng, L, chunk, dtype))
    assert worst < tol


def test_long_chunk_eight_float32():
    rng = np.random.default_rng(3)
    assert max(scan_oracle_error(rng, 64, 8, np.float32) for _ in range(100)) < 1e-5


def test_scan_gradient_small_L():
    rng = np.random.default_rng(4)
    for L in (1, 3, 8):
        for chunk in (1, 2, 4):
            x, dt, A, B, C = random_scan_case(rng, L, heads=2, head_dim=2, state=2)
            w = rng.standard_normal(x.shape)
            err = gradient_error(lambda *a: T.sum(scan_chunked(*a, chunk=chunk) * w), [x, dt, A, B, C])
            assert err < 1e-6


def test_state_bound():
    rng = np.random.default_rng(5)
    L = 50
    a_bar = 0.9
    dt = 0.2
    A = np.log(a_bar) / dt
    x = rng.uniform(-1, 1, size=(L, 1))
    B = rng.uniform(-1, 1, size=(L, 3))
    with T.precision(np.float64):
        # C = unit vectors read the state coordinates directly
        for k in range(3):
            C = np.zeros((L, 3))
            C[:, k] = 1.0
            y = scan_sequential(x, np.full(L, dt), np.array([A]), B, C).data
            bound = np.max(np.abs(np.expm1(A * dt) / A * B[:, k:k + 1] * x)) / (1 - a_bar)
            assert np.all(np.abs(y) <= bound + 1e-12)


def test_scan_order_examples():
    assert ScanOrder(Axis.WIDTH).permutation(2, 2).tolist() == [0, 1, 2, 3]
    assert ScanOrder(Axis.HEIGHT).permutation(2, 2).tolist() == [0, 2, 1, 3]
    assert ScanOrder(Axis.WIDTH, True).permutation(2, 2).tolist() == [3, 2, 1, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from(list(Axis)), st.booleans())
def test_scan_order_bijection(h, w, axis, rev):
    o = ScanOrder(axis, rev)
    p = o.permutation(h, w)
    assert sorted(p.tolist()) == list(range(h * w))
    assert np.array_equal(p[o.inverse(h, w)], np.arange(h * w))
    assert np.array_equal(ScanOrder(axis, not rev).permutation(h, w), p[::-1])


def _mixer(axis, seed=0, chunk=4):
    return MambaMixer(8, 4, 2, 4, axis, np.random.default_rng(seed), chunk=chunk)


def test_zero_input_gives_zero_output():
    m = _mixer(Axis.WIDTH)
    assert np.all(m(T.tensor(np.zeros((1, 6, 8))), (2, 3)).data == 0)


def test_reversal_symmetry():
    rng = np.random.default_rng(6)
    m = _mixer(Axis.WIDTH)
    with T.precision(np.float64):
        m.astype(np.float64)
        _, xs, dt, Bm, Cm = m._project(T.tensor(rng.standard_normal((1, 7, 8))))
        fwd_on_rev = m.scan_direction(T.flip(xs, 1), T.flip(dt, 1), T.flip(Bm, 1), T.flip(Cm, 1), reverse=False).data
        rev = m.scan_direction(xs, dt, Bm, Cm, reverse=True).data
    assert np.allclose(fwd_on_rev, rev[:, ::-1], atol=1e-12)


def test_axis_transpose_equivariance():
    rng = np.random.default_rng(7)
    h, w = 3, 4
    with T.precision(np.float64):
        hm = _mixer(Axis.HEIGHT, seed=1).astype(np.float64)
        wm = _mixer(Axis.WIDTH, seed=1).astype(np.float64)
        x = rng.standard_normal((1, h * w, 8))
        xt = x.reshape(1, h, w, 8).transpose(0, 2, 1, 3).reshape(1, h * w, 8)
        out_h = hm(T.tensor(x), (h, w)).data
        out_w = wm(T.tensor(xt), (w, h)).data
    back = out_w.reshape(1, w, h, 8).transpose(0, 2, 1, 3).reshape(1, h * w, 8)
    assert np.allclose(out_h, back, atol=1e-12)


def test_mixer_rejects_grid_mismatch_and_keeps_shape():
    m = _mixer(Axis.HEIGHT)
    assert m(T.tensor(np.ones((2, 6, 8))), (3, 2)).shape == (2, 6, 8)
    with pytest.raises(T.ShapeError):
        m(T.tensor(np.ones((1, 5, 8))), (2, 3))


def test_init_ranges():
    m = MambaMixer(64, 16, 2, 16, Axis.WIDTH, np.random.default_rng(0))
    dt0 = np.log1p(np.exp(m.dt_bias.data))
    a_bar = np.exp(-np.exp(m.A_log.data) * dt0)
    assert dt0.min() >= 0.01 - 1e-9 and dt0.max() <= 0.1 + 1e-9
    assert a_bar.min() >= 0.9 - 1e-9 and a_bar.max() <= 0.999 + 1e-9


def test_mixer_gradient():
    case = next(c for c in LAYER_CASES if c.name == "mamba_mixer")
    assert max(run_case(case, s) for s in range(20)) < 1e-6


def test_mixer_complexity_probe_scaling():
    from t2md.bench import mixer_complexity_probe
    rows = mixer_complexity_probe([256, 1024, 4096, 16384])
    ms = {k: [r.mean_ms for r in rows if r.layer_kind == k] for k in ("mamba_mixer", "self_attention")}
    mamba = np.array(ms["mamba_mixer"])
    attn = np.array(ms["self_attention"])
    # the smallest step is dominated by fixed per-call overhead; linearity is judged from 1024 up
    assert np.all((mamba[2:] / mamba[1:-1] >= 3) & (mamba[2:] / mamba[1:-1] <= 6)), mamba
    assert np.all((attn[1:] / attn[:-1] >= 10) & (attn[1:] / attn[:-1] <= 26)), attn
    assert np.any(mamba < attn) and mamba[0] > attn[0]
