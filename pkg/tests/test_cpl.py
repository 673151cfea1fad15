import numpy as np
import pytest

from scribbleseg.autodiff import Tensor, grad_check
from scribbleseg.cpl import (DEFAULT_DECAY, DEFAULT_FLOOR, LOG_EPS, CPLStack,
                             build_cpl, decay_map, edt, loss_con)
from scribbleseg.errors import ConfigError, DataError
from scribbleseg.grids import GC_CODE, UNLABELED_CODE, ClassConfig


def brute_force_sq(src: np.ndarray) -> np.ndarray:
    """Minimum squared Euclidean distance by exhaustive pairing."""
    h, w = src.shape
    pts = np.argwhere(src)
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
    return d2.min(axis=-1).astype(np.float64)


@pytest.mark.parametrize("seed", range(8))
def test_edt_matches_brute_force_random(seed):
    rs = np.random.RandomState(seed)
    src = rs.rand(16, 16) < 0.08
    if not src.any():
        src[3, 5] = True
    got = edt(src)
    want = np.sqrt(brute_force_sq(src))
    assert np.array_equal(got, want)


def test_edt_rectangular_and_sparse():
    rs = np.random.RandomState(100)
    for shape in [(9, 13), (13, 9), (1, 20), (20, 1), (2, 2)]:
        src = rs.rand(*shape) < 0.1
        if not src.any():
            src[0, 0] = True
        assert np.array_equal(edt(src), np.sqrt(brute_force_sq(src)))


def test_edt_single_source_analytic():
    src = np.zeros((8, 8), dtype=bool)
    src[0, 0] = True
    d = edt(src)
    rr, cc = np.mgrid[0:8, 0:8]
    assert np.array_equal(d, np.sqrt((rr**2 + cc**2).astype(np.float64)))


def test_edt_degenerate_grids():
    assert np.isinf(edt(np.zeros((5, 7), dtype=bool))).all()
    assert (edt(np.ones((5, 7), dtype=bool)) == 0.0).all()
    with pytest.raises(DataError):
        edt(np.zeros(5, dtype=bool))


def test_edt_worst_case_diagonal():
    # Far diagonal pair exercises envelope crossings in both passes.
    src = np.zeros((32, 32), dtype=bool)
    src[0, 31] = True
    src[31, 0] = True
    assert np.array_equal(edt(src), np.sqrt(brute_force_sq(src)))


def test_decay_map_scribble_pixels_are_one():
    d = np.array([[0.0, 1.0], [2.0, 0.0]])
    cpl = decay_map(d)
    assert cpl.values[0, 0] == 1.0
    assert cpl.values[1, 1] == 1.0
    assert cpl.values[0, 1] == pytest.approx(np.exp(-0.1), abs=1e-12)


def test_decay_map_cutoff_distance():
    # exp(-0.1 d) crosses the 0.05 floor at d = -ln(0.05)/0.1.
    cut = -np.log(DEFAULT_FLOOR) / DEFAULT_DECAY
    assert cut == pytest.approx(29.957322735539909, abs=1e-12)
    d = np.array([[cut - 1e-6, cut + 1e-6, 100.0]])
    vals = decay_map(d).values[0]
    assert vals[0] > DEFAULT_FLOOR
    assert vals[0] == pytest.approx(DEFAULT_FLOOR, abs=1e-6)
    assert vals[1] == 0.0
    assert vals[2] == 0.0


def test_decay_map_gc_floor_clamp():
    half = np.log(2.0) / DEFAULT_DECAY
    assert half == pytest.approx(6.9314718055994531, abs=1e-12)
    d = np.array([[0.0, half, 100.0, np.inf]])
    vals = decay_map(d, is_gc=True).values[0]
    assert vals[0] == 1.0
    assert vals[1] == pytest.approx(0.5, abs=1e-12)
    assert vals[2] == DEFAULT_FLOOR
    assert vals[3] == DEFAULT_FLOOR


def test_decay_map_infinite_distance_non_gc():
    vals = decay_map(np.array([[np.inf]])).values
    assert vals[0, 0] == 0.0


def test_decay_map_validation():
    d = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        decay_map(d, decay=0.0)
    with pytest.raises(ConfigError):
        decay_map(d, floor=0.0)
    with pytest.raises(ConfigError):
        decay_map(d, floor=1.0)


def _toy_scribble(size=48):
    scr = np.full((size, size), UNLABELED_CODE, dtype=np.uint8)
    scr[10, 10:14] = 1
    scr[30, 20:30] = 2
    scr[20:24, 40] = 3
    rr = np.array([4, 4, 4, 44, 44, 44])
    cc = np.array([4, 24, 44, 4, 24, 44])
    scr[rr, cc] = GC_CODE
    return scr


def test_build_cpl_shapes_and_anchors():
    scr = _toy_scribble()
    stack = build_cpl(scr)
    assert stack.shape == scr.shape
    assert len(stack.foreground) == 3
    for code in (1, 2, 3):
        vals = stack.foreground[code - 1].values
        assert (vals[scr == code] == 1.0).all()
        assert vals.max() == 1.0
    assert stack.gc.values.min() >= DEFAULT_FLOOR
    assert (stack.gc.values[scr == GC_CODE] == 1.0).all()


def test_build_cpl_missing_class_gives_zero_map():
    scr = _toy_scribble()
    scr[scr == 2] = UNLABELED_CODE
    stack = build_cpl(scr)
    assert stack.support_areas()[1] == 0
    assert (stack.foreground[1].values == 0.0).all()


def test_support_area_matches_disk_count():
    scr = np.full((80, 80), UNLABELED_CODE, dtype=np.uint8)
    scr[40, 40] = 1
    stack = build_cpl(scr)
    rr, cc = np.mgrid[0:80, 0:80]
    d = np.sqrt((rr - 40.0) ** 2 + (cc - 40.0) ** 2)
    want = int((np.exp(-DEFAULT_DECAY * d) > DEFAULT_FLOOR).sum())
    assert stack.support_areas()[0] == want


def test_support_area_strictly_decreasing_in_decay():
    scr = _toy_scribble(64)
    areas = [sum(build_cpl(scr, decay=k).support_areas()) for k in (0.05, 0.1, 0.2, 0.5)]
    assert areas[0] > areas[1] > areas[2] > areas[3]


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _con_reference(stacks, y, gc_in_con, form):
    """Direct transcription of the weighted-entropy formula."""
    total = 0.0
    for s, ys in zip(stacks, y):
        w = np.stack([c.values for c in s.foreground])
        chans = [(w[i], ys[i + 1]) for i in range(len(s.foreground))]
        n_c = len(s.foreground)
        support = (w > 0).any(axis=0)
        if gc_in_con:
            chans.append((s.gc.values, 1.0 - ys[0]))
            n_c += 1
            support = support | (s.gc.values > 0)
        n = support.sum()
        if n == 0:
            continue
        acc = 0.0
        for wc, yc in chans:
            if form == "entropy_weighted":
                acc += (wc * yc * np.log(yc + LOG_EPS)).sum()
            else:
                acc += (wc * np.log(yc + LOG_EPS)).sum()
        total += -acc / (n_c * n)
    return total / len(stacks)


@pytest.mark.parametrize("gc_in_con", [True, False])
@pytest.mark.parametrize("form", ["entropy_weighted", "cross_entropy"])
def test_loss_con_matches_reference(gc_in_con, form):
    rs = np.random.RandomState(20)
    scr_a = _toy_scribble()
    scr_b = _toy_scribble()
    scr_b[scr_b == 1] = UNLABELED_CODE  # one class absent in sample 2
    stacks = [build_cpl(scr_a), build_cpl(scr_b)]
    y = _softmax(rs.randn(2, 4, 48, 48))
    got = loss_con(stacks, Tensor(y), gc_in_con=gc_in_con, con_form=form).item()
    want = _con_reference(stacks, y, gc_in_con, form)
    assert got == pytest.approx(want, abs=1e-12)
    assert got > 0.0


def test_loss_con_single_stack_and_3d_input():
    scr = _toy_scribble()
    stack = build_cpl(scr)
    y = _softmax(np.random.RandomState(21).randn(1, 4, 48, 48))
    a = loss_con(stack, Tensor(y[0])).item()
    b = loss_con([stack], Tensor(y)).item()
    assert a == pytest.approx(b, abs=1e-15)


def test_loss_con_batch_mean():
    scr = _toy_scribble()
    stack = build_cpl(scr)
    y = _softmax(np.random.RandomState(22).randn(1, 4, 48, 48))
    one = loss_con([stack], Tensor(y)).item()
    two = loss_con([stack, stack], Tensor(np.concatenate([y, y]))).item()
    assert two == pytest.approx(one, abs=1e-14)


def _small_scribble():
    scr = np.full((16, 16), UNLABELED_CODE, dtype=np.uint8)
    scr[3, 2:6] = 1
    scr[9, 8:13] = 2
    scr[12:15, 4] = 3
    scr[1, 1] = GC_CODE
    scr[14, 14] = GC_CODE
    return scr


def test_loss_con_gradient():
    stack = build_cpl(_small_scribble())
    y0 = _softmax(np.random.RandomState(23).randn(1, 4, 16, 16))

    def f(t):
        return loss_con([stack], t)

    assert grad_check(f, Tensor(y0)) < 1e-5


def test_loss_con_zero_support_warns():
    scr = np.full((16, 16), UNLABELED_CODE, dtype=np.uint8)
    stack = build_cpl(scr)
    y = _softmax(np.random.RandomState(24).randn(1, 4, 16, 16))
    with pytest.warns(UserWarning, match="support"):
        out = loss_con([stack], Tensor(y), gc_in_con=False).item()
    assert out == 0.0


def test_loss_con_validation():
    stack = build_cpl(_small_scribble())
    y = _softmax(np.random.RandomState(25).randn(1, 4, 16, 16))
    with pytest.raises(ConfigError):
        loss_con([stack], Tensor(y), con_form="mean_squared")
    with pytest.raises(DataError):
        loss_con([stack, stack], Tensor(y))
    with pytest.raises(DataError):
        loss_con([stack], Tensor(y[:, :3]))


def test_gc_channel_uses_foreground_probability():
    # With only the GC map active, the loss must read 1 - background channel.
    scr = np.full((8, 8), UNLABELED_CODE, dtype=np.uint8)
    scr[4, 4] = GC_CODE
    stack = build_cpl(scr)
    stack = CPLStack(
        tuple(
            type(c)(c.class_code, np.zeros_like(c.values), c.decay, c.floor, c.is_gc)
            for c in stack.foreground
        ),
        stack.gc,
    )
    y = np.zeros((1, 4, 8, 8))
    y[0, 0] = 0.3
    y[0, 1] = 0.7
    got = loss_con([stack], Tensor(y)).item()
    w = stack.gc.values
    want = -(w * 0.7 * np.log(0.7 + LOG_EPS)).sum() / (4 * 64)
    assert got == pytest.approx(want, abs=1e-12)
