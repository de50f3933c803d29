import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanetopo.core import Centerline, InvalidInputError
from lanetopo.geometry import (
    Coupling,
    chamfer_distance,
    frechet_distance,
    giou_2d,
    iou_2d,
    resample,
)

from oracles import chamfer_loops, enumerate_couplings, frechet_bruteforce, iou_loops


def line(*points) -> Centerline:
    return Centerline(np.asarray(points, dtype=np.float64))


def random_curve(rng, n):
    return rng.uniform(-5.0, 5.0, size=(n, 3))


# ---------------------------------------------------------------------------
# resample


def test_resample_segment_equidistant():
    out = resample(line((0, 0, 0), (10, 0, 0)), 11)
    assert np.allclose(out.points[:, 0], np.arange(11.0))
    assert np.array_equal(out.points[0], [0, 0, 0])
    assert np.array_equal(out.points[-1], [10, 0, 0])


def test_resample_identity_on_equidistant_input():
    pts = np.column_stack([np.linspace(0, 4, 5), np.zeros(5), np.zeros(5)])
    out = resample(Centerline(pts), 5)
    assert np.allclose(out.points, pts)


def test_resample_l_shape_arc_length():
    # total length 7 so the 11 samples sit at arc-length multiples of 0.7
    out = resample(line((0, 0, 0), (4, 0, 0), (4, 3, 0)), 11)
    expected = []
    for k in range(11):
        s = 0.7 * k
        if s <= 4.0:
            expected.append([s, 0.0, 0.0])
        else:
            expected.append([4.0, s - 4.0, 0.0])
    assert np.allclose(out.points, expected, atol=1e-12)


def test_resample_preserves_confidence_and_direction():
    out = resample(Centerline(np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]]), 0.25))
    assert out.confidence == 0.25
    assert out.points[0, 0] < out.points[-1, 0]


def test_resample_requires_two_points():
    with pytest.raises(InvalidInputError):
        resample(line((0, 0, 0)))


def test_resample_degenerate_zero_length():
    out = resample(line((1, 2, 3), (1, 2, 3)), 5)
    assert np.allclose(out.points, np.tile([1, 2, 3], (5, 1)))


def point_at_arclength(pts: np.ndarray, s: float) -> np.ndarray:
    """Loop-based reference: walk the polyline to arc-length position s."""
    remaining = s
    for a, b in zip(pts, pts[1:]):
        seg = float(np.linalg.norm(b - a))
        if remaining <= seg or seg == 0.0:
            if seg == 0.0:
                continue
            return a + (remaining / seg) * (b - a)
        remaining -= seg
    return pts[-1]


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_resample_endpoints_exact_random(seed):
    rng = np.random.default_rng(seed)
    pts = random_curve(rng, int(rng.integers(2, 8)))
    out = resample(Centerline(pts), 11)
    assert len(out) == 11
    assert np.array_equal(out.points[0], pts[0])
    assert np.array_equal(out.points[-1], pts[-1])
    # every sample sits at its equal arc-length station along the input
    total = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    for k in range(11):
        expected = point_at_arclength(pts, total * k / 10.0)
        assert np.allclose(out.points[k], expected, atol=1e-9)


# ---------------------------------------------------------------------------
# Frechet


def test_frechet_identical_zero():
    a = line((0, 0, 0), (1, 1, 0), (2, 0, 0))
    assert frechet_distance(a, a) == 0.0


def test_frechet_parallel_offset():
    a = resample(line((0, 0, 0), (10, 0, 0)), 11)
    b = resample(line((0, 2, 0), (10, 2, 0)), 11)
    assert frechet_distance(a, b) == pytest.approx(2.0)


def test_frechet_reversal_of_segment():
    a = resample(line((0, 0, 0), (10, 0, 0)), 11)
    assert frechet_distance(a, a.reversed()) == pytest.approx(10.0)


def test_empty_curve_errors():
    # Centerline itself requires >= 1 point, so exercise the kernel guards
    # with a bare duck-typed curve
    class Fake:
        points = np.zeros((0, 3))

    with pytest.raises(InvalidInputError):
        frechet_distance(Fake(), line((0, 0, 0)))
    with pytest.raises(InvalidInputError):
        chamfer_distance(line((0, 0, 0)), Fake())


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_frechet_dp_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a = random_curve(rng, int(rng.integers(1, 7)))
    b = random_curve(rng, int(rng.integers(1, 7)))
    dp = frechet_distance(Centerline(a), Centerline(b))
    assert dp == pytest.approx(frechet_bruteforce(a, b), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_frechet_symmetry_and_coupling_norms(seed):
    rng = np.random.default_rng(seed)
    a = random_curve(rng, int(rng.integers(2, 6)))
    b = random_curve(rng, int(rng.integers(2, 6)))
    d_ab = frechet_distance(Centerline(a), Centerline(b))
    d_ba = frechet_distance(Centerline(b), Centerline(a))
    assert d_ab == pytest.approx(d_ba, abs=1e-12)
    # the DP value is the minimum coupling norm: no coupling is better and
    # one attains it
    norms = []
    for pairs in enumerate_couplings(len(a), len(b)):
        coupling = Coupling(tuple(pairs))
        coupling.validate(len(a), len(b))
        norms.append(coupling.norm(a, b))
    assert min(norms) == pytest.approx(d_ab, abs=1e-12)


def test_coupling_validation_rejects_bad_sequences():
    with pytest.raises(InvalidInputError):
        Coupling(((0, 1),)).validate(2, 2)
    with pytest.raises(InvalidInputError):
        Coupling(((0, 0), (2, 1), (2, 2))).validate(3, 3)
    with pytest.raises(InvalidInputError):
        Coupling(((0, 0), (1, 1))).validate(3, 2)


# ---------------------------------------------------------------------------
# Chamfer


def test_chamfer_identical_zero():
    a = line((0, 0, 0), (1, 1, 0))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_parallel_offset():
    a = resample(line((0, 0, 0), (10, 0, 0)), 11)
    b = resample(line((0, 1.5, 0), (10, 1.5, 0)), 11)
    assert chamfer_distance(a, b) == pytest.approx(1.5)


def test_chamfer_hand_example():
    a = line((0, 0, 0), (1, 0, 0))
    b = line((0, 1, 0))
    expected = 0.5 * ((1.0 + np.sqrt(2.0)) / 2.0 + 1.0)
    assert chamfer_distance(a, b) == pytest.approx(expected, abs=1e-12)
    assert chamfer_distance(a, b) == pytest.approx(1.1036, abs=5e-5)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_chamfer_properties(seed):
    rng = np.random.default_rng(seed)
    a = random_curve(rng, int(rng.integers(1, 12)))
    b = random_curve(rng, int(rng.integers(1, 12)))
    ca, cb = Centerline(a), Centerline(b)
    d = chamfer_distance(ca, cb)
    assert d == pytest.approx(chamfer_loops(a, b), abs=1e-12)
    assert d == pytest.approx(chamfer_distance(cb, ca), abs=1e-12)
    # direction blindness
    assert chamfer_distance(ca, cb.reversed()) == pytest.approx(d, abs=1e-12)
    assert chamfer_distance(ca.reversed(), cb) == pytest.approx(d, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_chamfer_below_frechet(seed):
    rng = np.random.default_rng(seed)
    a = Centerline(random_curve(rng, 11))
    b = Centerline(random_curve(rng, 11))
    assert chamfer_distance(a, b) <= frechet_distance(a, b) + 1e-12


def test_direction_sensitivity_fixture():
    # the two measures must disagree on a reversed curve
    a = resample(line((0, 0, 0), (10, 0, 0)), 11)
    rev = a.reversed()
    assert chamfer_distance(a, rev) == pytest.approx(0.0, abs=1e-12)
    assert frechet_distance(a, rev) == pytest.approx(10.0)


# ---------------------------------------------------------------------------
# IoU / GIoU


def test_iou_cases():
    assert iou_2d((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou_2d((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert iou_2d((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_iou_degenerate_box_is_zero(caplog):
    with caplog.at_level("WARNING"):
        assert iou_2d((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0
        assert giou_2d((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0
    assert sum("degenerate" in r.message for r in caplog.records) == 2


def test_giou_cases():
    assert giou_2d((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert giou_2d((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3)
    # hull equals union: GIoU collapses to IoU
    assert giou_2d((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_iou_giou_random_properties(seed):
    rng = np.random.default_rng(seed)

    def box():
        x1, y1 = rng.uniform(0, 10, 2)
        w, h = rng.uniform(0.1, 10, 2)
        return (x1, y1, x1 + w, y1 + h)

    a, b = box(), box()
    iou = iou_2d(a, b)
    giou = giou_2d(a, b)
    assert iou == pytest.approx(iou_loops(a, b), abs=1e-12)
    assert 0.0 <= iou <= 1.0
    assert -1.0 < giou <= 1.0
    assert giou <= iou + 1e-12
    assert iou_2d(b, a) == pytest.approx(iou, abs=1e-12)
    assert giou_2d(b, a) == pytest.approx(giou, abs=1e-12)
