import numpy as np
import pytest
from hypothesis import given, strategies as st

from lowrank_bnb.disjunctions import (
    BoxState,
    DisjunctionBranch,
    DisjunctionError,
    default_pieces,
    find_violating_eigenvector,
    make_cut,
    make_mccormick_children,
    make_piecewise,
    mccormick_envelope,
)


def chord(a, b, u):
    """Independent chord of u**2 through (a, a**2) and (b, b**2)."""
    if b == a:
        return a * a + 0 * u
    return a * a + (b * b - a * a) / (b - a) * (u - a)


def test_two_pieces_at_zero():
    f = make_piecewise(0.0, 2)
    assert f.breakpoints == (-1.0, 0.0, 1.0)
    assert f.value(0, -0.3) == pytest.approx(0.3) and f.value(1, 0.3) == pytest.approx(0.3)


def test_three_pieces_flat_middle():
    f = make_piecewise(0.5, 3)
    assert f.interval(1) == (-0.5, 0.5)
    assert f.slopes[1] == 0.0 and f.intercepts[1] == pytest.approx(0.25)


def test_two_piece_coefficients_are_the_printed_ones():
    u0 = 0.3
    f = make_piecewise(u0, 2)
    for u in np.linspace(u0, 1.0, 7):
        assert f.value(1, u) == pytest.approx(u + u * u0 - u0, abs=1e-15)
    for u in np.linspace(-1.0, u0, 7):
        assert f.value(0, u) == pytest.approx(-u + u * u0 + u0, abs=1e-15)


def test_four_piece_breakpoints():
    assert make_piecewise(-0.4, 4).breakpoints == (-1.0, -0.4, 0.0, 0.4, 1.0)


def test_bad_piece_count():
    with pytest.raises(DisjunctionError):
        make_piecewise(0.1, 5)


@given(st.sampled_from([2, 3, 4]), st.floats(-0.999, 0.999), st.floats(-1.0, 1.0))
def test_chord_property(q, u0, u):
    f = make_piecewise(u0, q)
    p = f.piece_of(u)
    lo, hi = f.interval(p)
    val = float(f.value(p, u))
    assert u * u <= val + 1e-12
    assert val <= 1.0 + 1e-12
    assert val == pytest.approx(chord(lo, hi, u), abs=1e-12)
    assert float(f.value(p, lo)) == pytest.approx(lo * lo, abs=1e-12)
    assert float(f.value(p, hi)) == pytest.approx(hi * hi, abs=1e-12)
    mid = 0.5 * (lo + hi)
    assert float(f.value(p, mid)) - mid * mid == pytest.approx(((hi - lo) / 2) ** 2, abs=1e-12)


def test_no_violation_at_projection(rng):
    U, _ = np.linalg.qr(rng.standard_normal((6, 2)))
    assert find_violating_eigenvector(U @ U.T, U, 1e-9) is None


def test_isotropic_violation():
    x, lam = find_violating_eigenvector(0.5 * np.eye(2), np.zeros((2, 1)), 1e-6)
    assert lam == pytest.approx(-0.5)
    assert x @ (-0.5 * np.eye(2)) @ x == pytest.approx(-0.5)
    assert np.linalg.norm(x) == pytest.approx(1.0)


def test_eigenvector_matches_random_direction_oracle(rng):
    for _ in range(5):
        B = rng.standard_normal((2, 2))
        Y = B @ B.T
        U = rng.standard_normal((2, 1))
        x, lam = find_violating_eigenvector(Y, U, -np.inf)
        M = U @ U.T - Y
        theta = rng.uniform(0, 2 * np.pi, 100_000)
        dirs = np.stack([np.cos(theta), np.sin(theta)])
        sampled = np.min(np.einsum("in,ij,jn->n", dirs, M, dirs))
        assert x @ M @ x == pytest.approx(lam, abs=1e-12)
        assert lam <= sampled + 1e-12
        assert sampled - lam <= 1e-6


def test_sign_convention(rng):
    B = rng.standard_normal((5, 5))
    x, _ = find_violating_eigenvector(B @ B.T, np.zeros((5, 1)), 0.0)
    assert x[np.flatnonzero(np.abs(x) > 1e-12)[0]] > 0


def _fractional(rng, n, k):
    """A relaxed-looking (U, Y): Y = U U' + PSD extra, so U U' - Y has a negative direction."""
    U = rng.uniform(-0.6, 0.6, (n, k)) / np.sqrt(n)
    B = rng.standard_normal((n, n))
    Y = U @ U.T + 0.2 * B @ B.T / n
    return U, Y


@pytest.mark.parametrize("q", [2, 3, 4])
@pytest.mark.parametrize("k", [1, 2])
def test_separation_and_coverage(rng, q, k):
    n = 6
    for _ in range(5):
        U, Y = _fractional(rng, n, k)
        x, lam = find_violating_eigenvector(Y, U, 1e-9)
        cut = make_cut(U, Y, x, q)
        branches = list(cut.branches())
        assert len(branches) == q ** k
        for br in branches:
            assert br.violation(U, Y) > 0
            inside = all(lo <= u <= hi for (lo, hi), u in zip(br.intervals(), U.T @ x))
            if inside:
                slopes, icpt = br.linear_terms()
                assert x @ Y @ x - slopes @ (U.T @ x) - icpt >= -lam - 1e-8
        for _ in range(100):
            Q, _ = np.linalg.qr(rng.standard_normal((n, k)))
            assert min(br.violation(Q, Q @ Q.T) for br in branches) <= 1e-9


def test_make_cut_rejects_bad_inputs(rng):
    U, _ = np.linalg.qr(rng.standard_normal((4, 1)))
    x = rng.standard_normal(4)
    with pytest.raises(DisjunctionError):
        make_cut(U, U @ U.T, x, 2)  # not unit length
    with pytest.raises(DisjunctionError):
        make_cut(U, U @ U.T, x / np.linalg.norm(x), 2)  # not violated


def test_branch_region_validation(rng):
    U, Y = _fractional(rng, 4, 1)
    x, _ = find_violating_eigenvector(Y, U, 0.0)
    cut = make_cut(U, Y, x, 2)
    with pytest.raises(DisjunctionError):
        DisjunctionBranch(cut, (2,))


def test_clamped_anchor():
    U = np.array([[1.0], [0.0]])
    Y = np.diag([1.0, 0.5])
    cut = make_cut(U, Y, np.array([0.0, 1.0]), 2)
    assert np.all(np.abs(cut.u0) < 1.0)


def test_projection_constraints_force_orthonormal_columns(rng):
    n, k = 6, 2
    for _ in range(50):
        Q, _ = np.linalg.qr(rng.standard_normal((n, k)))
        R, _ = np.linalg.qr(rng.standard_normal((k, k)))
        s = rng.choice([1.0, rng.uniform(0.5, 1.0)], size=k)
        U = Q @ np.diag(s) @ R
        Y = U @ U.T
        eig = np.linalg.eigvalsh(Y)
        feasible = eig[0] >= -1e-10 and eig[-1] <= 1 + 1e-10 and abs(np.trace(Y) - k) <= 1e-10
        assert feasible == (np.linalg.norm(U.T @ U - np.eye(k)) <= 1e-8)


def test_default_pieces():
    assert default_pieces(10, 1) == 4
    assert default_pieces(60, 1) == 2
    assert default_pieces(10, 2) == 2


def _envelope_bounds(rows, x, y):
    lower, upper = -np.inf, np.inf
    for cv, cx, cy, rhs in rows:
        bound = (rhs - cx * x - cy * y) / cv
        if cv < 0:
            lower = max(lower, bound)
        else:
            upper = min(upper, bound)
    return lower, upper


def test_mccormick_corner_is_tight():
    lo, hi = _envelope_bounds(mccormick_envelope(0, 1, 0, 1), 1.0, 1.0)
    assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)


def test_mccormick_grid_containment():
    rows = mccormick_envelope(-1, 1, -1, 1)
    for x in np.linspace(-1, 1, 21):
        for y in np.linspace(-1, 1, 21):
            lo, hi = _envelope_bounds(rows, x, y)
            assert lo == pytest.approx(max(-x - y - 1, x + y - 1))
            assert hi == pytest.approx(min(x - y + 1, y - x + 1))
            assert lo - 1e-12 <= x * y <= hi + 1e-12


def test_mccormick_degenerate_box():
    for y in np.linspace(-1, 1, 5):
        lo, hi = _envelope_bounds(mccormick_envelope(0.3, 0.3, -1, 1), 0.3, y)
        assert lo == pytest.approx(0.3 * y) and hi == pytest.approx(0.3 * y)


def test_mccormick_inverted_bounds():
    with pytest.raises(DisjunctionError):
        mccormick_envelope(1, 0, 0, 1)


def test_mccormick_children_partition():
    box = BoxState.root(3, 1)
    left, right = make_mccormick_children(box, (1, 0), 0.25)
    assert (left.lower[1, 0], left.upper[1, 0]) == (-1.0, 0.25)
    assert (right.lower[1, 0], right.upper[1, 0]) == (0.25, 1.0)
    assert np.array_equal(left.upper[0], box.upper[0])
    with pytest.raises(DisjunctionError):
        make_mccormick_children(box, (1, 0), 1.0)
    with pytest.raises(DisjunctionError):
        BoxState(np.ones((2, 1)), np.zeros((2, 1)))
