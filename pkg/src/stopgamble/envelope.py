"""One-dimensional concave envelopes of sampled functions.

This is the kernel the whole solver iterates: given samples of a function on
a strictly increasing grid, compute the smallest concave function dominating
it, together with the contact set (where envelope equals function) and the
chord segments bridging non-contact runs.

Points outside the function's domain are encoded with the ``MINUS_INFINITY``
sentinel; the finite entries must form one contiguous block.  The first and
last finite samples act as hard endpoints: truncation policy for half-infinite
domains is owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MINUS_INFINITY = -np.inf

#: default contact tolerance, relative to the value range of the line
CONTACT_TOL = 1e-9


class EnvelopeError(ValueError):
    """Raised for inputs the kernel cannot envelope (too few finite points,
    non-monotone abscissae, non-contiguous finite block)."""


@dataclass(frozen=True)
class SampledFunction:
    """A function sampled on strictly increasing abscissae.

    ``fs`` entries may be ``MINUS_INFINITY`` (point outside the domain);
    the finite entries must form one contiguous block of length >= 2.
    """

    xs: np.ndarray
    fs: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        fs = np.asarray(self.fs, dtype=float)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "fs", fs)
        if xs.ndim != 1 or fs.ndim != 1 or xs.size != fs.size:
            raise EnvelopeError("xs and fs must be 1-d arrays of equal length")
        if xs.size < 2:
            raise EnvelopeError("need at least two sample points")
        if not np.all(np.diff(xs) > 0):
            raise EnvelopeError("xs must be strictly increasing")
        if np.any(np.isposinf(fs)) or np.any(np.isnan(fs)):
            raise EnvelopeError("fs must be finite or MINUS_INFINITY")

    def finite_block(self) -> tuple[int, int]:
        """Return (lo, hi) inclusive indices of the finite block."""
        finite = np.isfinite(self.fs)
        if finite.sum() < 2:
            raise EnvelopeError("need at least two finite values")
        lo = int(np.argmax(finite))
        hi = int(len(finite) - 1 - np.argmax(finite[::-1]))
        if not finite[lo : hi + 1].all():
            raise EnvelopeError("finite entries must form one contiguous block")
        return lo, hi


@dataclass(frozen=True)
class EnvelopeResult:
    """Concave envelope of a sampled line.

    ``env``     envelope values at the input abscissae (sentinel kept off-domain)
    ``contact``  True where env equals the function within the contact tolerance
    ``segments`` (i, j) index pairs of chord endpoints covering non-contact runs
    """

    env: np.ndarray
    contact: np.ndarray
    segments: list = field(default_factory=list)


def _hull_indices(xs, fs) -> list[int]:
    """Indices of the upper concave hull vertices, scanned left to right.

    Monotone-chain: a stacked vertex is popped when it lies on or below the
    chord joining its predecessor to the incoming point.
    """
    hull: list[int] = []
    x = xs.tolist()
    f = fs.tolist()
    for i in range(len(x)):
        xi = x[i]
        fi = f[i]
        while len(hull) >= 2:
            i1 = hull[-1]
            i0 = hull[-2]
            if (x[i1] - x[i0]) * (fi - f[i0]) - (xi - x[i0]) * (f[i1] - f[i0]) >= 0.0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def envelope_values(xs: np.ndarray, fs: np.ndarray) -> np.ndarray:
    """Concave envelope values of a fully finite line (no sentinel handling).

    Returns env >= fs pointwise; env is exactly fs at hull vertices and the
    chord interpolation elsewhere.
    """
    hull = _hull_indices(xs, fs)
    env = np.interp(xs, xs[hull], fs[hull])
    # chords dominate mathematically; the max guards 1-ulp interpolation dips
    np.maximum(env, fs, out=env)
    return env


def _line_scale(fs_finite: np.ndarray) -> float:
    rng = float(fs_finite.max() - fs_finite.min())
    return rng if rng > 0.0 else 1.0


def concave_envelope_1d(f: SampledFunction, contact_tol: float = CONTACT_TOL) -> EnvelopeResult:
    """Concave envelope of ``f`` by an upper-hull monotone-chain scan, O(n).

    The envelope equals the pointwise supremum over all chords of ``f``
    restricted to its finite block; sentinel points keep the sentinel.
    """
    lo, hi = f.finite_block()
    xs = f.xs[lo : hi + 1]
    fs = f.fs[lo : hi + 1]
    hull = _hull_indices(xs, fs)
    env_block = np.interp(xs, xs[hull], fs[hull])
    np.maximum(env_block, fs, out=env_block)

    env = np.full_like(f.fs, MINUS_INFINITY)
    env[lo : hi + 1] = env_block

    tol = contact_tol * _line_scale(fs)
    contact = np.zeros(f.fs.shape, dtype=bool)
    contact[lo : hi + 1] = (env_block - fs) <= tol

    segments = []
    for a, b in zip(hull[:-1], hull[1:]):
        if b > a + 1 and not contact[lo + a + 1 : lo + b].all():
            segments.append((lo + a, lo + b))
    return EnvelopeResult(env=env, contact=contact, segments=segments)


def concave_envelope_oracle(f: SampledFunction, contact_tol: float = CONTACT_TOL) -> EnvelopeResult:
    """O(n^2)-per-point literal chord supremum; the anti-regression oracle.

    env(x) = sup over pairs x1 <= x <= x2 of lam*f(x1) + (1-lam)*f(x2) with
    lam = (x2 - x)/(x2 - x1), convention lam(x, .) = 1 and lam(., x) = 0.
    Intended for n <= ~512.
    """
    lo, hi = f.finite_block()
    xs = f.xs[lo : hi + 1]
    fs = f.fs[lo : hi + 1]
    m = xs.size
    env_block = np.empty(m)
    for k in range(m):
        x1 = xs[: k + 1, None]
        f1 = fs[: k + 1, None]
        x2 = xs[None, k:]
        f2 = fs[None, k:]
        width = x2 - x1
        with np.errstate(invalid="ignore", divide="ignore"):
            lam = (x2 - xs[k]) / width
            chord = lam * f1 + (1.0 - lam) * f2
        chord[width == 0.0] = fs[k]
        env_block[k] = chord.max()

    env = np.full_like(f.fs, MINUS_INFINITY)
    env[lo : hi + 1] = env_block

    tol = contact_tol * _line_scale(fs)
    contact = np.zeros(f.fs.shape, dtype=bool)
    contact[lo : hi + 1] = (env_block - fs) <= tol

    segments = []
    run = None
    for j in range(m):
        if not contact[lo + j]:
            run = run if run is not None else j
        elif run is not None:
            segments.append((lo + run - 1, lo + j))
            run = None
    return EnvelopeResult(env=env, contact=contact, segments=segments)


def contact_points(
    f: SampledFunction,
    result: EnvelopeResult,
    around: int,
    tol: float | None = None,
) -> tuple[int | None, int | None, int]:
    """Nearest contact indices at-or-below and at-or-above ``around``.

    If ``around`` itself is a contact point both returned indices equal it.
    A ``None`` on one side means no contact exists within the finite block,
    which signals window truncation to the caller.
    """
    lo, hi = f.finite_block()
    if not lo <= around <= hi:
        raise EnvelopeError(f"query index {around} outside finite block [{lo}, {hi}]")
    if tol is None:
        contact = result.contact
    else:
        scale = _line_scale(f.fs[lo : hi + 1])
        contact = np.zeros(f.fs.shape, dtype=bool)
        contact[lo : hi + 1] = (result.env[lo : hi + 1] - f.fs[lo : hi + 1]) <= tol * scale
    if contact[around]:
        return around, around, around
    below = np.nonzero(contact[lo:around])[0]
    above = np.nonzero(contact[around + 1 : hi + 1])[0]
    lower = int(lo + below[-1]) if below.size else None
    upper = int(around + 1 + above[0]) if above.size else None
    return lower, upper, around
