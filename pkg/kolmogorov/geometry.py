from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np


def _as_tuple(values) -> Tuple[float, ...]:
    return tuple(float(a) for a in np.atleast_1d(np.asarray(values, dtype=float)))


@dataclass(frozen=True)
class Point:
    v: Tuple[float, ...]
    x: Tuple[float, ...]
    t: float

    def __post_init__(self):
        object.__setattr__(self, 'v', _as_tuple(self.v))
        object.__setattr__(self, 'x', _as_tuple(self.x))
        object.__setattr__(self, 't', float(self.t))
        if len(self.v) < 1 or len(self.v) != len(self.x):
            raise ValueError('Point needs len(v) == len(x) >= 1, got {} and {}'.format(len(self.v), len(self.x)))
        if not np.all(np.isfinite(self.v + self.x + (self.t,))):
            raise ValueError('Point components must be finite')

    @property
    def d(self) -> int:
        return len(self.v)

    @classmethod
    def identity(cls, d: int) -> 'Point':
        return cls((0.0,) * d, (0.0,) * d, 0.0)


@dataclass(frozen=True)
class BoxDomain:
    v_lo: Tuple[float, ...]
    v_hi: Tuple[float, ...]
    x_lo: Tuple[float, ...]
    x_hi: Tuple[float, ...]
    t_lo: float
    t_hi: float

    def __post_init__(self):
        for name in ('v_lo', 'v_hi', 'x_lo', 'x_hi'):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        object.__setattr__(self, 't_lo', float(self.t_lo))
        object.__setattr__(self, 't_hi', float(self.t_hi))
        d = len(self.v_lo)
        if d < 1 or any(len(getattr(self, n)) != d for n in ('v_hi', 'x_lo', 'x_hi')):
            raise ValueError('All extents of a BoxDomain must have the same length d >= 1')
        if any(lo >= hi for lo, hi in zip(self.v_lo + self.x_lo + (self.t_lo,), self.v_hi + self.x_hi + (self.t_hi,))):
            raise ValueError('BoxDomain needs lo < hi componentwise: {}'.format(self))

    @property
    def d(self) -> int:
        return len(self.v_lo)

    @property
    def measure(self) -> float:
        return float(np.prod(np.subtract(self.v_hi, self.v_lo)) * np.prod(np.subtract(self.x_hi, self.x_lo))
                     * (self.t_hi - self.t_lo))

    def contains(self, p: Point, atol: float = 1e-12) -> bool:
        lo = self.v_lo + self.x_lo + (self.t_lo,)
        hi = self.v_hi + self.x_hi + (self.t_hi,)
        z = p.v + p.x + (p.t,)
        return all(a - atol <= c <= b + atol for a, b, c in zip(lo, hi, z))


class BoundaryClass(Enum):
    KolmogorovBoundary = 'kolmogorov'
    NonKolmogorovBoundary = 'non_kolmogorov'
    Interior = 'interior'


def group_compose(z0: Point, z: Point) -> Point:
    if z0.d != z.d:
        raise ValueError('Dimension mismatch in group_compose: {} != {}'.format(z0.d, z.d))
    v = tuple(a + b for a, b in zip(z0.v, z.v))
    x = tuple(a + b + z.t * c for a, b, c in zip(z0.x, z.x, z0.v))
    return Point(v, x, z0.t + z.t)


def group_inverse(z: Point) -> Point:
    return Point(tuple(-a for a in z.v), tuple(-b + z.t * a for a, b in zip(z.v, z.x)), -z.t)


def dilate(r: float, z: Point) -> Point:
    if not r > 0:
        raise ValueError('Dilation factor must be positive, got {}'.format(r))
    return Point(tuple(r * a for a in z.v), tuple(r ** 3 * b for b in z.x), r ** 2 * z.t)


def dilate_domain(r: float, dom: BoxDomain) -> BoxDomain:
    if not r > 0:
        raise ValueError('Dilation factor must be positive, got {}'.format(r))
    return BoxDomain(
        tuple(r * a for a in dom.v_lo), tuple(r * a for a in dom.v_hi),
        tuple(r ** 3 * a for a in dom.x_lo), tuple(r ** 3 * a for a in dom.x_hi),
        r ** 2 * dom.t_lo, r ** 2 * dom.t_hi,
    )


def left_translate(z0: Point, fn: Callable) -> Callable:
    """Return z -> fn(z0 o z) for a function fn(v, x, t) of array-valued coordinates.

    v and x are sequences of d arrays (one per component), t an array.
    """
    def translated(v: Sequence, x: Sequence, t):
        t = np.asarray(t, dtype=float)
        v_new = [z0.v[i] + np.asarray(v[i], dtype=float) for i in range(z0.d)]
        x_new = [z0.x[i] + np.asarray(x[i], dtype=float) + t * z0.v[i] for i in range(z0.d)]
        return fn(v_new, x_new, z0.t + t)
    return translated


def _xt_faces(dom: BoxDomain, p: Point, atol: float):
    """Outer unit normals (length d+1) of every (x,t)-face containing p."""
    d = dom.d
    normals = []
    for i in range(d):
        for bound, sign in ((dom.x_lo[i], -1.0), (dom.x_hi[i], 1.0)):
            if abs(p.x[i] - bound) <= atol:
                n = np.zeros(d + 1)
                n[i] = sign
                normals.append(n)
    for bound, sign in ((dom.t_lo, -1.0), (dom.t_hi, 1.0)):
        if abs(p.t - bound) <= atol:
            n = np.zeros(d + 1)
            n[d] = sign
            normals.append(n)
    return normals


def classify_boundary_point(dom: BoxDomain, p: Point, N_xt: Optional[Sequence[float]] = None,
                            atol: float = 1e-12) -> BoundaryClass:
    """Classify p as a point of the Kolmogorov boundary, of the rest of the boundary or of the interior.

    Velocity faces always belong to the Kolmogorov boundary. On an (x,t)-face
    the point belongs to it when (v, -1) . N_xt > 0 (strictly). With
    N_xt=None the normals of all (x,t)-faces through p are used and an edge
    is Kolmogorov as soon as one adjacent face is.
    """
    if p.d != dom.d:
        raise ValueError('Dimension mismatch: point has d={}, domain d={}'.format(p.d, dom.d))
    if not dom.contains(p, atol):
        raise ValueError('Point {} lies outside the closure of {}'.format(p, dom))

    on_v_face = any(abs(p.v[i] - dom.v_lo[i]) <= atol or abs(p.v[i] - dom.v_hi[i]) <= atol for i in range(dom.d))
    if on_v_face:
        return BoundaryClass.KolmogorovBoundary

    normals = _xt_faces(dom, p, atol)
    if not normals:
        return BoundaryClass.Interior
    if N_xt is not None:
        N_xt = np.asarray(N_xt, dtype=float)
        if N_xt.shape != (dom.d + 1,):
            raise ValueError('N_xt must have length d+1={}, got shape {}'.format(dom.d + 1, N_xt.shape))
        normals = [N_xt]
    drift = np.array(p.v + (-1.0,))
    if any(float(drift @ n) > 0.0 for n in normals):
        return BoundaryClass.KolmogorovBoundary
    return BoundaryClass.NonKolmogorovBoundary
