"""Random E(n) transforms, equivariance checks and distance-geometry tools."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ContractError, Tensor
from .graph import GeometricGraph


class NonRealizableError(ValueError):
    """Squared-distance matrix does not come from points in Euclidean space."""


@dataclass(frozen=True)
class EuclideanTransform:
    """x -> Q x + t acting on row-stacked points."""

    Q: np.ndarray
    t: np.ndarray

    @property
    def det_sign(self) -> int:
        return 1 if np.linalg.det(self.Q) > 0 else -1

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def apply_points(self, x: np.ndarray) -> np.ndarray:
        return x @ self.Q.T + self.t

    def apply_vectors(self, v: np.ndarray) -> np.ndarray:
        return v @ self.Q.T

    def apply(self, g: GeometricGraph) -> GeometricGraph:
        """Transform coordinates (rotate + translate) and velocities (rotate only)."""
        v = None if g.v is None else Tensor(self.apply_vectors(g.v.data))
        return g.replace(x=Tensor(self.apply_points(g.x.data)), v=v)

    def compose(self, other: "EuclideanTransform") -> "EuclideanTransform":
        """``self`` after ``other``."""
        return EuclideanTransform(self.Q @ other.Q, self.Q @ other.t + self.t)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian."""
    while True:
        a = rng.standard_normal((n, n))
        q, r = np.linalg.qr(a)
        d = np.diag(r)
        if np.all(np.abs(d) > 1e-12):
            return q * np.sign(d)


def random_transform(
    n: int, rng: np.random.Generator, reflect: bool = False, translation_scale: float = 10.0
) -> EuclideanTransform:
    """Random rotation (reflection when ``reflect``) plus a uniform translation.

    ``det(Q)`` is +1 unless ``reflect`` is set, in which case it is -1.
    """
    if n < 1:
        raise ContractError(f"dimension must be >= 1, got {n}")
    q = random_orthogonal(n, rng)
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if reflect:
        q[:, 0] = -q[:, 0]
    t = rng.uniform(-translation_scale, translation_scale, size=n)
    return EuclideanTransform(q, t)


@dataclass
class EquivarianceReport:
    dx: float
    dv: float
    dh: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.dx, self.dv, self.dh) <= self.tol

    def to_dict(self) -> dict:
        return {"dx": self.dx, "dv": self.dv, "dh": self.dh, "tol": self.tol, "passed": self.passed}


def _maxabs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def check_equivariance(
    f: Callable[[GeometricGraph], GeometricGraph],
    g: GeometricGraph,
    T: EuclideanTransform,
    tol: float = 1e-9,
    invariant_x: bool = False,
) -> EquivarianceReport:
    """Compare f(T g) against T f(g) channel by channel (infinity norm).

    Node features must be invariant, coordinates equivariant (or invariant
    when ``invariant_x``), velocities rotate but ignore translation.
    """
    base = f(g)
    moved = f(T.apply(g))
    expected_x = base.x.data if invariant_x else T.apply_points(base.x.data)
    dx = _maxabs(moved.x.data - expected_x)
    dv = 0.0
    if base.v is not None and moved.v is not None:
        dv = _maxabs(moved.v.data - T.apply_vectors(base.v.data))
    dh = _maxabs(moved.h.data - base.h.data)
    return EquivarianceReport(dx, dv, dh, tol)


def pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def distances_invariant(points: np.ndarray, T: EuclideanTransform, tol: float = 1e-10) -> bool:
    before = np.sqrt(pairwise_sq_distances(points))
    after = np.sqrt(pairwise_sq_distances(T.apply_points(points)))
    return bool(np.max(np.abs(before - after), initial=0.0) <= tol)


def reconstruct_from_distances(D: np.ndarray, eig_tol: float = 1e-8, dim: int | None = None) -> np.ndarray:
    """Recover points from a squared-distance matrix, up to an E(n) transform.

    Points are anchored at the first one, the Gram matrix of the anchored
    vectors is built from the law of cosines and factorised by a symmetric
    eigendecomposition.  Returns an ``M x r`` array (``r`` = numerical rank,
    or ``dim`` columns when given, zero padded).
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ContractError(f"distance matrix must be square, got {D.shape}")
    scale = max(1.0, float(np.max(np.abs(D), initial=0.0)))
    if np.max(np.abs(D - D.T), initial=0.0) > 1e-10 * scale:
        raise NonRealizableError("distance matrix is not symmetric")
    if np.max(np.abs(np.diag(D)), initial=0.0) > 1e-10 * scale:
        raise NonRealizableError("distance matrix has a non-zero diagonal")
    gram = 0.5 * (D[:, :1] + D[:1, :] - D)
    evals, evecs = np.linalg.eigh(gram)
    if evals.size and evals.min() < -eig_tol * scale:
        raise NonRealizableError(f"Gram matrix has negative eigenvalue {evals.min():.3g}")
    keep = evals > eig_tol * scale
    points = evecs[:, keep] * np.sqrt(evals[keep])
    if dim is not None:
        if points.shape[1] > dim:
            raise NonRealizableError(f"points need {points.shape[1]} dimensions, only {dim} allowed")
        points = np.hstack([points, np.zeros((len(D), dim - points.shape[1]))])
    return points


def procrustes_align(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, EuclideanTransform]:
    """Best orthogonal + translation fit of ``source`` onto ``target``."""
    if source.shape[1] < target.shape[1]:
        source = np.hstack([source, np.zeros((len(source), target.shape[1] - source.shape[1]))])
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    u, _, vt = np.linalg.svd((target - mu_t).T @ (source - mu_s))
    q = u @ vt
    T = EuclideanTransform(q, mu_t - q @ mu_s)
    return T.apply_points(source), T
