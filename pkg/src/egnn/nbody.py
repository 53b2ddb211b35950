"""Charged-particle N-body trajectories (leapfrog, softened Coulomb forces).

Particle i feels ``sum_j k c_i c_j (x_i - x_j) / (|x_i - x_j|^3 + eps)``:
like charges repel, opposite charges attract.  Masses are 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError

BLOWUP_LIMIT = 1e6


class DatasetFormatError(ValueError):
    pass


@dataclass
class SimParams:
    n_particles: int = 5
    dim: int = 3
    dt: float = 1e-3
    total_steps: int = 5000
    burn_in: int = 3000
    slice_len: int = 1000
    coupling: float = 1.0
    softening: float = 0.1

    def __post_init__(self):
        if self.total_steps < self.burn_in + self.slice_len:
            raise ContractError(
                f"total_steps={self.total_steps} < burn_in + slice_len = {self.burn_in + self.slice_len}"
            )
        if self.n_particles < 1 or self.dt <= 0:
            raise ContractError("n_particles must be >= 1 and dt > 0")


@dataclass
class Trajectory:
    p0: np.ndarray
    v0: np.ndarray
    charges: np.ndarray
    target: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "p0": self.p0.tolist(),
            "v0": self.v0.tolist(),
            "c": self.charges.tolist(),
            "target": self.target.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        t = cls(
            np.asarray(d["p0"], dtype=np.float64),
            np.asarray(d["v0"], dtype=np.float64),
            np.asarray(d["c"], dtype=np.float64),
            np.asarray(d["target"], dtype=np.float64),
            dict(d.get("meta", {})),
        )
        n = len(t.charges)
        if t.p0.shape != t.v0.shape or t.p0.shape != t.target.shape or t.p0.shape[0] != n:
            raise ValueError("inconsistent array shapes")
        if not np.all(np.isin(t.charges, (-1.0, 1.0))):
            raise ValueError("charges must be -1 or +1")
        return t


def accelerations(x: np.ndarray, charges: np.ndarray, coupling: float, softening: float) -> np.ndarray:
    """Forces on each particle; ``x`` may carry leading batch axes ([..., N, dim]).

    The sum over partners runs in a fixed order so batched and single
    evaluation give bitwise-identical results.
    """
    n = x.shape[-2]
    acc = np.zeros_like(x)
    for j in range(n):
        r = x - x[..., j : j + 1, :]
        dist = np.sqrt(np.sum(r * r, axis=-1, keepdims=True))
        qq = charges * charges[..., j : j + 1]
        f = coupling * qq[..., None] * r / (dist**3 + softening)
        f[..., j, :] = 0.0
        acc = acc + f
    return acc


def potential_energy(x: np.ndarray, charges: np.ndarray, coupling: float, softening: float) -> float:
    """Potential whose gradient gives :func:`accelerations` (one configuration).

    U(r) = k c_i c_j int_r^inf s / (s^3 + eps) ds, evaluated in closed form.
    """
    total = 0.0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            r = float(np.linalg.norm(x[i] - x[j]))
            total += coupling * charges[i] * charges[j] * _radial_potential(r, softening)
    return total


def _radial_potential(r: float, eps: float) -> float:
    # antiderivative of s/(s^3+a^3) with a = eps^(1/3):
    # (1/(6a)) ln((s^2 - a s + a^2)/(s+a)^2) + (1/(a sqrt3)) atan((2s - a)/(a sqrt3))
    a = eps ** (1.0 / 3.0)
    s3 = math.sqrt(3.0)

    def anti(s):
        return (math.log((s * s - a * s + a * a) / (s + a) ** 2) / (6 * a)
                + math.atan((2 * s - a) / (a * s3)) / (a * s3))

    return (math.pi / 2) / (a * s3) - anti(r)


def kinetic_energy(v: np.ndarray) -> float:
    return 0.5 * float(np.sum(v * v))


def integrate(x, v, charges, params: SimParams, steps: int, record_energy: bool = False):
    """Leapfrog (kick-drift-kick) for ``steps`` steps.  Works on batched arrays."""
    dt, k, eps = params.dt, params.coupling, params.softening
    a = accelerations(x, charges, k, eps)
    energies = []
    for _ in range(steps):
        v = v + 0.5 * dt * a
        x = x + dt * v
        a = accelerations(x, charges, k, eps)
        v = v + 0.5 * dt * a
        if record_energy:
            energies.append(kinetic_energy(v) + potential_energy(x, charges, k, eps))
    return x, v, energies


def _initial_state(seed: int, attempt: int, params: SimParams):
    rng = np.random.default_rng([seed, attempt])
    p = rng.standard_normal((params.n_particles, params.dim))
    v = rng.standard_normal((params.n_particles, params.dim))
    c = rng.choice([-1.0, 1.0], size=params.n_particles)
    return p, v, c


def _run(p, v, c, params: SimParams):
    x, vel, _ = integrate(p, v, c, params, params.burn_in)
    p0, v0 = x.copy(), vel.copy()
    target, _, _ = integrate(x, vel, c, params, params.slice_len)
    return p0, v0, target


def simulate(seed: int, params: SimParams | None = None, **overrides) -> Trajectory:
    """One trajectory: burn in from Gaussian initial conditions, then slice."""
    return simulate_many([seed], params, **overrides)[0]


def simulate_many(seeds, params: SimParams | None = None, **overrides) -> list[Trajectory]:
    """Simulate several seeds at once (vectorised over trajectories)."""
    params = params or SimParams(**overrides)
    seeds = [int(s) for s in seeds]
    attempts = [0] * len(seeds)
    results: list[Trajectory | None] = [None] * len(seeds)
    pending = list(range(len(seeds)))
    while pending:
        init = [_initial_state(seeds[i], attempts[i], params) for i in pending]
        p = np.stack([s[0] for s in init])
        v = np.stack([s[1] for s in init])
        c = np.stack([s[2] for s in init])
        p0, v0, target = _run(p, v, c, params)
        retry = []
        for row, i in enumerate(pending):
            arrays = (p0[row], v0[row], target[row])
            if not all(np.all(np.isfinite(a)) and np.max(np.abs(a)) <= BLOWUP_LIMIT for a in arrays):
                attempts[i] += 1
                retry.append(i)
                continue
            meta = {
                "seed": seeds[i],
                "dt": params.dt,
                "burn_in": params.burn_in,
                "T_steps": params.slice_len,
                "coupling": params.coupling,
                "softening": params.softening,
                "resamples": attempts[i],
            }
            results[i] = Trajectory(p0[row], v0[row], c[row], target[row], meta)
        pending = retry
    return results


def write_dataset(trajectories, path) -> None:
    """JSON-lines: a header line, then one trajectory per line."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": "egnn-nbody", "version": 1, "count": len(trajectories)}) + "\n")
        for t in trajectories:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_dataset(path) -> list[Trajectory]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header: {exc}") from exc
    if header.get("format") != "egnn-nbody":
        raise DatasetFormatError(f"{path}: line 1: not an N-body dataset header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            out.append(Trajectory.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno} (record {lineno - 2}): {exc}") from exc
    if len(out) != header.get("count", len(out)):
        raise DatasetFormatError(
            f"{path}: header announces {header['count']} records, found {len(out)} (truncated?)"
        )
    return out
