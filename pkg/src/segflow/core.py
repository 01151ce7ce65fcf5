"""Shared value types: states, segments, alpha densities, schedules, grids, logs.

States and conditions are plain 1-D float64 numpy arrays; :func:`as_state`
and :func:`as_condition` validate and freeze them. Everything else is an
immutable dataclass.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

log = logging.getLogger(__name__)


def _frozen_vector(values, what: str) -> np.ndarray:
    if np.ndim(values) != 1:
        raise DomainError(f"{what} must be a 1-D vector, got shape {np.shape(values)}")
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} has non-finite entries")
    arr.setflags(write=False)
    return arr


def as_state(values) -> np.ndarray:
    arr = _frozen_vector(values, "state")
    if arr.size < 1:
        raise DomainError("state must have dimension >= 1")
    return arr


def as_condition(values) -> np.ndarray:
    # m = 0 is allowed: an unconditional field
    return _frozen_vector(values, "condition")


def interpolate_condition(ca: np.ndarray, cb: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination ``(1 - alpha) * ca + alpha * cb``.

    Written as ``ca + alpha * (cb - ca)`` so that equal conditions come back
    bitwise unchanged.
    """
    if alpha == 1.0:
        return np.asarray(cb, dtype=np.float64)
    return ca + alpha * (cb - ca)


@dataclass(frozen=True, eq=False)
class Segment:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a, b = as_state(self.a), as_state(self.b)
        if a.shape != b.shape:
            raise DomainError(f"segment endpoints differ in dimension: {a.size} vs {b.size}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.a.size

    def point(self, alpha: float) -> np.ndarray:
        return segment_point(self, alpha)

    def points(self, alphas) -> np.ndarray:
        alphas = np.asarray(alphas, dtype=np.float64)
        if np.any((alphas < 0.0) | (alphas > 1.0)):
            raise DomainError("alpha outside [0, 1]")
        out = self.a + alphas[:, None] * (self.b - self.a)
        out[alphas == 1.0] = self.b
        return out

    def midpoint(self) -> np.ndarray:
        return (self.a + self.b) / 2.0

    def norm(self) -> float:
        # hypot rescales internally, so tiny nonzero gaps do not underflow to 0
        return math.hypot(*(self.b - self.a))


def segment_point(seg: Segment, alpha: float) -> np.ndarray:
    """Point ``(1 - alpha) * a + alpha * b`` on the segment.

    Exact at both endpoints, and exact everywhere when ``a == b``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    if alpha == 1.0:
        return seg.b
    return seg.a + alpha * (seg.b - seg.a)


# --------------------------------------------------------------------------
# alpha densities


@dataclass(frozen=True)
class AlphaDensity:
    """Mixing density over [0, 1]: point atoms plus piecewise-uniform pieces.

    ``atoms`` holds ``(location, mass)`` and ``pieces`` holds
    ``(lower, upper, mass)``. Masses are normalized at construction; atoms at
    the same location are merged. Pieces must not overlap (touching is fine).
    """

    atoms: tuple = ()
    pieces: tuple = ()

    def __post_init__(self):
        merged: dict[float, float] = {}
        for loc, mass in self.atoms:
            loc, mass = float(loc), float(mass)
            if not 0.0 <= loc <= 1.0:
                raise ConfigurationError(f"atom location {loc} outside [0, 1]")
            if not mass >= 0.0 or not math.isfinite(mass):
                raise ConfigurationError(f"atom mass {mass} must be finite and >= 0")
            merged[loc] = merged.get(loc, 0.0) + mass
        pieces = []
        for lo, hi, mass in self.pieces:
            lo, hi, mass = float(lo), float(hi), float(mass)
            if not 0.0 <= lo < hi <= 1.0:
                raise ConfigurationError(f"piece [{lo}, {hi}) is not a subinterval of [0, 1]")
            if not mass >= 0.0 or not math.isfinite(mass):
                raise ConfigurationError(f"piece mass {mass} must be finite and >= 0")
            pieces.append((lo, hi, mass))
        pieces.sort()
        for (_, hi, _), (lo, _, _) in zip(pieces, pieces[1:]):
            if lo < hi:
                raise ConfigurationError("density pieces overlap")
        total = sum(merged.values()) + sum(m for _, _, m in pieces)
        if total <= 0.0:
            raise ConfigurationError("alpha density has zero total mass")
        atoms = tuple(sorted((loc, m / total) for loc, m in merged.items()))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "pieces", tuple((lo, hi, m / total) for lo, hi, m in pieces))

    @classmethod
    def uniform(cls) -> "AlphaDensity":
        return cls(pieces=((0.0, 1.0, 1.0),))

    @classmethod
    def atom(cls, loc: float) -> "AlphaDensity":
        return cls(atoms=((loc, 1.0),))

    @classmethod
    def endpoints(cls) -> "AlphaDensity":
        return cls(atoms=((0.0, 0.5), (1.0, 0.5)))

    @classmethod
    def from_dict(cls, data: dict) -> "AlphaDensity":
        return cls(atoms=tuple(map(tuple, data.get("atoms", ()))),
                   pieces=tuple(map(tuple, data.get("pieces", ()))))

    def to_dict(self) -> dict:
        return {"atoms": [list(a) for a in self.atoms], "pieces": [list(p) for p in self.pieces]}

    def total_mass(self) -> float:
        return math.fsum([m for _, m in self.atoms] + [m for _, _, m in self.pieces])

    def blend_atom(self, loc: float, share: float) -> "AlphaDensity":
        """Convex blend ``share * delta(loc) + (1 - share) * self``."""
        if not 0.0 <= share <= 1.0:
            raise DomainError(f"blend share {share} outside [0, 1]")
        if share == 0.0:
            return self
        atoms = [(a, (1.0 - share) * m) for a, m in self.atoms] + [(loc, share)]
        pieces = [(lo, hi, (1.0 - share) * m) for lo, hi, m in self.pieces]
        return AlphaDensity(atoms=tuple(atoms), pieces=tuple(pieces))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` alphas: atoms by mass, uniform within pieces."""
        locs = [a for a, _ in self.atoms]
        masses = np.array([m for _, m in self.atoms] + [m for _, _, m in self.pieces])
        which = rng.choice(masses.size, size=n, p=masses / masses.sum())
        u = rng.random(n)
        out = np.empty(n)
        n_atoms = len(locs)
        for idx in range(masses.size):
            sel = which == idx
            if idx < n_atoms:
                out[sel] = locs[idx]
            else:
                lo, hi, _ = self.pieces[idx - n_atoms]
                out[sel] = lo + (hi - lo) * u[sel]
        return out


def density_moments(p: AlphaDensity) -> tuple[float, float, float, float]:
    """Closed-form ``(c00, c01, c11, delta)`` of an alpha density.

    ``c00 = E[(1-a)^2]``, ``c01 = E[a(1-a)]``, ``c11 = E[a^2]`` and
    ``delta = c00*c11 - c01**2``. The determinant equals the variance of alpha
    (times the total mass), which is how it is computed here: the direct
    difference of products cancels badly for concentrated densities.
    """
    c00 = c01 = c11 = m1 = 0.0
    for a, m in p.atoms:
        c00 += m * (1 - a) ** 2
        c01 += m * a * (1 - a)
        c11 += m * a * a
        m1 += m * a
    for lo, hi, m in p.pieces:
        e1 = (lo + hi) / 2
        e2 = (lo * lo + lo * hi + hi * hi) / 3
        f0, f1 = 1 - lo, 1 - hi
        c00 += m * (f0 * f0 + f0 * f1 + f1 * f1) / 3
        c01 += m * (e1 - e2)
        c11 += m * e2
        m1 += m * e1
    total = p.total_mass()
    mean = m1 / total
    var = sum(m * (a - mean) ** 2 for a, m in p.atoms)
    var += sum(m * (((lo + hi) / 2 - mean) ** 2 + (hi - lo) ** 2 / 12) for lo, hi, m in p.pieces)
    return c00, c01, c11, total * var


def grid_moments(alphas, weights) -> tuple[float, float, float, float]:
    """Discrete analogue of :func:`density_moments` for weighted alpha points."""
    alphas = np.asarray(alphas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    c00 = float(np.sum(weights * (1 - alphas) ** 2))
    c01 = float(np.sum(weights * alphas * (1 - alphas)))
    c11 = float(np.sum(weights * alphas**2))
    total = float(np.sum(weights))
    mean = float(np.sum(weights * alphas)) / total
    delta = total * float(np.sum(weights * (alphas - mean) ** 2))
    return c00, c01, c11, delta


@dataclass
class _Region:
    lo: float
    hi: float
    mass: float
    moment: float  # sum of mass * location, for the merged centroid
    is_atom: bool

    def gap(self, other: "_Region") -> float:
        return max(0.0, other.lo - self.hi, self.lo - other.hi)


def alpha_grid(p: AlphaDensity, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Discretize ``p`` into ``k`` weighted alpha points.

    Returns ``(alphas, weights)`` sorted by alpha, weights summing to one.

    Every atom gets a point of its own, and pieces share the remaining points
    in proportion to their mass (evenly spaced cell centres inside each piece).
    When there are more regions than points, regions are merged: first atoms
    lying inside or on the boundary of a piece are absorbed by it (split evenly
    between touching pieces), then the lightest pieces are folded into their
    nearest neighbour. A merged region is represented by its mass centroid.
    """
    if k < 2:
        raise ConfigurationError(f"alpha grid needs k >= 2, got {k}")
    regions = [_Region(a, a, m, m * a, True) for a, m in p.atoms if m > 0]
    regions += [_Region(lo, hi, m, m * (lo + hi) / 2, False) for lo, hi, m in p.pieces if m > 0]
    n_atoms = sum(r.is_atom for r in regions)
    if k < n_atoms:
        raise ConfigurationError(f"k={k} is smaller than the number of atoms ({n_atoms})")
    if n_atoms == len(regions) and k > n_atoms:
        raise ConfigurationError(
            f"density {p.atoms} has only {n_atoms} support point(s); cannot place k={k} points")

    if len(regions) > k:
        _merge_regions(regions, k)

    pieces = [r for r in regions if not r.is_atom]
    counts = {id(r): 1 for r in pieces}
    for _ in range(k - len(regions)):
        best = max(pieces, key=lambda r: (r.mass / counts[id(r)], -r.lo))
        counts[id(best)] += 1

    alphas, weights = [], []
    for r in regions:
        n = counts.get(id(r), 1)
        if n == 1:
            alphas.append(r.moment / r.mass)
            weights.append(r.mass)
        else:
            width = (r.hi - r.lo) / n
            alphas.extend(r.lo + (j + 0.5) * width for j in range(n))
            weights.extend([r.mass / n] * n)
    alphas = np.clip(np.array(alphas), 0.0, 1.0)
    weights = np.array(weights)
    order = np.argsort(alphas, kind="stable")
    return alphas[order], weights[order] / math.fsum(weights)


def _merge_regions(regions: list, k: int) -> None:
    atoms = sorted((r for r in regions if r.is_atom), key=lambda r: (r.mass, r.lo))
    for atom in atoms:
        if len(regions) <= k:
            return
        hosts = [r for r in regions if not r.is_atom and r.lo <= atom.lo <= r.hi]
        if not hosts:
            continue
        for host in hosts:
            host.mass += atom.mass / len(hosts)
            host.moment += atom.moment / len(hosts)
        regions.remove(atom)
    while len(regions) > k:
        pieces = [r for r in regions if not r.is_atom]
        victim = min(pieces, key=lambda r: (r.mass, r.lo))
        others = [r for r in regions if r is not victim]
        target = min(others, key=lambda r: (victim.gap(r), -r.mass, r.lo))
        target.mass += victim.mass
        target.moment += victim.moment
        regions.remove(victim)


# --------------------------------------------------------------------------
# schedules and grids


@dataclass(frozen=True)
class WeightSchedule:
    """Piecewise-constant smoothing weight over step indices.

    ``breakpoints`` is a sequence of ``(threshold, w)``: a step uses the ``w``
    of the first breakpoint whose threshold exceeds it; ``None`` means no
    upper bound. When ``reference_steps`` is set, thresholds are step indices
    on a grid of that length and get rescaled onto the grid actually run.
    """

    breakpoints: tuple
    reference_steps: int | None = None
    allow_non_monotone: bool = False

    def __post_init__(self):
        bps = tuple((None if th is None else int(th), float(w)) for th, w in self.breakpoints)
        if not bps:
            raise ConfigurationError("weight schedule needs at least one breakpoint")
        for i, (th, w) in enumerate(bps):
            if not 0.0 <= w <= 1.0:
                raise ConfigurationError(f"weight {w} outside [0, 1]")
            if th is None and i != len(bps) - 1:
                raise ConfigurationError("only the last breakpoint may be open-ended")
        ths = [th for th, _ in bps if th is not None]
        if any(b <= a for a, b in zip(ths, ths[1:])):
            raise ConfigurationError("breakpoint thresholds must be strictly increasing")
        ws = [w for _, w in bps]
        if any(b > a for a, b in zip(ws, ws[1:])):
            if not self.allow_non_monotone:
                raise ConfigurationError(f"weight schedule {ws} is not non-increasing")
            log.warning("non-monotone weight schedule %s accepted (ablation only)", ws)
        if self.reference_steps is not None and self.reference_steps < 1:
            raise ConfigurationError("reference_steps must be positive")
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def constant(cls, w: float) -> "WeightSchedule":
        return cls(((None, w),))

    @classmethod
    def hard_cutoff(cls, cutoff: int) -> "WeightSchedule":
        if cutoff <= 0:
            return cls.constant(0.0)
        return cls(((cutoff, 1.0), (None, 0.0)))

    def weight(self, step: int, n_steps: int | None = None) -> float:
        idx = step
        if self.reference_steps is not None and n_steps is not None:
            idx = step * self.reference_steps // n_steps
        for th, w in self.breakpoints:
            if th is None or idx < th:
                return w
        return self.breakpoints[-1][1]

    def to_dict(self) -> dict:
        out = {"breakpoints": [list(bp) for bp in self.breakpoints]}
        if self.reference_steps is not None:
            out["reference_steps"] = self.reference_steps
        if self.allow_non_monotone:
            out["allow_non_monotone"] = True
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "WeightSchedule":
        return cls(tuple(map(tuple, data["breakpoints"])), data.get("reference_steps"),
                   bool(data.get("allow_non_monotone", False)))


@dataclass(frozen=True)
class TimeGrid:
    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times:
            raise ConfigurationError("time grid is empty")
        if any(not 0.0 <= t <= 1.0 for t in times):
            raise ConfigurationError("time grid values must lie in [0, 1]")
        if any(b >= a for a, b in zip(times, times[1:])):
            raise ConfigurationError("time grid must be strictly decreasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, n_steps: int, t_start: float = 1.0, t_end: float = 0.0) -> "TimeGrid":
        if n_steps < 0:
            raise ConfigurationError("n_steps must be >= 0")
        if n_steps == 0:
            return cls((t_start,))
        return cls(tuple(np.linspace(t_start, t_end, n_steps + 1)))

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def steps(self) -> Iterator[tuple[int, float, float]]:
        for i, (t1, t2) in enumerate(zip(self.times, self.times[1:])):
            yield i, t1, t2


# --------------------------------------------------------------------------
# presets


@lru_cache(maxsize=None)
def _presets() -> dict:
    return json.loads(resources.files("segflow").joinpath("presets.json").read_text())


def _resolve(name: str) -> str:
    return _presets()["aliases"].get(name, name)


def preset_names(kind: str) -> list[str]:
    return sorted(_presets()[kind])


def density_preset(name: str) -> AlphaDensity:
    try:
        return AlphaDensity.from_dict(_presets()["densities"][_resolve(name)])
    except KeyError:
        raise ConfigurationError(f"unknown density preset {name!r}") from None


def weight_preset(name: str) -> WeightSchedule:
    try:
        return WeightSchedule.from_dict(_presets()["weights"][_resolve(name)])
    except KeyError:
        raise ConfigurationError(f"unknown weight preset {name!r}") from None


# --------------------------------------------------------------------------
# trajectory logs


def fmt_float(x: float) -> str:
    """Fixed-notation, 17 significant digits; stable across runs and platforms."""
    return np.format_float_positional(float(x), precision=17, unique=False, fractional=False, trim="-")


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    t1: float
    t2: float
    xa: np.ndarray  # endpoint states at t1, before the update
    xb: np.ndarray
    va: np.ndarray  # raw endpoint velocities (before smoothing)
    vb: np.ndarray
    v_anchor: np.ndarray | None
    w: float
    alphas: np.ndarray
    alpha_weights: np.ndarray
    norm: float

    def smoothed(self) -> tuple[np.ndarray, np.ndarray]:
        if self.v_anchor is None or self.w == 0.0:
            return self.va, self.vb
        return (self.w * self.v_anchor + (1 - self.w) * self.va,
                self.w * self.v_anchor + (1 - self.w) * self.vb)


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    final_a: np.ndarray | None = None
    final_b: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def norms(self) -> list[float]:
        out = [r.norm for r in self.records]
        if self.final_a is not None:
            out.append(float(np.linalg.norm(self.final_b - self.final_a)))
        return out

    def csv_header(self) -> list[str]:
        d = self.records[0].xa.size if self.records else (0 if self.final_a is None else self.final_a.size)
        cols = ["step", "t1", "t2", "norm", "w"]
        for name in ("xa", "xb", "va", "vb", "vanchor"):
            cols += [f"{name}_{i}" for i in range(d)]
        return cols + ["alphas", "alpha_weights"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header())
        for r in self.records:
            row = [str(r.step), fmt_float(r.t1), fmt_float(r.t2), fmt_float(r.norm), fmt_float(r.w)]
            for vec in (r.xa, r.xb, r.va, r.vb):
                row += [fmt_float(v) for v in vec]
            if r.v_anchor is None:
                row += [""] * r.xa.size
            else:
                row += [fmt_float(v) for v in r.v_anchor]
            row.append(";".join(fmt_float(a) for a in r.alphas))
            row.append(";".join(fmt_float(a) for a in r.alpha_weights))
            writer.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        norms = self.norms()
        return {
            "final_a": [float(v) for v in self.final_a] if self.final_a is not None else None,
            "final_b": [float(v) for v in self.final_b] if self.final_b is not None else None,
            "final_norm": norms[-1] if norms else 0.0,
            "norms": norms,
            "steps": len(self.records),
        }


def stack_states(states: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(s, dtype=np.float64) for s in states])
