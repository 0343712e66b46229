"""Discrete per-link delay distributions with an explicit loss atom.

A link delay lives on a grid of ``bin_count`` finite bins of width
``bin_width`` seconds plus a separate probability of packet loss (delay
infinity).  Bin ``k`` stands for a delay in ``[k*width, (k+1)*width)``.
Likelihood code treats bins as exact discrete values; physical-unit
outputs (moments, CCDFs) use bin centers.

Loss is kept as a distinguished atom, never as an extra bin index, so
convolution code cannot silently wrap it into the finite range.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

LOSS = math.inf
"""Observed value of a lost packet: an infinite delay."""

NORM_TOL = 1e-12


@dataclass(frozen=True)
class DelaySupport:
    """Finite support shared by a set of binned delay distributions."""

    bin_count: int
    bin_width: float = 1.0

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError(f"bin_count must be >= 1, got {self.bin_count}")
        if not self.bin_width > 0:
            raise ValueError(f"bin_width must be > 0, got {self.bin_width}")

    def refined(self, factor: int) -> "DelaySupport":
        """The support with ``factor`` times more bins over the same range."""
        if factor < 1:
            raise ValueError("refinement factor must be >= 1")
        return DelaySupport(self.bin_count * factor, self.bin_width / factor)

    def refinement_factor(self, finer: "DelaySupport") -> int:
        """Integer m such that ``finer`` splits each of these bins into m.

        Raises ValueError when ``finer`` is not an aligned refinement.
        """
        if finer.bin_count % self.bin_count != 0:
            raise ValueError(
                f"{finer.bin_count} bins is not a multiple of {self.bin_count}"
            )
        m = finer.bin_count // self.bin_count
        if not math.isclose(finer.bin_width * m, self.bin_width, rel_tol=1e-9):
            raise ValueError(
                f"bin widths do not align: {m} x {finer.bin_width} != {self.bin_width}"
            )
        return m

    def centers(self) -> np.ndarray:
        """Bin centers (k + 1/2) * width, in seconds."""
        return (np.arange(self.bin_count) + 0.5) * self.bin_width


@dataclass(eq=False)
class DelayDistribution:
    """Probability mass over one link's delay bins plus a loss atom.

    ``mass[k]`` is the probability of delay bin ``k``; ``loss_mass`` the
    probability of losing the packet on the link.  Instances are allowed
    to be unnormalized (EM intermediates are); inference entry points
    check :attr:`is_normalized` explicitly.
    """

    support: DelaySupport
    mass: np.ndarray
    loss_mass: float = 0.0

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float)
        if mass.shape != (self.support.bin_count,):
            raise ValueError(
                f"mass has shape {mass.shape}, expected ({self.support.bin_count},)"
            )
        if np.any(mass < 0) or self.loss_mass < 0:
            raise ValueError("probability mass must be non-negative")
        self.mass = mass
        self.loss_mass = float(self.loss_mass)

    @classmethod
    def uniform(cls, support: DelaySupport, loss_mass: float = 0.0) -> "DelayDistribution":
        finite = (1.0 - loss_mass) / support.bin_count
        return cls(support, np.full(support.bin_count, finite), loss_mass)

    @classmethod
    def point_mass(cls, support: DelaySupport, bin_index: int) -> "DelayDistribution":
        mass = np.zeros(support.bin_count)
        mass[bin_index] = 1.0
        return cls(support, mass)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum() + self.loss_mass)

    @property
    def is_normalized(self) -> bool:
        return abs(self.total_mass - 1.0) <= NORM_TOL

    def normalize(self) -> "DelayDistribution":
        """Scale so finite mass plus loss mass sum to one."""
        total = self.total_mass
        if total <= 0:
            raise ValueError("cannot normalize a distribution with zero total mass")
        if self.is_normalized:
            return self
        return DelayDistribution(self.support, self.mass / total, self.loss_mass / total)

    def refine_to(self, finer: DelaySupport) -> "DelayDistribution":
        """Split each bin's mass equally among its children on a finer grid.

        The loss atom and the total probability are preserved exactly.
        """
        m = self.support.refinement_factor(finer)
        fine = np.repeat(self.mass / m, m)
        return DelayDistribution(finer, fine, self.loss_mass)

    def sample(self, rng: np.random.Generator):
        """Draw one delay value: a bin index, or LOSS for a lost packet."""
        return self.sample_n(rng, 1)[0]

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n values as a float array; lost packets come out as inf."""
        if not self.is_normalized:
            raise ValueError("sampling requires a normalized distribution")
        cum = np.cumsum(np.append(self.mass, self.loss_mass))
        cum[-1] = 1.0  # guard against rounding in the final edge
        idx = np.searchsorted(cum, rng.random(n), side="right")
        out = idx.astype(float)
        out[idx >= self.support.bin_count] = LOSS
        return out

    def moments(self) -> tuple[float, float]:
        """Mean and standard deviation of the finite part, in seconds.

        Conditions on the packet not being lost and places each bin's
        mass at its center.
        """
        finite = float(self.mass.sum())
        if finite <= 0:
            raise ValueError("no finite probability mass")
        p = self.mass / finite
        c = self.support.centers()
        mean = float(p @ c)
        var = float(p @ (c - mean) ** 2)
        return mean, math.sqrt(max(var, 0.0))

    def to_dict(self, node: int | None = None) -> dict:
        d = {
            "bin_width_s": self.support.bin_width,
            "mass": self.mass.tolist(),
            "loss": self.loss_mass,
        }
        if node is not None:
            d["node"] = node
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DelayDistribution":
        mass = np.asarray(d["mass"], dtype=float)
        return cls(DelaySupport(len(mass), d["bin_width_s"]), mass, d.get("loss", 0.0))


def tv_distance(p: DelayDistribution, q: DelayDistribution) -> float:
    """Total variation distance over all atoms, loss included."""
    if p.support != q.support:
        raise ValueError(f"support mismatch: {p.support} vs {q.support}")
    return 0.5 * (float(np.abs(p.mass - q.mass).sum()) + abs(p.loss_mass - q.loss_mass))


@dataclass(eq=False)
class LinkParams:
    """One delay distribution per non-root tree node, on a shared support."""

    support: DelaySupport
    dists: dict[int, DelayDistribution] = field(default_factory=dict)

    def __post_init__(self):
        for node, dist in self.dists.items():
            if dist.support != self.support:
                raise ValueError(f"node {node} uses a different support")

    @classmethod
    def uniform(cls, node_ids, support: DelaySupport, loss_mass: float = 0.0) -> "LinkParams":
        return cls(support, {i: DelayDistribution.uniform(support, loss_mass) for i in node_ids})

    def __getitem__(self, node: int) -> DelayDistribution:
        return self.dists[node]

    def __setitem__(self, node: int, dist: DelayDistribution) -> None:
        if dist.support != self.support:
            raise ValueError(f"node {node} uses a different support")
        self.dists[node] = dist

    def __contains__(self, node: int) -> bool:
        return node in self.dists

    def __len__(self) -> int:
        return len(self.dists)

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.dists))

    def items(self):
        return ((i, self.dists[i]) for i in self.node_ids)

    @property
    def is_normalized(self) -> bool:
        return all(d.is_normalized for d in self.dists.values())

    @property
    def is_canonical(self) -> bool:
        """True when every link has positive mass at zero delay.

        Identifiability of the inference problem requires this.
        """
        return all(d.mass[0] > 0 for d in self.dists.values())

    def normalize_all(self) -> "LinkParams":
        return LinkParams(self.support, {i: d.normalize() for i, d in self.dists.items()})

    def refine_to(self, finer: DelaySupport) -> "LinkParams":
        return LinkParams(finer, {i: d.refine_to(finer) for i, d in self.dists.items()})

    def as_arrays(self, node_ids=None) -> tuple[np.ndarray, np.ndarray]:
        """Dense (n_links, bins) mass matrix and (n_links,) loss vector."""
        ids = self.node_ids if node_ids is None else tuple(node_ids)
        mass = np.stack([self.dists[i].mass for i in ids])
        loss = np.array([self.dists[i].loss_mass for i in ids])
        return mass, loss

    def max_abs_diff(self, other: "LinkParams") -> float:
        """Largest per-atom difference against another parameter set."""
        if self.node_ids != other.node_ids:
            raise ValueError("parameter sets cover different nodes")
        delta = 0.0
        for i in self.node_ids:
            delta = max(
                delta,
                float(np.abs(self.dists[i].mass - other.dists[i].mass).max()),
                abs(self.dists[i].loss_mass - other.dists[i].loss_mass),
            )
        return delta

    def tv_table(self, other: "LinkParams") -> dict[int, float]:
        """Per-link total variation distances against another set."""
        return {i: tv_distance(self.dists[i], other.dists[i]) for i in self.node_ids}

    def to_json(self) -> str:
        return json.dumps([d.to_dict(node=i) for i, d in self.items()], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LinkParams":
        entries = json.loads(text)
        dists = {int(e["node"]): DelayDistribution.from_dict(e) for e in entries}
        if not dists:
            raise ValueError("no link distributions in input")
        support = next(iter(dists.values())).support
        return cls(support, dists)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LinkParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())
