"""Synthetic probe-batch generation from known per-link delay distributions.

A batch models back-to-back packets fanning out from the root: every
link draws one delay shared by all leaves whose path crosses it, each
leaf observes the sum of delays along its path, and a loss anywhere on
the path loses the probe for that leaf and everything below.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .delay_model import LOSS, DelaySupport, DelayDistribution, LinkParams
from .topology import TreeTopology

LOST = -1
"""Packed integer encoding of a lost probe inside delay matrices."""


@dataclass(eq=False)
class ObservationSet:
    """T probe-batch outcomes: per-leaf end-to-end delay bins or losses.

    ``delays`` is a (T, n_leaves) int array in bin units with ``LOST``
    marking lost probes; columns follow ``leaves``.
    """

    leaves: tuple[int, ...]
    delays: np.ndarray
    tree_fingerprint: str = ""
    seed: int | None = None
    bin_count: int | None = None
    bin_width: float | None = None

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=np.int64)
        if delays.ndim != 2 or delays.shape[1] != len(self.leaves):
            raise ValueError("delays must be (batches, len(leaves))")
        if delays.shape[0] < 1:
            raise ValueError("need at least one observation batch")
        if np.any((delays < 0) & (delays != LOST)):
            raise ValueError("negative delay bins")
        self.delays = delays
        self.leaves = tuple(self.leaves)

    def __len__(self) -> int:
        return self.delays.shape[0]

    def observation(self, t: int) -> dict[int, float]:
        """Batch t as a leaf -> delay map, with LOSS for lost probes."""
        row = self.delays[t]
        return {
            leaf: (LOSS if row[k] == LOST else int(row[k]))
            for k, leaf in enumerate(self.leaves)
        }

    def __iter__(self):
        return (self.observation(t) for t in range(len(self)))

    @classmethod
    def from_observations(cls, observations, **meta) -> "ObservationSet":
        observations = list(observations)
        if not observations:
            raise ValueError("no observations")
        leaves = tuple(sorted(observations[0]))
        delays = np.empty((len(observations), len(leaves)), dtype=np.int64)
        for t, obs in enumerate(observations):
            if tuple(sorted(obs)) != leaves:
                raise ValueError(f"observation {t} covers different leaves")
            for k, leaf in enumerate(leaves):
                y = obs[leaf]
                delays[t, k] = LOST if y == LOSS else int(y)
        return cls(leaves, delays, **meta)

    def save_csv(self, csv_path) -> None:
        """Write ``batch,leaf,delay_bins`` rows plus a .meta.json companion."""
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch", "leaf", "delay_bins"])
            for t in range(len(self)):
                for k, leaf in enumerate(self.leaves):
                    y = self.delays[t, k]
                    writer.writerow([t, leaf, "inf" if y == LOST else int(y)])
        meta = {
            "batches": len(self),
            "leaves": list(self.leaves),
            "tree_fingerprint": self.tree_fingerprint,
            "seed": self.seed,
            "bin_count": self.bin_count,
            "bin_width_s": self.bin_width,
        }
        with open(self._meta_path(csv_path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)
            fh.write("\n")

    @staticmethod
    def _meta_path(csv_path) -> Path:
        csv_path = Path(csv_path)
        return csv_path.with_name(csv_path.stem + ".meta.json")

    @classmethod
    def load_csv(cls, csv_path) -> "ObservationSet":
        csv_path = Path(csv_path)
        meta = {}
        meta_path = cls._meta_path(csv_path)
        if meta_path.exists():
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
        cells: dict[int, dict[int, int]] = {}
        with open(csv_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                t = int(row["batch"])
                leaf = int(row["leaf"])
                val = row["delay_bins"]
                cells.setdefault(t, {})[leaf] = LOST if val == "inf" else int(val)
        if not cells:
            raise ValueError(f"no observations in {csv_path}")
        leaves = tuple(sorted(cells[min(cells)]))
        delays = np.empty((len(cells), len(leaves)), dtype=np.int64)
        for t in range(len(cells)):
            row = cells[t]
            if tuple(sorted(row)) != leaves:
                raise ValueError(f"batch {t} covers different leaves")
            delays[t] = [row[leaf] for leaf in leaves]
        return cls(
            leaves,
            delays,
            tree_fingerprint=meta.get("tree_fingerprint", ""),
            seed=meta.get("seed"),
            bin_count=meta.get("bin_count"),
            bin_width=meta.get("bin_width_s"),
        )


@dataclass(eq=False)
class RawDelays:
    """Unbinned per-leaf one-way delays in seconds; inf marks a loss."""

    leaves: tuple[int, ...]
    delays_s: np.ndarray

    def __post_init__(self):
        delays = np.asarray(self.delays_s, dtype=float)
        if delays.ndim != 2 or delays.shape[1] != len(self.leaves):
            raise ValueError("delays_s must be (batches, len(leaves))")
        self.delays_s = delays
        self.leaves = tuple(self.leaves)

    def __len__(self) -> int:
        return self.delays_s.shape[0]


def observations_to_raw(obs: ObservationSet, support: DelaySupport) -> RawDelays:
    """Turn binned observations into seconds at bin centers (losses stay inf)."""
    delays = (obs.delays + 0.5) * support.bin_width
    delays[obs.delays == LOST] = np.inf
    return RawDelays(obs.leaves, delays)


def _draw_link_delays(
    tree: TreeTopology, truth: LinkParams, rng: np.random.Generator, n: int
) -> np.ndarray:
    """(n, n_links) matrix of sampled delay bins; LOST encodes a loss.

    Links are drawn in sorted node-id order, so the stream consumed from
    ``rng`` is reproducible.
    """
    links = tree.link_ids
    x = np.empty((n, len(links)), dtype=np.int64)
    bins = truth.support.bin_count
    for j, node in enumerate(links):
        dist = truth[node]
        if not dist.is_normalized:
            raise ValueError(f"truth for node {node} is not normalized")
        cum = np.cumsum(np.append(dist.mass, dist.loss_mass))
        cum[-1] = 1.0
        idx = np.searchsorted(cum, rng.random(n), side="right")
        x[:, j] = np.where(idx >= bins, LOST, idx)
    return x


def _accumulate_leaf_delays(tree: TreeTopology, x: np.ndarray) -> np.ndarray:
    links = tree.link_ids
    col = {node: j for j, node in enumerate(links)}
    leaves = tuple(sorted(tree.leaves))
    y = np.empty((x.shape[0], len(leaves)), dtype=np.int64)
    for k, leaf in enumerate(leaves):
        cols = [col[node] for node in tree.path_of(leaf)]
        vals = x[:, cols]
        lost = (vals == LOST).any(axis=1)
        y[:, k] = np.where(lost, LOST, vals.sum(axis=1))
    return y


def simulate_batch(
    tree: TreeTopology,
    truth: LinkParams,
    rng: np.random.Generator,
    return_links: bool = False,
):
    """One probe batch: leaf -> delay map (and the hidden per-link draws).

    Each link's delay is drawn once and shared by every leaf whose path
    uses it; a loss is absorbing for the whole subtree below it.
    """
    x = _draw_link_delays(tree, truth, rng, 1)
    y = _accumulate_leaf_delays(tree, x)
    obs = {
        leaf: (LOSS if y[0, k] == LOST else int(y[0, k]))
        for k, leaf in enumerate(sorted(tree.leaves))
    }
    if not return_links:
        return obs
    hidden = {
        node: (LOSS if x[0, j] == LOST else int(x[0, j]))
        for j, node in enumerate(tree.link_ids)
    }
    return obs, hidden


def simulate_experiment(
    tree: TreeTopology,
    truth: LinkParams,
    n_batches: int,
    seed: int,
    return_links: bool = False,
):
    """T independent probe batches, fully deterministic given the seed."""
    if n_batches < 1:
        raise ValueError("need at least one batch")
    rng = np.random.default_rng(seed)
    x = _draw_link_delays(tree, truth, rng, n_batches)
    y = _accumulate_leaf_delays(tree, x)
    obs = ObservationSet(
        leaves=tuple(sorted(tree.leaves)),
        delays=y,
        tree_fingerprint=tree.fingerprint(),
        seed=seed,
        bin_count=truth.support.bin_count,
        bin_width=truth.support.bin_width,
    )
    if return_links:
        return obs, x
    return obs


def random_link_params(
    tree: TreeTopology,
    support: DelaySupport,
    rng: np.random.Generator,
    max_loss: float = 0.02,
    decay_range: tuple[float, float] = (0.15, 0.8),
) -> LinkParams:
    """Seeded ground truth: geometric-decay masses plus a small loss atom.

    Every link gets its own decay rate, so siblings differ; mass at bin 0
    dominates, keeping the parameters canonical (identifiable).
    """
    dists = {}
    for node in tree.link_ids:
        lam = rng.uniform(*decay_range)
        mass = np.exp(-lam * np.arange(support.bin_count))
        loss = rng.uniform(0.0, max_loss)
        mass *= (1.0 - loss) / mass.sum()
        dists[node] = DelayDistribution(support, mass, loss)
    return LinkParams(support, dists)
