"""Exact recursive likelihood and EM estimation of per-link delay bins.

The likelihood of one probe batch factorizes over the tree and is
computed by message passing.  Writing ``R_i`` for the cumulative delay
accumulated when node i forwards the packet (``R_root = 0``, and
``R_i = R_father + x_i`` with loss absorbing):

* upward messages ``P(y_i | R_i)`` condition the observed delays in
  node i's subtree on its cumulative delay, built leaf-to-root by
  discrete convolution with each child link's distribution;
* downward messages ``P(R_i, y_rest)`` join node i's cumulative delay
  with the observations outside its subtree, built root-to-leaf from
  the father's message and the siblings' upward messages.

Combining both directions yields every ``P(y, x_i = v)`` in one sweep,
which is all the EM update needs.  The computation is exact: small
instances are cross-checked against full enumeration over hidden link
delays (the ``brute_force_*`` twins).

Cumulative supports are finite because bins are: a node at link-depth d
can accumulate at most ``d * (bins - 1)``, plus the loss state.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import toeplitz

from .delay_model import LOSS, DelayDistribution, DelaySupport, LinkParams
from .simulator import LOST, ObservationSet, RawDelays
from .topology import TreeTopology

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
"""Smallest mass any atom may hold after an EM step.

Data sparsity would otherwise drive atoms to exact zero, where EM can
never revive them and later observations may hit zero likelihood.
"""


class ZeroLikelihoodError(ArithmeticError):
    """An observation has probability zero under the current parameters."""

    def __init__(self, batch: int):
        self.batch = batch
        super().__init__(
            f"batch {batch} has zero likelihood under the current parameters "
            "(observation outside the representable support?)"
        )


# ---------------------------------------------------------------------------
# index tables and kernels

class _Plan(NamedTuple):
    tree: TreeTopology
    bins: int
    sizes: tuple[int, ...]      # finite cumulative-support length per node
    order: tuple[int, ...]      # topological, root first
    leaf_col: dict[int, int]    # leaf id -> observation column


def _make_plan(tree: TreeTopology, bins: int, leaves: tuple[int, ...]) -> _Plan:
    if tuple(leaves) != tuple(sorted(tree.leaves)):
        raise ValueError("observations cover different leaves than the tree")
    sizes = tuple(d * (bins - 1) + 1 for d in tree.depths)
    leaf_col = {leaf: k for k, leaf in enumerate(leaves)}
    return _Plan(tree, bins, sizes, tree.topological_order(), leaf_col)


def _theta_by_id(tree: TreeTopology, params: LinkParams) -> tuple[np.ndarray, np.ndarray]:
    if set(params.node_ids) != set(tree.link_ids):
        raise ValueError("parameters do not cover exactly the tree's links")
    n = tree.n_nodes
    mass = np.zeros((n, params.support.bin_count))
    loss = np.zeros(n)
    for i in tree.link_ids:
        mass[i] = params[i].mass
        loss[i] = params[i].loss_mass
    return mass, loss


def _kernels(plan: _Plan, mass: np.ndarray) -> list:
    """Banded convolution matrix K_i with K[s, r] = theta_i[s - r] per link.

    Upward contributions are ``U_i @ K_i`` (correlation against the
    father's support); downward joints reuse the transpose.
    """
    kers: list = [None] * plan.tree.n_nodes
    bins = plan.bins
    for i in plan.tree.link_ids:
        size_i = plan.sizes[i]
        size_f = plan.sizes[plan.tree.fathers[i]]
        col = np.zeros(size_i)
        col[:bins] = mass[i]
        row = np.zeros(size_f)
        row[0] = mass[i][0]
        kers[i] = toeplitz(col, row)
    return kers


# ---------------------------------------------------------------------------
# batched passes

class _Upward(NamedTuple):
    U: list          # (T, size_i) finite messages; None for leaves
    L: list          # (T,) message value at R_i = LOSS
    M: list          # (T, size_father) contribution convolved onto the father
    p: np.ndarray    # (T,) batch likelihoods


def _upward(plan: _Plan, kers, mass, loss, Y: np.ndarray) -> _Upward:
    tree = plan.tree
    T = Y.shape[0]
    n = tree.n_nodes
    U: list = [None] * n
    L: list = [None] * n
    M: list = [None] * n
    for i in reversed(plan.order):
        if i == tree.root:
            break
        if not tree.children[i]:
            y = Y[:, plan.leaf_col[i]]
            lost = y == LOST
            valid = ~lost & (y < plan.sizes[i])
            idx = np.where(valid, y, 0)
            contrib = kers[i][idx] * valid[:, None]
            contrib += (loss[i] * lost)[:, None]
            M[i] = contrib
            L[i] = lost.astype(float)
        else:
            prod = M[tree.children[i][0]]
            prod_l = L[tree.children[i][0]]
            for c in tree.children[i][1:]:
                prod = prod * M[c]
                prod_l = prod_l * L[c]
            U[i] = prod
            L[i] = prod_l
            M[i] = prod @ kers[i] + (loss[i] * prod_l)[:, None]
    root = tree.root
    prod = M[tree.children[root][0]]
    prod_l = L[tree.children[root][0]]
    for c in tree.children[root][1:]:
        prod = prod * M[c]
        prod_l = prod_l * L[c]
    U[root] = prod
    L[root] = prod_l
    return _Upward(U, L, M, prod[:, 0].copy())


def _sibling_products(arrays: list, ones_like) -> list:
    """Per-position product of all entries but one (prefix/suffix form)."""
    k = len(arrays)
    if k == 1:
        return [None]
    pre = [None] * k
    suf = [None] * k
    run = None
    for idx in range(k):
        pre[idx] = run
        run = arrays[idx] if run is None else run * arrays[idx]
    run = None
    for idx in range(k - 1, -1, -1):
        suf[idx] = run
        run = arrays[idx] if run is None else run * arrays[idx]
    out = []
    for idx in range(k):
        if pre[idx] is None:
            out.append(suf[idx])
        elif suf[idx] is None:
            out.append(pre[idx])
        else:
            out.append(pre[idx] * suf[idx])
    return out


class _Downward(NamedTuple):
    W: list     # (T, size_i)  P(R_i, y outside i's subtree)
    Wl: list    # (T,)
    V: list     # (T, size_father)  father-side joint P(R_father, y outside i)
    Vl: list    # (T,)
    Jx: list    # (T, bins)  P(y, x_i = v), collected when requested
    Jl: list    # (T,)


def _downward(
    plan: _Plan,
    kers,
    mass,
    loss,
    Y: np.ndarray,
    up: _Upward,
    root_scale: np.ndarray | None = None,
    accum: tuple[np.ndarray, np.ndarray] | None = None,
    collect: bool = False,
) -> _Downward | None:
    """Root-to-leaf pass computing joints P(y, x_i = v) for every link.

    With ``accum=(num, num_loss)`` the per-batch joints (scaled by
    ``root_scale``, normally 1/p) are summed into the EM numerators and
    nothing is kept.  With ``collect=True`` the full message tables are
    returned instead.
    """
    tree = plan.tree
    T = Y.shape[0]
    n = tree.n_nodes
    bins = plan.bins
    W: list = [None] * n
    Wl: list = [None] * n
    V: list = [None] * n
    Vl: list = [None] * n
    Jx: list = [None] * n
    Jl: list = [None] * n
    if root_scale is None:
        W[tree.root] = np.ones((T, 1))
        Wl[tree.root] = np.zeros(T)
    else:
        W[tree.root] = root_scale[:, None].copy()
        Wl[tree.root] = np.zeros(T)
    rows = np.arange(T)
    for j in plan.order:
        cs = tree.children[j]
        if not cs:
            continue
        sib = _sibling_products([up.M[c] for c in cs], None)
        sib_l = _sibling_products([up.L[c] for c in cs], None)
        for idx, i in enumerate(cs):
            v = W[j] if sib[idx] is None else W[j] * sib[idx]
            vl = Wl[j] if sib_l[idx] is None else Wl[j] * sib_l[idx]
            V[i], Vl[i] = v, vl
            v_sum = v.sum(axis=1)
            size_f = plan.sizes[j]
            # joint over this link's delay: correlate the upward message
            # with the father-side joint, then add the loss channels
            if up.U[i] is None:
                y = Y[:, plan.leaf_col[i]]
                lost = y == LOST
                shift = y[:, None] - np.arange(bins)[None, :]
                ok = (shift >= 0) & (shift < size_f) & ~lost[:, None]
                corr = v[rows[:, None], np.where(ok, shift, 0)] * ok
            else:
                windows = sliding_window_view(up.U[i], size_f, axis=1)
                corr = np.einsum("txr,tr->tx", windows, v)
            jx = mass[i][None, :] * (corr + (vl * up.L[i])[:, None])
            jl = loss[i] * (v_sum + vl) * up.L[i]
            if accum is not None:
                num, num_loss = accum
                num[i] += jx.sum(axis=0)
                num_loss[i] += jl.sum()
            if collect:
                Jx[i], Jl[i] = jx, jl
            if tree.children[i] or collect:
                W[i] = v @ kers[i].T
                Wl[i] = loss[i] * v_sum + vl
    if collect:
        return _Downward(W, Wl, V, Vl, Jx, Jl)
    return None


# ---------------------------------------------------------------------------
# single-observation API

@dataclass(eq=False)
class UpwardMessages:
    """Per-node conditionals P(y_subtree | R) over each cumulative support.

    ``finite[i][r]`` is the probability of the observed delays below
    node i given cumulative delay r at i; ``loss[i]`` the same given the
    packet already lost.  ``to_father[i]`` caches node i's contribution
    over the father's support for the downward pass.
    """

    root: int
    finite: dict[int, np.ndarray]
    loss: dict[int, float]
    to_father: dict[int, np.ndarray]


@dataclass(eq=False)
class DownwardMessages:
    """Per-node joints with the observations outside each subtree.

    ``joint[i][r] = P(R_i = r, y outside i)``; ``father_side[i]`` is the
    same joint taken at the father before crossing link i, which is the
    piece the per-link delay marginal needs.
    """

    joint: dict[int, np.ndarray]
    joint_loss: dict[int, float]
    father_side: dict[int, np.ndarray]
    father_side_loss: dict[int, float]
    joint_x: dict[int, np.ndarray]
    joint_x_loss: dict[int, float]


def _pack_observation(tree: TreeTopology, obs: Mapping[int, float]) -> np.ndarray:
    leaves = tuple(sorted(tree.leaves))
    row = np.empty((1, len(leaves)), dtype=np.int64)
    for k, leaf in enumerate(leaves):
        if leaf not in obs:
            raise ValueError(f"observation is missing leaf {leaf}")
        y = obs[leaf]
        if y == LOSS:
            row[0, k] = LOST
        else:
            if y != int(y) or y < 0:
                raise ValueError(f"leaf {leaf}: delay must be a bin index or LOSS")
            row[0, k] = int(y)
    return row


def _run_single(tree: TreeTopology, params: LinkParams, obs):
    plan = _make_plan(tree, params.support.bin_count, tuple(sorted(tree.leaves)))
    mass, loss = _theta_by_id(tree, params)
    kers = _kernels(plan, mass)
    Y = _pack_observation(tree, obs)
    up = _upward(plan, kers, mass, loss, Y)
    return plan, kers, mass, loss, Y, up


def upward_pass(tree: TreeTopology, params: LinkParams, obs: Mapping[int, float]) -> UpwardMessages:
    """Leaf-to-root conditionals for one observation.

    Leaves carry indicator messages at their observed value (or at LOSS
    for lost probes); inner nodes multiply their children's convolved
    contributions.
    """
    plan, kers, mass, loss, Y, up = _run_single(tree, params, obs)
    finite: dict[int, np.ndarray] = {}
    loss_d: dict[int, float] = {}
    to_father: dict[int, np.ndarray] = {}
    for i in plan.order:
        if up.U[i] is not None:
            finite[i] = up.U[i][0].copy()
        else:  # leaf: materialize the indicator
            z = np.zeros(plan.sizes[i])
            y = Y[0, plan.leaf_col[i]]
            if y != LOST and y < plan.sizes[i]:
                z[y] = 1.0
            finite[i] = z
        loss_d[i] = float(up.L[i][0])
        if i != tree.root:
            to_father[i] = up.M[i][0].copy()
    return UpwardMessages(tree.root, finite, loss_d, to_father)


def observation_likelihood(upward: UpwardMessages) -> float:
    """P(y): the root's message evaluated at cumulative delay zero."""
    return float(upward.finite[upward.root][0])


def _upward_from_messages(tree: TreeTopology, upward: UpwardMessages) -> _Upward:
    n = tree.n_nodes
    U: list = [None] * n
    L: list = [None] * n
    M: list = [None] * n
    for i in range(n):
        if tree.children[i]:
            U[i] = upward.finite[i][None, :]
        L[i] = np.array([upward.loss[i]])
        if i != tree.root:
            M[i] = upward.to_father[i][None, :]
    return _Upward(U, L, M, np.array([observation_likelihood(upward)]))


def downward_pass(
    tree: TreeTopology,
    params: LinkParams,
    obs: Mapping[int, float],
    upward: UpwardMessages | None = None,
) -> DownwardMessages:
    """Root-to-leaf joints for one observation.

    The root starts as an indicator at cumulative delay zero; each node
    combines its father's joint with its siblings' upward messages and
    crosses its own link distribution.
    """
    if upward is None:
        upward = upward_pass(tree, params, obs)
    plan = _make_plan(tree, params.support.bin_count, tuple(sorted(tree.leaves)))
    mass, loss = _theta_by_id(tree, params)
    kers = _kernels(plan, mass)
    Y = _pack_observation(tree, obs)
    up = _upward_from_messages(tree, upward)
    down = _downward(plan, kers, mass, loss, Y, up, collect=True)
    joint = {i: down.W[i][0].copy() for i in range(tree.n_nodes) if down.W[i] is not None}
    joint_loss = {i: float(down.Wl[i][0]) for i in range(tree.n_nodes) if down.Wl[i] is not None}
    father_side = {i: down.V[i][0].copy() for i in tree.link_ids}
    father_side_loss = {i: float(down.Vl[i][0]) for i in tree.link_ids}
    joint_x = {i: down.Jx[i][0].copy() for i in tree.link_ids}
    joint_x_loss = {i: float(down.Jl[i][0]) for i in tree.link_ids}
    return DownwardMessages(joint, joint_loss, father_side, father_side_loss, joint_x, joint_x_loss)


def joint_marginal(
    tree: TreeTopology,
    params: LinkParams,
    obs: Mapping[int, float],
    node: int,
    downward: DownwardMessages | None = None,
) -> tuple[np.ndarray, float]:
    """P(y, x_node = v) for every finite bin v, plus the loss entry."""
    if node not in tree.link_ids:
        raise ValueError(f"node {node} is not a link of the tree")
    if downward is None:
        downward = downward_pass(tree, params, obs)
    return downward.joint_x[node].copy(), downward.joint_x_loss[node]


# ---------------------------------------------------------------------------
# EM

@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    level: int
    log_likelihood: float
    max_delta: float


@dataclass
class EMTrace:
    """Per-iteration log of an EM run.

    ``log_likelihood`` is evaluated at the pre-update iterate, so within
    one bin level the recorded sequence must be non-decreasing.
    """

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, iteration: int, level: int, log_likelihood: float, max_delta: float):
        self.records.append(TraceRecord(iteration, level, log_likelihood, max_delta))

    def extend(self, other: "EMTrace") -> None:
        offset = len(self.records)
        for r in other.records:
            self.records.append(
                TraceRecord(offset + r.iteration, r.level, r.log_likelihood, r.max_delta)
            )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def log_likelihoods(self) -> np.ndarray:
        return np.array([r.log_likelihood for r in self.records])

    def by_level(self, level: int) -> "EMTrace":
        return EMTrace([r for r in self.records if r.level == level])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iter,level,loglik,max_delta\n")
            for r in self.records:
                fh.write(f"{r.iteration},{r.level},{r.log_likelihood!r},{r.max_delta!r}\n")


def _validate_em_inputs(tree: TreeTopology, params: LinkParams, obs_set: ObservationSet):
    if len(obs_set) < 1:
        raise ValueError("need at least one observation batch")
    if not params.is_normalized:
        raise ValueError("parameters must be normalized")
    if set(params.node_ids) != set(tree.link_ids):
        raise ValueError("parameters do not cover exactly the tree's links")


def _finalize_step(support: DelaySupport, tree: TreeTopology, num, num_loss) -> LinkParams:
    bins = support.bin_count
    dists = {}
    for i in tree.link_ids:
        vec = np.append(num[i], num_loss[i])
        total = vec.sum()
        if total <= 0:
            raise ZeroLikelihoodError(-1)
        vec = np.maximum(vec / total, PROB_FLOOR)
        vec /= vec.sum()
        dists[i] = DelayDistribution(support, vec[:bins], vec[bins])
    return LinkParams(support, dists)


def _em_step_stats(
    tree: TreeTopology, params: LinkParams, obs_set: ObservationSet, chunk_size: int
) -> tuple[LinkParams, float]:
    plan = _make_plan(tree, params.support.bin_count, obs_set.leaves)
    mass, loss = _theta_by_id(tree, params)
    kers = _kernels(plan, mass)
    n = tree.n_nodes
    num = np.zeros((n, plan.bins))
    num_loss = np.zeros(n)
    loglik = 0.0
    for start in range(0, len(obs_set), chunk_size):
        Y = obs_set.delays[start : start + chunk_size]
        up = _upward(plan, kers, mass, loss, Y)
        if np.any(up.p <= 0.0):
            raise ZeroLikelihoodError(start + int(np.argmax(up.p <= 0.0)))
        loglik += float(np.log(up.p).sum())
        _downward(plan, kers, mass, loss, Y, up, root_scale=1.0 / up.p, accum=(num, num_loss))
    return _finalize_step(params.support, tree, num, num_loss), loglik


def em_step(
    tree: TreeTopology, params: LinkParams, obs_set: ObservationSet, chunk_size: int = 2048
) -> LinkParams:
    """One EM update: each link's new mass is its posterior delay count.

    ``theta_i'(v)`` sums ``P(y_t, x_i = v) / P(y_t)`` over batches and
    normalizes per link, with atoms floored at PROB_FLOOR.  Raises
    ZeroLikelihoodError naming the first batch whose likelihood is zero.
    """
    _validate_em_inputs(tree, params, obs_set)
    new_params, _ = _em_step_stats(tree, params, obs_set, chunk_size)
    return new_params


def log_likelihood(
    tree: TreeTopology, params: LinkParams, obs_set: ObservationSet, chunk_size: int = 2048
) -> float:
    """Sum of per-batch log likelihoods; -inf when any batch is impossible."""
    _validate_em_inputs(tree, params, obs_set)
    plan = _make_plan(tree, params.support.bin_count, obs_set.leaves)
    mass, loss = _theta_by_id(tree, params)
    kers = _kernels(plan, mass)
    total = 0.0
    for start in range(0, len(obs_set), chunk_size):
        Y = obs_set.delays[start : start + chunk_size]
        up = _upward(plan, kers, mass, loss, Y)
        if np.any(up.p <= 0.0):
            batch = start + int(np.argmax(up.p <= 0.0))
            log.warning("batch %d has zero likelihood; returning -inf", batch)
            return -math.inf
        total += float(np.log(up.p).sum())
    return total


def run_em(
    tree: TreeTopology,
    params: LinkParams,
    obs_set: ObservationSet,
    tol: float = 1e-6,
    max_iter: int = 500,
    level: int | None = None,
    chunk_size: int = 2048,
) -> tuple[LinkParams, EMTrace]:
    """Iterate EM until the largest per-atom change drops below tol.

    Starting parameters must be normalized and canonical (positive mass
    at zero delay on every link).  The trace records the log likelihood
    of each pre-update iterate, which EM guarantees non-decreasing.
    """
    _validate_em_inputs(tree, params, obs_set)
    if not params.is_canonical:
        raise ValueError("initial parameters must have mass[0] > 0 on every link")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    level = params.support.bin_count if level is None else level
    trace = EMTrace()
    current = params
    for iteration in range(1, max_iter + 1):
        new_params, loglik = _em_step_stats(tree, current, obs_set, chunk_size)
        delta = current.max_abs_diff(new_params)
        trace.append(iteration, level, loglik, delta)
        current = new_params
        if delta < tol:
            break
    return current, trace


# ---------------------------------------------------------------------------
# observation binning and successive approximation

def bin_observations(
    raw: RawDelays,
    support: DelaySupport,
    tree: TreeTopology,
    loss_cutoff_s: float | None = None,
    subtract_baseline: bool = False,
) -> ObservationSet:
    """Bin raw end-to-end delays onto a support: index = floor(delay / width).

    Delays beyond a leaf's representable cumulative range (or beyond
    ``loss_cutoff_s``) are recorded as losses, since the discrete model
    assigns them probability zero otherwise.  ``subtract_baseline``
    removes each leaf's minimum finite delay first, for measured data
    that includes propagation offsets.
    """
    if tuple(raw.leaves) != tuple(sorted(tree.leaves)):
        raise ValueError("raw delays cover different leaves than the tree")
    delays = raw.delays_s.copy()
    if subtract_baseline:
        finite = np.isfinite(delays)
        for k in range(delays.shape[1]):
            col = delays[:, k]
            if finite[:, k].any():
                col[finite[:, k]] -= col[finite[:, k]].min()
    lost = ~np.isfinite(delays) | (delays < 0)
    if loss_cutoff_s is not None:
        lost |= delays > loss_cutoff_s
    bins = np.floor(np.where(lost, 0.0, delays) / support.bin_width).astype(np.int64)
    max_cum = np.array(
        [tree.depths[leaf] * (support.bin_count - 1) for leaf in raw.leaves]
    )
    lost |= bins > max_cum[None, :]
    return ObservationSet(
        leaves=raw.leaves,
        delays=np.where(lost, LOST, bins),
        tree_fingerprint=tree.fingerprint(),
        bin_count=support.bin_count,
        bin_width=support.bin_width,
    )


def doubling_schedule(final: DelaySupport, min_bins: int = 8) -> list[DelaySupport]:
    """Bin counts doubling up to the final resolution over a fixed range.

    Halves the final bin count while it stays even and at least
    ``min_bins``, e.g. 200 -> [25, 50, 100, 200] and 64 -> [8, 16, 32, 64].
    """
    span = final.bin_count * final.bin_width
    counts = [final.bin_count]
    while counts[0] % 2 == 0 and counts[0] // 2 >= min_bins:
        counts.insert(0, counts[0] // 2)
    return [DelaySupport(b, span / b) for b in counts]


def _validate_schedule(schedule: list[DelaySupport]) -> None:
    if not schedule:
        raise ValueError("empty bin schedule")
    for coarse, fine in zip(schedule, schedule[1:]):
        factor = coarse.refinement_factor(fine)  # raises when misaligned
        if factor < 2:
            raise ValueError("schedule must strictly refine at each level")


def successive_ml(
    tree: TreeTopology,
    raw: RawDelays,
    schedule: list[DelaySupport],
    tol: float = 1e-6,
    max_iter: int = 500,
    init_loss: float = 0.01,
    loss_cutoff_s: float | None = None,
    subtract_baseline: bool = False,
    chunk_size: int = 2048,
    on_level: Callable[[DelaySupport, LinkParams], None] | None = None,
) -> tuple[LinkParams, EMTrace]:
    """Maximum-likelihood estimation by successive bin-size refinement.

    The first level starts from the uniform distribution on a coarse
    grid; each following level rebins the raw delays and restarts EM
    from the smoothed previous estimate, so the expensive fine levels
    need only a few iterations.  ``on_level`` receives each level's
    estimate as a checkpoint: rerunning from a written level reproduces
    the uninterrupted result.
    """
    _validate_schedule(schedule)
    params = LinkParams.uniform(tree.link_ids, schedule[0], loss_mass=init_loss)
    trace = EMTrace()
    for k, support in enumerate(schedule):
        if k > 0:
            params = params.refine_to(support)
        obs = bin_observations(raw, support, tree, loss_cutoff_s, subtract_baseline)
        params, level_trace = run_em(
            tree, params, obs, tol=tol, max_iter=max_iter,
            level=support.bin_count, chunk_size=chunk_size,
        )
        trace.extend(level_trace)
        if on_level is not None:
            on_level(support, params)
    return params, trace


# ---------------------------------------------------------------------------
# brute-force oracles (full enumeration over hidden link delays)

_BF_MAX_LINKS = 8
_BF_MAX_BINS = 5
_BF_CHUNK = 200_000


def _bf_guard(tree: TreeTopology, support: DelaySupport) -> None:
    if tree.n_links > _BF_MAX_LINKS or support.bin_count > _BF_MAX_BINS:
        raise ValueError(
            f"brute force limited to {_BF_MAX_LINKS} links and "
            f"{_BF_MAX_BINS} bins, got {tree.n_links} links / "
            f"{support.bin_count} bins"
        )


def _bf_tables(tree: TreeTopology, params: LinkParams):
    links = tree.link_ids
    bins = params.support.bin_count
    theta = np.empty((len(links), bins + 1))
    for j, node in enumerate(links):
        theta[j, :bins] = params[node].mass
        theta[j, bins] = params[node].loss_mass
    col = {node: j for j, node in enumerate(links)}
    paths = {leaf: [col[n] for n in tree.path_of(leaf)] for leaf in tree.leaves}
    return links, theta, paths


def _bf_scan(tree: TreeTopology, params: LinkParams, obs: Mapping[int, float]):
    """Yield (states, weight * match) over all hidden delay assignments."""
    links, theta, paths = _bf_tables(tree, params)
    n_links = len(links)
    bins = params.support.bin_count
    shape = (bins + 1,) * n_links
    total = (bins + 1) ** n_links
    link_idx = np.arange(n_links)
    for start in range(0, total, _BF_CHUNK):
        flat = np.arange(start, min(start + _BF_CHUNK, total))
        states = np.stack(np.unravel_index(flat, shape), axis=1)
        w = np.prod(theta[link_idx[None, :], states], axis=1)
        match = np.ones(len(flat), dtype=bool)
        for leaf in sorted(tree.leaves):
            vals = states[:, paths[leaf]]
            lost = (vals == bins).any(axis=1)
            if obs[leaf] == LOSS:
                match &= lost
            else:
                match &= ~lost & (vals.sum(axis=1) == int(obs[leaf]))
        yield states, w * match


def brute_force_likelihood(
    tree: TreeTopology, params: LinkParams, obs: Mapping[int, float]
) -> float:
    """P(y) by summing the product of link masses over all assignments."""
    _bf_guard(tree, params.support)
    return float(sum(wm.sum() for _, wm in _bf_scan(tree, params, obs)))


def brute_force_joint(
    tree: TreeTopology, params: LinkParams, obs: Mapping[int, float], node: int
) -> tuple[np.ndarray, float]:
    """P(y, x_node = v) by enumeration; finite vector plus loss entry."""
    _bf_guard(tree, params.support)
    links = tree.link_ids
    pos = links.index(node)
    bins = params.support.bin_count
    acc = np.zeros(bins + 1)
    for states, wm in _bf_scan(tree, params, obs):
        acc += np.bincount(states[:, pos], weights=wm, minlength=bins + 1)
    return acc[:bins], float(acc[bins])


def brute_force_em_step(
    tree: TreeTopology, params: LinkParams, obs_set: ObservationSet
) -> LinkParams:
    """The EM update computed by full enumeration instead of recursion."""
    _bf_guard(tree, params.support)
    _validate_em_inputs(tree, params, obs_set)
    links = tree.link_ids
    bins = params.support.bin_count
    num = {i: np.zeros(bins) for i in links}
    num_loss = {i: 0.0 for i in links}
    for t, obs in enumerate(obs_set):
        acc = np.zeros((len(links), bins + 1))
        p = 0.0
        for states, wm in _bf_scan(tree, params, obs):
            p += wm.sum()
            for j in range(len(links)):
                acc[j] += np.bincount(states[:, j], weights=wm, minlength=bins + 1)
        if p <= 0.0:
            raise ZeroLikelihoodError(t)
        for j, i in enumerate(links):
            num[i] += acc[j, :bins] / p
            num_loss[i] += acc[j, bins] / p
    num_arr = np.zeros((tree.n_nodes, bins))
    loss_arr = np.zeros(tree.n_nodes)
    for i in links:
        num_arr[i] = num[i]
        loss_arr[i] = num_loss[i]
    return _finalize_step(params.support, tree, num_arr, loss_arr)
