"""Build validated probing trees from traceroute-style hop paths.

The pipeline is ``parse -> ingest_paths -> clone_shared_segments ->
compact_to_branching_tree``.  Raw hop sequences first become a directed
graph; nodes reached along several branches are cloned so every node has
a single father; chains of single-child nodes are then merged into
compound links, leaving a branching tree whose root (the probe source)
has exactly one child.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

ANON_HOP = "*"


class TopologyError(ValueError):
    """Raised for malformed paths or graphs that cannot form a probing tree."""


def _anon_label(prev_label: str, position: int) -> str:
    return f"anon({prev_label},{position})"


@dataclass(frozen=True)
class HopPath:
    """One source-to-destination hop sequence; the destination is the last hop.

    Anonymous hops are resolved at construction into deterministic labels
    derived from the previous hop and the hop position, so the same hole
    in two paths of one source merges while different holes stay apart.
    """

    source: str
    hops: tuple[str, ...]

    def __post_init__(self):
        if not self.source:
            raise TopologyError("path has an empty source")
        if not self.hops:
            raise TopologyError("path has no hops")
        if any(not h for h in self.hops):
            raise TopologyError("path contains an empty hop label")
        resolved = []
        prev = self.source
        for k, hop in enumerate(self.hops):
            label = _anon_label(prev, k) if hop == ANON_HOP else hop
            resolved.append(label)
            prev = label
        object.__setattr__(self, "hops", tuple(resolved))

    @property
    def destination(self) -> str:
        return self.hops[-1]


def parse_path_line(line: str, lineno: int | None = None) -> HopPath:
    """Parse one ``source,hop1,...,dest`` line; ``*`` marks anonymous hops."""
    where = f" (line {lineno})" if lineno is not None else ""
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) < 2 or any(not f for f in fields):
        raise TopologyError(f"malformed path line{where}: {line.strip()!r}")
    return HopPath(fields[0], tuple(fields[1:]))


def parse_path_file(path) -> list[HopPath]:
    """Read a newline-delimited path file, skipping blanks and # comments."""
    paths = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            paths.append(parse_path_line(stripped, lineno))
    if not paths:
        raise TopologyError(f"no paths in {path}")
    return paths


@dataclass(eq=False)
class RawGraph:
    """Directed hop graph: labels as nodes, consecutive hops as edges.

    ``edges`` maps (parent_label, child_label) to the indices (into
    ``paths``) of every ingested path traversing that edge.
    """

    source: str
    nodes: set[str]
    edges: dict[tuple[str, str], frozenset[int]]
    paths: tuple[HopPath, ...]

    def in_degree(self) -> dict[str, int]:
        deg = {n: 0 for n in self.nodes}
        for _, child in self.edges:
            deg[child] += 1
        return deg

    def children_of(self, label: str) -> list[str]:
        return sorted(c for (p, c) in self.edges if p == label)

    @property
    def is_tree(self) -> bool:
        return all(d <= 1 for d in self.in_degree().values())


def ingest_paths(paths) -> RawGraph:
    """Union all consecutive-hop pairs of the given paths into a RawGraph.

    All paths must share one source and have pairwise distinct
    destinations.
    """
    paths = tuple(paths)
    if not paths:
        raise TopologyError("no paths to ingest")
    sources = {p.source for p in paths}
    if len(sources) > 1:
        raise TopologyError(f"paths mix sources: {sorted(sources)}")
    dests = [p.destination for p in paths]
    if len(set(dests)) != len(dests):
        dupes = sorted({d for d in dests if dests.count(d) > 1})
        raise TopologyError(f"duplicate destinations: {dupes}")
    source = paths[0].source
    nodes = {source}
    edges: dict[tuple[str, str], set[int]] = {}
    for pid, p in enumerate(paths):
        prev = source
        for hop in p.hops:
            nodes.add(hop)
            edges.setdefault((prev, hop), set()).add(pid)
            prev = hop
    return RawGraph(source, nodes, {e: frozenset(s) for e, s in edges.items()}, paths)


def _detect_cycle(raw: RawGraph) -> set[str]:
    """Labels left over after peeling in-degree-zero nodes (empty if acyclic)."""
    deg = raw.in_degree()
    succ: dict[str, list[str]] = {n: [] for n in raw.nodes}
    for parent, child in raw.edges:
        succ[parent].append(child)
    queue = [n for n, d in deg.items() if d == 0]
    seen = 0
    while queue:
        n = queue.pop()
        seen += 1
        for c in succ[n]:
            deg[c] -= 1
            if deg[c] == 0:
                queue.append(c)
    return set() if seen == len(raw.nodes) else {n for n, d in deg.items() if d > 0}


def _clone_suffix(k: int) -> str:
    # a, b, ..., z, aa, ab, ... in spreadsheet-column style
    out = ""
    k += 1
    while k:
        k, rem = divmod(k - 1, 26)
        out = chr(ord("a") + rem) + out
    return out


def clone_shared_segments(raw: RawGraph) -> RawGraph:
    """Split every multi-father node into per-branch clones.

    Paths that diverge and later rejoin revisit nodes at different times,
    so the rejoined segment carries independent delays per branch.  All
    common nodes after the first branching point become separate logical
    nodes, labelled with suffixes in path-ingestion order (5a, 5b, ...).
    Already-tree inputs are returned unchanged.
    """
    if raw.is_tree:
        return raw
    cyclic = _detect_cycle(raw)
    if cyclic:
        offending = sorted(
            {pid for (p, c), pids in raw.edges.items() if p in cyclic and c in cyclic for pid in pids}
        )
        raise TopologyError(
            f"hop graph contains a cycle through {sorted(cyclic)}; "
            f"offending path indices: {offending}"
        )

    # Prefix-tree of label sequences: one node per distinct prefix, which
    # is exactly one clone per branch for every rejoined segment.
    labels = [raw.source]
    parents: list[int | None] = [None]
    children: list[dict[str, int]] = [{}]
    visits: list[set[int]] = [set()]
    for pid, path in enumerate(raw.paths):
        cur = 0
        for hop in path.hops:
            nxt = children[cur].get(hop)
            if nxt is None:
                nxt = len(labels)
                labels.append(hop)
                parents.append(cur)
                children.append({})
                visits.append(set())
                children[cur][hop] = nxt
            visits[nxt].add(pid)
            cur = nxt

    # Rename labels that now occur at several prefix-tree nodes.
    occurrences: dict[str, list[int]] = {}
    for idx, label in enumerate(labels):
        occurrences.setdefault(label, []).append(idx)
    renamed = list(labels)
    for label, idxs in occurrences.items():
        if len(idxs) > 1:
            for k, idx in enumerate(idxs):
                renamed[idx] = label + _clone_suffix(k)

    new_paths = []
    for pid, path in enumerate(raw.paths):
        cur = 0
        hops = []
        for hop in path.hops:
            cur = children[cur][hop]
            hops.append(renamed[cur])
        new_paths.append(HopPath(raw.source, tuple(hops)))
    edges = {
        (renamed[parents[i]], renamed[i]): frozenset(visits[i])
        for i in range(1, len(labels))
    }
    return RawGraph(raw.source, set(renamed), edges, tuple(new_paths))


@dataclass(eq=False)
class TreeTopology:
    """A rooted branching tree of compound links.

    Node ``i > 0`` hangs below ``father[i]`` through a link that stands
    for ``hop_count[i]`` physical hops.  The root is node 0 and has no
    father; it must have exactly one child (probes to the children of a
    multi-child root would share no links, so such inputs are split into
    separate trees beforehand).
    """

    labels: tuple[str, ...]
    fathers: tuple[int | None, ...]
    hop_counts: tuple[int | None, ...]

    root: int = field(init=False)
    children: tuple[tuple[int, ...], ...] = field(init=False)
    leaves: tuple[int, ...] = field(init=False)
    depths: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.fathers) == len(self.hop_counts) == n) or n < 2:
            raise TopologyError("need label/father/hop_count per node and >= 2 nodes")
        roots = [i for i, f in enumerate(self.fathers) if f is None]
        if len(roots) != 1:
            raise TopologyError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        kids: list[list[int]] = [[] for _ in range(n)]
        for i, f in enumerate(self.fathers):
            if f is None:
                if self.hop_counts[i] is not None:
                    raise TopologyError("root carries no link hop count")
                continue
            if not 0 <= f < n:
                raise TopologyError(f"node {i} has invalid father {f}")
            if self.hop_counts[i] is None or self.hop_counts[i] < 1:
                raise TopologyError(f"link to node {i} needs hop_count >= 1")
            kids[f].append(i)
        self.children = tuple(tuple(c) for c in kids)
        if len(self.children[self.root]) != 1:
            raise TopologyError(
                "root must have exactly one child; split multi-child roots "
                "into independent trees"
            )
        # connectivity / acyclicity: every node reachable from the root
        depths = [-1] * n
        depths[self.root] = 0
        stack = [self.root]
        seen = 1
        while stack:
            u = stack.pop()
            for v in self.children[u]:
                depths[v] = depths[u] + 1
                seen += 1
                stack.append(v)
        if seen != n:
            raise TopologyError("tree is not connected (or contains a cycle)")
        self.depths = tuple(depths)
        self.leaves = tuple(i for i in range(n) if not self.children[i])

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_links(self) -> int:
        return len(self.labels) - 1

    @property
    def link_ids(self) -> tuple[int, ...]:
        """Non-root node ids; link i connects fathers[i] to i."""
        return tuple(i for i in range(self.n_nodes) if i != self.root)

    @property
    def is_branching(self) -> bool:
        """True when no inner node has exactly one child (root excepted)."""
        return all(
            len(self.children[i]) != 1
            for i in range(self.n_nodes)
            if i != self.root and self.children[i]
        )

    def topological_order(self) -> tuple[int, ...]:
        order = []
        stack = [self.root]
        while stack:
            u = stack.pop()
            order.append(u)
            stack.extend(reversed(self.children[u]))
        return tuple(order)

    def path_of(self, leaf: int) -> tuple[int, ...]:
        """Link ids on the root-to-leaf path, in root-first order."""
        if not 0 <= leaf < self.n_nodes or leaf not in self.leaves:
            raise TopologyError(f"unknown leaf {leaf}")
        path = []
        node = leaf
        while node != self.root:
            path.append(node)
            node = self.fathers[node]
        return tuple(reversed(path))

    def routing_matrix(self) -> np.ndarray:
        """0/1 matrix A with Y = AX for finite link-delay assignments.

        Rows follow sorted leaf ids, columns sorted non-root node ids.
        """
        links = self.link_ids
        col = {node: j for j, node in enumerate(links)}
        a = np.zeros((len(self.leaves), len(links)), dtype=int)
        for r, leaf in enumerate(sorted(self.leaves)):
            for node in self.path_of(leaf):
                a[r, col[node]] = 1
        return a

    def canonical_form(self):
        """Nested (label, hop_count, children) form for isomorphism checks."""

        def build(i):
            return (
                self.labels[i],
                self.hop_counts[i],
                tuple(sorted(build(c) for c in self.children[i])),
            )

        return build(self.root)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "leaves": list(self.leaves),
            "nodes": [
                {
                    "id": i,
                    "label": self.labels[i],
                    "father": self.fathers[i],
                    "hop_count": self.hop_counts[i],
                }
                for i in range(self.n_nodes)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeTopology":
        nodes = sorted(d["nodes"], key=lambda e: e["id"])
        if [e["id"] for e in nodes] != list(range(len(nodes))):
            raise TopologyError("node ids must be 0..n-1")
        return cls(
            labels=tuple(str(e["label"]) for e in nodes),
            fathers=tuple(e["father"] for e in nodes),
            hop_counts=tuple(e["hop_count"] for e in nodes),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def compact_to_branching_tree(raw: RawGraph) -> list[TreeTopology]:
    """Merge single-child chains into compound links and emit branching trees.

    Returns one TreeTopology per child of the source: probes to different
    children of the root share no links, so each subtree is an
    independent inference problem.  ``hop_count`` on each link counts the
    physical hops it absorbed.  Node ids are canonical (sorted by label,
    then depth) so the output does not depend on path order.
    """
    if not raw.is_tree:
        raise TopologyError("graph has multi-father nodes; clone_shared_segments first")
    deg = raw.in_degree()
    sources = [n for n, d in deg.items() if d == 0]
    if sources != [raw.source]:
        raise TopologyError(f"expected single in-degree-0 source, found {sorted(sources)}")

    kids: dict[str, list[str]] = {n: [] for n in raw.nodes}
    for parent, child in raw.edges:
        kids[parent].append(child)
    for n in kids:
        kids[n].sort()

    def build(first: str) -> TreeTopology:
        # keep the source, branching nodes and leaves; skip chain nodes
        entries: list[tuple[str, str, int]] = []  # (label, father_label, hops)
        stack: list[tuple[str, str, int]] = [(first, raw.source, 1)]
        while stack:
            label, father, hops = stack.pop()
            while len(kids[label]) == 1:
                label = kids[label][0]
                hops += 1
            entries.append((label, father, hops))
            for c in kids[label]:
                stack.append((c, label, 1))

        depth: dict[str, int] = {raw.source: 0}
        by_father: dict[str, list[tuple[str, int]]] = {}
        for label, father, hops in entries:
            by_father.setdefault(father, []).append((label, hops))
        # depths follow from fathers; entries are reachable from the source
        pending = [raw.source]
        while pending:
            f = pending.pop()
            for label, _ in by_father.get(f, []):
                depth[label] = depth[f] + 1
                pending.append(label)

        order = [raw.source] + sorted(
            (label for label, _, _ in entries), key=lambda l: (l, depth[l])
        )
        index = {label: i for i, label in enumerate(order)}
        fathers: list[int | None] = [None] * len(order)
        hop_counts: list[int | None] = [None] * len(order)
        for label, father, hops in entries:
            fathers[index[label]] = index[father]
            hop_counts[index[label]] = hops
        return TreeTopology(tuple(order), tuple(fathers), tuple(hop_counts))

    return [build(first) for first in kids[raw.source]]


def build_trees(paths) -> list[TreeTopology]:
    """Full pipeline from hop paths to branching trees."""
    return compact_to_branching_tree(clone_shared_segments(ingest_paths(paths)))


def expand_leaf_paths(tree: TreeTopology) -> list[HopPath]:
    """Per-leaf hop sequences with compound links expanded to physical hops.

    Intermediate hops of a compound link get synthetic labels; feeding
    the result back through the pipeline reconstructs the tree.
    """
    paths = []
    for leaf in sorted(tree.leaves):
        hops: list[str] = []
        for node in tree.path_of(leaf):
            label = tree.labels[node]
            hops.extend(f"{label}~{q}" for q in range(1, tree.hop_counts[node]))
            hops.append(label)
        paths.append(HopPath(tree.labels[tree.root], tuple(hops)))
    return paths


def save_forest(trees, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"trees": [t.to_dict() for t in trees]}, fh, indent=1)
        fh.write("\n")


def load_forest(path) -> list[TreeTopology]:
    """Read a topology JSON file holding either one tree or a forest."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "trees" in data:
        return [TreeTopology.from_dict(d) for d in data["trees"]]
    return [TreeTopology.from_dict(data)]


def load_tree(path) -> TreeTopology:
    trees = load_forest(path)
    if len(trees) != 1:
        raise TopologyError(f"{path} holds {len(trees)} trees, expected one")
    return trees[0]


def regular_tree(levels: int, branching: int) -> TreeTopology:
    """Root, its single child, then ``levels`` rounds of ``branching``-way splits.

    ``regular_tree(3, 4)`` is the 85-link benchmark tree: 4 + 16 + 64
    nodes below the root's child, leaves at depth 4.
    """
    if levels < 1 or branching < 2:
        raise ValueError("need levels >= 1 and branching >= 2")
    fathers: list[int | None] = [None, 0]
    generation = [1]
    for _ in range(levels):
        nxt = []
        for node in generation:
            for _ in range(branching):
                nxt.append(len(fathers))
                fathers.append(node)
        generation = nxt
    n = len(fathers)
    return TreeTopology(
        labels=tuple(str(i) for i in range(n)),
        fathers=tuple(fathers),
        hop_counts=(None,) + (1,) * (n - 1),
    )


def star_tree(n_leaves: int) -> TreeTopology:
    """Root -> hub -> n leaves; every leaf path has depth 2."""
    if n_leaves < 1:
        raise ValueError("need at least one leaf")
    fathers = [None, 0] + [1] * n_leaves
    n = len(fathers)
    return TreeTopology(
        labels=tuple(str(i) for i in range(n)),
        fathers=tuple(fathers),
        hop_counts=(None,) + (1,) * (n - 1),
    )


def random_branching_tree(
    rng: np.random.Generator,
    max_links: int,
    max_children: int = 3,
    max_hops: int = 1,
) -> TreeTopology:
    """Grow a random branching tree with at most ``max_links`` links.

    Leaves are repeatedly expanded with 2..max_children children until
    the link budget runs out, which keeps every inner node branching.
    """
    if max_links < 1:
        raise ValueError("need at least one link")
    fathers: list[int | None] = [None, 0]
    leaves = [1]
    while True:
        budget = max_links - (len(fathers) - 1)
        if budget < 2:
            break
        c = int(rng.integers(2, min(max_children, budget) + 1))
        target = leaves.pop(int(rng.integers(len(leaves))))
        for _ in range(c):
            leaves.append(len(fathers))
            fathers.append(target)
        if rng.random() < 0.25:  # sometimes stop early for shape variety
            break
    n = len(fathers)
    hop_counts = [None] + [int(rng.integers(1, max_hops + 1)) for _ in range(n - 1)]
    return TreeTopology(
        labels=tuple(str(i) for i in range(n)),
        fathers=tuple(fathers),
        hop_counts=tuple(hop_counts),
    )
