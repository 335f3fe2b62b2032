"""Review assignment: random bipartite assignment, instructor sampling,
review trees, and the workload combinatorics of the flat scheme."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "InfeasibleError",
    "BipartiteAssignment",
    "build_assignment",
    "complete_assignment",
    "sample_instructor_set",
    "coverage_probability",
    "min_instructor_workload",
    "Node",
    "INSTRUCTOR",
    "ReviewTree",
    "build_review_tree",
    "required_tree_students",
]


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class BipartiteAssignment:
    """Which student reviews which submission.

    ``owners`` maps each submission to its author; by default submission
    ``i`` is authored by student ``i``.
    """

    students: tuple
    submissions: tuple
    edges: frozenset  # of (submission, student)
    owners: Mapping[Hashable, Hashable] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset(self.edges))
        object.__setattr__(self, "owners", dict(self.owners))
        for i, u in self.edges:
            if self.owners.get(i, object()) == u:
                raise ValueError(f"student {u!r} assigned own submission {i!r}")

    @property
    def N(self) -> int:
        return len(self.students)

    def reviewed_by(self, u) -> tuple:
        return tuple(sorted(i for i, v in self.edges if v == u))

    def reviewers_of(self, i) -> tuple:
        return tuple(sorted(u for j, u in self.edges if j == i))

    def reviewer_counts(self) -> dict:
        counts = {i: 0 for i in self.submissions}
        for i, _ in self.edges:
            counts[i] += 1
        return counts

    def sorted_edges(self) -> list:
        return sorted(self.edges, key=lambda e: (repr(e[1]), repr(e[0])))


def build_assignment(N: int, m: int, per_submission_min: int = 1, seed: int = 0) -> BipartiteAssignment:
    """Random m-regular review assignment without self-review.

    Students are placed on a random cycle and student at position ``j``
    reviews the submissions of the students at positions ``j+1, ..., j+m``.
    Every student reviews exactly ``m`` submissions and every submission gets
    exactly ``m`` reviewers.
    """
    if N < 2 or not 1 <= m <= N - 1:
        raise InfeasibleError(f"need 1 <= m <= N-1, got N={N}, m={m}")
    if per_submission_min * N > m * N:
        raise InfeasibleError(
            f"{per_submission_min} reviewers per submission needs {per_submission_min * N} "
            f"reviews but only {m * N} are assigned")
    rng = np.random.default_rng(seed)
    order = rng.permutation(N)
    edges = {(int(order[(j + s) % N]), int(order[j])) for j in range(N) for s in range(1, m + 1)}
    return BipartiteAssignment(tuple(range(N)), tuple(range(N)), frozenset(edges),
                               {i: i for i in range(N)})


def complete_assignment(n_students: int, n_submissions: int) -> BipartiteAssignment:
    """Every student reviews every submission (submissions have external authors)."""
    students = tuple(range(n_students))
    subs = tuple(f"s{j}" for j in range(n_submissions))
    return BipartiteAssignment(students, subs, frozenset((i, u) for i in subs for u in students))


def sample_instructor_set(submissions: Sequence, k: int, rng: np.random.Generator) -> frozenset:
    """Uniform random ``k``-subset of submissions for the instructor to grade."""
    if not 0 <= k <= len(submissions):
        raise ValueError(f"k={k} outside [0, {len(submissions)}]")
    idx = rng.choice(len(submissions), size=k, replace=False)
    return frozenset(submissions[j] for j in idx)


def _log_comb(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def coverage_probability(N: int, m: int, k: int) -> float:
    """P(a student's ``m`` reviewed submissions meet the instructor's ``k``).

    ``1 - C(N-m, k) / C(N, k)``, evaluated in log space.
    """
    if not (0 <= k <= N and 0 <= m <= N):
        raise ValueError(f"need 0 <= k, m <= N, got N={N}, m={m}, k={k}")
    if k > N - m:
        return 1.0
    if k == 0 or m == 0:
        return 0.0
    return float(-np.expm1(_log_comb(N - m, k) - _log_comb(N, k)))


def min_instructor_workload(N: int, m: int, target_p: float) -> int:
    """Smallest ``k`` with ``coverage_probability(N, m, k) >= target_p``."""
    if not 0 <= target_p <= 1:
        raise ValueError("target_p must lie in [0, 1]")
    lo, hi = 0, N  # coverage is nondecreasing in k and equals 1 at k = N
    while lo < hi:
        mid = (lo + hi) // 2
        if coverage_probability(N, m, mid) >= target_p:
            hi = mid
        else:
            lo = mid + 1
    return lo


# -- review trees -------------------------------------------------------------

class Node(NamedTuple):
    kind: str  # "instructor" | "student" | "submission"
    id: Hashable = None

    def __str__(self):
        return self.kind if self.kind == "instructor" else f"{self.kind}:{self.id}"

    @classmethod
    def parse(cls, text: str, id_type=str) -> "Node":
        if text == "instructor":
            return INSTRUCTOR
        kind, _, ident = text.partition(":")
        return cls(kind, id_type(ident))


INSTRUCTOR = Node("instructor")


@dataclass(frozen=True)
class ReviewTree:
    """Instructor-rooted review hierarchy.

    ``levels[0]`` is ``(INSTRUCTOR,)`` and ``levels[-1]`` holds the
    submission leaves.  Each internal node reviews exactly one submission in
    common with each child: ``shared[(parent, child)]``.  For leaf children
    the shared submission is the leaf itself.
    """

    K: int
    levels: tuple[tuple[Node, ...], ...]
    parent: Mapping[Node, Node]
    shared: Mapping[tuple[Node, Node], Hashable]
    extra_reviews: Mapping[Hashable, tuple] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def children(self, node: Node) -> tuple[Node, ...]:
        return tuple(c for (p, c) in self.shared if p == node)

    def reviewed(self, node: Node) -> tuple:
        """Submissions reviewed by an internal node, in child order."""
        return tuple(self.shared[(node, c)] for c in self.children(node))

    def student_nodes(self) -> list[Node]:
        return [n for lvl in self.levels[1:-1] for n in lvl]

    def level_of(self, node: Node) -> int:
        for l, lvl in enumerate(self.levels):
            if node in lvl:
                return l
        raise KeyError(node)

    def shared_with_parent(self, node: Node):
        return self.shared[(self.parent[node], node)]

    def assignment(self, owners: Mapping | None = None) -> BipartiteAssignment:
        """Student review edges implied by the tree (instructor excluded)."""
        edges = {(s, p.id) for (p, _), s in self.shared.items() if p.kind == "student"}
        edges |= {(s, u) for s, us in self.extra_reviews.items() for u in us}
        students = tuple(n.id for n in self.student_nodes())
        subs = tuple(n.id for n in self.levels[-1])
        return BipartiteAssignment(students, subs, frozenset(edges), owners or {})

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "nodes": [{"id": str(n), "level": l} for l, lvl in enumerate(self.levels) for n in lvl],
            "edges": [{"parent": str(self.parent[n]), "child": str(n)}
                      for lvl in self.levels[1:] for n in lvl],
            "shared_submission": [{"parent": str(p), "child": str(c), "submission": s}
                                  for (p, c), s in self.shared.items()],
            "extra_reviews": {str(s): list(us) for s, us in self.extra_reviews.items()},
        }

    @classmethod
    def from_dict(cls, data: dict, id_type=int) -> "ReviewTree":
        levels: dict[int, list[Node]] = {}
        for rec in data["nodes"]:
            levels.setdefault(rec["level"], []).append(Node.parse(rec["id"], id_type))
        parent = {Node.parse(e["child"], id_type): Node.parse(e["parent"], id_type) for e in data["edges"]}
        shared = {(Node.parse(r["parent"], id_type), Node.parse(r["child"], id_type)): id_type(r["submission"])
                  for r in data["shared_submission"]}
        extra = {id_type(s): tuple(id_type(u) for u in us) for s, us in data.get("extra_reviews", {}).items()}
        return cls(data["K"], tuple(tuple(levels[l]) for l in sorted(levels)), parent, shared, extra)


def _level_sizes(n_leaves: int, K: int, student_levels: int | None) -> list[int]:
    sizes = []
    n = n_leaves
    if student_levels is None:
        if K == 1 and n > 1:
            raise InfeasibleError("branching factor 1 cannot reduce more than one leaf")
        while n > K:
            n = math.ceil(n / K)
            sizes.append(n)
    else:
        for _ in range(student_levels):
            n = math.ceil(n / K)
            sizes.append(n)
        if n > K:
            raise InfeasibleError(f"{student_levels} student levels leave {n} nodes under the root (> K={K})")
    return sizes


def required_tree_students(n_leaves: int, K: int, student_levels: int | None = None) -> int:
    return sum(_level_sizes(n_leaves, K, student_levels))


def build_review_tree(submissions: Sequence, students: Sequence, K: int, seed: int = 0,
                      owners: Mapping | None = None, student_levels: int | None = None,
                      extra_leaf_reviewers: int = 0, max_tries: int = 1000) -> ReviewTree:
    """Build a random review tree bottom-up with branching factor at most ``K``.

    Each level is formed by grouping consecutive (shuffled) nodes of the
    level below; with uneven division the first parents take one child more.
    A parent reviews one uniformly chosen submission from each child's
    reviewed set.  With ``owners`` given, shuffles are redrawn until no
    student reviews their own submission.  ``extra_leaf_reviewers`` adds
    that many further reviewers per submission, drawn from the students just
    above the leaves, so exclusive-consensus losses are defined.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not submissions:
        raise ValueError("need at least one submission")
    sizes = _level_sizes(len(submissions), K, student_levels)
    need = sum(sizes)
    if need > len(students):
        raise InfeasibleError(
            f"tree over {len(submissions)} submissions with K={K} needs {need} students, "
            f"got {len(students)} (lower bound ceil((leaves-1)/(K-1)) - 1 for K > 1)")
    owners = dict(owners or {})
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        tree = _try_build(list(submissions), list(students), K, sizes, rng)
        if all(owners.get(s, object()) != p.id for (p, _), s in tree.shared.items() if p.kind == "student"):
            break
    else:
        raise InfeasibleError("could not avoid self-review within max_tries shuffles")
    if extra_leaf_reviewers:
        tree = _add_leaf_reviewers(tree, extra_leaf_reviewers, owners, rng)
    return tree


def _try_build(submissions, students, K, sizes, rng) -> ReviewTree:
    leaves = [Node("submission", submissions[j]) for j in rng.permutation(len(submissions))]
    pool = [students[j] for j in rng.permutation(len(students))]
    reviewed: dict[Node, tuple] = {leaf: (leaf.id,) for leaf in leaves}
    parent: dict[Node, Node] = {}
    shared: dict[tuple[Node, Node], Hashable] = {}
    levels = [tuple(leaves)]
    current = leaves

    def attach(x: Node, kids: list[Node]):
        picks = []
        for y in kids:
            options = reviewed[y]
            s = options[int(rng.integers(len(options)))]
            parent[y] = x
            shared[(x, y)] = s
            picks.append(s)
        reviewed[x] = tuple(picks)

    for n_par in sizes:
        base, extra = divmod(len(current), n_par)
        nxt, pos = [], 0
        for j in range(n_par):
            take = base + (1 if j < extra else 0)
            x = Node("student", pool.pop())
            attach(x, current[pos:pos + take])
            pos += take
            nxt.append(x)
        levels.append(tuple(nxt))
        current = nxt
    attach(INSTRUCTOR, current)
    levels.append((INSTRUCTOR,))
    return ReviewTree(K, tuple(reversed(levels)), parent, shared)


def _add_leaf_reviewers(tree: ReviewTree, count: int, owners, rng) -> ReviewTree:
    if tree.depth < 3:
        raise InfeasibleError("tree has no student level above the leaves")
    pool = [n.id for n in tree.levels[-2]]
    extra = {}
    for leaf in tree.levels[-1]:
        direct = tree.parent[leaf].id
        options = [u for u in pool if u != direct and owners.get(leaf.id, object()) != u]
        if len(options) < count:
            raise InfeasibleError(f"not enough leaf-level students to add {count} reviewers")
        picks = rng.choice(len(options), size=count, replace=False)
        extra[leaf.id] = tuple(options[j] for j in sorted(picks))
    return ReviewTree(tree.K, tree.levels, tree.parent, tree.shared, extra)
