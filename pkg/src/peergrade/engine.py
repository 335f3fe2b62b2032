"""Vectorized Monte Carlo machinery shared by the estimators.

Replicates are processed in fixed-size blocks.  Block ``b`` draws from
``SeedSequence(seed, spawn_key=(b,))`` and block moments are merged in block
order, so an estimate depends only on ``(seed, replicates, block_size)`` and
never on the number of worker threads.

Every replicate draws, in this order: submission qualities ``(S,)``, two
standard-normal base draws per edge ``(E,)`` and, for sampled instructor
sets, one uniform key per submission.  Strategies turn the base draws into
noise, so all strategies evaluated on one replicate share random numbers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .assignment import INSTRUCTOR, BipartiteAssignment, Node, ReviewTree
from .losses import DegenerateInputError, LossSpec, UndefinedLossError
from .model import ConfigurationError, QualityDistribution, Strategy, StrategyProfile

DEFAULT_BLOCK = 8192


@dataclass
class RunningMoments:
    """Count, mean and sum of squared deviations, merged blockwise (Chan et al.)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        n = values.size
        if n == 0:
            return
        mean_b = float(values.mean())
        m2_b = float(((values - mean_b) ** 2).sum())
        self.merge(RunningMoments(n, mean_b, m2_b))

    def merge(self, other: "RunningMoments") -> None:
        if other.count == 0:
            return
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count else float("inf")


@dataclass(frozen=True)
class ReviewStructure:
    """A fixed review graph compiled to index arrays."""

    max_grade: float
    students: tuple
    submissions: tuple
    edge_sub: np.ndarray
    edge_stu: np.ndarray
    tree: ReviewTree | None = None

    @classmethod
    def from_assignment(cls, assignment: BipartiteAssignment, max_grade: float,
                        tree: ReviewTree | None = None) -> "ReviewStructure":
        students = tuple(assignment.students)
        subs = tuple(assignment.submissions)
        s_idx = {s: j for j, s in enumerate(subs)}
        u_idx = {u: j for j, u in enumerate(students)}
        pairs = sorted(assignment.edges, key=lambda e: (u_idx[e[1]], s_idx[e[0]]))
        return cls(float(max_grade), students, subs,
                   np.array([s_idx[i] for i, _ in pairs], dtype=np.intp),
                   np.array([u_idx[u] for _, u in pairs], dtype=np.intp), tree)

    @classmethod
    def from_tree(cls, tree: ReviewTree, max_grade: float, owners: Mapping | None = None) -> "ReviewStructure":
        return cls.from_assignment(tree.assignment(owners), max_grade, tree)

    @property
    def n_edges(self) -> int:
        return int(self.edge_sub.size)

    def student_index(self, u) -> int:
        try:
            return self.students.index(u)
        except ValueError:
            raise ConfigurationError(f"student {u!r} is not in the review structure") from None

    def edges_of(self, u) -> np.ndarray:
        return np.flatnonzero(self.edge_stu == self.student_index(u))

    def reviewer_counts(self) -> np.ndarray:
        return np.bincount(self.edge_sub, minlength=len(self.submissions))

    def edge_index(self, submission, student) -> int:
        s = self.submissions.index(submission)
        u = self.student_index(student)
        hit = np.flatnonzero((self.edge_sub == s) & (self.edge_stu == u))
        if hit.size != 1:
            raise KeyError((submission, student))
        return int(hit[0])


@dataclass
class Draws:
    q: np.ndarray   # (R, S)
    z1: np.ndarray  # (R, E)
    z2: np.ndarray  # (R, E)
    instructor_keys: np.ndarray | None = None  # (R, S)

    @property
    def n(self) -> int:
        return self.q.shape[0]


class QualitySource:
    """Either a distribution to sample from or a fixed quality per submission."""

    def __init__(self, structure: ReviewStructure, qdist: QualityDistribution | None = None,
                 fixed: Mapping[Hashable, float] | Sequence[float] | None = None):
        if (qdist is None) == (fixed is None):
            raise ConfigurationError("give exactly one of a quality distribution or fixed qualities")
        self.qdist = qdist
        self.fixed = None
        if fixed is not None:
            if isinstance(fixed, Mapping):
                missing = [s for s in structure.submissions if s not in fixed]
                if missing:
                    raise ConfigurationError(f"missing fixed qualities for {missing[:5]}")
                fixed = [fixed[s] for s in structure.submissions]
            self.fixed = np.asarray(fixed, dtype=float)
            if np.any((self.fixed < 0) | (self.fixed > structure.max_grade)):
                raise ConfigurationError("fixed qualities must lie in [0, M]")
        else:
            qdist.validate(structure.max_grade)

    def draw(self, rng, n, n_sub, max_grade):
        if self.fixed is not None:
            return np.broadcast_to(self.fixed, (n, n_sub))
        return self.qdist.sample(rng, (n, n_sub), max_grade)

    def describe(self) -> dict:
        if self.fixed is not None:
            return {"fixed": self.fixed.tolist()}
        return self.qdist.to_dict()


def draw_block(structure: ReviewStructure, source: QualitySource, rng: np.random.Generator,
               n: int, instructor_keys: bool = False) -> Draws:
    S, E = len(structure.submissions), structure.n_edges
    q = source.draw(rng, n, S, structure.max_grade)
    z = rng.standard_normal((2, n, E))
    keys = rng.random((n, S)) if instructor_keys else None
    return Draws(q, z[0], z[1], keys)


def profile_grades(structure: ReviewStructure, profile: StrategyProfile, draws: Draws) -> np.ndarray:
    """Grades on every edge, shape ``(R, E)``."""
    G = np.empty_like(draws.z1)
    groups: dict[Strategy, list[int]] = {}
    for j, u in enumerate(structure.students):
        groups.setdefault(profile.strategy_for(u), []).append(j)
    for strat, members in groups.items():
        idx = np.flatnonzero(np.isin(structure.edge_stu, members))
        if idx.size:
            G[:, idx] = strat.transform(draws.q[:, structure.edge_sub[idx]], draws.z1[:, idx],
                                        draws.z2[:, idx], structure.max_grade)
    return G


class StudentLoss:
    """Loss of one student as a function of their own grades, others held fixed.

    Built once per block; ``__call__`` maps candidate grades ``(R, n_u)`` to
    per-replicate losses ``(R,)``.
    """

    def __init__(self, structure: ReviewStructure, u, loss: LossSpec, G: np.ndarray, draws: Draws):
        self.loss = loss
        self.cols = structure.edges_of(u)
        if self.cols.size == 0:
            raise UndefinedLossError(f"student {u!r} has no reviews")
        subs = structure.edge_sub[self.cols]
        self.q = draws.q[:, subs]
        self.z1 = draws.z1[:, self.cols]
        self.z2 = draws.z2[:, self.cols]
        self.max_grade = structure.max_grade
        scheme = loss.scheme

        if scheme in ("l2", "l2_exclusive", "flat", "var"):
            others = np.zeros((structure.n_edges, self.cols.size))
            for k, (c, s) in enumerate(zip(self.cols, subs)):
                mask = structure.edge_sub == s
                mask[c] = False
                others[mask, k] = 1.0
            self.others_cnt = others.sum(axis=0)
            self.others_sum = G @ others

        if scheme == "flat" and loss.form == "realized":
            if isinstance(loss.instructor_set, str):
                k = loss.instructor_k
                if k is None or draws.instructor_keys is None:
                    raise ConfigurationError("sampled instructor sets need instructor_k")
                ranks = draws.instructor_keys.argsort(axis=1).argsort(axis=1)
                self.instructed = ranks[:, subs] < k
            else:
                chosen = {structure.submissions.index(s) for s in loss.instructor_set
                          if s in structure.submissions}
                self.instructed = np.broadcast_to(np.isin(subs, list(chosen)), self.q.shape)

        if scheme == "var" and loss.variant == "global":
            rest = np.delete(G, self.cols, axis=1)
            self.K = structure.n_edges
            if self.K < 2:
                raise DegenerateInputError("global variance needs at least two grades")
            self.center = rest.mean(axis=1, keepdims=True) if rest.shape[1] else np.zeros((G.shape[0], 1))
            dev = rest - self.center
            self.rest_s1 = dev.sum(axis=1)
            self.rest_s2 = (dev * dev).sum(axis=1)

        if scheme == "tree":
            tree = structure.tree or loss.tree
            node = Node("student", u)
            if node not in tree.parent:
                raise ValueError(f"{node} is not an internal tree node")
            x = tree.parent[node]
            s = tree.shared[(x, node)]
            s_idx = structure.submissions.index(s)
            self.shared_col = int(np.flatnonzero(subs == s_idx)[0])
            if x == INSTRUCTOR:
                self.parent_grade = draws.q[:, s_idx]
            else:
                self.parent_grade = G[:, structure.edge_index(s, x.id)]

    def grades(self, strategy: Strategy) -> np.ndarray:
        return strategy.transform(self.q, self.z1, self.z2, self.max_grade)

    def _exclusive(self):
        if np.any(self.others_cnt == 0):
            raise DegenerateInputError("a reviewed submission has a single reviewer; "
                                       "exclusive consensus undefined")
        return self.others_sum / self.others_cnt

    def __call__(self, g: np.ndarray) -> np.ndarray:
        loss = self.loss
        if loss.scheme == "l2":
            cons = (self.others_sum + g) / (self.others_cnt + 1)
            return ((g - cons) ** 2).mean(axis=1)
        if loss.scheme == "l2_exclusive":
            return ((g - self._exclusive()) ** 2).mean(axis=1)
        if loss.scheme == "flat":
            instr = (g - self.q) ** 2
            if loss.form == "expected":
                if loss.p == 1:
                    return loss.alpha * instr.mean(axis=1)
                peer = (g - self._exclusive()) ** 2
                return loss.alpha * ((1 - loss.p) * peer + loss.p * instr).mean(axis=1)
            if np.all(self.instructed):
                return loss.alpha * instr.mean(axis=1)
            peer = (g - self._exclusive()) ** 2
            return loss.alpha * np.where(self.instructed, instr, peer).mean(axis=1)
        if loss.scheme == "tree":
            return (self.parent_grade - g[:, self.shared_col]) ** 2
        # variance-penalized
        agreement = ((g - self._exclusive()) ** 2).mean(axis=1)
        if loss.variant == "local":
            if g.shape[1] < 2:
                raise DegenerateInputError("local variance needs at least two reviews")
            s2 = g.var(axis=1, ddof=1)
        else:
            dev = g - self.center
            s1 = self.rest_s1 + dev.sum(axis=1)
            s2_raw = self.rest_s2 + (dev * dev).sum(axis=1)
            s2 = (s2_raw - s1 * s1 / self.K) / (self.K - 1)
        return agreement - loss.gamma * s2


def run_blocks(structure: ReviewStructure, source: QualitySource, replicates: int, seed: int,
               fn: Callable[[Draws], np.ndarray], n_cols: int, instructor_keys: bool = False,
               block_size: int = DEFAULT_BLOCK, threads: int = 1) -> list[RunningMoments]:
    """Evaluate ``fn`` (per-block ``(n, n_cols)`` values) over all replicates."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    n_blocks = math.ceil(replicates / block_size)

    def work(b: int) -> list[RunningMoments]:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        n = min(block_size, replicates - b * block_size)
        vals = np.asarray(fn(draw_block(structure, source, rng, n, instructor_keys)), dtype=float)
        vals = vals.reshape(n, n_cols)
        out = []
        for j in range(n_cols):
            m = RunningMoments()
            m.update(vals[:, j])
            out.append(m)
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_block = list(pool.map(work, range(n_blocks)))
    else:
        per_block = [work(b) for b in range(n_blocks)]
    total = [RunningMoments() for _ in range(n_cols)]
    for block in per_block:
        for acc, m in zip(total, block):
            acc.merge(m)
    return total
