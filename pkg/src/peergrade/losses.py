"""Review losses computed exactly on a :class:`~peergrade.model.GradeGraph`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, NamedTuple

import numpy as np

from .assignment import INSTRUCTOR, Node, ReviewTree
from .model import GradeGraph

__all__ = [
    "UndefinedLossError",
    "DegenerateInputError",
    "IncompleteTreeError",
    "LossSpec",
    "LossComponents",
    "LossReport",
    "loss_l2",
    "loss_l2_exclusive",
    "loss_flat",
    "loss_tree",
    "loss_var",
    "review_grade",
    "evaluate",
    "loss_report",
]

SCHEMES = ("l2", "l2_exclusive", "flat", "tree", "var")


class UndefinedLossError(ValueError):
    """The student has no reviews, so the loss is undefined."""


class DegenerateInputError(ValueError):
    """A denominator in the loss vanishes (single reviewer, too few grades)."""


class IncompleteTreeError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Which loss to compute and with which parameters.

    ``instructor_set`` is either a set of submission ids or ``"sampled"``
    (drawn uniformly, ``instructor_k`` of them, per replicate).  ``form``
    selects the expectation over instructor choice or the realized loss.
    """

    scheme: str = "l2"
    p: float = 0.0
    alpha: float = 1.0
    instructor_set: frozenset | str | None = None
    instructor_k: int | None = None
    form: str = "expected"
    gamma: float = 0.0
    variant: str = "local"
    tree: ReviewTree | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown loss scheme {self.scheme!r}")
        if self.scheme == "flat":
            if not 0.0 <= self.p <= 1.0:
                raise ValueError("p must lie in [0, 1]")
            if self.alpha <= 0:
                raise ValueError("alpha must be > 0")
            if self.form not in ("expected", "realized"):
                raise ValueError("form must be 'expected' or 'realized'")
            if self.form == "realized" and self.instructor_set is None:
                raise ValueError("realized flat loss needs an instructor set")
        if self.scheme == "var" and self.variant not in ("local", "global"):
            raise ValueError("variant must be 'local' or 'global'")
        if self.scheme == "tree" and self.tree is None:
            raise ValueError("tree loss needs a review tree")

    @classmethod
    def flat(cls, p: float, alpha: float = 1.0, **kw) -> "LossSpec":
        return cls("flat", p=p, alpha=alpha, **kw)

    @classmethod
    def var(cls, gamma: float, variant: str = "local") -> "LossSpec":
        return cls("var", gamma=gamma, variant=variant)

    def describe(self) -> dict:
        d = {"scheme": self.scheme}
        if self.scheme == "flat":
            d.update(p=self.p, alpha=self.alpha, form=self.form)
        elif self.scheme == "var":
            d.update(gamma=self.gamma, variant=self.variant)
        elif self.scheme == "tree":
            d.update(K=self.tree.K, depth=self.tree.depth)
        return d


class LossComponents(NamedTuple):
    total: float
    term1: float
    term2: float


@dataclass(frozen=True)
class LossReport:
    scheme: str
    losses: Mapping[Hashable, LossComponents]

    def total(self, u) -> float:
        return self.losses[u].total

    def rows(self):
        for u in sorted(self.losses, key=repr):
            yield (u, *self.losses[u])


# -- helpers --------------------------------------------------------------

def _reviewed(graph: GradeGraph, u) -> tuple:
    subs = graph.reviewed_by(u)
    if not subs:
        raise UndefinedLossError(f"student {u!r} has no reviews")
    return subs


def _consensus(graph: GradeGraph, i, exclude=None) -> float:
    grades = [graph.grade(i, v) for v in graph.reviewers_of(i) if v != exclude]
    if not grades:
        if exclude is not None:
            raise DegenerateInputError(
                f"submission {i!r} has a single reviewer; exclusive consensus undefined")
        raise UndefinedLossError(f"submission {i!r} has no reviewers")
    return sum(grades) / len(grades)


# -- losses ---------------------------------------------------------------

def loss_l2(graph: GradeGraph, u) -> float:
    """Mean squared gap between ``u``'s grades and the consensus (``u`` included)."""
    subs = _reviewed(graph, u)
    return sum((graph.grade(i, u) - _consensus(graph, i)) ** 2 for i in subs) / len(subs)


def loss_l2_exclusive(graph: GradeGraph, u) -> float:
    """Like :func:`loss_l2` but the consensus leaves out ``u``'s own grade."""
    subs = _reviewed(graph, u)
    return sum((graph.grade(i, u) - _consensus(graph, i, exclude=u)) ** 2 for i in subs) / len(subs)


def _flat_terms(graph, u, p, alpha, instructor_graded, form):
    subs = _reviewed(graph, u)
    peer = instr = 0.0
    for i in subs:
        g = graph.grade(i, u)
        if form == "expected":
            if p < 1:
                peer += (1 - p) * alpha * (g - _consensus(graph, i, exclude=u)) ** 2
            instr += p * alpha * (g - graph.quality(i)) ** 2
        elif i in instructor_graded:
            instr += alpha * (g - graph.quality(i)) ** 2
        else:
            peer += alpha * (g - _consensus(graph, i, exclude=u)) ** 2
    n = len(subs)
    return peer / n, instr / n


def loss_flat(graph: GradeGraph, u, p: float, alpha: float = 1.0,
              instructor_graded=frozenset(), form: str = "expected") -> float:
    """One-level supervised loss, averaged over ``∂u``.

    ``form="expected"`` blends peer and instructor disagreement with weights
    ``1-p`` and ``p``; ``form="realized"`` scores submissions in
    ``instructor_graded`` against the true quality and the rest against peers.
    """
    if not 0.0 <= p <= 1.0 or alpha <= 0:
        raise ValueError("need p in [0, 1] and alpha > 0")
    peer, instr = _flat_terms(graph, u, p, alpha, frozenset(instructor_graded or ()), form)
    return peer + instr


def _tree_grade(graph: GradeGraph, node: Node, submission) -> float:
    if node == INSTRUCTOR:
        return graph.quality(submission)
    try:
        return graph.grade(submission, node.id)
    except KeyError:
        raise IncompleteTreeError(f"{node} has no grade for shared submission {submission!r}") from None


def loss_tree(tree: ReviewTree, graph: GradeGraph, y) -> float:
    """``(g_x - g_y)^2`` on the submission shared by ``y`` and its parent ``x``."""
    node = y if isinstance(y, Node) else Node("student", y)
    if node.kind != "student" or node not in tree.parent:
        raise ValueError(f"{node} is not a non-root internal node of the tree")
    x = tree.parent[node]
    s = tree.shared[(x, node)]
    return (_tree_grade(graph, x, s) - _tree_grade(graph, node, s)) ** 2


def _sample_variance(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise DegenerateInputError("sample variance needs at least two grades")
    return float(v.var(ddof=1))


def loss_var(graph: GradeGraph, u, gamma: float, variant: str = "local") -> LossComponents:
    """Variance-penalized loss ``l'_2 - gamma * s^2`` with its two terms.

    ``s^2`` is the unbiased sample variance of ``u``'s own grades (local) or
    of every grade in the graph (global).
    """
    agreement = loss_l2_exclusive(graph, u)
    if variant == "local":
        s2 = _sample_variance([graph.grade(i, u) for i in graph.reviewed_by(u)])
    elif variant == "global":
        s2 = _sample_variance(graph.grades())
    else:
        raise ValueError("variant must be 'local' or 'global'")
    penalty = -gamma * s2
    return LossComponents(agreement + penalty, agreement, penalty)


def review_grade(loss: float, r_max: float, l_max: float) -> float:
    """Review grade decreasing linearly in the loss: ``R_max`` at 0, 0 at ``L_max``."""
    if r_max <= 0 or l_max <= 0:
        raise ValueError("r_max and l_max must be > 0")
    return float(min(r_max, max(0.0, r_max * (1.0 - loss / l_max))))


def evaluate(graph: GradeGraph, u, spec: LossSpec, instructor_graded=None) -> LossComponents:
    """Loss of ``u`` under ``spec`` with its two reported terms."""
    if spec.scheme == "l2":
        v = loss_l2(graph, u)
        return LossComponents(v, v, 0.0)
    if spec.scheme == "l2_exclusive":
        v = loss_l2_exclusive(graph, u)
        return LossComponents(v, v, 0.0)
    if spec.scheme == "flat":
        chosen = instructor_graded
        if chosen is None and isinstance(spec.instructor_set, (set, frozenset)):
            chosen = spec.instructor_set
        if spec.form == "realized" and chosen is None:
            raise ValueError("realized flat loss needs the sampled instructor set")
        peer, instr = _flat_terms(graph, u, spec.p, spec.alpha, frozenset(chosen or ()), spec.form)
        return LossComponents(peer + instr, peer, instr)
    if spec.scheme == "tree":
        v = loss_tree(spec.tree, graph, u)
        return LossComponents(v, v, 0.0)
    return loss_var(graph, u, spec.gamma, spec.variant)


def loss_report(graph: GradeGraph, spec: LossSpec, students=None, instructor_graded=None) -> LossReport:
    if students is None:
        if spec.scheme == "tree":
            students = [n.id for n in spec.tree.student_nodes()]
        else:
            students = sorted(graph.students, key=repr)
    return LossReport(spec.scheme, {u: evaluate(graph, u, spec, instructor_graded) for u in students})
