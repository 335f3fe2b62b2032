"""CSV and JSON readers and writers, plus max-grader statistics on grade records.

Identifiers read from CSV that look like integers are converted to ``int``
so that files written from simulated data read back to equal objects.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

from .assignment import BipartiteAssignment
from .losses import LossReport
from .model import GradeGraph

log = logging.getLogger(__name__)

GRAPH_HEADER = ["submission_id", "student_id", "grade"]
QUALITY_HEADER = ["submission_id", "quality"]
ASSIGNMENT_HEADER = ["submission_id", "student_id"]
LOSS_HEADER = ["student_id", "total_loss", "term1", "term2"]
TRAJECTORY_HEADER = ["round", "grade", "error"]
RECORD_HEADER = ["assignment_id", "student_id", "submission_id", "grade"]
STATS_HEADER = ["assignment_id", "max_grade_fraction", "max_grader_fraction", "n_grades", "n_students"]
MALFORMED_LIMIT = 0.10


class FormatError(ValueError):
    """A file does not match its documented layout."""


def parse_id(text: str) -> Hashable:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def _open_rows(path, header: Sequence[str]):
    fh = Path(path).open(newline="")
    reader = csv.reader(fh)
    first = next(reader, None)
    if first is None:
        fh.close()
        raise FormatError(f"{path}: empty file")
    if [c.strip() for c in first] != list(header):
        fh.close()
        raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
    return fh, reader


def _write(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _num(x) -> str:
    return repr(float(x))


# -- grade graphs -----------------------------------------------------------

def write_graph_csv(graph: GradeGraph, path, qualities_path=None) -> None:
    edges = sorted(graph.edges, key=lambda e: (repr(e[0]), repr(e[1])))
    _write(path, GRAPH_HEADER, [(i, u, _num(g)) for i, u, g in edges])
    if qualities_path is not None:
        _write(qualities_path, QUALITY_HEADER,
               [(i, _num(q)) for i, q in sorted(graph.qualities.items(), key=lambda kv: repr(kv[0]))])


def read_graph_csv(path, max_grade: float, qualities_path=None) -> GradeGraph:
    fh, reader = _open_rows(path, GRAPH_HEADER)
    with fh:
        edges = []
        for line, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}:{line}: expected 3 fields")
            try:
                edges.append((parse_id(row[0]), parse_id(row[1]), float(row[2])))
            except ValueError:
                raise FormatError(f"{path}:{line}: grade {row[2]!r} is not a number") from None
    qualities = {}
    if qualities_path is not None:
        fh, reader = _open_rows(qualities_path, QUALITY_HEADER)
        with fh:
            for line, row in enumerate(reader, start=2):
                try:
                    qualities[parse_id(row[0])] = float(row[1])
                except (ValueError, IndexError):
                    raise FormatError(f"{qualities_path}:{line}: malformed quality row") from None
    return GradeGraph(max_grade, tuple(edges), qualities)


def graph_to_dict(graph: GradeGraph) -> dict:
    return {
        "max_grade": graph.max_grade,
        "grades": [{"submission_id": i, "student_id": u, "grade": g} for i, u, g in
                   sorted(graph.edges, key=lambda e: (repr(e[0]), repr(e[1])))],
        "qualities": [{"submission_id": i, "quality": q} for i, q in
                      sorted(graph.qualities.items(), key=lambda kv: repr(kv[0]))],
    }


def graph_from_dict(data: Mapping) -> GradeGraph:
    edges = tuple((r["submission_id"], r["student_id"], r["grade"]) for r in data["grades"])
    qualities = {r["submission_id"]: r["quality"] for r in data.get("qualities", [])}
    return GradeGraph(data["max_grade"], edges, qualities)


# -- assignments, loss reports, trajectories --------------------------------

def write_assignment_csv(assignment: BipartiteAssignment, path) -> Path:
    return _write(path, ASSIGNMENT_HEADER, assignment.sorted_edges())


def read_assignment_csv(path) -> BipartiteAssignment:
    fh, reader = _open_rows(path, ASSIGNMENT_HEADER)
    with fh:
        edges = []
        for line, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise FormatError(f"{path}:{line}: expected 2 fields")
            edges.append((parse_id(row[0]), parse_id(row[1])))
    students = tuple(sorted({u for _, u in edges}, key=repr))
    subs = tuple(sorted({i for i, _ in edges}, key=repr))
    return BipartiteAssignment(students, subs, frozenset(edges))


def write_loss_report_csv(report: LossReport, path) -> Path:
    return _write(path, LOSS_HEADER, [(u, _num(t), _num(a), _num(b)) for u, t, a, b in report.rows()])


def loss_report_to_dict(report: LossReport) -> dict:
    return {"scheme": report.scheme,
            "losses": [{"student_id": u, "total_loss": t, "term1": a, "term2": b}
                       for u, t, a, b in report.rows()]}


def write_trajectory_csv(steps, path) -> Path:
    return _write(path, TRAJECTORY_HEADER, [(s.round, _num(s.grade), _num(s.error)) for s in steps])


# -- grade records ------------------------------------------------------------

@dataclass(frozen=True)
class GradeRecord:
    assignment_id: Hashable
    student_id: Hashable
    submission_id: Hashable
    grade: float


@dataclass(frozen=True)
class MalformedRow:
    line: int
    reason: str


@dataclass(frozen=True)
class RecordFile:
    records: tuple[GradeRecord, ...]
    malformed: tuple[MalformedRow, ...]

    @property
    def n_rows(self) -> int:
        return len(self.records) + len(self.malformed)

    @property
    def malformed_fraction(self) -> float:
        return len(self.malformed) / self.n_rows if self.n_rows else 0.0


def read_grade_records(path) -> RecordFile:
    """Parse a grade-record CSV, collecting malformed rows by line number."""
    fh, reader = _open_rows(path, RECORD_HEADER)
    records, bad = [], []
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                bad.append(MalformedRow(line, f"expected 4 fields, got {len(row)}"))
                continue
            if any(not c.strip() for c in row[:3]):
                bad.append(MalformedRow(line, "empty identifier"))
                continue
            try:
                g = float(row[3])
            except ValueError:
                bad.append(MalformedRow(line, f"grade {row[3]!r} is not a number"))
                continue
            if not math.isfinite(g):
                bad.append(MalformedRow(line, f"grade {row[3]!r} is not finite"))
                continue
            records.append(GradeRecord(parse_id(row[0]), parse_id(row[1]), parse_id(row[2]), g))
    return RecordFile(tuple(records), tuple(bad))


def read_manifest(path) -> dict:
    """Manifest JSON mapping assignment id to its maximum grade.

    Either ``{"a1": 10, ...}`` or ``{"assignments": {"a1": {"max_grade": 10}, ...}}``.
    """
    data = json.loads(Path(path).read_text())
    if "assignments" in data:
        data = {k: (v["max_grade"] if isinstance(v, Mapping) else v) for k, v in data["assignments"].items()}
    out = {}
    for k, v in data.items():
        if not isinstance(v, (int, float)) or v <= 0:
            raise FormatError(f"{path}: max grade for {k!r} must be a positive number")
        out[parse_id(str(k))] = float(v)
    return out


@dataclass(frozen=True)
class MaxGraderStats:
    assignment_id: Hashable
    max_grade_fraction: float
    max_grader_fraction: float
    n_grades: int
    n_students: int

    def row(self):
        return (self.assignment_id, _num(self.max_grade_fraction), _num(self.max_grader_fraction),
                self.n_grades, self.n_students)

    def to_dict(self) -> dict:
        return asdict(self)


def max_grader_stats(records: Iterable[GradeRecord], max_grades: Mapping[Hashable, float],
                     rel_tol: float = 1e-9) -> list[MaxGraderStats]:
    """Per assignment: share of grades equal to the maximum, and share of
    reviewing students whose every grade is the maximum.

    Assignments listed in ``max_grades`` without any records are skipped with
    a warning.  Records for assignments missing from ``max_grades`` raise.
    """
    by_asg: dict = {}
    for r in records:
        if r.assignment_id not in max_grades:
            raise FormatError(f"no max grade given for assignment {r.assignment_id!r}")
        by_asg.setdefault(r.assignment_id, []).append(r)
    out = []
    for a in sorted(set(max_grades) | set(by_asg), key=repr):
        rows = by_asg.get(a)
        if not rows:
            log.warning("assignment %r has no grade records; skipped", a)
            continue
        M = max_grades[a]
        at_max = [math.isclose(r.grade, M, rel_tol=rel_tol, abs_tol=rel_tol) for r in rows]
        all_max: dict = {}
        for r, hit in zip(rows, at_max):
            all_max[r.student_id] = all_max.get(r.student_id, True) and hit
        out.append(MaxGraderStats(a, sum(at_max) / len(rows), sum(all_max.values()) / len(all_max),
                                  len(rows), len(all_max)))
    return out


def write_stats_csv(stats: Sequence[MaxGraderStats], path) -> Path:
    return _write(path, STATS_HEADER, [s.row() for s in stats])
