"""Scenario configuration: JSON schema validation and scenario execution."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .assignment import build_assignment, build_review_tree, required_tree_students
from .bounds import review_cost
from .dynamics import (
    StrategyGrid,
    check_equilibrium,
    compare_truthful_vs_constant_noise,
    expected_loss,
)
from .engine import ReviewStructure
from .losses import LossSpec
from .model import ConfigurationError, QualityDistribution, Strategy, StrategyProfile

EXIT_OK, EXIT_USAGE, EXIT_INCONCLUSIVE, EXIT_REFUTED = 0, 2, 3, 4


class ScenarioError(ValueError):
    """Schema violation or unresolved reference; ``path`` points at the field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_schema() -> dict:
    return json.loads(resources.files("peergrade").joinpath("scenario.schema.json").read_text())


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate(doc: Mapping) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ScenarioError(e.message, _json_path(e.absolute_path))


def strategy_from_dict(d: Mapping) -> Strategy:
    kind = d["kind"]
    if kind == "truthful":
        return Strategy.truthful()
    if kind == "constant":
        return Strategy.constant(d["value"], d.get("noise_std", 0.0))
    if kind == "affine":
        return Strategy.affine(d["slope"], d["intercept"])
    if kind == "truthful_plus_noise":
        return Strategy.truthful_plus_noise(d.get("bias", 0.0), d.get("std", 0.0))
    return Strategy(tuple(map(tuple, d["breakpoints"])), d.get("measurement_noise_std", 0.0),
                    d.get("voluntary_noise_mean", 0.0), d.get("voluntary_noise_std", 0.0),
                    d.get("noise_shape", "gaussian_clipped"))


def _student_key(text: str):
    try:
        return int(text)
    except ValueError:
        return text


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated scenario with defaults filled in."""

    scheme: str
    N: int
    m: int
    M: float
    quality: QualityDistribution | None
    fixed_quality: float | None
    profile: StrategyProfile
    loss: Mapping[str, Any]
    C: float
    replicates: int
    seed: int
    student: Any
    assertion: Mapping[str, Any] | None
    outputs: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScenarioConfig":
        validate(doc)
        cls_ = doc["class"]
        M = float(cls_.get("M", 10.0))
        qd = doc["quality_dist"]
        quality = fixed = None
        try:
            if qd["kind"] == "fixed":
                fixed = float(qd["value"])
                if not 0 <= fixed <= M:
                    raise ValueError("fixed quality outside [0, M]")
            elif qd["kind"] == "uniform":
                quality = QualityDistribution.uniform(qd["lo"], qd["hi"])
            elif qd["kind"] == "gaussian_clipped":
                quality = QualityDistribution.gaussian_clipped(qd["mean"], qd["std"])
            else:
                quality = QualityDistribution.discrete(qd["values"], qd["probs"])
            if quality is not None:
                quality.validate(M)
        except ValueError as exc:
            raise ScenarioError(str(exc), "$.quality_dist") from None

        strategies = doc["strategies"]
        try:
            default = strategy_from_dict(strategies["default"])
            overrides = {_student_key(k): strategy_from_dict(v)
                         for k, v in strategies.get("overrides", {}).items()}
        except ValueError as exc:
            raise ScenarioError(str(exc), "$.strategies") from None
        for key, s in [("default", default), *overrides.items()]:
            try:
                s.validate(M)
            except ValueError as exc:
                raise ScenarioError(str(exc), f"$.strategies.{key}") from None

        cost = doc.get("cost", {"C": 0.0})
        C = cost["C"] if "C" in cost else review_cost(cost["minutes"], cost.get("weight", 0.75))
        sim = doc.get("sim", {})
        return cls(doc["scheme"], cls_["N"], cls_["m"], M, quality, fixed,
                   StrategyProfile(default, overrides), dict(doc.get("loss", {})), float(C),
                   sim.get("replicates", 100_000), sim.get("seed", 0), sim.get("student"),
                   doc.get("assertion"), dict(doc.get("outputs", {})))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(doc)

    # -- compilation ------------------------------------------------------
    def loss_spec(self, tree=None) -> LossSpec:
        L = self.loss
        if self.scheme == "flat":
            k = L.get("instructor_k")
            form = L.get("form", "expected")
            return LossSpec.flat(L.get("p", 0.0), L.get("alpha", 1.0), form=form,
                                 instructor_set="sampled" if form == "realized" else None,
                                 instructor_k=k)
        if self.scheme == "var":
            return LossSpec.var(L.get("gamma", 0.0), L.get("variant", "local"))
        if self.scheme == "tree":
            return LossSpec("tree", tree=tree)
        return LossSpec(self.scheme)

    def structure(self) -> ReviewStructure:
        if self.scheme == "tree":
            K = self.loss.get("K")
            if K is None:
                raise ScenarioError("tree scheme needs a branching factor", "$.loss.K")
            need = required_tree_students(self.N, K)
            tree = build_review_tree(list(range(self.N)), list(range(self.N, self.N + need)), K,
                                     seed=self.seed)
            return ReviewStructure.from_tree(tree, self.M)
        if self.m >= self.N:
            raise ScenarioError("reviews per student must be below the class size", "$.class.m")
        return ReviewStructure.from_assignment(build_assignment(self.N, self.m, seed=self.seed), self.M)

    def describe(self) -> dict:
        return {"scheme": self.scheme, "N": self.N, "m": self.m, "M": self.M, "C": self.C,
                "quality": self.quality.to_dict() if self.quality else {"fixed": self.fixed_quality},
                "default_strategy": self.profile.default.label()}


def _grid(spec: Mapping | None, M: float) -> StrategyGrid:
    spec = spec or {}
    grid = StrategyGrid.constant(M, spec.get("constant_step"))
    if "slopes" in spec or "intercepts" in spec:
        grid = grid | StrategyGrid.affine(spec.get("slopes", [1.0]), spec.get("intercepts", [0.0]))
    if "max_bias" in spec or "max_std" in spec:
        grid = grid | StrategyGrid.truthful_plus_noise(spec.get("max_bias", 1.0), spec.get("max_std", 1.0),
                                                       spec.get("noise_step", 0.05))
    return grid


def run_scenario(cfg: ScenarioConfig, threads: int = 1) -> tuple[dict, int]:
    """Run a scenario; returns the JSON-ready result and the exit code."""
    st = cfg.structure()
    loss = cfg.loss_spec(st.tree)
    if cfg.scheme == "tree":
        students = [n.id for n in st.tree.student_nodes()]
    else:
        students = list(st.students)
    u = cfg.student if cfg.student is not None else students[0]
    if u not in students:
        raise ScenarioError(f"student {u!r} is not in the class", "$.sim.student")
    if loss.scheme == "flat" and loss.form == "realized" and loss.instructor_k is None:
        raise ScenarioError("realized flat loss needs instructor_k", "$.loss.instructor_k")
    fixed = {s: cfg.fixed_quality for s in st.submissions} if cfg.fixed_quality is not None else None
    qdist = cfg.quality

    report = expected_loss(cfg.profile, u, loss, qdist, st, cfg.replicates, cfg.seed,
                           fixed_qualities=fixed, threads=threads)
    result = {"scenario": cfg.describe(), "report": report.to_dict()}
    code = EXIT_OK
    a = cfg.assertion
    if a is None:
        return result, code

    if a["kind"] == "estimate":
        se = report.std_error
        if se > a.get("max_se", 0.05):
            status = "inconclusive"
        else:
            status = "pass" if abs(report.estimate - a["value"]) <= 3 * se + 1e-9 else "refuted"
        result["assertion"] = {"kind": "estimate", "status": status, "expected": a["value"]}
    elif a["kind"] == "truthful_beats_constant_noise":
        if cfg.scheme != "var":
            raise ScenarioError("truthful_beats_constant_noise needs the var scheme", "$.assertion")
        if cfg.quality is None or cfg.quality.kind != "gaussian_clipped":
            raise ScenarioError("truthful_beats_constant_noise needs gaussian_clipped qualities", "$.quality_dist")
        mean, std = cfg.quality.params
        cmp = compare_truthful_vs_constant_noise(a["eta2"], loss.gamma, cfg.m, std * std, loss.variant, cfg.C,
                                       a.get("D", mean), cfg.N, cfg.M, cfg.replicates, cfg.seed,
                                       threads=threads)
        status = {"pass": "pass", "fail": "refuted"}.get(cmp.status, "inconclusive")
        result["assertion"] = {"kind": "truthful_beats_constant_noise", "status": status, "detail": cmp.status,
                               "comparison": cmp.to_dict()}
    else:
        v = check_equilibrium(cfg.profile, _grid(a.get("grid"), cfg.M), loss, qdist, st, cfg.C,
                              a.get("students"), cfg.replicates, cfg.seed, a.get("cost_rule", "measurement"),
                              fixed, threads=threads)
        if v.verdict == "inconclusive":
            status = "inconclusive"
        else:
            status = "pass" if v.verdict == a["expect"] else "refuted"
        result["assertion"] = {"kind": "equilibrium", "status": status, "verdict": v.to_dict()}
    status = result["assertion"]["status"]
    code = {"pass": EXIT_OK, "inconclusive": EXIT_INCONCLUSIVE}.get(status, EXIT_REFUTED)
    return result, code


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, full float precision, no NaN."""
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {str(k): clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x
    return json.dumps(clean(obj), indent=2, sort_keys=True, default=str) + "\n"
