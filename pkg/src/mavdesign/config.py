"""Versioned YAML run configuration.

Schema (version 1)::

    version: 1
    design_space: {lower: 0.0, upper: 150.0}
    target: {alpha: 0.4}
    n: 100
    candidates:                      # families used for averaging
      - {label: f1, kind: loglinear, start: [0, 0.0797, 1.0], bounds: {lower: null, upper: null}}
    prior:                           # truth prior; atoms and/or parameter grids
      atoms:
        - {label: f1, kind: loglinear, params: [0, 0.0797, 1.0], sigma2: 0.1, prob: 0.5}
      grids:                         # uniform over the +-rel grid, total mass ``prob``
        - {label: f2, kind: emax, params: [0, 0.467, 25.0], sigma2: 0.1, rel: 0.1, prob: 0.5}
    weights: uniform                 # or an explicit list, one per candidate
    design: {points: [...], weights: [...]}          # project / verify
    optimizer: {k_points: [3, 4], restarts: 4, ...}  # OptimizerConfig fields
    simulation:
      truths: [{label: f1, kind: loglinear, params: [...], sigma2: 0.1}]
      designs: {xi1: {points: [...], weights: [...]}}
      n_list: [100]
      reps: 1000
      seed: 1
      scale: 1.0
      schemes: [uniform, smooth_aic, select_aic]
    output: {dir: out}

Loading validates every field by building the runtime objects once;
``RunConfig.from_dict(cfg.to_dict()) == cfg`` for any loaded ``cfg``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import ApproximateDesign, AveragingWeights, CandidateModel, DesignSpace, ModelKind, TargetED, TruthPrior
from .criterion import CandidateSpec, CriterionContext
from .optimizer import OptimizerConfig
from .projection import Bounds
from .scenarios import parameter_grid
from .simulate import SCHEMES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _floats(seq, what):
    try:
        return tuple(float(v) for v in seq)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: expected a list of numbers") from exc


def _opt_float(v):
    return None if v is None else float(v)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: tuple
    sigma2: float = 0.1
    label: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        try:
            kind = ModelKind.parse(d["kind"]).value
            params = _floats(d["params"], f"model {d.get('label')}")
        except KeyError as exc:
            raise ConfigError(f"model entry missing {exc}") from exc
        spec = cls(kind, params, float(d.get("sigma2", 0.1)), d.get("label"))
        spec.model()  # validates arity and variance
        return spec

    def model(self) -> CandidateModel:
        return CandidateModel(ModelKind.parse(self.kind), self.params, self.sigma2, self.label)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "params": list(self.params), "sigma2": self.sigma2}
        if self.label is not None:
            out["label"] = self.label
        return out


@dataclass(frozen=True)
class CandidateEntry:
    kind: str
    start: tuple | None = None
    lower: float | None = None
    upper: float | None = None
    label: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> CandidateEntry:
        if "kind" not in d:
            raise ConfigError("candidate entry missing 'kind'")
        kind = ModelKind.parse(d["kind"])
        start = d.get("start")
        if start is not None:
            start = _floats(start, f"candidate {d.get('label')} start")
            if len(start) != kind.n_vartheta:
                raise ConfigError(f"candidate {d.get('label')}: start needs {kind.n_vartheta} values")
        b = d.get("bounds") or {}
        return cls(kind.value, start, _opt_float(b.get("lower")), _opt_float(b.get("upper")), d.get("label"))

    def spec(self) -> CandidateSpec:
        bounds = None if self.lower is None and self.upper is None else Bounds(self.lower, self.upper)
        return CandidateSpec(ModelKind.parse(self.kind), self.start, bounds, self.label)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.label is not None:
            out["label"] = self.label
        if self.start is not None:
            out["start"] = list(self.start)
        out["bounds"] = {"lower": self.lower, "upper": self.upper}
        return out


@dataclass(frozen=True)
class DesignSpec:
    points: tuple
    weights: tuple

    @classmethod
    def from_dict(cls, d: dict) -> DesignSpec:
        try:
            return cls(_floats(d["points"], "design points"), _floats(d["weights"], "design weights"))
        except KeyError as exc:
            raise ConfigError(f"design missing {exc}") from exc

    def design(self, space: DesignSpace) -> ApproximateDesign:
        return ApproximateDesign(self.points, self.weights, space)

    def to_dict(self) -> dict:
        return {"points": list(self.points), "weights": list(self.weights)}


@dataclass(frozen=True)
class SimulationSpec:
    truths: tuple = ()
    designs: tuple = ()  # (name, DesignSpec) pairs, order kept
    n_list: tuple = (100,)
    reps: int = 1000
    seed: int = 1
    scale: float = 1.0
    schemes: tuple = SCHEMES

    @classmethod
    def from_dict(cls, d: dict) -> SimulationSpec:
        truths = tuple(ModelSpec.from_dict(t) for t in d.get("truths", []))
        designs = tuple((str(k), DesignSpec.from_dict(v)) for k, v in (d.get("designs") or {}).items())
        schemes = tuple(d.get("schemes", SCHEMES))
        for s in schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown estimator scheme {s!r}")
        reps = int(d.get("reps", 1000))
        if reps < 1:
            raise ConfigError("simulation.reps must be at least 1")
        return cls(truths, designs, tuple(int(n) for n in d.get("n_list", [100])), reps,
                   int(d.get("seed", 1)), float(d.get("scale", 1.0)), schemes)

    def to_dict(self) -> dict:
        return {
            "truths": [t.to_dict() for t in self.truths],
            "designs": {k: v.to_dict() for k, v in self.designs},
            "n_list": list(self.n_list),
            "reps": self.reps,
            "seed": self.seed,
            "scale": self.scale,
            "schemes": list(self.schemes),
        }


_OPT_FIELDS = {f.name for f in dataclasses.fields(OptimizerConfig)}


@dataclass(frozen=True)
class RunConfig:
    space: tuple = (0.0, 150.0)
    alpha: float = 0.4
    n: int = 100
    candidates: tuple = ()
    atoms: tuple = ()  # (ModelSpec, prob)
    grids: tuple = ()  # (ModelSpec, rel, prob)
    weights: tuple | str = "uniform"
    design: DesignSpec | None = None
    optimizer: tuple = ()  # sorted (key, value) overrides of OptimizerConfig
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    output_dir: str = "out"
    version: int = SCHEMA_VERSION

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        version = int(d.get("version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {version}; expected {SCHEMA_VERSION}")
        sp = d.get("design_space", {"lower": 0.0, "upper": 150.0})
        space = (float(sp["lower"]), float(sp["upper"]))
        cands = tuple(CandidateEntry.from_dict(c) for c in d.get("candidates", []))
        prior = d.get("prior") or {}
        atoms = tuple((ModelSpec.from_dict(a), float(a.get("prob", 1.0))) for a in prior.get("atoms", []))
        grids = tuple(
            (ModelSpec.from_dict(g), float(g.get("rel", 0.1)), float(g.get("prob", 1.0)))
            for g in prior.get("grids", [])
        )
        w = d.get("weights", "uniform")
        if w != "uniform":
            w = _floats(w, "weights")
        design = DesignSpec.from_dict(d["design"]) if d.get("design") else None
        opt = d.get("optimizer") or {}
        unknown = set(opt) - _OPT_FIELDS
        if unknown:
            raise ConfigError(f"unknown optimizer fields {sorted(unknown)}")
        opt_items = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in opt.items()))
        cfg = cls(
            space,
            float((d.get("target") or {}).get("alpha", 0.4)),
            int(d.get("n", 100)),
            cands,
            atoms,
            grids,
            w,
            design,
            opt_items,
            SimulationSpec.from_dict(d.get("simulation") or {}),
            str((d.get("output") or {}).get("dir", "out")),
            version,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {
            "version": self.version,
            "design_space": {"lower": self.space[0], "upper": self.space[1]},
            "target": {"alpha": self.alpha},
            "n": self.n,
            "candidates": [c.to_dict() for c in self.candidates],
            "prior": {
                "atoms": [{**m.to_dict(), "prob": p} for m, p in self.atoms],
                "grids": [{**m.to_dict(), "rel": r, "prob": p} for m, r, p in self.grids],
            },
            "weights": self.weights if self.weights == "uniform" else list(self.weights),
            "optimizer": {k: list(v) if isinstance(v, tuple) else v for k, v in self.optimizer},
            "simulation": self.simulation.to_dict(),
            "output": {"dir": self.output_dir},
        }
        if self.design is not None:
            out["design"] = self.design.to_dict()
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    # -- runtime objects --------------------------------------------------

    def validate(self) -> None:
        """Build every runtime object once so bad configs fail at load time."""
        self.design_space()
        self.target()
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.candidates:
            self.averaging_weights()
        if self.atoms or self.grids:
            self.prior()
        if self.design is not None:
            self.design.design(self.design_space())
        self.optimizer_config()

    def design_space(self) -> DesignSpace:
        return DesignSpace(*self.space)

    def target(self) -> TargetED:
        return TargetED(self.alpha, self.design_space())

    def candidate_specs(self) -> list[CandidateSpec]:
        return [c.spec() for c in self.candidates]

    def averaging_weights(self) -> AveragingWeights:
        r = len(self.candidates)
        if r == 0:
            raise ConfigError("no candidates configured")
        if self.weights == "uniform":
            return AveragingWeights.uniform(r)
        if len(self.weights) != r:
            raise ConfigError(f"{len(self.weights)} weights for {r} candidates")
        return AveragingWeights(tuple(self.weights))

    def prior(self) -> TruthPrior:
        atoms, probs = [], []
        for m, p in self.atoms:
            atoms.append(m.model())
            probs.append(p)
        for m, rel, p in self.grids:
            grid = parameter_grid(m.model(), rel)
            atoms.extend(grid)
            probs.extend([p / len(grid)] * len(grid))
        if not atoms:
            raise ConfigError("prior has no atoms")
        try:
            return TruthPrior(tuple(atoms), tuple(probs))
        except ValueError as exc:
            raise ConfigError(f"prior: {exc}") from exc

    def optimizer_config(self, **overrides) -> OptimizerConfig:
        kw = dict(self.optimizer)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return OptimizerConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"optimizer: {exc}") from exc

    def context(self) -> CriterionContext:
        return CriterionContext(self.prior(), self.candidate_specs(), self.averaging_weights(), self.target(), self.n)
