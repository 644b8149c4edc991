"""Scenario files: schema validation and construction of problem objects."""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import library
from .paths import DiscretePath, make_grid, node_index
from .regression import FEATURES
from .rng import GAUSSIAN
from .sde import ControlledSdeProblem, SdeProblem
from .spectral import SpectralModel

Noise = Literal["gaussian", "bernoulli"]


class ScenarioError(ValueError):
    """Schema or consistency problem; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Builtin(BaseModel):
    model_config = ConfigDict(extra="allow")
    name: str


class EigenRule(_Strict):
    kind: Literal["heat"] = "heat"
    scale: float = Field(1.0, gt=0)


class ModelBlock(_Strict):
    dim_h: int = Field(ge=1)
    dim_k: int = Field(ge=1)
    eigenvalues: Optional[list[float]] = None
    eigenvalue_rule: Optional[EigenRule] = None
    gamma: float = Field(0.0, ge=0, lt=0.5)
    lip_b: float = Field(1.0, gt=0)
    lip_sigma: float = Field(1.0, gt=0)
    T: float = Field(gt=0)
    n_steps: int = Field(ge=1)

    @model_validator(mode="after")
    def _eigs(self):
        if (self.eigenvalues is None) == (self.eigenvalue_rule is None):
            raise ValueError("give exactly one of eigenvalues, eigenvalue_rule")
        if self.eigenvalues is not None:
            if len(self.eigenvalues) != self.dim_h:
                raise ValueError(f"eigenvalues must have length dim_h={self.dim_h}")
            if any(v > 0 for v in self.eigenvalues):
                raise ValueError("eigenvalues must be <= 0")
        return self


class InitialBlock(_Strict):
    t: float = Field(0.0, ge=0)
    value: Union[float, list[float]] = 0.0


class Coefficients(_Strict):
    drift: Builtin = Builtin(name="zero")
    diffusion: Builtin = Builtin(name="zero")
    nonlinearity: Optional[Builtin] = None
    terminal: Optional[Builtin] = None


class SimulateBlock(_Strict):
    n_paths: int = Field(1000, ge=1)
    noise: Noise = GAUSSIAN
    p: float = Field(2.0, gt=0)
    flow_times: list[float] = []
    flow_paths: int = Field(8, ge=1)
    oracle_mean: Optional[list[float]] = None


class SolverBlock(_Strict):
    n_train_paths: int = Field(4096, ge=2)
    window_safety: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-10, gt=0)
    max_picard_iters: int = Field(60, ge=1)
    features: list[str] = ["value", "integral", "sup"]
    ridge_scale: float = Field(1e-8, ge=0)
    init_spread: float = Field(0.0, ge=0)
    noise: Noise = GAUSSIAN

    @field_validator("features")
    @classmethod
    def _features(cls, v):
        bad = [f for f in v if f not in FEATURES]
        if bad:
            raise ValueError(f"unknown features {bad}; choose from {list(FEATURES)}")
        return v


class Oracle(_Strict):
    kind: Literal["exp_linear", "ou_affine"]
    lam: float = 1.0
    rel_tol: float = Field(0.01, ge=0)


class VerificationBlock(_Strict):
    n_paths: int = Field(4096, ge=2)
    probe_times: list[float] = [0.0]
    s_offsets: list[float] = []
    n_probe_paths: int = Field(1, ge=1)
    shift_c: Optional[float] = Field(None, gt=0)
    bsde: bool = False
    oracle: Optional[Oracle] = None
    stability_ns: list[int] = []


class StoppingBlock(_Strict):
    payoff: Builtin
    t: float = Field(0.0, ge=0)
    s: Optional[float] = None
    n_paths: int = Field(20000, ge=2)
    noise: Noise = GAUSSIAN
    gap_tol: float = Field(0.02, gt=0)


class SearchBlock(_Strict):
    n_paths: int = Field(4000, ge=1)
    exhaustive_cap: int = Field(4096, ge=1)
    n_restarts: int = Field(4, ge=1)
    max_sweeps: int = Field(10, ge=1)
    feedback: bool = False
    n_train_paths: int = Field(4000, ge=2)
    features: list[str] = ["value"]
    inner_paths: int = Field(400, ge=1)
    noise: Noise = GAUSSIAN


class DppProbe(_Strict):
    t: float = Field(ge=0)
    tau: float = Field(gt=0)


class ControlBlock(_Strict):
    actions: list[float] = Field(min_length=1)
    labels: Optional[list[str]] = None
    drift: Builtin
    diffusion: Builtin = Builtin(name="zero")
    running_cost: Builtin = Builtin(name="zero")
    structure_condition: bool = False
    search: SearchBlock = SearchBlock()
    dpp_probes: list[DppProbe] = []
    hjb_times: list[float] = []
    mc_paths: int = Field(1000, ge=1)
    oracle_value: Optional[float] = None


class Scenario(_Strict):
    name: str
    seed: int = Field(0, ge=0, lt=2**63)
    model: ModelBlock
    initial: InitialBlock = InitialBlock()
    coefficients: Coefficients = Coefficients()
    simulate: Optional[SimulateBlock] = None
    solver: Optional[SolverBlock] = None
    verification: Optional[VerificationBlock] = None
    stopping: Optional[StoppingBlock] = None
    control: Optional[ControlBlock] = None


STAGES = ("simulate", "solve", "verify", "stop", "control")
_NEEDS = {"simulate": ("simulate",), "solve": ("solver",), "verify": ("solver", "verification"),
          "stop": ("stopping",), "control": ("control",)}


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse(data: dict) -> Scenario:
    """Validate raw JSON data; the first problem is raised as
    :class:`ScenarioError` naming its field."""
    try:
        sc = Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ScenarioError(_loc(err), err["msg"]) from None
    build_all(sc)  # builtin names and parameters are checked eagerly
    return sc


def bundled_names() -> list[str]:
    root = resources.files("ppdelab") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load(path_or_name: str) -> tuple[Scenario, dict]:
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text()
    else:
        res = resources.files("ppdelab") / "scenarios" / f"{path_or_name}.json"
        if not res.is_file():
            raise ScenarioError("config", f"no such file or bundled scenario: {path_or_name}")
        text = res.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("config", f"invalid JSON: {exc}") from None
    return parse(raw), raw


def digest(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def stages_for(sc: Scenario, subcommand: str) -> list[str]:
    if subcommand == "all":
        present = [s for s in STAGES if all(getattr(sc, b) is not None for b in _NEEDS[s])]
        if not present:
            raise ScenarioError("scenario", "missing block: nothing to run")
        return present
    missing = [b for b in _NEEDS[subcommand] if getattr(sc, b) is None]
    if missing:
        raise ScenarioError(missing[0], f"missing block '{missing[0]}' required by '{subcommand}'")
    return [subcommand]


class Built:
    """Problem objects instantiated from a scenario."""

    def __init__(self, sc: Scenario):
        m = sc.model
        if m.eigenvalues is not None:
            eig = np.asarray(m.eigenvalues, dtype=float)
        else:
            eig = -m.eigenvalue_rule.scale * np.arange(1, m.dim_h + 1, dtype=float) ** 2
        try:
            self.model = SpectralModel(m.dim_h, m.dim_k, eig, m.gamma, m.lip_b, m.lip_sigma, m.T)
        except ValueError as exc:
            raise ScenarioError("model", str(exc)) from None
        self.grid = make_grid(m.T, m.n_steps)
        self.n_steps = m.n_steps
        init = np.broadcast_to(np.asarray(sc.initial.value, dtype=float), (m.dim_h,))
        try:
            node_index(self.grid, sc.initial.t)
        except ValueError as exc:
            raise ScenarioError("initial.t", str(exc)) from None
        self.t0 = float(sc.initial.t)
        self.x0 = DiscretePath.constant(self.grid, init)
        c = sc.coefficients
        dh, dk = m.dim_h, m.dim_k
        self.drift = _build("coefficients.drift", "drift", c.drift, dh, dk)
        self.diffusion = _build("coefficients.diffusion", "diffusion", c.diffusion, dh, dk)
        self.problem = SdeProblem(self.model, self.drift, self.diffusion, self.t0, init)
        self.F = None if c.nonlinearity is None else \
            _build("coefficients.nonlinearity", "nonlinearity", c.nonlinearity, dh, dk)
        self.xi = None if c.terminal is None else \
            _build("coefficients.terminal", "terminal", c.terminal, dh, dk)
        if (sc.solver is not None or sc.control is not None) and self.xi is None:
            raise ScenarioError("coefficients.terminal", "missing block 'terminal'")
        if sc.solver is not None and self.F is None:
            raise ScenarioError("coefficients.nonlinearity", "missing block 'nonlinearity'")
        self.payoff = None
        if sc.stopping is not None:
            self.payoff = _build("stopping.payoff", "payoff", sc.stopping.payoff, dh, dk)
        self.cproblem = self.cost = None
        if sc.control is not None:
            cb = sc.control
            cd = _build("control.drift", "controlled_drift", cb.drift, dh, dk)
            cs = _build("control.diffusion", "controlled_diffusion", cb.diffusion, dh, dk)
            b0 = None
            if cb.structure_condition:
                if cs is None:
                    raise ScenarioError("control.structure_condition", "needs a nonzero diffusion")
                b0 = library.pinv_structure(cd, cs, dh, dk)
            labels = tuple(cb.labels) if cb.labels is not None else None
            if labels is not None and len(labels) != len(cb.actions):
                raise ScenarioError("control.labels", "one label per action")
            self.cproblem = ControlledSdeProblem(self.model, tuple(cb.actions), cd, cs, self.t0, init,
                                                 labels, b0)
            self.cost = _build("control.running_cost", "running_cost", cb.running_cost, dh, dk)


def _build(field: str, role: str, spec: Builtin, dh: int, dk: int):
    try:
        return library.build(role, spec.model_dump(), dh, dk)
    except ValueError as exc:
        raise ScenarioError(field, str(exc)) from None


def build_all(sc: Scenario) -> Built:
    return Built(sc)
