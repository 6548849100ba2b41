from typing import Annotated, Literal, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationInfo,
    field_validator,
    model_validator,
)

# None marks a required parameter.
_PAYOFF_PARAMS: dict[str, dict[str, float | None]] = {
    "piecewise_linear_cap": {"K": None},
    "softplus_concave": {"a": 0.0, "s": 1.0},
    "lookup_table": {},
    "linear": {"a": 0.0, "b": 1.0},
    "exponential": {"rate": 1.0},
    "constant": {"K": None},
}

_COST_PARAMS: dict[str, dict[str, float | None]] = {
    "constant": {"c": None},
    "affine_positive": {"a": None, "b": None},
    "lookup_table": {},
}

_STEP_PARAMS: dict[str, dict[str, float | None]] = {
    "two_point": {"p": None, "u": 1.0, "d": 1.0},
    "lattice_pmf": {"unit": 1.0},
    "gaussian": {"m": None, "s": None},
    "levy_increment": {"dt": None},
}

_LEVY_PARAMS: dict[str, dict[str, float | None]] = {
    "bm_drift": {"mu": None, "sigma": None},
    "cpp_drift": {"drift": None, "rate": None},
    "jump_diffusion": {"mu": None, "sigma": None, "rate": None},
}

_JUMP_PARAMS: dict[str, dict[str, float | None]] = {
    "normal": {"mean": None, "std": 0.0},
    "exponential": {"mean": None},
}


def _fill_params(
    kind: str, params: dict[str, float], table: dict, label: str
) -> dict[str, float]:
    defaults = table[kind]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(
            f"Unknown {label} params for kind '{kind}': {sorted(unknown)}. "
            f"Allowed: {sorted(defaults)}"
        )
    filled: dict[str, float] = {}
    for name, default in defaults.items():
        if name in params:
            filled[name] = float(params[name])
        elif default is None:
            raise ValueError(f"{label} kind '{kind}' requires param '{name}'")
        else:
            filled[name] = default
    return filled


class LookupTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: list[float]
    y: list[float]
    extrapolate: Literal["refuse", "clamp"] = "refuse"

    @model_validator(mode="after")
    def check_knots(self) -> "LookupTable":
        if len(self.x) < 2 or len(self.x) != len(self.y):
            raise ValueError("lookup table needs at least two knots and len(x) == len(y)")
        if any(b <= a for a, b in zip(self.x, self.x[1:])):
            raise ValueError("lookup table knots must be strictly increasing")
        return self


class PayoffSpec(BaseModel):
    """Payoff gamma; the affine post-transform scale * gamma + offset applies to every kind."""

    model_config = ConfigDict(frozen=True)

    kind: Literal[
        "piecewise_linear_cap",
        "softplus_concave",
        "lookup_table",
        "linear",
        "exponential",
        "constant",
    ]
    params: dict[str, float] = Field(default_factory=dict)
    table: LookupTable | None = None
    scale: float = Field(default=1.0, gt=0)
    offset: float = 0.0

    @field_validator("params")
    def check_params(cls, v, info: ValidationInfo):
        kind = info.data.get("kind")
        if kind is None:
            return v
        filled = _fill_params(kind, v, _PAYOFF_PARAMS, "payoff")
        if kind == "softplus_concave" and filled["s"] <= 0:
            raise ValueError("softplus_concave scale 's' must be positive")
        if kind == "exponential" and filled["rate"] <= 0:
            raise ValueError("exponential 'rate' must be positive")
        return filled

    @model_validator(mode="after")
    def check_table(self) -> "PayoffSpec":
        if (self.kind == "lookup_table") != (self.table is not None):
            raise ValueError("a table is required for, and only for, kind 'lookup_table'")
        return self


class CostSpec(BaseModel):
    """Running cost h (also used for the positive weight g)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant", "affine_positive", "lookup_table"]
    params: dict[str, float] = Field(default_factory=dict)
    table: LookupTable | None = None

    @field_validator("params")
    def check_params(cls, v, info: ValidationInfo):
        kind = info.data.get("kind")
        if kind is None:
            return v
        return _fill_params(kind, v, _COST_PARAMS, "cost")

    @model_validator(mode="after")
    def check_table(self) -> "CostSpec":
        if (self.kind == "lookup_table") != (self.table is not None):
            raise ValueError("a table is required for, and only for, kind 'lookup_table'")
        return self


class JumpLaw(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["normal", "exponential"]
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("params")
    def check_params(cls, v, info: ValidationInfo):
        kind = info.data.get("kind")
        if kind is None:
            return v
        filled = _fill_params(kind, v, _JUMP_PARAMS, "jump law")
        if kind == "normal" and filled["std"] < 0:
            raise ValueError("normal jump 'std' must be non-negative")
        if kind == "exponential" and filled["mean"] == 0:
            raise ValueError("exponential jump 'mean' must be non-zero")
        return filled


class LevySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["bm_drift", "cpp_drift", "jump_diffusion"]
    params: dict[str, float] = Field(default_factory=dict)
    jumps: JumpLaw | None = None

    @field_validator("params")
    def check_params(cls, v, info: ValidationInfo):
        kind = info.data.get("kind")
        if kind is None:
            return v
        filled = _fill_params(kind, v, _LEVY_PARAMS, "levy")
        if "sigma" in filled and filled["sigma"] <= 0:
            raise ValueError("'sigma' must be positive")
        if "rate" in filled and filled["rate"] < 0:
            raise ValueError("jump 'rate' must be non-negative")
        return filled

    @model_validator(mode="after")
    def check_jumps(self) -> "LevySpec":
        if (self.kind == "bm_drift") != (self.jumps is None):
            raise ValueError("a jump law is required for, and only for, jump kinds")
        return self


class StepDistribution(BaseModel):
    """Law of one random-walk increment X_1."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["two_point", "lattice_pmf", "gaussian", "levy_increment"]
    params: dict[str, float] = Field(default_factory=dict)
    support: list[int] | None = None
    probs: list[float] | None = None
    levy: LevySpec | None = None

    @field_validator("params")
    def check_params(cls, v, info: ValidationInfo):
        kind = info.data.get("kind")
        if kind is None:
            return v
        filled = _fill_params(kind, v, _STEP_PARAMS, "step")
        if kind == "two_point":
            if not 0.0 <= filled["p"] <= 1.0:
                raise ValueError("two_point 'p' must lie in [0, 1]")
            if filled["u"] <= 0 or filled["d"] <= 0:
                raise ValueError("two_point step sizes 'u' and 'd' must be positive")
        if kind == "lattice_pmf" and filled["unit"] <= 0:
            raise ValueError("lattice 'unit' must be positive")
        if kind == "gaussian" and filled["s"] < 0:
            raise ValueError("gaussian 's' must be non-negative")
        if kind == "levy_increment" and filled["dt"] <= 0:
            raise ValueError("levy_increment 'dt' must be positive")
        return filled

    @model_validator(mode="after")
    def check_shape(self) -> "StepDistribution":
        if self.kind == "lattice_pmf":
            if not self.support or self.probs is None:
                raise ValueError("lattice_pmf needs 'support' and 'probs'")
            if len(self.support) != len(self.probs):
                raise ValueError("lattice_pmf 'support' and 'probs' differ in length")
            if len(set(self.support)) != len(self.support):
                raise ValueError("lattice_pmf support points must be distinct")
            if any(q < 0 for q in self.probs):
                raise ValueError("lattice_pmf probabilities must be non-negative")
        if (self.kind == "levy_increment") != (self.levy is not None):
            raise ValueError("'levy' is required for, and only for, kind 'levy_increment'")
        return self


class FiniteChainSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["finite_chain"] = "finite_chain"
    states: list[float]
    kernel: list[list[float]]

    @model_validator(mode="after")
    def check_shape(self) -> "FiniteChainSpec":
        m = len(self.states)
        if m < 1:
            raise ValueError("a finite chain needs at least one state")
        if any(b <= a for a, b in zip(self.states, self.states[1:])):
            raise ValueError("chain states must be strictly increasing")
        if len(self.kernel) != m or any(len(row) != m for row in self.kernel):
            raise ValueError(f"kernel must be a {m}x{m} matrix")
        if any(q < 0 for row in self.kernel for q in row):
            raise ValueError("kernel entries must be non-negative")
        return self


Process = Annotated[
    Union[StepDistribution, FiniteChainSpec, LevySpec], Field(discriminator="kind")
]


class ProblemSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    process: Process
    payoff: PayoffSpec
    cost: CostSpec
    weight: CostSpec | None = None


class MCConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    paths: int = Field(default=10_000, ge=100)
    seed: int = Field(default=0, ge=0, lt=2**64)
    max_steps: int = Field(default=100_000, ge=1)
    ci_level: float = Field(default=0.99, gt=0.0, lt=1.0)
    block_size: int = Field(default=4096, ge=1)
    threads: int = Field(default=1, ge=1)
    skeleton_dt: float = Field(default=2.0**-12, gt=0.0)
    levy_delta: float = Field(default=2.0**-4, gt=0.0)
    bisection_budget: int = Field(default=16, ge=1)


class ProbeGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    lo: float = -20.0
    hi: float = 20.0
    count: int = Field(default=512, ge=2)

    @model_validator(mode="after")
    def check_range(self) -> "ProbeGrid":
        if self.hi <= self.lo:
            raise ValueError("probe grid needs hi > lo")
        return self


class SolveConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    bracket: tuple[float, float] = (-10.0, 10.0)
    tol: float = Field(default=1e-6, gt=0.0)
    grid: tuple[float, float, int] | None = None


class DPConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    domain: tuple[float, float] | None = None
    tol: float = Field(default=1e-10, gt=0.0)
    lower_boundary: Literal["reflect_penalty", "reflect"] = "reflect_penalty"


class IdentityConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float | None = None
    y: float | None = None


class DiscretizeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    levels: list[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    scheme: Literal["spatial", "time"] = "spatial"
    probes: list[float] | None = None
    range: tuple[float, float] = (-20.0, 20.0)

    @field_validator("levels")
    def check_levels(cls, v):
        if not v or any(n < 0 for n in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("levels must be a non-empty increasing list of n >= 0")
        return v


class AppConfig(BaseModel):
    """One problem document: the problem itself plus per-command sections."""

    model_config = ConfigDict(frozen=True)

    process: Process
    payoff: PayoffSpec
    cost: CostSpec
    weight: CostSpec | None = None
    mc: MCConfig = Field(default_factory=MCConfig)
    probes: ProbeGrid = Field(default_factory=ProbeGrid)
    solve: SolveConfig = Field(default_factory=SolveConfig)
    dp: DPConfig = Field(default_factory=DPConfig)
    identity: IdentityConfig = Field(default_factory=IdentityConfig)
    discretize: DiscretizeConfig = Field(default_factory=DiscretizeConfig)

    @property
    def problem(self) -> ProblemSpec:
        return ProblemSpec(
            process=self.process, payoff=self.payoff, cost=self.cost, weight=self.weight
        )

    @classmethod
    def load(cls, path: str = "config.yaml") -> "AppConfig":
        # JSON documents are valid YAML.
        with open(path, "r") as f:
            raw_config = yaml.safe_load(f)
        if not isinstance(raw_config, dict):
            raise ValueError(f"{path}: expected a mapping at the top level")
        return cls(**raw_config)
