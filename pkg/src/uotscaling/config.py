"""JSON experiment configuration.

Unknown keys are rejected everywhere.  Relative file paths are resolved
against the directory holding the config file.
"""

from __future__ import annotations

import json
import math
import os
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .divergences import DivergenceSpec, Kind
from .geometry import DiscreteSpace, build_cost_quadratic, build_cost_wf
from .io import read_marginal_csv
from .scaling import ScalingOptions

PROBLEMS = ("transport", "barycenter", "flow", "mass", "generalized", "colortransfer")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceConfig(_Strict):
    shape: List[int] = Field(default_factory=lambda: [100])
    lo: float = 0.0
    hi: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not 1 <= len(self.shape) <= 2:
            raise ValueError("only 1-D and 2-D grids are supported")
        if any(n < 1 for n in self.shape):
            raise ValueError("resolutions must be positive")
        if not self.hi > self.lo:
            raise ValueError("need hi > lo")
        return self

    def build(self) -> DiscreteSpace:
        axes = [np.linspace(self.lo, self.hi, n) for n in self.shape]
        total = int(np.prod(self.shape))
        return DiscreteSpace.grid(axes, np.full(total, 1.0 / total))


class MarginalConfig(_Strict):
    """A density on the space: read from CSV or generated."""

    file: Optional[str] = None
    generator: Optional[Literal["gaussian", "uniform", "random", "bumps"]] = None
    center: List[float] = Field(default_factory=lambda: [0.5])
    width: float = 0.1
    height: float = 1.0
    bumps: List[Tuple[float, float, float]] = Field(default_factory=list)
    floor: float = 0.0
    # rescale to unit mass with respect to the space weights
    normalize: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.generator is None):
            raise ValueError("give exactly one of 'file' or 'generator'")
        if self.width <= 0 or self.height < 0 or self.floor < 0:
            raise ValueError("width must be positive, height and floor nonnegative")
        return self

    def build(self, X: DiscreteSpace, rng, base_dir=".") -> np.ndarray:
        if self.file is not None:
            path = os.path.join(base_dir, self.file)
            _, vals = read_marginal_csv(path)
            if vals.shape[0] != len(X):
                raise ValueError(f"{path}: {vals.shape[0]} values for {len(X)} points")
            return self._finish(vals, X)
        pts = X.points
        if self.generator == "uniform":
            out = np.full(len(X), self.height)
        elif self.generator == "random":
            out = self.height * rng.random(len(X))
        elif self.generator == "gaussian":
            c = np.resize(np.asarray(self.center, float), X.dim)
            out = self.height * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * self.width**2))
        else:
            out = np.zeros(len(X))
            for c, w, h in self.bumps:
                out += h * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2 * w**2))
        return self._finish(out + self.floor, X)

    def _finish(self, vals, X):
        if not self.normalize:
            return vals
        mass = float(vals @ X.weights)
        if not mass > 0:
            raise ValueError("cannot normalize a zero density")
        return vals / mass


class DivergenceConfig(_Strict):
    kind: Literal["equality", "kl", "tv", "range"] = "equality"
    lam: float = 1.0
    alpha: float = 0.0
    beta: float = 1.0

    def build(self, p) -> DivergenceSpec:
        return DivergenceSpec(Kind(self.kind), p, lam=self.lam, alpha=self.alpha,
                              beta=self.beta)


class SolverConfig(_Strict):
    max_iter: int = 10000
    tol: float = 1e-8
    gap_tol: Optional[float] = None
    absorb_threshold: float = 50.0
    absorb_check_every: int = 10
    eps0: Optional[float] = None
    divisions: int = 10
    every: int = 100
    gap_every: int = 0
    stabilized: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.max_iter < 1 or self.tol <= 0 or self.every < 1 or self.divisions < 0:
            raise ValueError("invalid solver options")
        return self

    def options(self) -> ScalingOptions:
        d = self.model_dump()
        d.pop("stabilized")
        return ScalingOptions(**d)


class CostConfig(_Strict):
    kind: Literal["quadratic", "wf"] = "quadratic"
    cutoff: float = math.pi / 2

    def build(self, X, Y):
        if self.kind == "wf":
            return build_cost_wf(X, Y, self.cutoff)
        return build_cost_quadratic(X, Y)


class BarycenterConfig(_Strict):
    weights: List[float] = Field(default_factory=lambda: [0.5, 0.5])
    kind: Literal["equality", "kl", "tv", "range"] = "equality"
    lam: float = 1.0
    beta1: float = 0.0
    beta2: float = 1.0


class FlowConfig(_Strict):
    energy: Literal["entropy_fit", "congestion", "tumor", "two_species"] = "tumor"
    tau: float = 0.006
    alpha: float = 1.0
    weight: float = 1.0
    steps: int = 10

    @model_validator(mode="after")
    def _check(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        return self


class MassConfig(_Strict):
    total: DivergenceConfig = Field(default_factory=lambda: DivergenceConfig(kind="equality"))
    reference: float = 1.0


class ColorConfig(_Strict):
    source: str
    target: str
    resolution: Tuple[int, int, int] = (64, 32, 32)
    output: str = "transferred.ppm"
    keep_detail: bool = False


class ExperimentConfig(_Strict):
    kind: Optional[Literal[PROBLEMS]] = None
    space: SpaceConfig = Field(default_factory=SpaceConfig)
    marginals: List[MarginalConfig] = Field(default_factory=list)
    first: DivergenceConfig = Field(default_factory=DivergenceConfig)
    second: DivergenceConfig = Field(default_factory=DivergenceConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    epsilon: float = 1e-2
    solver: SolverConfig = Field(default_factory=SolverConfig)
    barycenter: BarycenterConfig = Field(default_factory=BarycenterConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    mass: MassConfig = Field(default_factory=MassConfig)
    color: Optional[ColorConfig] = None
    plan_threshold: float = 1e-10
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        return self


def load_config(path) -> Tuple[ExperimentConfig, str]:
    """Parse a config file; returns the config and its directory."""
    with open(path) as fh:
        data = json.load(fh)
    return ExperimentConfig.model_validate(data), os.path.dirname(os.path.abspath(path))
