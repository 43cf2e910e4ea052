"""
Pydantic v2 models for solver parameters, run configuration and reports.
"""

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import settings


class PenaltyParams(BaseModel):
    """Switching weight alpha and Moreau-Yosida parameter gamma."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(..., gt=0.0, description="Switching penalty weight")
    gamma: float = Field(..., gt=0.0, description="Moreau-Yosida regularization parameter")

    def with_gamma(self, gamma: float) -> "PenaltyParams":
        return PenaltyParams(alpha=self.alpha, gamma=gamma)


class SolverSettings(BaseModel):
    """Newton, CG and line-search controls."""

    model_config = ConfigDict(extra="forbid")

    newton_tol_rel: float = Field(1e-6, gt=0.0, description="Relative residual tolerance")
    newton_max_iter: int = Field(30, gt=0, description="Maximal Newton iterations per gamma")
    cg_tol_rel: float = Field(1e-6, gt=0.0, description="Relative CG residual tolerance")
    cg_max_iter: int = Field(50, gt=0, description="Maximal CG iterations per Newton step")
    linesearch_factor: float = Field(0.5, gt=0.0, lt=1.0, description="Backtracking reduction factor")
    linesearch_max: int = Field(20, gt=0, description="Maximal backtracking trials")


class HomotopySchedule(BaseModel):
    """Geometric gamma continuation from gamma_start down to gamma_min."""

    model_config = ConfigDict(extra="forbid")

    gamma_start: float = Field(1e-2, gt=0.0, description="First regularization parameter")
    reduction_factor: float = Field(10.0, gt=1.0, description="Divisor between stages")
    gamma_min: float = Field(1e-12, gt=0.0, description="Smallest gamma attempted")

    @model_validator(mode="after")
    def check_order(self) -> "HomotopySchedule":
        if not self.gamma_start > self.gamma_min:
            raise ValueError("gamma_start must exceed gamma_min")
        return self

    def gammas(self) -> List[float]:
        """Stage values gamma_start / factor**k computed from gamma_start (no accumulated drift)."""
        values = []
        k = 0
        while True:
            gamma = self.gamma_start / self.reduction_factor**k
            if gamma < self.gamma_min * (1.0 - 1e-9):
                break
            values.append(gamma)
            k += 1
        return values


class RunConfig(BaseModel):
    """Validated experiment configuration (file values merged with flag overrides)."""

    model_config = ConfigDict(extra="forbid")

    N: int = Field(..., ge=1, description="Number of control components")
    alpha: float = Field(..., gt=0.0, description="Switching penalty weight")
    T: float = Field(10.0, gt=0.0, description="Time horizon")
    time_intervals: int = Field(200, gt=0, description="Number of time intervals (controls per component)")
    mesh_edge: float = Field(0.1, gt=0.0, le=2.0, description="Target mesh edge length")
    control_radius: float = Field(0.1, gt=0.0, description="Radius of the control disks")
    obs_radius: float = Field(0.5, gt=0.0, description="Radius of the observation disk")
    fixed_gamma: Optional[float] = Field(None, gt=0.0, description="Single solve at this gamma, no homotopy")
    homotopy: HomotopySchedule = Field(default_factory=HomotopySchedule)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    output_dir: str = Field(default_factory=lambda: settings.output_dir, description="Directory for result files")
    emit_svg: bool = Field(False, description="Write controls.svg")

    @field_validator("output_dir")
    @classmethod
    def validate_output_dir(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("output_dir cannot be empty")
        return v


class NewtonRecord(BaseModel):
    """One row of the Newton convergence history."""

    iteration: int
    residual_norm: float
    step_size: Optional[float] = None
    cg_iterations: int = 0
    switched_intervals: Optional[int] = Field(None, description="Intervals whose active set changed (s_k)")


class StageRecord(BaseModel):
    """Outcome of one homotopy stage."""

    gamma: float
    converged: bool
    newton_iterations: int
    last_cg_iterations: int
    failure: Optional[Literal["not_converged", "line_search_failed"]] = None
    tau: Dict[int, int] = Field(default_factory=dict)
    switch_points: int = 0
    control_norm: Optional[float] = None
    objective: Optional[float] = None
    history: List[NewtonRecord] = Field(default_factory=list)


class RunSummary(BaseModel):
    """Structured content of summary.json."""

    N: int
    alpha: float
    last_gamma: Optional[float]
    tau: Dict[int, int]
    switch_points: int
    never_active: List[int]
    objective: float
    stages: List[StageRecord]
