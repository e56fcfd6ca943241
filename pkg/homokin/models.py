from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from homokin.deformation import DeformationMatrix
from homokin.errors import SingularDeformation

Level = Literal["omd", "meanfield", "dsmc", "hydro", "compare"]
Arm = Literal["dsmc", "bgk", "euler", "navier_stokes", "navier_stokes_calibrated", "transport", "deformation"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")


# ---------- config blocks ----------

class DeformationConfig(StrictModel):
    A: List[float]

    @field_validator("A")
    @classmethod
    def _nine_values(cls, v: List[float]) -> List[float]:
        if len(v) != 9:
            raise ValueError(f"deformation.A needs 9 row-major values, got {len(v)}")
        return v

    def build(self) -> DeformationMatrix:
        return DeformationMatrix.from_config(self.A)


class PotentialConfig(StrictModel):
    kind: Literal["inverse_power", "harmonic", "truncated_lj"] = "harmonic"
    alpha: float = 1.0
    strength: float = 1.0
    k: float = 1.0
    r0: float = 0.0
    depth: float = 1.0
    sigma: float = 1.0
    cutoff: float = float("inf")
    # energy: U shifted to 0 at the cutoff; force: phi shifted too, so the force is continuous
    shift: Literal["energy", "force"] = "energy"
    epsilon_scale: float = Field(1.0, gt=0)


class LatticeConfig(StrictModel):
    extent: int = Field(1, ge=0)
    basis: Optional[List[float]] = None


class OmdConfig(StrictModel):
    n_particles: int = Field(2, ge=1)
    potential: Optional[PotentialConfig] = None
    lattice: Optional[LatticeConfig] = None
    scaling: Literal["unit", "mean_field", "boltzmann"] = "unit"
    epsilon: Optional[float] = Field(None, gt=0)
    box: float = Field(1.0, gt=0)
    theta0: float = Field(1.0, ge=0)
    initial_csv: Optional[str] = None
    verify_particle: Optional[int] = Field(None, ge=0)
    verify_nu: List[int] = [1, 0, 0]


class InitialCloudConfig(StrictModel):
    x_std: float = Field(1.0, ge=0)
    w_std: float = Field(1.0, ge=0)


class MeanfieldConfig(StrictModel):
    mode: Literal["evolve", "stability", "convergence"] = "evolve"
    n_particles: int = Field(256, ge=1)
    potential: Optional[PotentialConfig] = None
    initial: InitialCloudConfig = InitialCloudConfig()
    perturbation: float = Field(0.05, ge=0)
    tolerance: float = Field(0.05, ge=0)
    n_list: List[int] = [64, 256, 1024]
    t_eval: Optional[float] = None
    reference: Literal["exact", "self"] = "exact"
    metric: Literal["exact", "sliced"] = "exact"
    n_projections: int = Field(64, ge=1)
    initial_csv: Optional[str] = None


class CollisionKernel(StrictModel):
    kind: Literal["maxwell", "hard_sphere"] = "maxwell"
    b0: float = Field(1.0, gt=0)
    diameter: float = Field(1.0, gt=0)
    knudsen: float = Field(1.0, gt=0)


class DsmcConfig(StrictModel):
    n_sim: int = Field(10000, ge=2)
    kernel: CollisionKernel = CollisionKernel()
    rho0: float = Field(1.0, gt=0)
    theta0: float = Field(1.0, gt=0)
    covariance: Optional[List[float]] = None
    collisions: bool = True
    selfsimilar: bool = False
    require_growth: bool = True


class ViscosityLaw(StrictModel):
    mu0: float = Field(1.0, gt=0)
    omega_exp: float = 1.0
    epsilon: float = Field(0.0, ge=0)

    def mu(self, theta):
        return self.mu0 * theta ** self.omega_exp


class HydroConfig(StrictModel):
    model: Literal["euler", "navier_stokes"] = "euler"
    rho0: float = Field(1.0, gt=0)
    theta0: float = Field(1.0, gt=0)
    viscosity: ViscosityLaw = ViscosityLaw()


class CompareConfig(StrictModel):
    arm_a: Arm
    arm_b: Arm
    metric: Literal["sup_rel_dev", "W1"] = "sup_rel_dev"
    quantity: Literal["theta", "rho", "e", "P12"] = "theta"
    tolerance: float = Field(0.1, ge=0)
    calibration_A: Optional[List[float]] = None
    calibration_omega: float = 1.0


_DSMC_ARMS = {"dsmc", "bgk", "navier_stokes_calibrated", "transport", "deformation"}
_HYDRO_ARMS = {"euler", "navier_stokes"}


class ExperimentConfig(StrictModel):
    level: Level
    deformation: DeformationConfig
    dt: float = Field(gt=0)
    horizon: float = Field(gt=0)
    stride: int = Field(1, ge=1)
    seeds: List[int] = [0]
    output_dir: str = "runs"
    omd: Optional[OmdConfig] = None
    meanfield: Optional[MeanfieldConfig] = None
    dsmc: Optional[DsmcConfig] = None
    hydro: Optional[HydroConfig] = None
    compare: Optional[CompareConfig] = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        deformation = self.deformation.build()
        try:
            deformation.check_horizon(self.horizon)
        except SingularDeformation as e:
            raise ValueError(str(e))
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.level != "compare" and getattr(self, self.level) is None:
            raise ValueError(f"level '{self.level}' requires a '{self.level}' block")
        if self.level == "compare":
            if self.compare is None:
                raise ValueError("level 'compare' requires a 'compare' block")
            arms = {self.compare.arm_a, self.compare.arm_b}
            if arms & _DSMC_ARMS and self.dsmc is None:
                raise ValueError(f"arms {sorted(arms & _DSMC_ARMS)} require a 'dsmc' block")
            if arms & _HYDRO_ARMS and self.hydro is None:
                raise ValueError(f"arms {sorted(arms & _HYDRO_ARMS)} require a 'hydro' block")
        return self


# ---------- records ----------

class Moments(BaseModel):
    t: float
    rho: float
    u_w: List[float]
    e: float
    theta: float
    P: List[List[float]]
    q: List[float]


class HydroState(BaseModel):
    rho: float
    theta: float
    t: float = 0.0


class FieldHypothesisReport(BaseModel):
    C_xi: float
    L_xi: float
    C_H: float
    L_H: float
    L_P: float
    L: float
    psi_origin: float = 0.0


class StabilityReport(BaseModel):
    times: List[float]
    w1: List[float]
    bound: List[float]
    ratio_max: Optional[float] = None
    L: float
    degenerate: bool = False
    violation: bool = False
    tolerance: float


class ConvergenceRow(BaseModel):
    N: int
    seed: int
    t: float
    W1: float


class ConvergenceSummaryRow(BaseModel):
    N: int
    mean_w1: float
    std_w1: float


class ConvergenceTable(BaseModel):
    rows: List[ConvergenceRow]
    summary: List[ConvergenceSummaryRow]
    slope: float
    ci_low: float
    ci_high: float
    monotone_fraction: float
    reference: str
    metric: str


class SelfSimilarReport(BaseModel):
    beta_hat: float
    beta_stderr: float
    beta_ci_low: float
    beta_ci_high: float
    normalized_P_limit: List[List[float]]
    normalized_P_std: List[List[float]]
    drift: float
    tolerance: float
    self_similar: bool
    growth: float


class ResidualReport(BaseModel):
    t: List[float]
    r1: List[float]
    r3: List[float]
    max_r1: float
    max_r3: float
    scale: float


class ViscosityCalibration(BaseModel):
    mu0_hat: float
    ci_low: float
    ci_high: float
    omega_exp: float
    K: float
    epsilon: float
    n_samples: int


class ComparisonReport(BaseModel):
    arms: List[str]
    metric: str
    quantity: Optional[str] = None
    max_deviation: float
    tolerance: float
    passed: bool
    times: List[float] = []
    deviations: List[float] = []
    config_hash: Optional[str] = None
    seeds: List[int] = []


class SeriesPayload(BaseModel):
    name: str
    t: List[float]
    values: List[float]


class CompareRequest(BaseModel):
    arm_a: SeriesPayload
    arm_b: SeriesPayload
    tolerance: float = 0.1


class RunManifest(BaseModel):
    run_id: str
    level: str
    status: str = "queued"
    config_hash: str
    seeds: List[int]
    versions: Dict[str, str] = {}
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    wall_time: Optional[float] = None
    files: List[str] = []
    passed: Optional[bool] = None
    error: Optional[str] = None


class RunSubmitted(BaseModel):
    run_id: str
    status: str
