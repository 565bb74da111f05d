"""Pydantic models for configuration and reports"""
import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Pose limits of the head proxy
YAW_LIMIT = math.pi / 2
PITCH_LIMIT = math.pi / 4
ROLL_LIMIT = math.pi / 4


def _check_range(name: str, bounds: Tuple[float, float], low: float, high: float) -> Tuple[float, float]:
    lo, hi = bounds
    if lo > hi:
        raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    if lo < low or hi > high:
        raise ValueError(f"{name}: {bounds} outside [{low}, {high}]")
    return bounds


# ─── World ──────────────────────────────────────────────────────────


class FacePose(BaseModel):
    """Rigid pose, expression and lighting of one render"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    yaw: float = Field(0.0, ge=-YAW_LIMIT, le=YAW_LIMIT, description="Rotation about the vertical axis (radians)")
    pitch: float = Field(0.0, ge=-PITCH_LIMIT, le=PITCH_LIMIT, description="Nod (radians)")
    roll: float = Field(0.0, ge=-ROLL_LIMIT, le=ROLL_LIMIT, description="In-plane tilt (radians)")
    expression: float = Field(0.0, ge=0.0, le=1.0, description="Surface deformation amount")
    scale: float = Field(1.0, gt=0.0, description="Head size relative to the frame")
    lighting: float = Field(1.0, ge=0.5, le=1.0, description="Light intensity")


class WorldConfig(BaseModel):
    """Synthetic population and renderer settings"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    image_size: int = Field(64, ge=16, le=512, description="Rendered image height and width")
    texture_size: int = Field(64, ge=4, le=1024, description="UV texture height and width")
    channels: Literal[1, 3] = 3
    n_users: int = Field(20, ge=1)
    n_noise: int = Field(100, ge=0)
    per_identity: int = Field(20, ge=5, description="Renders per user or noise identity")
    n_fr_identities: int = Field(40, ge=2, description="Identities reserved for FR model training")
    fr_per_identity: int = Field(16, ge=2)
    seed: int = Field(0, ge=0)
    yaw_range: Tuple[float, float] = (-0.8, 0.8)
    pitch_range: Tuple[float, float] = (-0.3, 0.3)
    roll_range: Tuple[float, float] = (-0.2, 0.2)
    expression_range: Tuple[float, float] = (0.0, 1.0)
    scale_range: Tuple[float, float] = (0.85, 1.0)
    lighting_range: Tuple[float, float] = (0.7, 1.0)
    texture_blobs: int = Field(14, ge=1, description="Coloured blobs composing each identity texture")
    background: float = Field(0.5, ge=0.0, le=1.0)
    separation_floor: float = Field(0.03, ge=0.0, description="Minimum mean |texture difference| between identities")

    @model_validator(mode='after')
    def check_ranges(self):
        _check_range('yaw_range', self.yaw_range, -YAW_LIMIT, YAW_LIMIT)
        _check_range('pitch_range', self.pitch_range, -PITCH_LIMIT, PITCH_LIMIT)
        _check_range('roll_range', self.roll_range, -ROLL_LIMIT, ROLL_LIMIT)
        _check_range('expression_range', self.expression_range, 0.0, 1.0)
        _check_range('scale_range', self.scale_range, 1e-3, 10.0)
        _check_range('lighting_range', self.lighting_range, 0.5, 1.0)
        return self


# ─── FR models ──────────────────────────────────────────────────────


class FRTrainSpec(BaseModel):
    """Training recipe for one toy face-recognition embedder"""
    model_config = ConfigDict(extra='forbid')

    model_id: str = "fr"
    architecture: Literal["conv3", "conv4"] = "conv3"
    loss: Literal["softmax", "arcface"] = "softmax"
    identity_subset: Literal["all", "even", "odd"] = "all"
    feature_dim: int = Field(32, ge=2)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(2e-3, gt=0.0)
    margin: float = Field(0.3, ge=0.0, description="Additive angular margin")
    scale: float = Field(16.0, gt=0.0, description="Logit scale of the angular-margin head")
    seed: int = Field(0, ge=0)
    holdout_fraction: float = Field(0.2, gt=0.0, lt=1.0, description="Renders per identity kept for verification")
    accuracy_floor: float = Field(0.9, ge=0.0, le=1.0)
    verification_triples: int = Field(2000, ge=10)
    augment: bool = True


class RosterEntry(BaseModel):
    """One member of the experiment's model collection"""
    model_config = ConfigDict(extra='forbid')

    model_id: str
    architecture: Literal["conv3", "conv4"] = "conv3"
    loss: Literal["softmax", "arcface"] = "softmax"
    seed: int = Field(0, ge=0)
    identity_subset: Literal["all", "even", "odd"] = "all"


# ─── PPT ────────────────────────────────────────────────────────────


class PPTTrainSpec(BaseModel):
    """Signed-gradient training of a privacy protection texture"""
    model_config = ConfigDict(extra='forbid')

    epsilon: float = Field(0.063, gt=0.0, le=1.0, description="L-infinity bound of the texture")
    eta: Optional[float] = Field(None, ge=0.0, description="Step size; defaults to epsilon/10")
    omega: float = Field(0.025, ge=0.0, description="Allowed mean SSIM drop")
    batch_size: int = Field(4, ge=2)
    iterations: int = Field(1000, ge=0)
    seed: int = Field(0, ge=0)
    gamma: float = Field(1e-4, gt=0.0, description="Ridge added to the Gram matrix")
    lambda_init: float = Field(1.0, gt=0.0)
    lambda_up: float = Field(1.2, ge=1.0)
    lambda_down: float = Field(0.9, gt=0.0, le=1.0)
    lambda_max: float = Field(1e6, gt=0.0)
    lambda_min: float = Field(0.1, gt=0.0)
    use_logdet_term: bool = True
    use_sim_term: bool = True
    deformation: Literal["uv", "flat"] = "uv"
    log_every: int = Field(100, ge=1)

    @model_validator(mode='before')
    @classmethod
    def default_eta(cls, data):
        if isinstance(data, dict) and data.get('eta') is None:
            data = dict(data)
            data['eta'] = data.get('epsilon', 0.063) / 10.0
        return data

    @model_validator(mode='after')
    def check_lambda_bounds(self):
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min exceeds lambda_max")
        return self


class PPTTrainingMeta(BaseModel):
    """Provenance stored alongside a trained texture"""
    epsilon: float
    eta: float
    omega: float
    batch_size: int
    iterations: int
    ensemble_ids: List[str]
    seed: int
    deformation: Literal["uv", "flat"] = "uv"
    use_logdet_term: bool = True
    use_sim_term: bool = True

    @classmethod
    def from_spec(cls, spec: PPTTrainSpec, ensemble_ids: List[str], batch_size: int) -> "PPTTrainingMeta":
        return cls(
            epsilon=spec.epsilon,
            eta=spec.eta,
            omega=spec.omega,
            batch_size=batch_size,
            iterations=spec.iterations,
            ensemble_ids=list(ensemble_ids),
            seed=spec.seed,
            deformation=spec.deformation,
            use_logdet_term=spec.use_logdet_term,
            use_sim_term=spec.use_sim_term,
        )


class LossBreakdown(BaseModel):
    """Loss terms of one training iteration"""
    iteration: int
    protect_logdet_term: float
    protect_sim_term: float
    percept_term: float = Field(..., ge=0.0)
    lambda_ssim: float
    total: float
    mean_ssim: float
    max_abs_texture: float = 0.0

    @classmethod
    def from_terms(
        cls,
        iteration: int,
        logdet: float,
        sim: float,
        percept: float,
        lambda_ssim: float,
        mean_ssim: float,
        max_abs_texture: float = 0.0,
    ) -> "LossBreakdown":
        return cls(
            iteration=iteration,
            protect_logdet_term=logdet,
            protect_sim_term=sim,
            percept_term=percept,
            lambda_ssim=lambda_ssim,
            total=logdet + sim + lambda_ssim * percept,
            mean_ssim=mean_ssim,
            max_abs_texture=max_abs_texture,
        )


# ─── Robustness ─────────────────────────────────────────────────────


class AttackSpec(BaseModel):
    """Image transformation applied by an adaptive intruder"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["gaussian", "median", "jpeg", "resize"]
    parameter: float

    @model_validator(mode='after')
    def check_parameter(self):
        p = self.parameter
        if self.kind == "gaussian" and not (0.0 < p <= 10.0):
            raise ValueError(f"gaussian sigma must lie in (0, 10], got {p}")
        if self.kind == "median" and (p != int(p) or int(p) < 1 or int(p) % 2 == 0 or p > 15):
            raise ValueError(f"median window must be an odd integer in [1, 15], got {p}")
        if self.kind == "jpeg" and (p != int(p) or not (1 <= p <= 100)):
            raise ValueError(f"jpeg quality must be an integer in [1, 100], got {p}")
        if self.kind == "resize" and not (0.0 < p < 1.0):
            raise ValueError(f"resize scale must lie in (0, 1), got {p}")
        return self

    @property
    def label(self) -> str:
        value = int(self.parameter) if self.kind in ("median", "jpeg") else self.parameter
        return f"{self.kind}:{value}"


DEFAULT_ATTACKS = [
    AttackSpec(kind="gaussian", parameter=0.5),
    AttackSpec(kind="gaussian", parameter=1.0),
    AttackSpec(kind="median", parameter=3),
    AttackSpec(kind="jpeg", parameter=75),
    AttackSpec(kind="jpeg", parameter=90),
    AttackSpec(kind="resize", parameter=0.5),
    AttackSpec(kind="resize", parameter=0.75),
]


# ─── Retrieval reports ──────────────────────────────────────────────


class Scenario(str, Enum):
    """Which side of the search engine carries protection"""
    UNPROT_QUERY_PROT_DB = "unprot_query/prot_db"
    PROT_QUERY_UNPROT_DB = "prot_query/unprot_db"
    PROT_QUERY_PROT_DB = "prot_query/prot_db"
    BASELINE = "baseline"

    @property
    def protects_queries(self) -> bool:
        return self in (Scenario.PROT_QUERY_UNPROT_DB, Scenario.PROT_QUERY_PROT_DB)

    @property
    def protects_db(self) -> bool:
        return self in (Scenario.UNPROT_QUERY_PROT_DB, Scenario.PROT_QUERY_PROT_DB)

    @property
    def slug(self) -> str:
        return self.value.replace("/", "__")


class ScenarioReport(BaseModel):
    """Recall statistics of one scenario evaluation"""
    scenario: Scenario
    per_user_recall: Dict[int, float]
    mean_recall: float
    query_mean_recall: float
    protected_fraction: float = Field(..., ge=0.0, le=1.0)
    model_id: str
    seed: int
    queries_per_user: Dict[int, int] = Field(default_factory=dict)

    @model_validator(mode='after')
    def check_recall(self):
        values = list(self.per_user_recall.values())
        for value in values + [self.mean_recall, self.query_mean_recall]:
            if not (0.0 <= value <= 100.0):
                raise ValueError(f"recall {value} outside [0, 100]")
        if values:
            expected = sum(values) / len(values)
            if abs(expected - self.mean_recall) > 1e-9:
                raise ValueError(f"mean_recall {self.mean_recall} != mean of per-user recall {expected}")
        return self


class TransferResult(BaseModel):
    """Leave-one-out outcome for one held-out intruder model"""
    model_id: str
    train_ensemble: List[str]
    baseline_recall: float
    protected_recall: float

    @property
    def reduction(self) -> Optional[float]:
        """baseline / protected recall; None when protection drove recall to zero."""
        if self.protected_recall == 0:
            return None
        return self.baseline_recall / self.protected_recall


class TeamResult(BaseModel):
    """Holdout recall of one PPT training team"""
    team: List[str]
    holdout_recall: Dict[str, float]
    mean_holdout_recall: float


class AttackRow(BaseModel):
    """Recall under one attack setting"""
    kind: str
    parameter: Optional[float] = None
    mean_recall: float
    baseline_recall: float
    per_user_recall: Dict[int, float]


class AttackSweepReport(BaseModel):
    """Protected and baseline recall under every attack"""
    scenario: Scenario
    model_id: str
    seed: int
    unattacked_recall: float
    unattacked_baseline_recall: float
    rows: List[AttackRow]


class GeometryStats(BaseModel):
    """Feature-space spread of one user's images"""
    user_id: int
    unprotected_mean_cosine: float
    protected_mean_cosine: float
    cross_mean_cosine: float


class QualityStats(BaseModel):
    """Image-quality metrics of one user's protected images"""
    user_id: int
    ssim: float
    psnr: Optional[float] = Field(None, description="Mean PSNR in dB over changed images; None if nothing changed")
    l0: float
    images: int


class UserStability(BaseModel):
    """Per-user recall across evaluation seeds"""
    user_id: int
    mean_recall: float
    std_recall: float
    runs: List[float]


# ─── Experiment ─────────────────────────────────────────────────────


class TransferConfig(BaseModel):
    """Leave-one-out and team enumeration settings"""
    model_config = ConfigDict(extra='forbid')

    pool_ids: List[str] = Field(default_factory=list)
    holdout_ids: List[str] = Field(default_factory=list)
    team_size: int = Field(2, ge=1)
    run_subsets: bool = False


def _default_roster() -> List[RosterEntry]:
    return [
        RosterEntry(model_id="c3-soft-s1", architecture="conv3", loss="softmax", seed=1, identity_subset="all"),
        RosterEntry(model_id="c4-arc-s2", architecture="conv4", loss="arcface", seed=2, identity_subset="all"),
        RosterEntry(model_id="c3-arc-s3", architecture="conv3", loss="arcface", seed=3, identity_subset="even"),
        RosterEntry(model_id="c4-soft-s4", architecture="conv4", loss="softmax", seed=4, identity_subset="odd"),
    ]


class ExperimentConfig(BaseModel):
    """Everything an experiment directory is built from"""
    model_config = ConfigDict(extra='forbid')

    world: WorldConfig = Field(default_factory=WorldConfig)
    fr_training: FRTrainSpec = Field(default_factory=FRTrainSpec)
    fr_roster: List[RosterEntry] = Field(default_factory=_default_roster)
    intruder_model_id: str = "c4-soft-s4"
    ensemble_model_ids: Optional[List[str]] = None
    ppt_training: PPTTrainSpec = Field(default_factory=PPTTrainSpec)
    scenarios: List[Scenario] = Field(default_factory=lambda: list(Scenario))
    protected_fractions: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    attacks: List[AttackSpec] = Field(default_factory=lambda: list(DEFAULT_ATTACKS))
    eval_seeds: List[int] = Field(default_factory=lambda: [0])
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    output_dir: str = "experiments/default"
    seed: int = Field(0, ge=0)

    @field_validator('protected_fractions')
    @classmethod
    def check_fractions(cls, value: List[float]) -> List[float]:
        for fraction in value:
            if not (0.0 <= fraction <= 1.0):
                raise ValueError(f"protected fraction {fraction} outside [0, 1]")
        return value

    @model_validator(mode='after')
    def resolve_models(self):
        ids = [entry.model_id for entry in self.fr_roster]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Duplicate model ids in fr_roster: {ids}")
        known = set(ids)
        if self.intruder_model_id not in known:
            raise ValueError(f"Intruder model {self.intruder_model_id} is not in fr_roster")
        if self.ensemble_model_ids is None:
            self.ensemble_model_ids = [m for m in ids if m != self.intruder_model_id]
        if not self.ensemble_model_ids:
            raise ValueError("The PPT ensemble is empty")
        for model_id in self.ensemble_model_ids + self.transfer.pool_ids + self.transfer.holdout_ids:
            if model_id not in known:
                raise ValueError(f"Unknown model id {model_id}")
        if self.intruder_model_id in self.ensemble_model_ids:
            raise ValueError("The intruder model must be held out of the PPT ensemble")
        return self

    def roster_entry(self, model_id: str) -> RosterEntry:
        for entry in self.fr_roster:
            if entry.model_id == model_id:
                return entry
        raise KeyError(model_id)

    def train_spec_for(self, model_id: str) -> FRTrainSpec:
        """Merge the shared FR recipe with one roster entry."""
        entry = self.roster_entry(model_id)
        return self.fr_training.model_copy(update={
            'model_id': entry.model_id,
            'architecture': entry.architecture,
            'loss': entry.loss,
            'identity_subset': entry.identity_subset,
            'seed': self.seed * 1000 + entry.seed,
        })

    def ppt_base_spec(self) -> PPTTrainSpec:
        """PPT recipe keyed to the master seed; per-user seeds derive from it."""
        return self.ppt_training.model_copy(update={'seed': self.seed})

    def ppt_spec_for(self, user_id: int) -> PPTTrainSpec:
        return self.ppt_training.model_copy(update={'seed': self.seed * 1000 + user_id})
