"""The privacy intruder: FR-driven face database, exact top-K search and recall.

Features are unit vectors stored as float64. Search ranks by cosine
similarity descending with ties broken by ascending entry_id; ground-truth
identities are only read by the metrics.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from facecloak.errors import (
    BoundsError, ConfigurationError, ConsistencyError, FaceCloakError, ShapeError, TransferError,
    UndefinedMetricError,
)
from facecloak.models.schemas import (
    GeometryStats, PPTTrainSpec, Scenario, ScenarioReport, TeamResult, TransferResult,
    UserStability,
)
from facecloak.services.face_world import UserSplit, World
from facecloak.services.fr_models import Ensemble, FRModel, embed_images
from facecloak.services.ppt_engine import PPT, protect_face, train_user_ppts

logger = logging.getLogger('facecloak')

HARD_SCENARIO = Scenario.PROT_QUERY_PROT_DB
MAX_TEAM_POOL = 6
UNIT_NORM_TOLERANCE = 1e-4

ImageTransform = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DBEntry:
    entry_id: int
    identity_id: int
    feature: np.ndarray
    content_ref: str
    protected: bool = False


class DBItem(NamedTuple):
    """One image waiting to be ingested"""
    image: torch.Tensor
    identity_id: int
    content_ref: str
    protected: bool = False


@dataclass
class Database:
    """Immutable collection of embedded entries, all produced by ``model_id``"""
    entries: List[DBEntry]
    model_id: str
    features: np.ndarray = field(init=False, repr=False)
    entry_ids: np.ndarray = field(init=False, repr=False)
    identity_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConsistencyError(f"Duplicate entry ids in database for {self.model_id}")
        if self.entries:
            self.features = np.stack([np.asarray(e.feature, dtype=np.float64) for e in self.entries])
            norms = np.linalg.norm(self.features, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
                raise ShapeError("Database features must be unit vectors")
        else:
            self.features = np.zeros((0, 0))
        self.entry_ids = np.asarray(ids, dtype=np.int64)
        self.identity_ids = np.asarray([e.identity_id for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def count_identity(self, identity_id: int) -> int:
        return int(np.sum(self.identity_ids == identity_id))



# ─── Ingestion and search ───────────────────────────────────────────


def _embed_items(images: Sequence[torch.Tensor], model: FRModel) -> np.ndarray:
    expected = (model.channels, model.input_size, model.input_size)
    for index, image in enumerate(images):
        if tuple(image.shape) != expected:
            raise ShapeError(f"Item {index}: model {model.model_id} expects {expected}, got {tuple(image.shape)}")
        if not bool(torch.isfinite(image).all()):
            raise ShapeError(f"Item {index}: image contains non-finite values")
    return embed_images(model, list(images)).numpy().astype(np.float64)


def build_db(items: Sequence[DBItem], model: FRModel) -> Database:
    """Embed every item with ``model``; entry_ids follow input order."""
    if not items:
        raise ConfigurationError("Cannot build a database from an empty list")
    items = [DBItem(*item) for item in items]
    features = _embed_items([item.image for item in items], model)
    entries = [
        DBEntry(
            entry_id=index,
            identity_id=item.identity_id,
            feature=features[index],
            content_ref=item.content_ref,
            protected=item.protected,
        )
        for index, item in enumerate(items)
    ]
    return Database(entries=entries, model_id=model.model_id)


def _check_model(model: FRModel, db: Database) -> None:
    if model.model_id != db.model_id:
        raise ConsistencyError(f"Database was built with {db.model_id}, query uses {model.model_id}")


def query_feature(query_image: torch.Tensor, model: FRModel) -> np.ndarray:
    return _embed_items([query_image], model)[0]


def similarities(feature: np.ndarray, db: Database) -> np.ndarray:
    """Cosine similarity of ``feature`` to every entry, in entry order."""
    feature = np.asarray(feature, dtype=np.float64)
    if len(db) and feature.shape != db.features.shape[1:]:
        raise ShapeError(f"Query feature {feature.shape} does not match database features {db.features.shape[1:]}")
    return db.features @ feature if len(db) else np.zeros(0)


def rank_order(scores: np.ndarray, entry_ids: np.ndarray) -> np.ndarray:
    """Positions sorted by score descending, ties by ascending entry id."""
    return np.lexsort((entry_ids, -scores))


def search_feature(feature: np.ndarray, db: Database, k: int) -> List[Tuple[int, float]]:
    if k < 1 or k > len(db):
        raise BoundsError(f"K={k} outside [1, {len(db)}]")
    scores = similarities(feature, db)
    order = rank_order(scores, db.entry_ids)[:k]
    return [(int(db.entry_ids[i]), float(scores[i])) for i in order]


def search(query_image: torch.Tensor, model: FRModel, db: Database, k: int) -> List[Tuple[int, float]]:
    """Exact top-K (entry_id, similarity) for a query image."""
    _check_model(model, db)
    if k < 1 or k > len(db):
        raise BoundsError(f"K={k} outside [1, {len(db)}]")
    return search_feature(query_feature(query_image, model), db, k)


def recall_from_feature(feature: np.ndarray, query_identity: int, db: Database) -> float:
    k = db.count_identity(query_identity)
    if k == 0:
        raise UndefinedMetricError(f"Identity {query_identity} has no database entries")
    scores = similarities(feature, db)
    top = rank_order(scores, db.entry_ids)[:k]
    hits = int(np.sum(db.identity_ids[top] == query_identity))
    return 100.0 * hits / k


def recall(query_image: torch.Tensor, query_identity: int, model: FRModel, db: Database) -> float:
    """Percentage of the identity's K entries found among the top-K results, K = its entry count."""
    _check_model(model, db)
    return recall_from_feature(query_feature(query_image, model), query_identity, db)


# ─── Scenarios ──────────────────────────────────────────────────────


def protected_count(n_entries: int, fraction: float) -> int:
    """Number of entries protected for a fraction, rounding halves up."""
    return min(n_entries, int(math.floor(fraction * n_entries + 0.5)))


def protected_subset(n_entries: int, fraction: float, seed: int, user_id: int) -> List[int]:
    """Seeded uniform choice of which of a user's DB entries carry protection."""
    count = protected_count(n_entries, fraction)
    if count == 0:
        return []
    rng = np.random.default_rng([seed, user_id])
    return sorted(rng.choice(n_entries, size=count, replace=False).tolist())


def _require_ppt(ppts: Dict[int, PPT], user_id: int) -> PPT:
    if user_id not in ppts:
        raise ConfigurationError(f"No PPT available for user {user_id}")
    return ppts[user_id]


def _check_black_box(ppts: Dict[int, PPT], intruder_model: FRModel) -> None:
    for user_id, ppt in ppts.items():
        meta = ppt.training_meta
        if meta is not None and intruder_model.model_id in meta.ensemble_ids:
            raise ConfigurationError(
                f"Intruder model {intruder_model.model_id} was part of user {user_id}'s PPT ensemble"
            )


def scenario_db(
    world: World,
    users: Optional[Sequence[UserSplit]],
    ppts: Dict[int, PPT],
    model: FRModel,
    scenario: Scenario,
    protected_fraction: float,
    seed: int,
    transform: Optional[ImageTransform] = None,
) -> Database:
    """The intruder's database: every user's DB images plus noise, protected per scenario."""
    users = list(world.users if users is None else users)
    transform = transform or (lambda image: image)
    items: List[DBItem] = []
    for user in users:
        db_faces = user.db_images
        chosen = set()
        if scenario.protects_db:
            chosen = set(protected_subset(len(db_faces), protected_fraction, seed, user.user_id))
        ppt = _require_ppt(ppts, user.user_id) if chosen else None
        for index, face in enumerate(db_faces):
            image = protect_face(face, ppt) if index in chosen else face.image
            items.append(DBItem(transform(image), face.identity_id, face.source_ref, index in chosen))
    for face in world.noise_images:
        items.append(DBItem(transform(face.image), face.identity_id, face.source_ref, False))
    return build_db(items, model)


def run_scenario(
    world: World,
    users: Optional[Sequence[UserSplit]],
    ppts: Dict[int, PPT],
    intruder_model: FRModel,
    scenario: Scenario,
    protected_fraction: float,
    seed: int,
    transform: Optional[ImageTransform] = None,
    allow_white_box: bool = False,
) -> ScenarioReport:
    """Build the intruder's DB, protect per scenario, and average recall per user.

    ``transform`` is applied to every DB and query image after protection
    (the adaptive intruder).
    """
    if not (0.0 <= protected_fraction <= 1.0):
        raise ConfigurationError(f"protected_fraction {protected_fraction} outside [0, 1]")
    users = list(world.users if users is None else users)
    if not users:
        raise ConfigurationError("A scenario needs at least one user")
    if not allow_white_box:
        _check_black_box(ppts, intruder_model)
    transform = transform or (lambda image: image)
    db = scenario_db(world, users, ppts, intruder_model, scenario, protected_fraction, seed, transform)

    per_user: Dict[int, float] = {}
    queries_per_user: Dict[int, int] = {}
    flat: List[float] = []
    for user in users:
        ppt = _require_ppt(ppts, user.user_id) if scenario.protects_queries else None
        queries = [protect_face(face, ppt) if ppt is not None else face.image for face in user.query_images]
        if not queries:
            raise ConfigurationError(f"User {user.user_id} has no query images")
        features = _embed_items([transform(image) for image in queries], intruder_model)
        values = [recall_from_feature(feature, user.user_id, db) for feature in features]
        flat.extend(values)
        per_user[user.user_id] = sum(values) / len(values)
        queries_per_user[user.user_id] = len(values)

    report = ScenarioReport(
        scenario=scenario,
        per_user_recall=per_user,
        mean_recall=sum(per_user.values()) / len(per_user),
        query_mean_recall=sum(flat) / len(flat),
        protected_fraction=protected_fraction,
        model_id=intruder_model.model_id,
        seed=seed,
        queries_per_user=queries_per_user,
    )
    logger.debug(
        f"{scenario.value} fraction={protected_fraction} model={intruder_model.model_id}: "
        f"mean recall {report.mean_recall:.2f}%"
    )
    return report


def user_stability(
    world: World,
    users: Optional[Sequence[UserSplit]],
    ppts: Dict[int, PPT],
    intruder_model: FRModel,
    scenario: Scenario,
    protected_fraction: float,
    seeds: Sequence[int],
) -> List[UserStability]:
    """Per-user mean and population standard deviation of recall across evaluation seeds."""
    if not seeds:
        raise ConfigurationError("Stability needs at least one evaluation seed")
    runs: Dict[int, List[float]] = {}
    for seed in seeds:
        report = run_scenario(world, users, ppts, intruder_model, scenario, protected_fraction, seed)
        for user_id, value in report.per_user_recall.items():
            runs.setdefault(user_id, []).append(value)
    return [
        UserStability(
            user_id=user_id,
            mean_recall=float(np.mean(values)),
            std_recall=float(np.std(values)),
            runs=values,
        )
        for user_id, values in sorted(runs.items())
    ]


# ─── Feature geometry ─────────────────────────────────────────────


def mean_pairwise_cosine(features: np.ndarray) -> float:
    """Mean cosine over all unordered pairs of rows."""
    n = features.shape[0]
    if n < 2:
        raise UndefinedMetricError("Pairwise cosine needs at least two features")
    gram = features @ features.T
    upper = np.triu_indices(n, k=1)
    return float(gram[upper].mean())


def feature_geometry(users: Sequence[UserSplit], ppts: Dict[int, PPT], model: FRModel) -> List[GeometryStats]:
    """Spread of each user's unprotected and protected features under ``model``."""
    stats = []
    for user in users:
        ppt = _require_ppt(ppts, user.user_id)
        faces = user.all_images
        clean = _embed_items([face.image for face in faces], model)
        protected = _embed_items([protect_face(face, ppt) for face in faces], model)
        stats.append(GeometryStats(
            user_id=user.user_id,
            unprotected_mean_cosine=mean_pairwise_cosine(clean),
            protected_mean_cosine=mean_pairwise_cosine(protected),
            cross_mean_cosine=float(np.mean(np.sum(clean * protected, axis=1))),
        ))
    return stats


# ─── Transfer studies ───────────────────────────────────────────────


def leave_one_out(
    world: World,
    users: Optional[Sequence[UserSplit]],
    ensemble: Ensemble,
    spec: PPTTrainSpec,
    seed: int = 0,
    texture_size: Optional[int] = None,
) -> Dict[str, TransferResult]:
    """Hold out each member in turn, train on the rest, evaluate the hard scenario with the held-out model."""
    if len(ensemble) < 2:
        raise ConfigurationError("Leave-one-out needs an ensemble of at least two models")
    users = list(world.users if users is None else users)
    results: Dict[str, TransferResult] = {}
    for held_out in ensemble.members:
        train_ensemble = ensemble.without(held_out.model_id)
        try:
            ppts, _ = train_user_ppts(users, train_ensemble, spec, texture_size)
            baseline = run_scenario(world, users, {}, held_out, Scenario.BASELINE, 0.0, seed)
            protected = run_scenario(world, users, ppts, held_out, HARD_SCENARIO, 1.0, seed)
        except FaceCloakError as e:
            logger.error(f"Leave-one-out failed for {held_out.model_id}: {e}")
            raise TransferError(held_out.model_id, e) from e
        results[held_out.model_id] = TransferResult(
            model_id=held_out.model_id,
            train_ensemble=train_ensemble.ids,
            baseline_recall=baseline.mean_recall,
            protected_recall=protected.mean_recall,
        )
        logger.info(
            f"Held out {held_out.model_id}: baseline {baseline.mean_recall:.2f}% -> "
            f"protected {protected.mean_recall:.2f}%"
        )
    return results


def subset_transfer(
    world: World,
    users: Optional[Sequence[UserSplit]],
    pool: Ensemble,
    team_size: int,
    holdouts: Sequence[FRModel],
    spec: PPTTrainSpec,
    seed: int = 0,
    texture_size: Optional[int] = None,
) -> List[TeamResult]:
    """Train a PPT set per team of ``team_size`` pool models; rank teams by mean holdout recall."""
    if len(pool) > MAX_TEAM_POOL:
        raise ConfigurationError(f"Team enumeration is limited to pools of {MAX_TEAM_POOL} models, got {len(pool)}")
    if not (1 <= team_size <= len(pool)):
        raise ConfigurationError(f"team_size {team_size} outside [1, {len(pool)}]")
    if not holdouts:
        raise ConfigurationError("Subset transfer needs at least one holdout model")
    overlap = set(pool.ids) & {m.model_id for m in holdouts}
    if overlap:
        raise ConfigurationError(f"Holdout models also in the pool: {sorted(overlap)}")
    users = list(world.users if users is None else users)

    results: List[TeamResult] = []
    for team in itertools.combinations(pool.members, team_size):
        team_ensemble = Ensemble(list(team))
        ppts, _ = train_user_ppts(users, team_ensemble, spec, texture_size)
        holdout_recall = {
            model.model_id: run_scenario(world, users, ppts, model, HARD_SCENARIO, 1.0, seed).mean_recall
            for model in holdouts
        }
        results.append(TeamResult(
            team=team_ensemble.ids,
            holdout_recall=holdout_recall,
            mean_holdout_recall=sum(holdout_recall.values()) / len(holdout_recall),
        ))
        logger.info(f"Team {team_ensemble.ids}: mean holdout recall {results[-1].mean_holdout_recall:.2f}%")

    results.sort(key=lambda r: r.mean_holdout_recall)
    if len(results) > 1 and len({r.mean_holdout_recall for r in results}) == 1:
        logger.warning("Every team reached the same holdout recall")
    return results
