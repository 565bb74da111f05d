"""Desk-scale directional checks of the whole method.

These train real toy FR models and PPTs and take several minutes; run with
``pytest -m slow``.
"""
from dataclasses import dataclass
from typing import Dict, List

import pytest
import torch

from facecloak.models.schemas import (
    AttackSpec, FRTrainSpec, LossBreakdown, PPTTrainSpec, Scenario, WorldConfig,
)
from facecloak.services.face_world import RenderedFace, World, sample_fr_training_set, world_from_config
from facecloak.services.fr_models import Ensemble, FRModel, cosine_sim, embed, train_fr
from facecloak.services.ppt_engine import PPT, protect_face, train_user_ppts
from facecloak.services.retrieval import HARD_SCENARIO, feature_geometry, leave_one_out, run_scenario
from facecloak.services.robustness import attack_sweep, l0_normalized

pytestmark = pytest.mark.slow

EPSILON = 0.063
# Largest drift of the unprotected baseline under the mild attack grid below
BASELINE_ATTACK_BAND = 15.0
ROSTER = [
    ("c3-soft", "conv3", "softmax", 1),
    ("c4-arc", "conv4", "arcface", 2),
    ("c3-arc", "conv3", "arcface", 3),
    ("intruder", "conv4", "softmax", 4),
]


@dataclass
class Desk:
    world: World
    fr_faces: List[RenderedFace]
    ensemble: Ensemble
    intruder: FRModel
    spec: PPTTrainSpec
    texture_size: int
    full: Dict[int, PPT]
    ablated: Dict[int, PPT]
    logs: Dict[int, List[LossBreakdown]]


@pytest.fixture(scope="module")
def desk() -> Desk:
    config = WorldConfig(image_size=32, texture_size=32, n_users=10, n_noise=20, per_identity=20,
                         n_fr_identities=40, fr_per_identity=16)
    world = world_from_config(config)
    fr_faces = sample_fr_training_set(config, "all")
    models = {
        model_id: train_fr(fr_faces, FRTrainSpec(model_id=model_id, architecture=arch, loss=loss, seed=seed))
        for model_id, arch, loss, seed in ROSTER
    }
    ensemble = Ensemble([models["c3-soft"], models["c4-arc"], models["c3-arc"]])
    spec = PPTTrainSpec(epsilon=EPSILON, iterations=400, batch_size=4)
    full, logs = train_user_ppts(world.users, ensemble, spec, config.texture_size)
    ablated, _ = train_user_ppts(world.users, ensemble, spec.model_copy(update={'use_logdet_term': False}),
                                 config.texture_size)
    return Desk(world, fr_faces, ensemble, models["intruder"], spec, config.texture_size, full, ablated, logs)


def mean_recall(desk: Desk, ppts, scenario, fraction=1.0, model=None):
    return run_scenario(desk.world, None, ppts, model or desk.intruder, scenario, fraction, seed=0).mean_recall


def test_bounds_hold_throughout_training(desk):
    assert all(row.max_abs_texture <= EPSILON + 1e-6 for rows in desk.logs.values() for row in rows)
    checked = 0
    for user in desk.world.users:
        for face in user.all_images:
            protected = protect_face(face, desk.full[user.user_id])
            assert float((protected - face.image).abs().max()) <= EPSILON + 1e-6
            assert l0_normalized(face.image, protected) <= face.mask_fraction + 1e-12
            checked += 1
    assert checked >= 100


def test_one_sided_scenarios_cut_recall(desk):
    baseline = mean_recall(desk, {}, Scenario.BASELINE, 0.0)
    assert mean_recall(desk, desk.full, Scenario.UNPROT_QUERY_PROT_DB) < 0.25 * baseline
    assert mean_recall(desk, desk.full, Scenario.PROT_QUERY_UNPROT_DB) < 0.25 * baseline


def test_hard_scenario_needs_the_logdet_term(desk):
    baseline = mean_recall(desk, {}, Scenario.BASELINE, 0.0)
    protected = mean_recall(desk, desk.full, HARD_SCENARIO)
    without_logdet = mean_recall(desk, desk.ablated, HARD_SCENARIO)
    assert protected < 0.5 * baseline
    assert protected < without_logdet
    assert without_logdet >= 0.9 * baseline


def test_protected_features_cluster(desk):
    for row in feature_geometry(desk.world.users, desk.full, desk.intruder):
        assert row.protected_mean_cosine < row.unprotected_mean_cosine
    ablated_rows = feature_geometry(desk.world.users, desk.ablated, desk.intruder)
    mean_gap = sum(r.protected_mean_cosine - r.unprotected_mean_cosine for r in ablated_rows) / len(ablated_rows)
    assert mean_gap >= 0.0


def test_protected_images_leave_their_originals(desk):
    for user in desk.world.users:
        ppt = desk.full[user.user_id]
        for face in user.train_db_images:
            protected = protect_face(face, ppt)
            for member in desk.ensemble.members:
                similarity = cosine_sim(embed(member, face.image), embed(member, protected))
                assert similarity < 0.5, (user.user_id, face.source_ref, member.model_id)


def test_fraction_sweep_is_non_increasing(desk):
    recalls = [mean_recall(desk, desk.full, HARD_SCENARIO, f) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
    for earlier, later in zip(recalls, recalls[1:]):
        assert later <= earlier + 5.0


def test_attacks_leave_protection_in_place(desk):
    attacks = [AttackSpec(kind="gaussian", parameter=0.5), AttackSpec(kind="median", parameter=3),
               AttackSpec(kind="jpeg", parameter=75), AttackSpec(kind="resize", parameter=0.75)]
    report = attack_sweep(desk.world, None, desk.full, desk.intruder, attacks)
    for row in report.rows:
        assert abs(row.mean_recall - report.unattacked_recall) <= 15.0, row.kind
        assert abs(row.baseline_recall - report.unattacked_baseline_recall) <= BASELINE_ATTACK_BAND, row.kind


def test_leave_one_out_transfers_to_every_member(desk):
    results = leave_one_out(desk.world, None, desk.ensemble, desk.spec, texture_size=desk.texture_size)
    assert sorted(results) == sorted(desk.ensemble.ids)
    for model_id, result in results.items():
        assert result.protected_recall < result.baseline_recall, model_id


def test_copy_of_a_member_is_hit_harder_than_a_disjoint_model(desk):
    twin = train_fr(desk.fr_faces, FRTrainSpec(model_id="c3-soft-twin", architecture="conv3", loss="softmax", seed=1))
    member = desk.ensemble.members[0]
    assert torch.equal(twin.parameter_vector(), member.parameter_vector())

    twin_ratio = mean_recall(desk, desk.full, HARD_SCENARIO, model=twin) / mean_recall(
        desk, {}, Scenario.BASELINE, 0.0, model=twin)
    disjoint_ratio = mean_recall(desk, desk.full, HARD_SCENARIO) / mean_recall(desk, {}, Scenario.BASELINE, 0.0)
    assert twin_ratio < disjoint_ratio


def test_trained_textures_are_used(desk):
    first = desk.full[desk.world.users[0].user_id].texture
    assert torch.isfinite(first).all()
    assert float(first.abs().max()) > 0.0
