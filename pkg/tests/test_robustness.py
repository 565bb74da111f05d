"""Tests for intruder attacks and image-quality metrics."""
import json
import math

import pytest
import torch

from facecloak.errors import ConfigurationError, ShapeError
from facecloak.models.schemas import AttackSpec, Scenario
from facecloak.services.ppt_engine import PPT
from facecloak.services.robustness import apply_attack, attack_sweep, l0_normalized, psnr, quality_report
from facecloak.services.storage import ExperimentStore

EPSILON = 0.063


def reject_constant(token):
    raise ValueError(f"non-standard JSON token {token}")


@pytest.fixture(scope="module")
def face_image(tiny_world):
    return tiny_world.users[0].query_images[0].image


class TestApplyAttack:

    @pytest.mark.parametrize("spec", [
        AttackSpec(kind="gaussian", parameter=1.0),
        AttackSpec(kind="median", parameter=3),
        AttackSpec(kind="jpeg", parameter=75),
        AttackSpec(kind="resize", parameter=0.5),
    ])
    def test_shape_and_range(self, face_image, spec):
        attacked = apply_attack(face_image, spec)
        assert attacked.shape == face_image.shape
        assert attacked.dtype == face_image.dtype
        assert float(attacked.min()) >= 0.0 and float(attacked.max()) <= 1.0

    @pytest.mark.parametrize("spec", [
        AttackSpec(kind="gaussian", parameter=2.0),
        AttackSpec(kind="median", parameter=5),
        AttackSpec(kind="jpeg", parameter=50),
        AttackSpec(kind="resize", parameter=0.5),
    ])
    def test_constant_image_is_fixed_point(self, spec):
        image = torch.full((3, 16, 16), 0.4)
        attacked = apply_attack(image, spec)
        assert float((attacked - image).abs().max()) <= 1.0 / 255.0

    def test_median_of_one_is_identity(self, face_image):
        assert torch.allclose(apply_attack(face_image, AttackSpec(kind="median", parameter=1)), face_image)

    def test_median_removes_isolated_speck(self):
        image = torch.full((1, 16, 16), 0.2)
        image[0, 8, 8] = 1.0
        attacked = apply_attack(image, AttackSpec(kind="median", parameter=3))
        assert float(attacked[0, 8, 8]) == pytest.approx(0.2)

    def test_high_quality_jpeg_is_close(self, face_image):
        attacked = apply_attack(face_image, AttackSpec(kind="jpeg", parameter=100))
        assert float((attacked - face_image).abs().max()) <= 2.0 / 255.0 + 1.0 / 510.0

    def test_gaussian_smooths(self, face_image):
        attacked = apply_attack(face_image, AttackSpec(kind="gaussian", parameter=1.0))
        variation = lambda x: float((x[:, 1:] - x[:, :-1]).abs().mean())  # noqa: E731
        assert variation(attacked) < variation(face_image)

    def test_grayscale_jpeg(self):
        image = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(0))
        assert apply_attack(image, AttackSpec(kind="jpeg", parameter=90)).shape == (1, 16, 16)

    @pytest.mark.parametrize("spec", [
        {"kind": "gaussian", "parameter": 0.0},
        {"kind": "median", "parameter": 4},
        {"kind": "jpeg", "parameter": 0},
        {"kind": "resize", "parameter": 1.0},
        {"kind": "sharpen", "parameter": 1.0},
    ])
    def test_illegal_specs(self, face_image, spec):
        with pytest.raises(ConfigurationError):
            apply_attack(face_image, spec)

    def test_batched_input_rejected(self, face_image):
        with pytest.raises(ShapeError):
            apply_attack(face_image.unsqueeze(0), AttackSpec(kind="gaussian", parameter=1.0))


class TestMetrics:

    def test_psnr_of_known_error(self):
        a = torch.zeros(3, 8, 8)
        b = torch.full((3, 8, 8), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_psnr_identical(self, face_image):
        assert math.isinf(psnr(face_image, face_image))

    def test_l0_counts_pixel_positions(self):
        a = torch.zeros(3, 4, 4)
        b = a.clone()
        b[0, 0, 0] = 0.5
        b[2, 0, 0] = 0.5
        b[1, 3, 3] = 0.5
        b[1, 2, 2] = 0.5 / 255.0
        assert l0_normalized(a, b) == pytest.approx(2 / 16)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
        with pytest.raises(ShapeError):
            l0_normalized(torch.zeros(3, 4, 4), torch.zeros(1, 4, 4))


class TestQualityReport:

    def test_zero_texture(self, tiny_world):
        ppts = {u.user_id: PPT.zeros(3, 8, EPSILON, u.user_id) for u in tiny_world.users}
        for row in quality_report(tiny_world.users, ppts):
            assert row.ssim == pytest.approx(1.0, abs=1e-9)
            assert row.psnr is None
            assert row.l0 == 0.0
            assert row.images == 8

    def test_random_texture(self, tiny_world):
        ppts = {
            u.user_id: PPT((torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(u.user_id)) * 2 - 1) * EPSILON,
                           EPSILON, u.user_id)
            for u in tiny_world.users
        }
        for row in quality_report(tiny_world.users, ppts):
            assert row.ssim < 1.0
            assert row.psnr > 20.0 * math.log10(1.0 / EPSILON)
            assert 0.0 < row.l0 <= 1.0

    def test_untouched_report_is_strict_json(self, tiny_world, tmp_path):
        ppts = {u.user_id: PPT.zeros(3, 8, EPSILON, u.user_id) for u in tiny_world.users}
        path = ExperimentStore(tmp_path, "h").write_json("reports/quality.json", quality_report(tiny_world.users, ppts))
        rows = json.loads(path.read_text(), parse_constant=reject_constant)["data"]
        assert [row["psnr"] for row in rows] == [None] * len(tiny_world.users)

    def test_missing_ppt(self, tiny_world):
        with pytest.raises(ConfigurationError):
            quality_report(tiny_world.users, {})


class TestAttackSweep:

    def test_no_attacks(self, tiny_world, tiny_models):
        ppts = {u.user_id: PPT.zeros(3, 8, EPSILON, u.user_id) for u in tiny_world.users}
        report = attack_sweep(tiny_world, None, ppts, tiny_models["intruder"], [])
        assert report.rows == []
        assert report.scenario == Scenario.PROT_QUERY_PROT_DB
        # A zero texture protects nothing
        assert report.unattacked_recall == report.unattacked_baseline_recall

    def test_rows_follow_attack_order(self, tiny_world, tiny_models):
        ppts = {u.user_id: PPT.zeros(3, 8, EPSILON, u.user_id) for u in tiny_world.users}
        attacks = [AttackSpec(kind="median", parameter=3), AttackSpec(kind="resize", parameter=0.5)]
        report = attack_sweep(tiny_world, None, ppts, tiny_models["intruder"], attacks, seed=1)
        assert [(row.kind, row.parameter) for row in report.rows] == [("median", 3.0), ("resize", 0.5)]
        for row in report.rows:
            assert row.mean_recall == row.baseline_recall
            assert sorted(row.per_user_recall) == [0, 1, 2]
