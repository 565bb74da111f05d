"""Adaptive intruder transformations and image-quality metrics."""
import io
import logging
import math
from functools import partial
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from facecloak.errors import ConfigurationError, ShapeError
from facecloak.models.schemas import AttackRow, AttackSpec, AttackSweepReport, QualityStats, Scenario
from facecloak.services.face_world import UserSplit, World
from facecloak.services.fr_models import FRModel
from facecloak.services.ppt_engine import PPT, protect_face, ssim
from facecloak.services.retrieval import HARD_SCENARIO, run_scenario

logger = logging.getLogger('facecloak')

L0_THRESHOLD = 1.0 / 255.0


def _to_numpy(image: torch.Tensor) -> np.ndarray:
    return image.detach().cpu().numpy().astype(np.float64)


def _from_numpy(array: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.clip(array, 0.0, 1.0)).to(like.dtype)


def _gaussian(image: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = int(math.ceil(3.0 * sigma))
    blurred = ndimage.gaussian_filter(
        _to_numpy(image), sigma=(0.0, sigma, sigma), radius=(0, radius, radius), mode='nearest'
    )
    return _from_numpy(blurred, image)


def _median(image: torch.Tensor, window: int) -> torch.Tensor:
    filtered = ndimage.median_filter(_to_numpy(image), size=(1, window, window), mode='nearest')
    return _from_numpy(filtered, image)


def _jpeg(image: torch.Tensor, quality: int) -> torch.Tensor:
    """Baseline JPEG round trip through Pillow, chroma subsampling off."""
    pixels = np.round(np.clip(_to_numpy(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[0] == 1:
        encoded = Image.fromarray(pixels[0])
    else:
        encoded = Image.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0))))
    buffer = io.BytesIO()
    encoded.save(buffer, format='JPEG', quality=int(quality), subsampling=0, optimize=False)
    buffer.seek(0)
    decoded = np.asarray(Image.open(buffer).convert(encoded.mode), dtype=np.float64) / 255.0
    if decoded.ndim == 2:
        decoded = decoded[None]
    else:
        decoded = np.transpose(decoded, (2, 0, 1))
    return _from_numpy(np.ascontiguousarray(decoded), image)


def _resize(image: torch.Tensor, scale: float) -> torch.Tensor:
    height, width = image.shape[-2:]
    small = (max(1, int(round(height * scale))), max(1, int(round(width * scale))))
    batch = image.unsqueeze(0).to(torch.float64)
    down = F.interpolate(batch, size=small, mode='bilinear', align_corners=False)
    up = F.interpolate(down, size=(height, width), mode='bilinear', align_corners=False)
    return up[0].clamp(0.0, 1.0).to(image.dtype)


def apply_attack(image: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    """Pure transformation of a (C,H,W) image in [0,1]; output clipped to [0,1]."""
    if not isinstance(spec, AttackSpec):
        try:
            spec = AttackSpec.model_validate(spec)
        except ValueError as e:
            raise ConfigurationError(f"Invalid attack {spec}: {e}") from e
    if image.dim() != 3:
        raise ShapeError(f"Attacks take (C,H,W) images, got {tuple(image.shape)}")
    if spec.kind == "gaussian":
        return _gaussian(image, spec.parameter)
    if spec.kind == "median":
        return _median(image, int(spec.parameter))
    if spec.kind == "jpeg":
        return _jpeg(image, int(spec.parameter))
    return _resize(image, spec.parameter)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / MSE) in decibels; +inf for identical images."""
    _check_pair(a, b)
    mse = float(torch.mean((a.to(torch.float64) - b.to(torch.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def l0_normalized(a: torch.Tensor, b: torch.Tensor) -> float:
    """Fraction of pixel positions where any channel moved by more than 1/255."""
    _check_pair(a, b)
    diff = (a.to(torch.float64) - b.to(torch.float64)).abs()
    changed = (diff > L0_THRESHOLD).any(dim=0) if diff.dim() == 3 else diff > L0_THRESHOLD
    return float(changed.to(torch.float64).mean())


def quality_report(users: Sequence[UserSplit], ppts: Dict[int, PPT]) -> List[QualityStats]:
    """SSIM, PSNR and normalised L0 of protected DB images, averaged per user.

    PSNR is averaged over images that changed at all; a user whose images are
    untouched reports None.
    """
    stats = []
    for user in users:
        if user.user_id not in ppts:
            raise ConfigurationError(f"No PPT available for user {user.user_id}")
        ppt = ppts[user.user_id]
        ssims, psnrs, l0s = [], [], []
        for face in user.db_images:
            protected = protect_face(face, ppt)
            ssims.append(float(ssim(face.image.to(torch.float64), protected.to(torch.float64))))
            psnrs.append(psnr(face.image, protected))
            l0s.append(l0_normalized(face.image, protected))
        finite = [value for value in psnrs if math.isfinite(value)]
        stats.append(QualityStats(
            user_id=user.user_id,
            ssim=float(np.mean(ssims)),
            psnr=float(np.mean(finite)) if finite else None,
            l0=float(np.mean(l0s)),
            images=len(user.db_images),
        ))
    return stats


def attack_sweep(
    world: World,
    users: Optional[Sequence[UserSplit]],
    ppts: Dict[int, PPT],
    intruder_model: FRModel,
    attacks: Sequence[AttackSpec],
    scenario: Scenario = HARD_SCENARIO,
    protected_fraction: float = 1.0,
    seed: int = 0,
) -> AttackSweepReport:
    """Recall of the protected pipeline and of the unprotected baseline under every attack."""
    clean = run_scenario(world, users, ppts, intruder_model, scenario, protected_fraction, seed)
    clean_baseline = run_scenario(world, users, ppts, intruder_model, Scenario.BASELINE, 0.0, seed)
    logger.info(
        f"Unattacked: {scenario.value} {clean.mean_recall:.2f}%, baseline {clean_baseline.mean_recall:.2f}%"
    )

    rows = []
    for spec in attacks:
        transform = partial(apply_attack, spec=spec)
        attacked = run_scenario(world, users, ppts, intruder_model, scenario, protected_fraction, seed, transform)
        baseline = run_scenario(world, users, ppts, intruder_model, Scenario.BASELINE, 0.0, seed, transform)
        rows.append(AttackRow(
            kind=spec.kind,
            parameter=spec.parameter,
            mean_recall=attacked.mean_recall,
            baseline_recall=baseline.mean_recall,
            per_user_recall=attacked.per_user_recall,
        ))
        logger.info(
            f"{spec.label}: protected {attacked.mean_recall:.2f}% "
            f"(unattacked {clean.mean_recall:.2f}%), baseline {baseline.mean_recall:.2f}%"
        )

    return AttackSweepReport(
        scenario=scenario,
        model_id=intruder_model.model_id,
        seed=seed,
        unattacked_recall=clean.mean_recall,
        unattacked_baseline_recall=clean_baseline.mean_recall,
        rows=rows,
    )
