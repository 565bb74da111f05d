"""Privacy protection textures: deformation, protection, losses and training.

A texture lives in UV space and is bounded by epsilon in L-infinity. For a
given image it is sampled through the image's UV map into a perturbation
``delta`` that is subtracted from the face and clipped to [0, 1].
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from facecloak.errors import NonFiniteLossError, NoFaceError, NumericError, ShapeError, ConfigurationError
from facecloak.models.schemas import LossBreakdown, PPTTrainingMeta, PPTTrainSpec
from facecloak.services.face_world import RenderedFace, UserSplit, UVProvider
from facecloak.services.fr_models import Ensemble, embed
from facecloak.utils.grid import bilinear_sample, sanitize_uv, screen_uv

logger = logging.getLogger('facecloak')

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class PPT:
    """User texture (C,U,V) with every value in [-epsilon, epsilon]"""
    texture: torch.Tensor
    epsilon: float
    user_id: int
    training_meta: Optional[PPTTrainingMeta] = None
    deformation: str = "uv"

    @classmethod
    def zeros(cls, channels: int, size: int, epsilon: float, user_id: int, deformation: str = "uv") -> "PPT":
        return cls(torch.zeros(channels, size, size), epsilon, user_id, deformation=deformation)

    @property
    def max_abs(self) -> float:
        return float(self.texture.abs().max()) if self.texture.numel() else 0.0


@dataclass
class ProtectionResult:
    """Theta(x; T) = clip(x - delta) together with delta"""
    protected_image: torch.Tensor
    delta: torch.Tensor
    source_ref: str


@dataclass
class ProtectionBatch:
    """Stacked images (B,C,H,W), uv maps (B,H,W,2) and masks (B,H,W)"""
    images: torch.Tensor
    uv_maps: torch.Tensor
    masks: torch.Tensor
    source_refs: List[str] = field(default_factory=list)

    @classmethod
    def from_faces(cls, faces: Sequence[RenderedFace]) -> "ProtectionBatch":
        return cls(
            images=torch.stack([f.image for f in faces]),
            uv_maps=torch.stack([f.uv_map for f in faces]),
            masks=torch.stack([f.validity_mask for f in faces]),
            source_refs=[f.source_ref for f in faces],
        )

    def to(self, dtype: torch.dtype) -> "ProtectionBatch":
        return ProtectionBatch(self.images.to(dtype), self.uv_maps.to(dtype), self.masks, list(self.source_refs))

    def __len__(self) -> int:
        return self.images.shape[0]


# ─── Deformation and protection ─────────────────────────────────────


def _texture_of(ppt) -> torch.Tensor:
    return ppt.texture if isinstance(ppt, PPT) else ppt


def deform(ppt, uv_map: torch.Tensor, validity_mask: torch.Tensor, deformation: Optional[str] = None) -> torch.Tensor:
    """Sample the texture through the UV map; zero wherever the mask is false.

    Accepts a PPT or a raw texture tensor and single (H,W,2) or batched
    (B,H,W,2) maps. ``deformation="flat"`` samples on the screen grid instead
    of the UV map, a front-facing 2D mask.
    """
    texture = _texture_of(ppt)
    if deformation is None:
        deformation = ppt.deformation if isinstance(ppt, PPT) else "uv"
    if not torch.isfinite(texture).all():
        raise ShapeError("Texture contains non-finite values")
    if uv_map.shape[:-1] != validity_mask.shape or uv_map.shape[-1] != 2:
        raise ShapeError(f"uv_map {tuple(uv_map.shape)} and mask {tuple(validity_mask.shape)} disagree")

    if deformation == "flat":
        height, width = validity_mask.shape[-2:]
        grid = screen_uv(height, width, dtype=texture.dtype)
        uv = grid if uv_map.dim() == 3 else grid.expand(uv_map.shape[0], -1, -1, -1)
    else:
        uv = sanitize_uv(uv_map, validity_mask)

    if uv.dim() == 4:
        stacked = texture.unsqueeze(0).expand(uv.shape[0], -1, -1, -1)
        sampled = bilinear_sample(stacked, uv)
        return sampled * validity_mask.unsqueeze(1).to(sampled.dtype)
    sampled = bilinear_sample(texture, uv)
    return sampled * validity_mask.unsqueeze(0).to(sampled.dtype)


def apply_texture(images: torch.Tensor, texture: torch.Tensor, uv_maps: torch.Tensor, masks: torch.Tensor,
                  deformation: str = "uv") -> Tuple[torch.Tensor, torch.Tensor]:
    """Differentiable Theta for a batch; returns (protected, delta)."""
    delta = deform(texture, uv_maps.to(texture.dtype), masks, deformation)
    if delta.shape != images.shape:
        raise ShapeError(f"Delta {tuple(delta.shape)} does not match images {tuple(images.shape)}")
    protected = torch.clamp(images.to(texture.dtype) - delta, 0.0, 1.0)
    return protected, delta


def protect(image: torch.Tensor, ppt: PPT, uv_provider: UVProvider, source_ref: str) -> ProtectionResult:
    """Theta(x; T) = Clip_[0,1](x - delta(T; x))."""
    uv_map, mask = uv_provider.estimate(image, source_ref)
    if not bool(mask.any()):
        raise NoFaceError(f"No face surface in {source_ref}")
    with torch.no_grad():
        protected, delta = apply_texture(
            image.unsqueeze(0), ppt.texture, uv_map.unsqueeze(0), mask.unsqueeze(0), ppt.deformation
        )
    return ProtectionResult(
        protected_image=protected[0].to(image.dtype),
        delta=delta[0].to(image.dtype),
        source_ref=source_ref,
    )


def protect_face(face: RenderedFace, ppt: PPT) -> torch.Tensor:
    """Protected image of a rendered face using its own UV map."""
    with torch.no_grad():
        protected, _ = apply_texture(
            face.image.unsqueeze(0), ppt.texture, face.uv_map.unsqueeze(0), face.validity_mask.unsqueeze(0),
            ppt.deformation,
        )
    return protected[0].to(face.image.dtype)


def protect_sequence(
    frames: Sequence[torch.Tensor], ppt: PPT, uv_provider: UVProvider, source_refs: Sequence[str]
) -> List[ProtectionResult]:
    """Protect frames independently; frame k equals protect(frame k)."""
    if len(frames) != len(source_refs):
        raise ShapeError(f"{len(frames)} frames but {len(source_refs)} source references")
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise ShapeError("All frames of a sequence must share one shape")
    results = []
    for index, (frame, ref) in enumerate(zip(frames, source_refs)):
        try:
            results.append(protect(frame, ppt, uv_provider, ref))
        except NoFaceError as e:
            raise NoFaceError(f"Frame {index}: {e}", frame_index=index) from e
    return results


# ─── Losses ─────────────────────────────────────────────────────────


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Pairwise inner products of unit-normalised features, (B,D) -> (B,B)."""
    if features.dim() != 2 or features.shape[0] < 1:
        raise ShapeError(f"Expected (B, D) features, got {tuple(features.shape)}")
    unit = F.normalize(features, p=2, dim=1)
    return unit @ unit.T


def stable_logdet(matrix: torch.Tensor, gamma: float) -> torch.Tensor:
    """log det(G + gamma I) through a Cholesky factor, summed in log space."""
    eye = torch.eye(matrix.shape[0], dtype=matrix.dtype)
    regularised = 0.5 * (matrix + matrix.T) + gamma * eye
    factor, info = torch.linalg.cholesky_ex(regularised)
    if int(info) != 0:
        raise NumericError(f"Cholesky decomposition failed (info={int(info)}) for a {matrix.shape[0]}x{matrix.shape[0]} Gram matrix")
    return 2.0 * torch.log(torch.diagonal(factor)).sum()


def _gaussian_window(channels: int, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels.

    (C,H,W) inputs give a scalar, (N,C,H,W) inputs a vector of N values.
    Differentiable in both arguments.
    """
    if a.shape != b.shape:
        raise ShapeError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(a.shape)}")
    dtype = torch.promote_types(a.dtype, b.dtype)
    a, b = a.to(dtype), b.to(dtype)
    channels = a.shape[1]
    window = _gaussian_window(channels, dtype)

    def blur(x):
        return F.conv2d(x, window, groups=channels)

    mu_a, mu_b = blur(a), blur(b)
    sigma_a = blur(a * a) - mu_a ** 2
    sigma_b = blur(b * b) - mu_b ** 2
    sigma_ab = blur(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sigma_ab + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    values = (numerator / denominator).mean(dim=(2, 3)).mean(dim=1)
    return values[0] if single else values


def perceptual_hinge(ssim_values: torch.Tensor, omega: float) -> torch.Tensor:
    """max(mean (1 - SSIM) / 2 - omega, 0)."""
    drop = ((1.0 - ssim_values) / 2.0).mean()
    return torch.clamp(drop - omega, min=0.0)


def perceptual_loss(batch: ProtectionBatch, ppt, omega: float, deformation: Optional[str] = None) -> torch.Tensor:
    """Hinge on the batch-mean SSIM drop between originals and protected images."""
    texture = _texture_of(ppt)
    if deformation is None:
        deformation = ppt.deformation if isinstance(ppt, PPT) else "uv"
    protected, _ = apply_texture(batch.images, texture, batch.uv_maps, batch.masks, deformation)
    return perceptual_hinge(ssim(batch.images.to(protected.dtype), protected), omega)


@dataclass
class ProtectTerms:
    logdet_term: torch.Tensor
    sim_term: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.logdet_term + self.sim_term


def protection_terms(
    protected: torch.Tensor,
    ensemble: Ensemble,
    original_features: Sequence[torch.Tensor],
    gamma: float = 1e-4,
    use_logdet_term: bool = True,
    use_sim_term: bool = True,
) -> ProtectTerms:
    """Hypersensitivity (Gram log-det) and protected-vs-original similarity terms.

    ``original_features[k]`` holds member k's features of the unprotected batch.
    Members are reduced in a fixed order.
    """
    if protected.shape[0] < 2:
        raise ConfigurationError("The log-det term needs a batch of at least 2 images")
    zero = protected.new_zeros(())
    logdet_sum, sim_sum = zero, zero
    for member, originals in zip(ensemble.members, original_features):
        features = embed(member, protected)
        if use_logdet_term:
            logdet_sum = logdet_sum + stable_logdet(gram_matrix(features), gamma).to(protected.dtype)
        if use_sim_term:
            sim_sum = sim_sum + (features * originals.to(features.dtype)).sum(dim=1).mean().to(protected.dtype)
    n_models = len(ensemble)
    return ProtectTerms(logdet_term=-logdet_sum / n_models, sim_term=sim_sum / n_models)


def original_features(batch: ProtectionBatch, ensemble: Ensemble) -> List[torch.Tensor]:
    with torch.no_grad():
        return [embed(member, batch.images) for member in ensemble.members]


def protection_loss(
    batch: ProtectionBatch,
    ppt,
    ensemble: Ensemble,
    gamma: float = 1e-4,
    use_logdet_term: bool = True,
    use_sim_term: bool = True,
    deformation: Optional[str] = None,
) -> ProtectTerms:
    """-mean_F log det(G_F + gamma I) + mean_F mean_x Sim(F(x), F(Theta(x)))."""
    texture = _texture_of(ppt)
    if deformation is None:
        deformation = ppt.deformation if isinstance(ppt, PPT) else "uv"
    protected, _ = apply_texture(batch.images, texture, batch.uv_maps, batch.masks, deformation)
    return protection_terms(
        protected, ensemble, original_features(batch, ensemble), gamma, use_logdet_term, use_sim_term
    )


def total_loss(
    batch: ProtectionBatch,
    texture: torch.Tensor,
    ensemble: Ensemble,
    spec: PPTTrainSpec,
    lambda_ssim: float,
    originals: Optional[Sequence[torch.Tensor]] = None,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L = L_protect + lambda_ssim * L_percept, plus the scalar terms for logging."""
    protected, _ = apply_texture(batch.images, texture, batch.uv_maps, batch.masks, spec.deformation)
    if originals is None:
        originals = original_features(batch, ensemble)
    terms = protection_terms(
        protected, ensemble, originals, spec.gamma, spec.use_logdet_term, spec.use_sim_term
    )
    ssim_values = ssim(batch.images.to(protected.dtype), protected)
    percept = perceptual_hinge(ssim_values, spec.omega)
    loss = terms.total + lambda_ssim * percept
    scalars = {
        "logdet": terms.logdet_term.item(),
        "sim": terms.sim_term.item(),
        "percept": percept.item(),
        "mean_ssim": ssim_values.mean().item(),
        "total": loss.item(),
    }
    return loss, scalars


# ─── Training ───────────────────────────────────────────────────────


class BatchSampler:
    """Uniform batches without replacement; reshuffles once a pass is exhausted"""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        self.n_items = n_items
        self.batch_size = min(batch_size, n_items)
        self.rng = np.random.default_rng(seed)
        self._order: List[int] = []

    def next(self) -> List[int]:
        if len(self._order) < self.batch_size:
            self._order = self.rng.permutation(self.n_items).tolist()
        batch, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return sorted(batch)


def next_lambda(lambda_ssim: float, percept: float, spec: PPTTrainSpec) -> float:
    """Escalate the perceptual weight while the SSIM budget is violated, relax it otherwise."""
    if percept > 0.0:
        return min(lambda_ssim * spec.lambda_up, spec.lambda_max)
    return max(lambda_ssim * spec.lambda_down, spec.lambda_min)


def train_ppt(
    user_split: UserSplit,
    ensemble: Ensemble,
    spec: PPTTrainSpec,
    texture_size: Optional[int] = None,
) -> Tuple[PPT, List[LossBreakdown]]:
    """Projected signed-gradient descent of the texture over mini-batches of the user's training renders.

    ``texture_size`` defaults to the image size.
    """
    omega_set = user_split.train_db_images
    if not omega_set:
        raise ConfigurationError(f"User {user_split.user_id} has no training images")
    if len(omega_set) < 2:
        raise ConfigurationError(f"User {user_split.user_id} needs at least 2 training images for the Gram term")

    dtype = ensemble.members[0].dtype
    channels = omega_set[0].image.shape[0]
    texture_size = texture_size or omega_set[0].image.shape[-1]
    batch_size = min(spec.batch_size, len(omega_set))
    full = ProtectionBatch.from_faces(omega_set).to(dtype)
    with torch.no_grad():
        cached = [embed(member, full.images) for member in ensemble.members]

    texture = torch.zeros(channels, texture_size, texture_size, dtype=dtype)
    sampler = BatchSampler(len(omega_set), batch_size, spec.seed)
    lambda_ssim = spec.lambda_init
    log: List[LossBreakdown] = []

    logger.info(
        f"Training PPT for user {user_split.user_id}: |Omega|={len(omega_set)}, ensemble={ensemble.ids}, "
        f"eps={spec.epsilon}, eta={spec.eta}, omega={spec.omega}, |B|={batch_size}, iterations={spec.iterations}"
    )
    for iteration in range(spec.iterations):
        picks = sampler.next()
        batch = ProtectionBatch(full.images[picks], full.uv_maps[picks], full.masks[picks])
        originals = [features[picks] for features in cached]

        variable = texture.clone().requires_grad_(True)
        loss, scalars = total_loss(batch, variable, ensemble, spec, lambda_ssim, originals)
        if not all(math.isfinite(v) for v in scalars.values()):
            logger.error(f"Non-finite loss for user {user_split.user_id} at iteration {iteration}: {scalars}")
            raise NonFiniteLossError(iteration, scalars)
        (gradient,) = torch.autograd.grad(loss, variable)

        with torch.no_grad():
            texture = torch.clamp(texture - spec.eta * torch.sign(gradient), -spec.epsilon, spec.epsilon)

        log.append(LossBreakdown.from_terms(
            iteration=iteration,
            logdet=scalars["logdet"],
            sim=scalars["sim"],
            percept=scalars["percept"],
            lambda_ssim=lambda_ssim,
            mean_ssim=scalars["mean_ssim"],
            max_abs_texture=float(texture.abs().max()),
        ))
        lambda_ssim = next_lambda(lambda_ssim, scalars["percept"], spec)
        if (iteration + 1) % spec.log_every == 0:
            logger.info(
                f"user {user_split.user_id} it {iteration + 1}: total={scalars['total']:.4f} "
                f"logdet={scalars['logdet']:.4f} sim={scalars['sim']:.4f} percept={scalars['percept']:.5f} "
                f"lambda={lambda_ssim:.3g} ssim={scalars['mean_ssim']:.4f}"
            )

    ppt = PPT(
        texture=texture.to(torch.float32),
        epsilon=spec.epsilon,
        user_id=user_split.user_id,
        training_meta=PPTTrainingMeta.from_spec(spec, ensemble.ids, batch_size),
        deformation=spec.deformation,
    )
    return ppt, log


def spec_for_user(spec: PPTTrainSpec, user_id: int) -> PPTTrainSpec:
    """Per-user copy of a training spec; its seed becomes seed * 1000 + user_id."""
    return spec.model_copy(update={'seed': spec.seed * 1000 + user_id})


def train_user_ppts(
    users: Sequence[UserSplit],
    ensemble: Ensemble,
    spec: PPTTrainSpec,
    texture_size: Optional[int] = None,
) -> Tuple[Dict[int, PPT], Dict[int, List[LossBreakdown]]]:
    """Train one PPT per user against ``ensemble``; users are processed in id order."""
    ppts: Dict[int, PPT] = {}
    logs: Dict[int, List[LossBreakdown]] = {}
    for user in sorted(users, key=lambda u: u.user_id):
        ppts[user.user_id], logs[user.user_id] = train_ppt(
            user, ensemble, spec_for_user(spec, user.user_id), texture_size
        )
    return ppts, logs
