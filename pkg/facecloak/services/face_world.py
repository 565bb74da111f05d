"""Synthetic face world.

Identities are UV textures painted on an expression-deformed ellipsoid head.
Rendering is orthographic with Lambertian shading, and every render carries
the exact UV map used for texturing, so correspondences between poses are
known analytically.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Protocol, Tuple

import numpy as np
import torch

from facecloak.errors import ConfigurationError, NoFaceError, ShapeError
from facecloak.models.schemas import FacePose, WorldConfig
from facecloak.utils.grid import UV_SENTINEL, bilinear_sample
from facecloak.utils.seeding import derive_seed

logger = logging.getLogger('facecloak')

# Head proxy semi-axes at scale 1 (x: width, y: height, z: depth)
HEAD_AXES = (0.62, 0.82, 0.60)
LIGHT_DIRECTION = (0.3, 0.5, 1.0)
AMBIENT = 0.35
CAMERA_DISTANCE = 10.0
FR_IDENTITY_OFFSET = 1_000_000


@dataclass(frozen=True)
class IdentityAtlas:
    """UV-space appearance of one identity; base_texture is (C, U, V) in [0, 1]"""
    identity_id: int
    base_texture: torch.Tensor
    texture_seed: int


@dataclass
class RenderedFace:
    """One render: image (C,H,W), uv_map (H,W,2), validity_mask (H,W), shading (H,W)"""
    image: torch.Tensor
    uv_map: torch.Tensor
    validity_mask: torch.Tensor
    identity_id: int
    pose: FacePose
    source_ref: str
    shading: Optional[torch.Tensor] = None

    @property
    def mask_fraction(self) -> float:
        return float(self.validity_mask.float().mean())


@dataclass
class UserSplit:
    """A user's renders divided into query / training-and-DB / unseen-DB parts"""
    user_id: int
    query_images: List[RenderedFace] = field(default_factory=list)
    train_db_images: List[RenderedFace] = field(default_factory=list)
    unseen_db_images: List[RenderedFace] = field(default_factory=list)

    @property
    def db_images(self) -> List[RenderedFace]:
        return self.train_db_images + self.unseen_db_images

    @property
    def all_images(self) -> List[RenderedFace]:
        return self.query_images + self.train_db_images + self.unseen_db_images


class World(NamedTuple):
    users: List[UserSplit]
    noise_images: List[RenderedFace]


# ─── UV providers ───────────────────────────────────────────────────


class UVProvider(Protocol):
    """Anything that maps an image to (uv_map, validity_mask)"""

    def estimate(self, image: torch.Tensor, source_ref: str) -> Tuple[torch.Tensor, torch.Tensor]:
        ...


class GroundTruthUVProvider:
    """Serves the exact UV maps recorded at render time, keyed by source_ref"""

    def __init__(self, maps: Optional[Dict[str, Tuple[torch.Tensor, torch.Tensor]]] = None):
        self._maps: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = dict(maps or {})

    @classmethod
    def from_faces(cls, faces: Iterable[RenderedFace]) -> "GroundTruthUVProvider":
        return cls({face.source_ref: (face.uv_map, face.validity_mask) for face in faces})

    def register(self, source_ref: str, uv_map: torch.Tensor, validity_mask: torch.Tensor) -> None:
        self._maps[source_ref] = (uv_map, validity_mask)

    def __contains__(self, source_ref: str) -> bool:
        return source_ref in self._maps

    def estimate(self, image: torch.Tensor, source_ref: str) -> Tuple[torch.Tensor, torch.Tensor]:
        if source_ref not in self._maps:
            raise NoFaceError(f"No UV map known for {source_ref}")
        uv_map, mask = self._maps[source_ref]
        if tuple(uv_map.shape[:2]) != tuple(image.shape[-2:]):
            raise ShapeError(
                f"UV map {tuple(uv_map.shape[:2])} does not match image {tuple(image.shape[-2:])} for {source_ref}"
            )
        if not bool(mask.any()):
            raise NoFaceError(f"No face surface in {source_ref}")
        return uv_map, mask


# ─── Identities ─────────────────────────────────────────────────────


def make_identity(seed: int, config: WorldConfig, identity_id: Optional[int] = None) -> IdentityAtlas:
    """Paint a deterministic identity texture from ``seed``."""
    if seed < 0:
        raise ConfigurationError(f"Identity seed must be non-negative, got {seed}")
    size = config.texture_size
    channels = config.channels
    if size < 4 or channels not in (1, 3):
        raise ConfigurationError(f"Invalid texture dimensions {size}x{size}x{channels}")

    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, size)
    rows, cols = np.meshgrid(coords, coords, indexing='ij')

    tone = rng.uniform(0.3, 0.75, size=channels)
    texture = np.broadcast_to(tone[:, None, None], (channels, size, size)).copy()

    # Blobs stay mostly on the front half of the head (u in [0.25, 0.75])
    for _ in range(config.texture_blobs):
        cu = rng.uniform(0.22, 0.78)
        cv = rng.uniform(0.15, 0.85)
        sigma = rng.uniform(0.03, 0.09)
        amplitude = rng.uniform(-0.4, 0.4, size=channels)
        bump = np.exp(-((cols - cu) ** 2 + (rows - cv) ** 2) / (2.0 * sigma ** 2))
        texture += amplitude[:, None, None] * bump[None]

    angle = rng.uniform(0.0, math.pi)
    frequency = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    stripes = np.sin(2.0 * math.pi * frequency * (cols * math.cos(angle) + rows * math.sin(angle)) + phase)
    texture += 0.1 * rng.uniform(0.5, 1.0, size=channels)[:, None, None] * stripes[None]

    texture = np.clip(texture, 0.0, 1.0).astype(np.float32)
    return IdentityAtlas(
        identity_id=seed if identity_id is None else identity_id,
        base_texture=torch.from_numpy(texture),
        texture_seed=seed,
    )


def identity_seed(world_seed: int, identity_id: int) -> int:
    return derive_seed(world_seed, identity_id)


# ─── Rendering ──────────────────────────────────────────────────────


def _rotation(pose: FacePose) -> torch.Tensor:
    """Object-to-camera rotation: roll after pitch after yaw."""
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    cr, sr = math.cos(pose.roll), math.sin(pose.roll)
    ry = torch.tensor([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]], dtype=torch.float64)
    rx = torch.tensor([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]], dtype=torch.float64)
    rz = torch.tensor([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
    return rz @ rx @ ry


def head_axes(pose: FacePose) -> torch.Tensor:
    """Semi-axes of the head proxy; expression elongates and narrows the face."""
    ax, ay, az = HEAD_AXES
    e = pose.expression
    return torch.tensor(
        [ax * (1.0 - 0.06 * e), ay * (1.0 + 0.12 * e), az], dtype=torch.float64
    ) * pose.scale


def pixel_centers(size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Camera-plane coordinates of pixel centres in [-1, 1], y pointing up."""
    centers = (torch.arange(size, dtype=torch.float64) + 0.5) / size * 2.0 - 1.0
    ys, xs = torch.meshgrid(-centers, centers, indexing='ij')
    return xs, ys


def _trace(pose: FacePose, size: int):
    """Intersect orthographic rays with the head; returns mask, surface point (object space), rotation."""
    rotation = _rotation(pose)
    axes = head_axes(pose)
    inv_sq = 1.0 / axes ** 2

    xs, ys = pixel_centers(size)
    origins_cam = torch.stack([xs, ys, torch.full_like(xs, CAMERA_DISTANCE)], dim=-1)
    direction_cam = torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)

    # p_cam = R p_obj  =>  p_obj = R^T p_cam
    origins = origins_cam @ rotation
    direction = rotation.T @ direction_cam

    a = torch.sum(inv_sq * direction ** 2)
    b = 2.0 * torch.sum(inv_sq * origins * direction, dim=-1)
    c = torch.sum(inv_sq * origins ** 2, dim=-1) - 1.0
    disc = b ** 2 - 4.0 * a * c
    mask = disc > 0.0
    t = (-b - torch.sqrt(torch.clamp(disc, min=0.0))) / (2.0 * a)
    points = origins + t.unsqueeze(-1) * direction
    return mask, points, rotation, axes


def _surface_uv(points: torch.Tensor, axes: torch.Tensor) -> torch.Tensor:
    """Spherical parameterisation of the unit-normalised surface point."""
    q = points / axes
    phi = torch.atan2(q[..., 0], q[..., 2])
    theta = torch.asin(torch.clamp(q[..., 1], -1.0, 1.0))
    u = 0.5 + phi / (2.0 * math.pi)
    v = 0.5 - theta / math.pi
    return torch.stack([u, v], dim=-1).clamp(0.0, 1.0)


def _shading(points: torch.Tensor, axes: torch.Tensor, rotation: torch.Tensor, lighting: float) -> torch.Tensor:
    normals = points / axes ** 2
    normals = normals / torch.linalg.norm(normals, dim=-1, keepdim=True)
    normals_cam = normals @ rotation.T
    light = torch.tensor(LIGHT_DIRECTION, dtype=torch.float64)
    light = light / torch.linalg.norm(light)
    lambert = torch.clamp(normals_cam @ light, min=0.0)
    return lighting * (AMBIENT + (1.0 - AMBIENT) * lambert)


def render_geometry(pose: FacePose, size: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """UV map (sentinel outside), validity mask and shading for a pose."""
    mask, points, rotation, axes = _trace(pose, size)
    uv = _surface_uv(points, axes).to(torch.float32)
    uv = torch.where(mask.unsqueeze(-1), uv, torch.full_like(uv, UV_SENTINEL))
    shading = _shading(points, axes, rotation, pose.lighting).to(torch.float32)
    shading = torch.where(mask, shading, torch.zeros_like(shading))
    return uv, mask, shading


def render_face(
    atlas: IdentityAtlas,
    pose: FacePose,
    config: WorldConfig,
    source_ref: Optional[str] = None,
) -> RenderedFace:
    """Render ``atlas`` under ``pose``; image = shading x bilinear(texture, uv) on the mask."""
    if not isinstance(pose, FacePose):
        pose = FacePose.model_validate(pose)
    size = config.image_size
    uv, mask, shading = render_geometry(pose, size)

    safe_uv = torch.where(mask.unsqueeze(-1), uv, torch.zeros_like(uv))
    texels = bilinear_sample(atlas.base_texture.to(torch.float64), safe_uv.to(torch.float64))
    face = shading.to(torch.float64).unsqueeze(0) * texels
    background = torch.full_like(face, config.background)
    image = torch.where(mask.unsqueeze(0), face, background).clamp(0.0, 1.0).to(torch.float32)

    return RenderedFace(
        image=image,
        uv_map=uv,
        validity_mask=mask,
        identity_id=atlas.identity_id,
        pose=pose,
        source_ref=source_ref or f"id{atlas.identity_id:07d}",
        shading=shading,
    )


# ─── Populations ────────────────────────────────────────────────────


def random_pose(rng: np.random.Generator, config: WorldConfig) -> FacePose:
    return FacePose(
        yaw=float(rng.uniform(*config.yaw_range)),
        pitch=float(rng.uniform(*config.pitch_range)),
        roll=float(rng.uniform(*config.roll_range)),
        expression=float(rng.uniform(*config.expression_range)),
        scale=float(rng.uniform(*config.scale_range)),
        lighting=float(rng.uniform(*config.lighting_range)),
    )


def render_identity(identity_id: int, count: int, seed: int, config: WorldConfig) -> List[RenderedFace]:
    """``count`` renders of one identity with seeded poses."""
    atlas = make_identity(identity_seed(seed, identity_id), config, identity_id=identity_id)
    rng = np.random.default_rng(derive_seed(seed, identity_id, 1))
    faces = []
    for index in range(count):
        pose = random_pose(rng, config)
        faces.append(render_face(atlas, pose, config, source_ref=f"id{identity_id:07d}_r{index:03d}"))
    return faces


def split_counts(per_identity: int) -> Tuple[int, int, int]:
    """(query, train_db, unseen_db) sizes following the 20/60/20 rule."""
    n_query = max(1, int(round(0.2 * per_identity)))
    n_unseen = max(1, int(round(0.2 * per_identity)))
    return n_query, per_identity - n_query - n_unseen, n_unseen


def split_user(user_id: int, faces: List[RenderedFace], seed: int) -> UserSplit:
    n_query, _, n_unseen = split_counts(len(faces))
    order = np.random.default_rng(derive_seed(seed, user_id, 2)).permutation(len(faces))
    query_idx = sorted(order[:n_query].tolist())
    unseen_idx = sorted(order[n_query:n_query + n_unseen].tolist())
    train_idx = sorted(order[n_query + n_unseen:].tolist())
    return UserSplit(
        user_id=user_id,
        query_images=[faces[i] for i in query_idx],
        train_db_images=[faces[i] for i in train_idx],
        unseen_db_images=[faces[i] for i in unseen_idx],
    )


def sample_world(
    n_users: int,
    n_noise_identities: int,
    per_identity: int,
    seed: int,
    config: Optional[WorldConfig] = None,
) -> World:
    """Render users (split 20/60/20) and DB-only noise identities."""
    if per_identity < 5:
        raise ConfigurationError(f"per_identity must be at least 5 for a 20/60/20 split, got {per_identity}")
    if n_users < 0 or n_noise_identities < 0 or seed < 0:
        raise ConfigurationError("n_users, n_noise_identities and seed must be non-negative")
    config = config or WorldConfig()

    users = []
    for user_id in range(n_users):
        faces = render_identity(user_id, per_identity, seed, config)
        users.append(split_user(user_id, faces, seed))

    noise: List[RenderedFace] = []
    for offset in range(n_noise_identities):
        noise.extend(render_identity(n_users + offset, per_identity, seed, config))

    logger.info(
        f"Rendered world: {n_users} users, {n_noise_identities} noise identities, "
        f"{per_identity} renders each (seed={seed})"
    )
    return World(users=users, noise_images=noise)


def world_from_config(config: WorldConfig) -> World:
    return sample_world(config.n_users, config.n_noise, config.per_identity, config.seed, config)


def fr_identity_ids(config: WorldConfig, subset: str = "all") -> List[int]:
    """Identity ids reserved for FR training; subsets realise disjoint training datasets."""
    ids = []
    for k in range(config.n_fr_identities):
        if subset == "even" and k % 2:
            continue
        if subset == "odd" and k % 2 == 0:
            continue
        ids.append(FR_IDENTITY_OFFSET + k)
    return ids


def sample_fr_training_set(config: WorldConfig, subset: str = "all") -> List[RenderedFace]:
    """Labelled renders of identities disjoint from users and noise."""
    faces: List[RenderedFace] = []
    for identity_id in fr_identity_ids(config, subset):
        faces.extend(render_identity(identity_id, config.fr_per_identity, config.seed, config))
    return faces


def texture_separation(a: IdentityAtlas, b: IdentityAtlas) -> float:
    """Mean absolute texel difference between two identities."""
    return float((a.base_texture.to(torch.float64) - b.base_texture.to(torch.float64)).abs().mean())


def min_separation(identity_ids: Iterable[int], seed: int, config: WorldConfig) -> float:
    """Smallest pairwise texture separation among the given identities."""
    atlases = [make_identity(identity_seed(seed, i), config, identity_id=i) for i in identity_ids]
    if len(atlases) < 2:
        return math.inf
    return min(
        texture_separation(atlases[i], atlases[j])
        for i in range(len(atlases)) for j in range(i + 1, len(atlases))
    )
