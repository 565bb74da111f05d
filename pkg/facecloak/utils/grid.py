"""Bilinear grid sampling shared by the renderer and the texture deformation.

UV coordinates live in [0, 1]: ``uv[..., 0]`` selects the texture column and
``uv[..., 1]`` the texture row. Coordinate 0 hits the first texel centre and
coordinate 1 the last one (``align_corners=True``), so a lookup is always a
convex combination of at most four texels.
"""
import torch
import torch.nn.functional as F

from facecloak.errors import ShapeError

UV_SENTINEL = -1.0


def bilinear_sample(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample ``texture`` (C,U,V) or (N,C,U,V) at ``uv`` (H,W,2) or (N,H,W,2).

    Returns (C,H,W) or (N,C,H,W). Differentiable with respect to the texture;
    gradients land on the four neighbouring texels with bilinear weights.
    """
    batched = texture.dim() == 4
    if not batched:
        if texture.dim() != 3 or uv.dim() != 3:
            raise ShapeError(
                f"Expected texture (C,U,V) and uv (H,W,2), got {tuple(texture.shape)} and {tuple(uv.shape)}"
            )
        texture = texture.unsqueeze(0)
        uv = uv.unsqueeze(0)
    elif uv.dim() == 3:
        uv = uv.unsqueeze(0).expand(texture.shape[0], -1, -1, -1)
    if uv.shape[-1] != 2:
        raise ShapeError(f"uv must end with a coordinate pair, got {tuple(uv.shape)}")
    if uv.shape[0] != texture.shape[0]:
        raise ShapeError(f"Batch mismatch: texture {texture.shape[0]} vs uv {uv.shape[0]}")

    grid = uv.to(texture.dtype) * 2.0 - 1.0
    sampled = F.grid_sample(
        texture, grid, mode='bilinear', padding_mode='border', align_corners=True
    )
    return sampled if batched else sampled.squeeze(0)


def screen_uv(height: int, width: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Identity grid in [0,1]^2 over the image frame, shaped (H,W,2)."""
    ys = torch.linspace(0.0, 1.0, height, dtype=dtype)
    xs = torch.linspace(0.0, 1.0, width, dtype=dtype)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing='ij')
    return torch.stack([grid_x, grid_y], dim=-1)


def sanitize_uv(uv: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Replace sentinel coordinates outside the mask so they are never sampled out of range."""
    return torch.where(mask.unsqueeze(-1), uv, torch.zeros_like(uv))
