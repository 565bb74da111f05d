"""Toy face-recognition embedders and their training"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from facecloak.errors import ConfigurationError, ShapeError, TrainingFailureError
from facecloak.models.schemas import FRTrainSpec
from facecloak.services.face_world import RenderedFace
from facecloak.utils.seeding import seed_everything, torch_generator

logger = logging.getLogger('facecloak')

ARCHITECTURES: Dict[str, Tuple[int, ...]] = {
    "conv3": (16, 32, 64),
    "conv4": (12, 24, 48, 64),
}


class ConvEmbedder(nn.Module):
    """Conv -> SiLU -> AvgPool blocks followed by a linear projection.

    Smooth activations and average pooling keep the input gradient well
    defined everywhere, which the texture optimisation relies on.
    """

    def __init__(self, architecture: str, channels: int, feature_dim: int, input_size: int):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown architecture {architecture}")
        widths = ARCHITECTURES[architecture]
        if input_size % (2 ** len(widths)):
            raise ConfigurationError(
                f"Input size {input_size} is not divisible by {2 ** len(widths)} for {architecture}"
            )
        layers: List[nn.Module] = []
        in_channels = channels
        for width in widths:
            layers += [nn.Conv2d(in_channels, width, kernel_size=3, padding=1), nn.SiLU(), nn.AvgPool2d(2)]
            in_channels = width
        self.features = nn.Sequential(*layers)
        spatial = input_size // (2 ** len(widths))
        self.projection = nn.Linear(in_channels * spatial * spatial, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self.features(x * 2.0 - 1.0).flatten(1))


class ArcMarginHead(nn.Module):
    """Additive angular margin classifier: logits = s * cos(theta + m) on the target class."""

    def __init__(self, feature_dim: int, n_classes: int, scale: float, margin: float):
        super().__init__()
        self.scale = scale
        self.margin = margin
        self.weight = nn.Parameter(torch.empty(n_classes, feature_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, embedding: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cosine = F.linear(F.normalize(embedding, dim=1), F.normalize(self.weight, dim=1))
        cosine = cosine.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
        target = torch.cos(torch.acos(cosine) + self.margin)
        one_hot = F.one_hot(labels, num_classes=cosine.shape[1]).to(cosine.dtype)
        return self.scale * (one_hot * target + (1.0 - one_hot) * cosine)


class SoftmaxHead(nn.Module):
    """Plain linear classifier on the raw embedding"""

    def __init__(self, feature_dim: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(feature_dim, n_classes)

    def forward(self, embedding: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.linear(embedding)


@dataclass
class FRModel:
    """A trained embedder F: image -> unit-norm feature"""
    network: ConvEmbedder
    model_id: str
    architecture: str
    loss_id: str
    feature_dim: int
    training_seed: int
    input_size: int
    channels: int
    accuracy: Optional[float] = None

    def __post_init__(self):
        self.network.eval()
        for parameter in self.network.parameters():
            parameter.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def to_double(self) -> "FRModel":
        """float64 copy, used by gradient checks."""
        clone = build_network(self.architecture, self.channels, self.feature_dim, self.input_size)
        clone.load_state_dict(self.network.state_dict())
        return FRModel(
            network=clone.double(),
            model_id=self.model_id,
            architecture=self.architecture,
            loss_id=self.loss_id,
            feature_dim=self.feature_dim,
            training_seed=self.training_seed,
            input_size=self.input_size,
            channels=self.channels,
            accuracy=self.accuracy,
        )

    def parameter_vector(self) -> torch.Tensor:
        return torch.nn.utils.parameters_to_vector(self.network.parameters()).detach()

    def describe(self) -> Dict:
        return {
            "model_id": self.model_id,
            "architecture_id": self.architecture,
            "loss_id": self.loss_id,
            "feature_dim": self.feature_dim,
            "training_seed": self.training_seed,
            "input_size": self.input_size,
            "channels": self.channels,
            "accuracy": self.accuracy,
        }


@dataclass
class Ensemble:
    """Ordered, non-empty collection of surrogate FR models"""
    members: List[FRModel] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("An ensemble needs at least one FR model")

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def ids(self) -> List[str]:
        return [m.model_id for m in self.members]

    def without(self, model_id: str) -> "Ensemble":
        return Ensemble([m for m in self.members if m.model_id != model_id])

    def check_distinct(self) -> None:
        """Members used for transfer studies must differ in (architecture, loss, seed)."""
        seen = set()
        for member in self.members:
            key = (member.architecture, member.loss_id, member.training_seed)
            if key in seen:
                raise ConfigurationError(f"Duplicate ensemble member configuration {key}")
            seen.add(key)


def build_network(architecture: str, channels: int, feature_dim: int, input_size: int) -> ConvEmbedder:
    return ConvEmbedder(architecture, channels, feature_dim, input_size)


# ─── Inference ──────────────────────────────────────────────────────


def _as_batch(model: FRModel, image: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    expected = (model.channels, model.input_size, model.input_size)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"Model {model.model_id} expects images {expected}, got {tuple(image.shape)}")
    return batch.to(model.dtype), single


def embed(model: FRModel, image: torch.Tensor) -> torch.Tensor:
    """Unit-norm features of (C,H,W) -> (D,) or (N,C,H,W) -> (N,D). Differentiable in the image."""
    batch, single = _as_batch(model, image)
    features = F.normalize(model.network(batch), p=2, dim=1, eps=1e-12)
    return features[0] if single else features


def embed_images(model: FRModel, images: Sequence[torch.Tensor], batch_size: int = 128) -> torch.Tensor:
    """Gradient-free batched embedding of many images, (N, D)."""
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.stack(list(images[start:start + batch_size]))
            outputs.append(embed(model, chunk))
    if not outputs:
        return torch.zeros(0, model.feature_dim, dtype=model.dtype)
    return torch.cat(outputs)


def embed_with_gradient(model: FRModel, image: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """d(upstream . embed(image)) / d(image), same shape as ``image``."""
    x = image.detach().to(model.dtype).clone().requires_grad_(True)
    features = embed(model, x)
    if upstream.shape != features.shape:
        raise ShapeError(f"Upstream {tuple(upstream.shape)} does not match features {tuple(features.shape)}")
    (gradient,) = torch.autograd.grad((features * upstream.to(features.dtype)).sum(), x)
    return gradient


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of two unit feature vectors (their dot product)."""
    if a.shape != b.shape or a.dim() != 1:
        raise ShapeError(f"Cannot compare features of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return float(torch.dot(a.to(torch.float64), b.to(torch.float64)))


# ─── Training ───────────────────────────────────────────────────────


def _index_dataset(dataset: Sequence[RenderedFace]) -> Dict[int, List[int]]:
    by_identity: Dict[int, List[int]] = {}
    for index, face in enumerate(dataset):
        by_identity.setdefault(face.identity_id, []).append(index)
    return by_identity


def _holdout_split(
    by_identity: Dict[int, List[int]], fraction: float, seed: int
) -> Tuple[List[int], List[int]]:
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for identity in sorted(by_identity):
        indices = by_identity[identity]
        order = rng.permutation(len(indices))
        n_holdout = min(len(indices) - 1, max(1, int(round(fraction * len(indices)))))
        holdout += [indices[i] for i in sorted(order[:n_holdout].tolist())]
        train += [indices[i] for i in sorted(order[n_holdout:].tolist())]
    return train, holdout


def _augment(batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Mild photometric and resampling jitter so features tolerate small degradations."""
    n = batch.shape[0]
    gain = 0.9 + 0.2 * torch.rand(n, 1, 1, 1, generator=generator)
    noise = (torch.rand(batch.shape, generator=generator) - 0.5) * (4.0 / 255.0)
    out = batch * gain + noise
    if float(torch.rand(1, generator=generator)) < 0.3:
        size = batch.shape[-1]
        small = max(4, int(size * (0.5 if float(torch.rand(1, generator=generator)) < 0.5 else 0.75)))
        out = F.interpolate(out, size=(small, small), mode='bilinear', align_corners=False)
        out = F.interpolate(out, size=(size, size), mode='bilinear', align_corners=False)
    return out.clamp(0.0, 1.0)


def verification_accuracy(
    model: FRModel,
    faces: Sequence[RenderedFace],
    anchors: Sequence[int],
    n_triples: int,
    seed: int,
) -> float:
    """Fraction of (anchor, positive, negative) triples with cos(a,p) > cos(a,n).

    Anchors come from ``anchors`` (held-out renders); positives are other
    renders of the anchor's identity, negatives renders of another identity.
    """
    by_identity = _index_dataset(faces)
    usable = [a for a in anchors if len(by_identity[faces[a].identity_id]) > 1]
    if not usable or len(by_identity) < 2:
        return 0.0
    features = embed_images(model, [f.image for f in faces]).to(torch.float64)
    identities = sorted(by_identity)
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(n_triples):
        anchor = usable[int(rng.integers(len(usable)))]
        identity = faces[anchor].identity_id
        positives = [i for i in by_identity[identity] if i != anchor]
        positive = positives[int(rng.integers(len(positives)))]
        others = [i for i in identities if i != identity]
        negative_identity = others[int(rng.integers(len(others)))]
        negatives = by_identity[negative_identity]
        negative = negatives[int(rng.integers(len(negatives)))]
        pos = float(features[anchor] @ features[positive])
        neg = float(features[anchor] @ features[negative])
        wins += int(pos > neg)
    return wins / n_triples


def train_fr(dataset: Sequence[RenderedFace], spec: FRTrainSpec) -> FRModel:
    """Train an embedder on identity labels and check held-out verification accuracy."""
    by_identity = _index_dataset(dataset)
    if len(by_identity) < 2 or any(len(v) < 2 for v in by_identity.values()):
        raise ConfigurationError(
            f"FR training needs >= 2 identities with >= 2 images each, got {len(by_identity)} identities"
        )
    channels, height, width = dataset[0].image.shape
    if height != width:
        raise ShapeError(f"Square images required, got {height}x{width}")

    seed_everything(spec.seed)
    network = build_network(spec.architecture, channels, spec.feature_dim, height)
    classes = {identity: k for k, identity in enumerate(sorted(by_identity))}
    if spec.loss == "arcface":
        head: nn.Module = ArcMarginHead(spec.feature_dim, len(classes), spec.scale, spec.margin)
    else:
        head = SoftmaxHead(spec.feature_dim, len(classes))

    train_idx, holdout_idx = _holdout_split(by_identity, spec.holdout_fraction, spec.seed)
    images = torch.stack([face.image for face in dataset])
    labels = torch.tensor([classes[face.identity_id] for face in dataset], dtype=torch.long)

    optimizer = torch.optim.Adam(list(network.parameters()) + list(head.parameters()), lr=spec.learning_rate)
    generator = torch_generator(spec.seed)
    train_tensor = torch.tensor(train_idx, dtype=torch.long)

    logger.info(
        f"Training {spec.model_id} ({spec.architecture}/{spec.loss}) on {len(classes)} identities, "
        f"{len(train_idx)} train / {len(holdout_idx)} held-out renders"
    )
    network.train()
    for epoch in range(spec.epochs):
        order = train_tensor[torch.randperm(len(train_tensor), generator=generator)]
        running = 0.0
        for start in range(0, len(order), spec.batch_size):
            batch_idx = order[start:start + spec.batch_size]
            batch = images[batch_idx]
            if spec.augment:
                batch = _augment(batch, generator)
            logits = head(network(batch), labels[batch_idx])
            loss = F.cross_entropy(logits, labels[batch_idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss) * len(batch_idx)
        logger.debug(f"{spec.model_id} epoch {epoch + 1}/{spec.epochs}: loss={running / len(order):.4f}")

    model = FRModel(
        network=network,
        model_id=spec.model_id,
        architecture=spec.architecture,
        loss_id=spec.loss,
        feature_dim=spec.feature_dim,
        training_seed=spec.seed,
        input_size=height,
        channels=channels,
    )
    accuracy = verification_accuracy(model, dataset, holdout_idx, spec.verification_triples, spec.seed)
    model.accuracy = accuracy
    if accuracy < spec.accuracy_floor:
        logger.error(f"❌ {spec.model_id} verification accuracy {accuracy:.4f} below floor {spec.accuracy_floor}")
        raise TrainingFailureError(spec.model_id, accuracy, spec.accuracy_floor)
    logger.info(f"✅ Trained {spec.model_id}: verification accuracy {accuracy:.4f}")
    return model
