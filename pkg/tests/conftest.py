"""Pytest configuration and shared fixtures."""
import os

# Set test environment variables before importing facecloak
os.environ["LOG_LEVEL"] = "WARNING"
os.environ.pop("FACECLOAK_OUTPUT_DIR", None)
os.environ.pop("FACECLOAK_CONFIG", None)

import pytest  # noqa: E402
import torch  # noqa: E402

from facecloak.models.schemas import PPTTrainSpec, WorldConfig  # noqa: E402
from facecloak.services.face_world import world_from_config  # noqa: E402
from facecloak.services.fr_models import Ensemble, FRModel, build_network  # noqa: E402

TINY_WORLD = {
    "image_size": 16,
    "texture_size": 8,
    "channels": 3,
    "n_users": 3,
    "n_noise": 3,
    "per_identity": 10,
    "n_fr_identities": 4,
    "fr_per_identity": 6,
    "texture_blobs": 6,
    "separation_floor": 0.01,
    "seed": 0,
}


def random_model(model_id: str, architecture: str = "conv3", seed: int = 0, feature_dim: int = 8,
                 loss: str = "softmax", input_size: int = 16, channels: int = 3) -> FRModel:
    """Untrained but seeded embedder; enough for geometry, search and gradient tests."""
    torch.manual_seed(seed)
    network = build_network(architecture, channels, feature_dim, input_size)
    return FRModel(
        network=network,
        model_id=model_id,
        architecture=architecture,
        loss_id=loss,
        feature_dim=feature_dim,
        training_seed=seed,
        input_size=input_size,
        channels=channels,
    )


@pytest.fixture(scope="session")
def tiny_config() -> WorldConfig:
    return WorldConfig(**TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_world(tiny_config):
    return world_from_config(tiny_config)


@pytest.fixture(scope="session")
def tiny_models():
    return {
        "m0": random_model("m0", "conv3", seed=0),
        "m1": random_model("m1", "conv4", seed=1, loss="arcface"),
        "intruder": random_model("intruder", "conv3", seed=2),
    }


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_models) -> Ensemble:
    return Ensemble([tiny_models["m0"], tiny_models["m1"]])


@pytest.fixture
def quick_ppt_spec() -> PPTTrainSpec:
    return PPTTrainSpec(iterations=5, batch_size=2, seed=0, log_every=1)
