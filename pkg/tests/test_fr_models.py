"""Tests for the toy face-recognition models."""
import pytest
import torch

from facecloak.errors import ConfigurationError, ShapeError, TrainingFailureError
from facecloak.models.schemas import FRTrainSpec, WorldConfig
from facecloak.services import fr_models
from facecloak.services.face_world import render_identity, sample_fr_training_set
from facecloak.services.fr_models import (
    ArcMarginHead, ConvEmbedder, Ensemble, cosine_sim, embed, embed_images, embed_with_gradient, train_fr,
)

from conftest import random_model


def test_features_are_unit_norm(tiny_models, tiny_world):
    images = torch.stack([face.image for face in tiny_world.users[0].all_images])
    for model in tiny_models.values():
        features = embed(model, images)
        assert features.shape == (len(images), model.feature_dim)
        assert torch.allclose(features.norm(dim=1), torch.ones(len(images)), atol=1e-5)


def test_single_and_batched_embeddings_agree(tiny_models, tiny_world):
    model = tiny_models["m0"]
    faces = tiny_world.users[1].query_images
    batch = embed_images(model, [face.image for face in faces])
    for row, face in zip(batch, faces):
        assert torch.allclose(row, embed(model, face.image), atol=1e-6)


def test_wrong_input_shape(tiny_models):
    with pytest.raises(ShapeError):
        embed(tiny_models["m0"], torch.zeros(3, 8, 8))


def test_indivisible_input_size_rejected():
    with pytest.raises(ConfigurationError):
        ConvEmbedder("conv4", 3, 8, 24)


def test_embed_with_gradient_matches_finite_differences(tiny_models, tiny_world):
    model = tiny_models["m0"].to_double()
    image = tiny_world.users[0].query_images[0].image.to(torch.float64)
    upstream = torch.randn(model.feature_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    gradient = embed_with_gradient(model, image, upstream)

    def objective(x):
        return float((embed(model, x) * upstream).sum())

    h = 1e-6
    for c, y, x in [(0, 4, 4), (1, 8, 7), (2, 11, 9)]:
        bump = torch.zeros_like(image)
        bump[c, y, x] = h
        numeric = (objective(image + bump) - objective(image - bump)) / (2 * h)
        assert float(gradient[c, y, x]) == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_cosine_sim_of_unit_vectors():
    a = torch.tensor([1.0, 0.0])
    b = torch.tensor([0.6, 0.8])
    assert cosine_sim(a, b) == pytest.approx(0.6)
    with pytest.raises(ShapeError):
        cosine_sim(a, torch.tensor([1.0, 0.0, 0.0]))


def test_members_with_different_seeds_disagree(tiny_world):
    a = random_model("a", seed=10)
    b = random_model("b", seed=11)
    images = [face.image for face in tiny_world.users[0].all_images]
    agreement = (embed_images(a, images) * embed_images(b, images)).sum(dim=1).mean()
    assert float(agreement) < 0.99


class TestEnsemble:

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            Ensemble([])

    def test_without(self, tiny_ensemble):
        assert tiny_ensemble.without("m0").ids == ["m1"]

    def test_duplicate_configuration_rejected(self):
        with pytest.raises(ConfigurationError):
            Ensemble([random_model("x", seed=1), random_model("y", seed=1)]).check_distinct()


def test_arc_margin_penalises_target_logit():
    head = ArcMarginHead(feature_dim=4, n_classes=3, scale=16.0, margin=0.3)
    embedding = torch.randn(2, 4, generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([0, 2])
    with_margin = head(embedding, labels)
    head.margin = 0.0
    without_margin = head(embedding, labels)
    rows = torch.arange(2)
    assert torch.all(with_margin[rows, labels] < without_margin[rows, labels])


class TestTrainFR:

    @pytest.fixture(scope="class")
    def fr_faces(self, tiny_config):
        return sample_fr_training_set(tiny_config, "all")

    def _spec(self, **overrides):
        fields = dict(model_id="t", architecture="conv3", loss="softmax", feature_dim=8, epochs=2,
                      batch_size=8, seed=5, accuracy_floor=0.0, verification_triples=50)
        fields.update(overrides)
        return FRTrainSpec(**fields)

    def test_same_seed_same_parameters(self, fr_faces):
        first = train_fr(fr_faces, self._spec())
        second = train_fr(fr_faces, self._spec())
        assert torch.equal(first.parameter_vector(), second.parameter_vector())
        assert 0.0 <= first.accuracy <= 1.0

    def test_arcface_variant_trains(self, fr_faces):
        model = train_fr(fr_faces, self._spec(architecture="conv4", loss="arcface"))
        assert model.loss_id == "arcface" and model.architecture == "conv4"
        assert not any(p.requires_grad for p in model.network.parameters())

    def test_single_identity_rejected(self, fr_faces):
        one = [face for face in fr_faces if face.identity_id == fr_faces[0].identity_id]
        with pytest.raises(ConfigurationError):
            train_fr(one, self._spec())

    def test_accuracy_floor(self, fr_faces, monkeypatch):
        monkeypatch.setattr(fr_models, "verification_accuracy", lambda *args, **kwargs: 0.5)
        with pytest.raises(TrainingFailureError) as excinfo:
            train_fr(fr_faces, self._spec(accuracy_floor=0.9))
        assert excinfo.value.accuracy == 0.5
        assert excinfo.value.model_id == "t"


@pytest.mark.slow
class TestTrainedModel:

    @pytest.fixture(scope="class")
    def trained(self):
        config = WorldConfig(n_fr_identities=40, fr_per_identity=16)
        faces = sample_fr_training_set(config, "all")
        return config, train_fr(faces, FRTrainSpec(model_id="floor", seed=1))

    def test_reaches_floor(self, trained):
        _, model = trained
        assert model.accuracy >= 0.9

    def test_embedding_tolerates_quantisation_noise(self, trained):
        config, model = trained
        generator = torch.Generator().manual_seed(3)
        held_out = [face for identity_id in range(3) for face in render_identity(identity_id, 5, config.seed, config)]
        for face in held_out:
            noise = (torch.rand(face.image.shape, generator=generator) * 2 - 1) / 255.0
            noisy = (face.image + noise).clamp(0.0, 1.0)
            assert cosine_sim(embed(model, face.image), embed(model, noisy)) > 0.9, face.source_ref
