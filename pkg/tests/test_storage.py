"""Tests for experiment-directory persistence."""
import json

import numpy as np
import pytest
import torch

from facecloak.errors import ArtifactFormatError, ConsistencyError, MissingArtifactError, OutputExistsError
from facecloak.models.schemas import ExperimentConfig, PPTTrainingMeta, PPTTrainSpec, TransferResult
from facecloak.services.fr_models import embed
from facecloak.services.ppt_engine import PPT
from facecloak.services.retrieval import DBItem, build_db, search
from facecloak.services.storage import (
    FORMAT_VERSION, UV_SCALE, ExperimentStore, config_hash, decode_uv, encode_uv, load_image, load_ppt_file,
    save_image,
)


def reject_constant(token):
    raise ValueError(f"non-standard JSON token {token}")


@pytest.fixture
def store(tmp_path):
    return ExperimentStore(tmp_path / "exp", config_hash="abc123")


class TestConfigHash:

    def test_stable(self):
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
        assert len(config_hash(ExperimentConfig())) == 64

    def test_sensitive_to_changes(self):
        assert config_hash(ExperimentConfig(seed=1)) != config_hash(ExperimentConfig(seed=2))


class TestImagesAndUV:

    def test_png_quantisation(self, tmp_path, tiny_world):
        image = tiny_world.users[0].query_images[0].image
        path = tmp_path / "face.png"
        save_image(path, image)
        loaded = load_image(path, 3)
        assert loaded.shape == image.shape
        assert float((loaded - image).abs().max()) <= 0.5 / 255.0 + 1e-6

    def test_missing_image(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_image(tmp_path / "nope.png")

    def test_uv_codes(self, tiny_world):
        face = tiny_world.users[0].query_images[0]
        codes = encode_uv(face.uv_map, face.validity_mask)
        assert codes.dtype == np.uint16
        assert codes.shape == (2 * face.uv_map.shape[0], face.uv_map.shape[1])
        uv, mask = decode_uv(codes)
        assert torch.equal(mask, face.validity_mask)
        inside = face.validity_mask
        assert float((uv[inside] - face.uv_map[inside]).abs().max()) <= 0.5 / UV_SCALE + 1e-7
        assert torch.all(uv[~inside] == -1.0)


class TestStore:

    def test_path_escape_rejected(self, store):
        with pytest.raises(ValueError):
            store.path("../outside.json")

    def test_sibling_directory_rejected(self, store):
        with pytest.raises(ValueError):
            store.path("../exp2/report.json")

    def test_prepare_refuses_occupied_directory(self, store):
        target = store.prepare("world")
        (target / "file.txt").write_text("x")
        with pytest.raises(OutputExistsError):
            store.prepare("world")
        store.prepare("world", overwrite=True)
        assert not any(target.iterdir())

    def test_json_envelope(self, store):
        path = store.write_json("reports/r.json", {"a": 1.5, "b": None})
        raw = json.loads(path.read_text())
        assert raw["format_version"] == FORMAT_VERSION
        assert raw["config_hash"] == "abc123"
        assert store.read_json("reports/r.json")["a"] == 1.5

    def test_non_finite_values_rejected(self, store):
        with pytest.raises(ValueError):
            store.write_json("reports/bad.json", {"psnr": float('inf')})
        with pytest.raises(ValueError):
            store.write_json("reports/bad.json", {"recall": float('nan')})

    def test_complete_protection_is_strict_json(self, store):
        result = TransferResult(model_id="m", train_ensemble=["a"], baseline_recall=60.0, protected_recall=0.0)
        assert result.reduction is None
        path = store.write_json("reports/loo.json", {"m": dict(result.model_dump(), reduction=result.reduction)})
        data = json.loads(path.read_text(), parse_constant=reject_constant)["data"]
        assert data["m"]["reduction"] is None
        partial = TransferResult(model_id="m", train_ensemble=["a"], baseline_recall=60.0, protected_recall=20.0)
        assert partial.reduction == pytest.approx(3.0)

    def test_unknown_json_version(self, store):
        path = store.path("reports/old.json")
        path.parent.mkdir(parents=True)
        path.write_text(json.dumps({"format_version": 99, "data": {}}))
        with pytest.raises(ArtifactFormatError):
            store.read_json("reports/old.json")

    def test_csv_is_deterministic_with_sidecar(self, store):
        rows = [{"name": "x", "value": 0.1, "ids": [1, 2]}, {"name": "y", "value": None, "ids": []}]
        first = store.write_csv("reports/t.csv", rows, ["name", "value", "ids"]).read_bytes()
        second = store.write_csv("reports/t.csv", rows, ["name", "value", "ids"]).read_bytes()
        assert first == second
        assert first.decode().splitlines() == ["name,value,ids", "x,0.1,1;2", "y,,"]
        sidecar = json.loads(store.path("reports/t.csv.meta.json").read_text())
        assert sidecar["config_hash"] == "abc123"


class TestWorld:

    def test_round_trip_preserves_splits(self, store, tiny_world, tiny_config):
        store.save_world(tiny_config, tiny_world)
        bundle = store.load_world()
        assert bundle.config == tiny_config
        assert [u.user_id for u in bundle.world.users] == [u.user_id for u in tiny_world.users]
        for saved, loaded in zip(tiny_world.users, bundle.world.users):
            assert [f.source_ref for f in loaded.query_images] == [f.source_ref for f in saved.query_images]
            assert [f.source_ref for f in loaded.train_db_images] == [f.source_ref for f in saved.train_db_images]
            assert [f.source_ref for f in loaded.unseen_db_images] == [f.source_ref for f in saved.unseen_db_images]
            assert all(torch.equal(a.validity_mask, b.validity_mask) for a, b in zip(saved.all_images, loaded.all_images))
        assert len(bundle.world.noise_images) == len(tiny_world.noise_images)
        assert bundle.fr_faces == []

    def test_manifest_is_deterministic(self, tmp_path, tiny_world, tiny_config):
        manifests = []
        for name in ("a", "b"):
            exp = ExperimentStore(tmp_path / name, "h")
            manifests.append(exp.save_world(tiny_config, tiny_world).read_bytes())
        assert manifests[0] == manifests[1]

    def test_provider_serves_every_render(self, store, tiny_world, tiny_config):
        store.save_world(tiny_config, tiny_world)
        bundle = store.load_world()
        provider = bundle.uv_provider()
        face = bundle.world.noise_images[0]
        uv, mask = provider.estimate(face.image, face.source_ref)
        assert torch.equal(mask, face.validity_mask)
        with pytest.raises(MissingArtifactError):
            bundle.user(99)

    def test_missing_world(self, store):
        with pytest.raises(MissingArtifactError):
            store.load_world()


class TestCheckpoints:

    def test_model_round_trip(self, store, tiny_models, tiny_world):
        model = tiny_models["m1"]
        store.save_model(model)
        loaded = store.load_model("m1")
        assert loaded.describe() == model.describe()
        image = tiny_world.users[0].query_images[0].image
        assert torch.equal(embed(loaded, image), embed(model, image))

    def test_bad_magic(self, store, tiny_models):
        path = store.save_model(tiny_models["m0"])
        blob = bytearray(path.read_bytes())
        blob[:6] = b"XXXXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(ArtifactFormatError):
            store.load_model("m0")

    def test_unknown_version(self, store, tiny_models):
        path = store.save_model(tiny_models["m0"])
        sidecar = path.with_suffix(".json")
        meta = json.loads(sidecar.read_text())
        meta["format_version"] = FORMAT_VERSION + 1
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(ArtifactFormatError):
            store.load_model("m0")

    def test_truncated_blob(self, store, tiny_models):
        path = store.save_model(tiny_models["m0"])
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ArtifactFormatError):
            store.load_model("m0")

    def test_missing_model(self, store):
        with pytest.raises(MissingArtifactError):
            store.load_model("ghost")


class TestPPTFiles:

    def test_round_trip(self, store):
        texture = torch.linspace(-0.05, 0.05, 3 * 8 * 8).reshape(3, 8, 8)
        meta = PPTTrainingMeta.from_spec(PPTTrainSpec(), ["a", "b"], 4)
        path = store.save_ppt(PPT(texture=texture, epsilon=0.063, user_id=4, training_meta=meta))
        loaded = load_ppt_file(path)
        assert torch.equal(loaded.texture, texture)
        assert loaded.user_id == 4 and loaded.epsilon == 0.063
        assert loaded.training_meta.ensemble_ids == ["a", "b"]
        assert store.load_ppts([4])[4].deformation == "uv"

    def test_sidecar_path_accepted(self, store):
        path = store.save_ppt(PPT.zeros(3, 4, 0.1, user_id=0))
        assert load_ppt_file(path.with_suffix(".json")).texture.shape == (3, 4, 4)

    def test_wrong_magic(self, store, tiny_models):
        model_path = store.save_model(tiny_models["m0"])
        ppt_path = store.save_ppt(PPT.zeros(3, 4, 0.1, user_id=0))
        ppt_path.write_bytes(model_path.read_bytes())
        with pytest.raises(ArtifactFormatError):
            load_ppt_file(ppt_path)

    def test_missing(self, store):
        with pytest.raises(MissingArtifactError):
            store.load_ppt(3)


class TestFeatureDatabases:

    @pytest.fixture
    def database(self, tiny_world, tiny_models):
        items = [
            DBItem(face.image, face.identity_id, face.source_ref, index % 2 == 0)
            for index, face in enumerate(tiny_world.users[0].db_images + tiny_world.noise_images)
        ]
        return build_db(items, tiny_models["m0"])

    def test_round_trip(self, store, database):
        path = store.save_db(database, "m0_baseline")
        manifest = json.loads(path.with_suffix(".json").read_text(), parse_constant=reject_constant)
        assert manifest["format_version"] == FORMAT_VERSION
        loaded = store.load_db("m0_baseline")
        assert loaded.model_id == "m0"
        assert [(e.entry_id, e.identity_id, e.content_ref, e.protected) for e in loaded.entries] == \
            [(e.entry_id, e.identity_id, e.content_ref, e.protected) for e in database.entries]
        np.testing.assert_allclose(loaded.features, database.features, atol=1e-6)

    def test_reloaded_database_keeps_its_model(self, store, database, tiny_models, tiny_world):
        store.save_db(database, "m0_baseline")
        loaded = store.load_db("m0_baseline")
        query = tiny_world.users[0].query_images[0].image
        reloaded_scores = [score for _, score in search(query, tiny_models["m0"], loaded, 3)]
        original_scores = [score for _, score in search(query, tiny_models["m0"], database, 3)]
        assert reloaded_scores == pytest.approx(original_scores, abs=1e-5)
        with pytest.raises(ConsistencyError):
            search(query, tiny_models["m1"], loaded, 3)

    def test_truncated_blob(self, store, database):
        path = store.save_db(database, "m0_baseline")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ArtifactFormatError):
            store.load_db("m0_baseline")

    def test_wrong_magic(self, store, database):
        path = store.save_db(database, "m0_baseline")
        path.write_bytes(store.save_ppt(PPT.zeros(3, 4, 0.1, user_id=0)).read_bytes())
        with pytest.raises(ArtifactFormatError):
            store.load_db("m0_baseline")

    def test_missing(self, store):
        with pytest.raises(MissingArtifactError):
            store.load_db("nothing")
