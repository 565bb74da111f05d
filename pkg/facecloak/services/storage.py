"""Experiment directory persistence.

Layout under the experiment root::

    world/       manifest.json, images/*.png, uv/*.png
    models/      <model_id>.bin + <model_id>.json
    dbs/         <name>.bin feature matrix + <name>.json manifest
    ppts/        user_<id>.bin + user_<id>.json, user_<id>_log.csv
    reports/     JSON and CSV reports
    plots/       PNG figures
    logs/        command logs

Binary blobs start with a magic header and a format version. Every artifact
carries the config hash, either embedded (JSON) or in a ``.meta.json`` sidecar.
"""
import csv
import hashlib
import io
import json
import logging
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel

from facecloak.errors import ArtifactFormatError, MissingArtifactError, OutputExistsError
from facecloak.models.schemas import ExperimentConfig, FacePose, PPTTrainingMeta, WorldConfig
from facecloak.services.face_world import GroundTruthUVProvider, RenderedFace, UserSplit, World
from facecloak.services.fr_models import FRModel, build_network
from facecloak.services.ppt_engine import PPT
from facecloak.services.retrieval import Database, DBEntry

logger = logging.getLogger('facecloak')

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"FCKPT\x00"
PPT_MAGIC = b"FCPPT\x00"
DB_MAGIC = b"FCFDB\x00"
HEADER = struct.Struct("<6sH")
UV_SCALE = 65534


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the configuration."""
    canonical = json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(payload: Any) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode='python')
    if isinstance(payload, list):
        return [_jsonable(item) for item in payload]
    if isinstance(payload, dict):
        return {str(k): _jsonable(v) for k, v in payload.items()}
    if hasattr(payload, 'value') and hasattr(payload, 'name'):
        return payload.value
    return payload


# ─── Images ─────────────────────────────────────────────────────────


def image_to_png_bytes(image: torch.Tensor) -> bytes:
    """(C,H,W) float image in [0,1] -> 8-bit PNG."""
    pixels = np.round(image.detach().cpu().numpy().astype(np.float64).clip(0.0, 1.0) * 255.0).astype(np.uint8)
    array = pixels[0] if pixels.shape[0] == 1 else np.ascontiguousarray(np.transpose(pixels, (1, 2, 0)))
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format='PNG')
    return buffer.getvalue()


def save_image(path: Path, image: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(image_to_png_bytes(image))


def load_image(path: Path, channels: Optional[int] = None) -> torch.Tensor:
    """PNG -> (C,H,W) float32 in [0,1]."""
    if not path.exists():
        raise MissingArtifactError(f"Image not found: {path}")
    with Image.open(path) as img:
        if channels == 1 or (channels is None and img.mode in ('L', 'I;16', 'I')):
            array = np.asarray(img.convert('L'), dtype=np.float32)[None]
        else:
            array = np.transpose(np.asarray(img.convert('RGB'), dtype=np.float32), (2, 0, 1))
    return torch.from_numpy(np.ascontiguousarray(array) / 255.0)


def encode_uv(uv_map: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    """(H,W,2) uv + mask -> (2H, W) uint16: u rows above v rows, 0 marks no face."""
    codes = np.round(uv_map.detach().cpu().numpy().astype(np.float64).clip(0.0, 1.0) * UV_SCALE).astype(np.int64) + 1
    codes[~mask.cpu().numpy()] = 0
    return np.concatenate([codes[..., 0], codes[..., 1]], axis=0).astype(np.uint16)


def decode_uv(codes: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    codes = codes.astype(np.int64)
    height = codes.shape[0] // 2
    u_codes, v_codes = codes[:height], codes[height:]
    mask = (u_codes > 0) & (v_codes > 0)
    uv = np.stack([(u_codes - 1) / UV_SCALE, (v_codes - 1) / UV_SCALE], axis=-1)
    uv = np.where(mask[..., None], uv, -1.0).astype(np.float32)
    return torch.from_numpy(uv), torch.from_numpy(mask)


def save_uv(path: Path, uv_map: torch.Tensor, mask: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_uv(uv_map, mask)).save(path, format='PNG')


def load_uv(path: Path) -> Tuple[torch.Tensor, torch.Tensor]:
    if not path.exists():
        raise MissingArtifactError(f"UV map not found: {path}")
    with Image.open(path) as img:
        codes = np.array(img)
    return decode_uv(codes)


# ─── Blobs ──────────────────────────────────────────────────────────


def _pack(magic: bytes, arrays: Sequence[np.ndarray]) -> bytes:
    body = b"".join(np.ascontiguousarray(a, dtype='<f4').tobytes() for a in arrays)
    return HEADER.pack(magic, FORMAT_VERSION) + body


def _unpack(blob: bytes, magic: bytes, source: Path) -> memoryview:
    if len(blob) < HEADER.size:
        raise ArtifactFormatError(f"{source} is truncated")
    found, version = HEADER.unpack_from(blob)
    if found != magic:
        raise ArtifactFormatError(f"{source} has magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"{source} has format version {version}, expected {FORMAT_VERSION}")
    return memoryview(blob)[HEADER.size:]


def _check_version(meta: Dict, source: Path) -> None:
    if meta.get('format_version') != FORMAT_VERSION:
        raise ArtifactFormatError(
            f"{source} has format version {meta.get('format_version')}, expected {FORMAT_VERSION}"
        )


@dataclass
class WorldBundle:
    """A persisted world reloaded from disk"""
    config: WorldConfig
    world: World
    fr_faces: List[RenderedFace] = field(default_factory=list)

    @property
    def all_faces(self) -> List[RenderedFace]:
        faces = [face for user in self.world.users for face in user.all_images]
        return faces + list(self.world.noise_images) + list(self.fr_faces)

    def uv_provider(self) -> GroundTruthUVProvider:
        return GroundTruthUVProvider.from_faces(self.all_faces)

    def user(self, user_id: int) -> UserSplit:
        for split in self.world.users:
            if split.user_id == user_id:
                return split
        raise MissingArtifactError(f"User {user_id} is not part of the world")


class ExperimentStore:
    """Reads and writes artifacts below one experiment directory"""

    def __init__(self, root: Path, config_hash: str = ""):
        self.root = Path(root)
        self.config_hash = config_hash

    def _get_full_path(self, relative_path: str) -> Path:
        """Resolve a path inside the experiment directory."""
        relative_path = relative_path.lstrip("/")
        full_path = self.root / relative_path
        if not full_path.resolve().is_relative_to(self.root.resolve()):
            raise ValueError(f"Path outside experiment directory: {relative_path}")
        return full_path

    def path(self, relative_path: str) -> Path:
        return self._get_full_path(relative_path)

    def prepare(self, subdir: str, overwrite: bool = False) -> Path:
        """Create ``subdir``; refuse if it already holds files unless ``overwrite``."""
        target = self._get_full_path(subdir)
        if target.exists() and any(target.iterdir()):
            if not overwrite:
                raise OutputExistsError(f"{target} is not empty; pass --overwrite to replace it")
            logger.warning(f"Overwriting {target}")
            shutil.rmtree(target)
        target.mkdir(parents=True, exist_ok=True)
        return target

    def require(self, relative_path: str, what: str) -> Path:
        target = self._get_full_path(relative_path)
        if not target.exists():
            raise MissingArtifactError(f"Missing {what}: {target} (run the producing command first)")
        return target

    # JSON / CSV

    def write_json(self, relative_path: str, payload: Any, embed_meta: bool = True) -> Path:
        target = self._get_full_path(relative_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        body = _jsonable(payload)
        if embed_meta:
            body = {"format_version": FORMAT_VERSION, "config_hash": self.config_hash, "data": body}
        target.write_text(_dumps(body), encoding='utf-8')
        logger.info(f"Wrote {target}")
        return target

    def read_json(self, relative_path: str) -> Any:
        target = self.require(relative_path, "JSON artifact")
        try:
            content = json.loads(target.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ArtifactFormatError(f"{target} is not valid JSON: {e}") from e
        if isinstance(content, dict) and "data" in content:
            _check_version(content, target)
            return content["data"]
        return content

    def write_sidecar(self, target: Path, kind: str, extra: Optional[Dict] = None) -> Path:
        meta = {"format_version": FORMAT_VERSION, "config_hash": self.config_hash, "kind": kind}
        meta.update(extra or {})
        sidecar = target.with_name(target.name + ".meta.json")
        sidecar.write_text(_dumps(meta), encoding='utf-8')
        return sidecar

    def write_csv(self, relative_path: str, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str]) -> Path:
        target = self._get_full_path(relative_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open('w', encoding='utf-8', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fieldnames), lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _csv_value(row.get(key)) for key in fieldnames})
        self.write_sidecar(target, "csv")
        logger.info(f"Wrote {target}")
        return target

    # World

    def save_world(self, config: WorldConfig, world: World, fr_faces: Sequence[RenderedFace] = ()) -> Path:
        records: List[Dict[str, Any]] = []

        def add(face: RenderedFace, role: str, user_id: Optional[int]) -> None:
            image_rel = f"images/{face.source_ref}.png"
            uv_rel = f"uv/{face.source_ref}.png"
            save_image(self._get_full_path(f"world/{image_rel}"), face.image)
            save_uv(self._get_full_path(f"world/{uv_rel}"), face.uv_map, face.validity_mask)
            records.append({
                "source_ref": face.source_ref,
                "identity_id": face.identity_id,
                "user_id": user_id,
                "split": role,
                "pose": face.pose.model_dump(),
                "image": image_rel,
                "uv": uv_rel,
            })

        for user in world.users:
            for role, faces in (("query", user.query_images), ("train_db", user.train_db_images),
                                ("unseen_db", user.unseen_db_images)):
                for face in faces:
                    add(face, role, user.user_id)
        for face in world.noise_images:
            add(face, "noise", None)
        for face in fr_faces:
            add(face, "fr_train", None)

        manifest = {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "world_config": config.model_dump(mode='json'),
            "renders": records,
        }
        target = self._get_full_path("world/manifest.json")
        target.write_text(_dumps(manifest), encoding='utf-8')
        logger.info(f"Wrote world manifest with {len(records)} renders to {target}")
        return target

    def load_world(self) -> WorldBundle:
        manifest_path = self.require("world/manifest.json", "world dataset")
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        _check_version(manifest, manifest_path)
        config = WorldConfig.model_validate(manifest["world_config"])

        users: Dict[int, UserSplit] = {}
        noise: List[RenderedFace] = []
        fr_faces: List[RenderedFace] = []
        for record in manifest["renders"]:
            image = load_image(self._get_full_path(f"world/{record['image']}"), config.channels)
            uv_map, mask = load_uv(self._get_full_path(f"world/{record['uv']}"))
            face = RenderedFace(
                image=image,
                uv_map=uv_map,
                validity_mask=mask,
                identity_id=record["identity_id"],
                pose=FacePose.model_validate(record["pose"]),
                source_ref=record["source_ref"],
            )
            split = record["split"]
            if split == "noise":
                noise.append(face)
            elif split == "fr_train":
                fr_faces.append(face)
            else:
                user = users.setdefault(record["user_id"], UserSplit(user_id=record["user_id"]))
                getattr(user, f"{split}_images").append(face)
        world = World(users=[users[k] for k in sorted(users)], noise_images=noise)
        logger.info(f"Loaded world: {len(world.users)} users, {len(noise)} noise renders, {len(fr_faces)} FR renders")
        return WorldBundle(config=config, world=world, fr_faces=fr_faces)

    # FR checkpoints

    def save_model(self, model: FRModel) -> Path:
        state = model.network.state_dict()
        target = self._get_full_path(f"models/{model.model_id}.bin")
        target.parent.mkdir(parents=True, exist_ok=True)
        blob = _pack(CHECKPOINT_MAGIC, [t.detach().cpu().numpy() for t in state.values()])
        target.write_bytes(blob)
        sidecar = dict(model.describe())
        sidecar.update({
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "tensors": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
        target.with_suffix(".json").write_text(_dumps(sidecar), encoding='utf-8')
        logger.info(f"Saved checkpoint {target}")
        return target

    def load_model(self, model_id: str) -> FRModel:
        blob_path = self.require(f"models/{model_id}.bin", f"checkpoint for {model_id}")
        meta_path = self.require(f"models/{model_id}.json", f"checkpoint sidecar for {model_id}")
        meta = json.loads(meta_path.read_text(encoding='utf-8'))
        _check_version(meta, meta_path)
        body = _unpack(blob_path.read_bytes(), CHECKPOINT_MAGIC, blob_path)

        network = build_network(meta["architecture_id"], meta["channels"], meta["feature_dim"], meta["input_size"])
        state = network.state_dict()
        offset = 0
        loaded = {}
        for tensor in meta["tensors"]:
            count = int(np.prod(tensor["shape"])) if tensor["shape"] else 1
            values = np.frombuffer(body, dtype='<f4', count=count, offset=offset * 4)
            loaded[tensor["name"]] = torch.from_numpy(values.copy()).reshape(tensor["shape"])
            offset += count
        if offset * 4 != len(body) or set(loaded) != set(state):
            raise ArtifactFormatError(f"{blob_path} does not match the tensors listed in {meta_path}")
        network.load_state_dict(loaded)
        return FRModel(
            network=network,
            model_id=meta["model_id"],
            architecture=meta["architecture_id"],
            loss_id=meta["loss_id"],
            feature_dim=meta["feature_dim"],
            training_seed=meta["training_seed"],
            input_size=meta["input_size"],
            channels=meta["channels"],
            accuracy=meta.get("accuracy"),
        )

    # PPTs

    def save_ppt(self, ppt: PPT) -> Path:
        target = self._get_full_path(f"ppts/user_{ppt.user_id}.bin")
        target.parent.mkdir(parents=True, exist_ok=True)
        blob = _pack(PPT_MAGIC, [ppt.texture.detach().cpu().numpy()])
        target.write_bytes(blob)
        sidecar = {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "user_id": ppt.user_id,
            "epsilon": ppt.epsilon,
            "deformation": ppt.deformation,
            "shape": list(ppt.texture.shape),
            "training_meta": ppt.training_meta.model_dump() if ppt.training_meta else None,
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        target.with_suffix(".json").write_text(_dumps(sidecar), encoding='utf-8')
        logger.info(f"Saved PPT {target}")
        return target

    def load_ppt(self, user_id: int) -> PPT:
        return load_ppt_file(self.require(f"ppts/user_{user_id}.bin", f"PPT for user {user_id}"))

    def load_ppts(self, user_ids: Iterable[int]) -> Dict[int, PPT]:
        return {user_id: self.load_ppt(user_id) for user_id in user_ids}

    # Feature databases

    def save_db(self, db: Database, name: str) -> Path:
        """Feature matrix as ``dbs/<name>.bin``, entry metadata as ``dbs/<name>.json``."""
        target = self._get_full_path(f"dbs/{name}.bin")
        target.parent.mkdir(parents=True, exist_ok=True)
        blob = _pack(DB_MAGIC, [db.features])
        target.write_bytes(blob)
        self.write_json(f"dbs/{name}.json", {
            "model_id": db.model_id,
            "feature_dim": int(db.features.shape[1]) if len(db) else 0,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "entries": [
                {
                    "entry_id": entry.entry_id,
                    "identity_id": entry.identity_id,
                    "content_ref": entry.content_ref,
                    "protected": entry.protected,
                }
                for entry in db.entries
            ],
        })
        logger.info(f"Saved database of {len(db)} entries for {db.model_id} to {target}")
        return target

    def load_db(self, name: str) -> Database:
        blob_path = self.require(f"dbs/{name}.bin", f"feature database {name}")
        manifest = self.read_json(f"dbs/{name}.json")
        body = _unpack(blob_path.read_bytes(), DB_MAGIC, blob_path)
        records = manifest["entries"]
        dim = manifest["feature_dim"]
        values = np.frombuffer(body, dtype='<f4')
        if values.size != len(records) * dim:
            raise ArtifactFormatError(
                f"{blob_path} holds {values.size} values, manifest expects {len(records)}x{dim}"
            )
        features = values.astype(np.float64).reshape(len(records), dim)
        entries = [
            DBEntry(
                entry_id=record["entry_id"],
                identity_id=record["identity_id"],
                feature=features[index],
                content_ref=record["content_ref"],
                protected=record["protected"],
            )
            for index, record in enumerate(records)
        ]
        return Database(entries=entries, model_id=manifest["model_id"])


def load_ppt_file(blob_path: Path) -> PPT:
    """Load a PPT from its blob path; the JSON sidecar sits next to it."""
    blob_path = Path(blob_path)
    if blob_path.suffix == ".json":
        blob_path = blob_path.with_suffix(".bin")
    meta_path = blob_path.with_suffix(".json")
    if not blob_path.exists() or not meta_path.exists():
        raise MissingArtifactError(f"PPT not found: {blob_path}")
    meta = json.loads(meta_path.read_text(encoding='utf-8'))
    _check_version(meta, meta_path)
    body = _unpack(blob_path.read_bytes(), PPT_MAGIC, blob_path)
    shape = meta["shape"]
    values = np.frombuffer(body, dtype='<f4')
    if values.size != int(np.prod(shape)):
        raise ArtifactFormatError(f"{blob_path} holds {values.size} values, sidecar expects {shape}")
    meta_training = meta.get("training_meta")
    return PPT(
        texture=torch.from_numpy(values.copy()).reshape(shape),
        epsilon=meta["epsilon"],
        user_id=meta["user_id"],
        training_meta=PPTTrainingMeta.model_validate(meta_training) if meta_training else None,
        deformation=meta.get("deformation", "uv"),
    )


def _csv_value(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(str(v) for v in value)
    if value is None:
        return ""
    return value
