"""Shared state handed to every sub-command"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from facecloak.errors import MissingArtifactError
from facecloak.models.schemas import ExperimentConfig
from facecloak.services.fr_models import Ensemble, FRModel
from facecloak.services.ppt_engine import PPT
from facecloak.services.storage import ExperimentStore, WorldBundle, config_hash

logger = logging.getLogger('facecloak')


@dataclass
class CommandContext:
    config: ExperimentConfig
    store: ExperimentStore
    _world: Optional[WorldBundle] = field(default=None, repr=False)
    _models: Dict[str, FRModel] = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "CommandContext":
        return cls(config=config, store=ExperimentStore(Path(config.output_dir), config_hash(config)))

    @property
    def root(self) -> Path:
        return self.store.root

    def world(self) -> WorldBundle:
        if self._world is None:
            self._world = self.store.load_world()
        return self._world

    def model(self, model_id: str) -> FRModel:
        if model_id not in self._models:
            self._models[model_id] = self.store.load_model(model_id)
        return self._models[model_id]

    def intruder(self) -> FRModel:
        return self.model(self.config.intruder_model_id)

    def ensemble(self, model_ids: Optional[List[str]] = None) -> Ensemble:
        return Ensemble([self.model(m) for m in (model_ids or self.config.ensemble_model_ids)])

    def user_ids(self) -> List[int]:
        return [user.user_id for user in self.world().world.users]

    def ppts(self) -> Dict[int, PPT]:
        """Every user's trained PPT; all users must have one."""
        missing = [u for u in self.user_ids() if not self.store.path(f"ppts/user_{u}.bin").exists()]
        if missing:
            raise MissingArtifactError(f"No PPT for users {missing}; run train-ppt first")
        return self.store.load_ppts(self.user_ids())
