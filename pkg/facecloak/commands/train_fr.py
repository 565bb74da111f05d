"""train-fr: train the configured roster of toy FR models"""
import logging

from facecloak.commands.context import CommandContext
from facecloak.errors import ConfigurationError
from facecloak.services.face_world import fr_identity_ids
from facecloak.services.fr_models import Ensemble, train_fr

NAME = "train-fr"
HELP = "Train every roster model on the FR training identities and write checkpoints"

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--model', action='append', dest='models', metavar='MODEL_ID',
                        help="Train only this roster model (repeatable)")


def run(args, ctx: CommandContext) -> None:
    config = ctx.config
    bundle = ctx.world()
    if not bundle.fr_faces:
        raise ConfigurationError("The world holds no FR training renders; regenerate it with gen-world")

    roster_ids = [entry.model_id for entry in config.fr_roster]
    model_ids = args.models or roster_ids
    unknown = [m for m in model_ids if m not in roster_ids]
    if unknown:
        raise ConfigurationError(f"Models not in fr_roster: {unknown}")
    accuracy = {}
    trained = []
    for model_id in model_ids:
        spec = config.train_spec_for(model_id)
        allowed = set(fr_identity_ids(bundle.config, spec.identity_subset))
        dataset = [face for face in bundle.fr_faces if face.identity_id in allowed]
        model = train_fr(dataset, spec)
        ctx.store.save_model(model)
        accuracy[model_id] = {
            "accuracy": model.accuracy,
            "architecture": model.architecture,
            "loss": model.loss_id,
            "seed": model.training_seed,
            "identity_subset": spec.identity_subset,
            "identities": len(allowed),
            "renders": len(dataset),
        }
        trained.append(model)

    if len(trained) > 1:
        Ensemble(trained).check_distinct()
    ctx.store.write_json("reports/fr_accuracy.json", accuracy)
