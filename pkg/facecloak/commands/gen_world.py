"""gen-world: render the synthetic population and the FR training identities"""
import logging

from facecloak.commands.context import CommandContext
from facecloak.errors import ConfigurationError
from facecloak.services.face_world import min_separation, sample_fr_training_set, world_from_config

NAME = "gen-world"
HELP = "Render users, noise identities and FR training identities to <output_dir>/world"

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--overwrite', action='store_true', help="Replace an existing world directory")


def run(args, ctx: CommandContext) -> None:
    config = ctx.config.world
    ctx.store.prepare("world", overwrite=args.overwrite)

    separation = min_separation(range(config.n_users + config.n_noise), config.seed, config)
    if separation <= config.separation_floor:
        logger.error(f"Identity separation {separation:.4f} does not exceed floor {config.separation_floor}")
        raise ConfigurationError(
            f"Identities too similar: min separation {separation:.4f} <= floor {config.separation_floor}"
        )
    logger.info(f"Minimum identity separation {separation:.4f} (floor {config.separation_floor})")

    world = world_from_config(config)
    fr_faces = sample_fr_training_set(config, "all")
    ctx.store.save_world(config, world, fr_faces)
    logger.info(f"✅ World written to {ctx.store.path('world')}")
