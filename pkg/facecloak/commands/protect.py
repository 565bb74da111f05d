"""protect: apply a trained PPT to an image or a directory of frames"""
import logging
import time
from pathlib import Path

from facecloak.commands.context import CommandContext
from facecloak.errors import MissingArtifactError, OutputExistsError
from facecloak.services.ppt_engine import protect_sequence
from facecloak.services.storage import load_image, load_ppt_file, save_image

NAME = "protect"
HELP = "Protect a PNG (or every PNG of a frame directory) with a user's PPT"

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--in', dest='input', required=True, help="PNG file or directory of PNG frames")
    parser.add_argument('--ppt', required=True, help="PPT blob (ppts/user_<id>.bin)")
    parser.add_argument('--out', required=True, help="Output PNG file or directory")
    parser.add_argument('--overwrite', action='store_true')


def run(args, ctx: CommandContext) -> None:
    source = Path(args.input)
    target = Path(args.out)
    if not source.exists():
        raise MissingArtifactError(f"Input not found: {source}")
    ppt = load_ppt_file(Path(args.ppt))
    uv_provider = ctx.world().uv_provider()
    channels = ctx.world().config.channels

    if source.is_dir():
        frames = sorted(source.glob("*.png"))
        if not frames:
            raise MissingArtifactError(f"No PNG frames in {source}")
        if target.exists() and any(target.iterdir()) and not args.overwrite:
            raise OutputExistsError(f"{target} is not empty; pass --overwrite to replace it")
        outputs = [target / frame.name for frame in frames]
    else:
        if target.exists() and not args.overwrite:
            raise OutputExistsError(f"{target} exists; pass --overwrite to replace it")
        frames = [source]
        outputs = [target]

    images = [load_image(frame, channels) for frame in frames]
    refs = [frame.stem for frame in frames]

    started = time.perf_counter()
    results = protect_sequence(images, ppt, uv_provider, refs)
    elapsed = time.perf_counter() - started

    for result, output in zip(results, outputs):
        save_image(output, result.protected_image)
    logger.info(
        f"✅ Protected {len(results)} frame(s) for user {ppt.user_id}; "
        f"mean latency {1000.0 * elapsed / len(results):.1f} ms/frame"
    )
