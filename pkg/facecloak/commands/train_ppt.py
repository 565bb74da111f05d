"""train-ppt: optimise one privacy protection texture per user"""
import logging

from facecloak.commands.context import CommandContext
from facecloak.services.plots import plot_loss_curve
from facecloak.services.ppt_engine import train_ppt

NAME = "train-ppt"
HELP = "Train PPTs against the configured ensemble; writes ppts/ and loss curves"

LOG_FIELDS = [
    "iteration", "protect_logdet_term", "protect_sim_term", "percept_term",
    "lambda_ssim", "total", "mean_ssim", "max_abs_texture",
]

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--user', action='append', type=int, dest='users', metavar='USER_ID',
                        help="User to train (repeatable); defaults to every user")


def run(args, ctx: CommandContext) -> None:
    config = ctx.config
    bundle = ctx.world()
    ensemble = ctx.ensemble()
    user_ids = args.users if args.users else ctx.user_ids()

    for user_id in user_ids:
        split = bundle.user(user_id)
        ppt, log = train_ppt(split, ensemble, config.ppt_spec_for(user_id), config.world.texture_size)
        ctx.store.save_ppt(ppt)
        ctx.store.write_csv(f"ppts/user_{user_id}_log.csv", (row.model_dump() for row in log), LOG_FIELDS)
        if log:
            plot_loss_curve(log, ctx.store.path(f"plots/loss_user_{user_id}.png"), title=f"user {user_id}")
            last = log[-1]
            logger.info(
                f"✅ PPT for user {user_id}: total={last.total:.4f} ssim={last.mean_ssim:.4f} "
                f"max|T|={last.max_abs_texture:.4f}"
            )
