"""transfer: leave-one-out ensemble transfer and exhaustive small-team search"""
import logging

from facecloak.commands.context import CommandContext
from facecloak.services.fr_models import Ensemble
from facecloak.services.retrieval import leave_one_out, subset_transfer

NAME = "transfer"
HELP = "Measure how PPTs trained on part of the roster transfer to held-out models"

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--teams', action='store_true', help="Also enumerate teams (transfer.run_subsets)")


def run(args, ctx: CommandContext) -> None:
    config = ctx.config
    world = ctx.world().world
    spec = config.ppt_base_spec()
    texture_size = config.world.texture_size
    pool_ids = config.transfer.pool_ids or config.ensemble_model_ids

    loo = leave_one_out(world, None, ctx.ensemble(pool_ids), spec, config.seed, texture_size)
    ctx.store.write_json("reports/transfer_loo.json", {
        model_id: dict(result.model_dump(), reduction=result.reduction) for model_id, result in loo.items()
    })

    if not (args.teams or config.transfer.run_subsets):
        return
    holdout_ids = config.transfer.holdout_ids or [config.intruder_model_id]
    teams = subset_transfer(
        world, None, Ensemble([ctx.model(m) for m in pool_ids]), config.transfer.team_size,
        [ctx.model(m) for m in holdout_ids], spec, config.seed, texture_size,
    )
    ctx.store.write_json("reports/transfer_teams.json", teams)
    rows = []
    for rank, team in enumerate(teams):
        for holdout_id, value in sorted(team.holdout_recall.items()):
            rows.append({
                "rank": rank,
                "team": "+".join(team.team),
                "holdout_id": holdout_id,
                "recall": value,
                "mean_holdout_recall": team.mean_holdout_recall,
            })
    ctx.store.write_csv(
        "reports/transfer_teams.csv", rows, ["rank", "team", "holdout_id", "recall", "mean_holdout_recall"]
    )
