"""evaluate: scenario recall, protected-fraction sweep, per-user stability, geometry and quality"""
import logging
from typing import List

from facecloak.commands.context import CommandContext
from facecloak.models.schemas import Scenario, ScenarioReport
from facecloak.services import plots
from facecloak.services.retrieval import HARD_SCENARIO, feature_geometry, run_scenario, scenario_db, user_stability
from facecloak.services.robustness import quality_report

NAME = "evaluate"
HELP = "Run the retrieval scenarios against the intruder model and write reports"

STABILITY_FRACTION = 0.5
SWEEP_FIELDS = ["scenario", "protected_fraction", "model_id", "seed", "user_id", "recall", "queries"]

logger = logging.getLogger('facecloak')


def add_arguments(parser) -> None:
    parser.add_argument('--scenario', action='append', dest='scenarios', choices=[s.value for s in Scenario],
                        help="Scenario to evaluate (repeatable); defaults to the configured list")
    parser.add_argument('--fraction', action='append', dest='fractions', type=float,
                        help="Protected fraction of DB entries (repeatable); defaults to the configured grid")


def sweep_rows(reports: List[ScenarioReport]) -> List[dict]:
    rows = []
    for report in reports:
        for user_id in sorted(report.per_user_recall):
            rows.append({
                "scenario": report.scenario.value,
                "protected_fraction": report.protected_fraction,
                "model_id": report.model_id,
                "seed": report.seed,
                "user_id": user_id,
                "recall": report.per_user_recall[user_id],
                "queries": report.queries_per_user.get(user_id, 0),
            })
    return rows


def run(args, ctx: CommandContext) -> None:
    config = ctx.config
    scenarios = [Scenario(s) for s in args.scenarios] if args.scenarios else list(config.scenarios)
    fractions = args.fractions if args.fractions else list(config.protected_fractions)
    world = ctx.world().world
    intruder = ctx.intruder()
    needs_ppts = any(s != Scenario.BASELINE for s in scenarios)
    ppts = ctx.ppts() if needs_ppts else {}
    ctx.store.save_db(scenario_db(world, None, {}, intruder, Scenario.BASELINE, 0.0, config.seed),
                      f"{intruder.model_id}_baseline")

    reports = []
    for scenario in scenarios:
        for fraction in fractions:
            report = run_scenario(world, None, ppts, intruder, scenario, fraction, config.seed)
            logger.info(
                f"{scenario.value} @ {fraction:.2f}: mean recall {report.mean_recall:.2f}% "
                f"(per query {report.query_mean_recall:.2f}%)"
            )
            reports.append(report)

    ctx.store.write_json("reports/scenarios.json", reports)
    ctx.store.write_csv("reports/scenario_sweep.csv", sweep_rows(reports), SWEEP_FIELDS)
    plots.plot_scenarios(reports, ctx.store.path("plots/scenarios.png"))
    plots.plot_fraction_sweep(reports, ctx.store.path("plots/fraction_sweep.png"))

    if not needs_ppts:
        return

    stability = user_stability(world, None, ppts, intruder, HARD_SCENARIO, STABILITY_FRACTION, config.eval_seeds)
    ctx.store.write_json("reports/user_stability.json", stability)
    ctx.store.write_csv(
        "reports/user_stability.csv",
        (row.model_dump() for row in stability),
        ["user_id", "mean_recall", "std_recall", "runs"],
    )
    plots.plot_user_stability(stability, ctx.store.path("plots/user_stability.png"))

    geometry = feature_geometry(world.users, ppts, intruder)
    ctx.store.write_json("reports/feature_geometry.json", geometry)

    quality = quality_report(world.users, ppts)
    ctx.store.write_json("reports/quality.json", quality)
    ctx.store.write_csv(
        "reports/quality.csv", (row.model_dump() for row in quality), ["user_id", "ssim", "psnr", "l0", "images"]
    )
