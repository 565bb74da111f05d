"""Static figures rendered from report records (Agg backend, PNG)."""
import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from facecloak.models.schemas import (  # noqa: E402
    AttackSweepReport, LossBreakdown, ScenarioReport, UserStability,
)

logger = logging.getLogger('facecloak')

DPI = 120


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_loss_curve(log: Sequence[LossBreakdown], path: Path, title: str = "PPT training") -> Path:
    iterations = [row.iteration for row in log]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    top.plot(iterations, [row.total for row in log], label="total")
    top.plot(iterations, [row.protect_logdet_term for row in log], label="-logdet")
    top.plot(iterations, [row.protect_sim_term for row in log], label="similarity")
    top.set_ylabel("loss")
    top.legend(loc='upper right')
    top.set_title(title)
    bottom.plot(iterations, [row.mean_ssim for row in log], color='tab:green', label="mean SSIM")
    bottom.set_ylabel("SSIM")
    bottom.set_xlabel("iteration")
    twin = bottom.twinx()
    twin.semilogy(iterations, [max(row.lambda_ssim, 1e-12) for row in log], color='tab:red', label="lambda")
    twin.set_ylabel("lambda (log)")
    return _save(fig, path)


def plot_scenarios(reports: Sequence[ScenarioReport], path: Path) -> Path:
    """Mean recall per scenario at the largest protected fraction evaluated."""
    best: Dict[str, ScenarioReport] = {}
    for report in reports:
        key = report.scenario.value
        if key not in best or report.protected_fraction > best[key].protected_fraction:
            best[key] = report
    names = sorted(best)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(names)), [best[n].mean_recall for n in names], color='tab:blue')
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=15)
    ax.set_ylabel("mean recall (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def plot_fraction_sweep(reports: Sequence[ScenarioReport], path: Path) -> Path:
    series: Dict[str, List[ScenarioReport]] = {}
    for report in reports:
        series.setdefault(report.scenario.value, []).append(report)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(series):
        points = sorted(series[name], key=lambda r: r.protected_fraction)
        ax.plot([r.protected_fraction for r in points], [r.mean_recall for r in points], marker='o', label=name)
    ax.set_xlabel("protected fraction of DB entries")
    ax.set_ylabel("mean recall (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def plot_user_stability(stability: Sequence[UserStability], path: Path) -> Path:
    users = [row.user_id for row in stability]
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(users)), 4))
    ax.bar(range(len(users)), [row.mean_recall for row in stability],
           yerr=[row.std_recall for row in stability], capsize=3, color='tab:orange')
    ax.set_xticks(range(len(users)))
    ax.set_xticklabels([str(u) for u in users])
    ax.set_xlabel("user")
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def plot_attacks(report: AttackSweepReport, path: Path) -> Path:
    labels = ["none"] + [f"{row.kind}:{row.parameter:g}" for row in report.rows]
    protected = [report.unattacked_recall] + [row.mean_recall for row in report.rows]
    baseline = [report.unattacked_baseline_recall] + [row.baseline_recall for row in report.rows]
    positions = list(range(len(labels)))
    width = 0.4
    fig, ax = plt.subplots(figsize=(max(7, 0.9 * len(labels)), 4))
    ax.bar([p - width / 2 for p in positions], baseline, width, label="unprotected")
    ax.bar([p + width / 2 for p in positions], protected, width, label="protected")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=30)
    ax.set_ylabel("mean recall (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Dict[str, float], path: Path) -> Path:
    names = list(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    values = [rows[n] if math.isfinite(rows[n]) else 0.0 for n in names]
    ax.bar(range(len(names)), values, color='tab:purple')
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel("hard-scenario recall (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)
