"""Width x groups sweep: parameter counts, optional short training, Pareto front."""
from typing import Iterable, Optional, Sequence

import structlog

from ..models.enums import Preset
from ..models.network import analytic_parameter_count, build, conv_to_nmf_ratio, preset_config
from ..schemas.experiments import SweepRow
from ..schemas.train import TrainConfig
from .cifar import Dataset
from .trainer import evaluate, fit

log = structlog.get_logger(__name__)

SWEEP_WIDTHS = (1, 2, 4, 8)
SWEEP_GROUPS = (1, 2, 4, 8, 16)


def pareto_front(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of (cost, score) points not dominated by another point, i.e.
    no other point has cost <= and score >= with at least one strict."""
    front = []
    for i, (cost, score) in enumerate(points):
        dominated = any(
            c <= cost and s >= score and (c < cost or s > score)
            for j, (c, s) in enumerate(points)
            if j != i
        )
        if not dominated:
            front.append(i)
    return front


def sweep(
    preset: Preset = Preset.CNMF_MIX,
    widths: Iterable[int] = SWEEP_WIDTHS,
    groups: Iterable[int] = SWEEP_GROUPS,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    train_cfg: Optional[TrainConfig] = None,
    seed: int = 0,
) -> list[SweepRow]:
    """One row per (width, groups); with `train` and `test` every config is
    trained with `train_cfg` and scored on `test`."""
    rows = []
    for width in widths:
        for g in groups:
            config = preset_config(preset, width_multiplier=width, groups=g)
            counts = analytic_parameter_count(config)
            row = SweepRow(
                preset=preset,
                width_multiplier=width,
                groups=g,
                nmf_parameters=counts["nmf"],
                conv_parameters=counts["conv"],
                parameters=counts["total"],
                conv_to_nmf_ratio=conv_to_nmf_ratio(counts),
            )
            if train is not None and test is not None:
                model = build(config, seed=seed)
                fit(model, train, train_cfg)
                row.test_accuracy = evaluate(model, test, cfg=train_cfg)[1]
            log.info("sweep point", width=width, groups=g, parameters=row.parameters, accuracy=row.test_accuracy)
            rows.append(row)

    scored = [i for i, r in enumerate(rows) if r.test_accuracy is not None]
    for k in pareto_front([(rows[i].parameters, rows[i].test_accuracy) for i in scored]):
        rows[scored[k]].pareto = True
    return rows


def format_sweep(rows: list[SweepRow]) -> str:
    header = f"{'width':>5} {'groups':>6} {'nmf':>9} {'conv':>9} {'total':>9} {'conv/nmf':>8} {'acc':>6}  pareto"
    lines = [header]
    for r in rows:
        ratio = f"{r.conv_to_nmf_ratio:.3g}" if r.conv_to_nmf_ratio is not None else "-"
        acc = f"{r.test_accuracy:.3f}" if r.test_accuracy is not None else "-"
        lines.append(
            f"{r.width_multiplier:>5} {r.groups:>6} {r.nmf_parameters:>9} {r.conv_parameters:>9} "
            f"{r.parameters:>9} {ratio:>8} {acc:>6}  {'*' if r.pareto else ''}"
        )
    return "\n".join(lines)
