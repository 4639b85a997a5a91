"""
Backward-pass benchmark of one dense layer under three arms:

    cnn           plain matmul layer, the reference
    nmf_unrolled  exact backward; keeps every h(t) of the forward iteration
    nmf_approx    one-step backward from the retained final state

Only the backward pass is timed and accounted. Memory is the peak of the
explicit buffer ledger: the state each arm retains for its backward plus
the transient buffers the backward allocates.
"""
import csv
import time
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np
import structlog

from ..core.ledger import BufferLedger, track
from ..errors import BudgetExceededError, NmfError
from ..models.enums import BenchArm, GradMode
from ..schemas.bench import BenchReport, BenchRow, LayerBenchSpec, SimilarityRow
from .backprop import backprop_input, record_trajectory, reverse_sweep, weight_grad
from .gradcheck import cosine
from .nmf_layer import NmfParams, derive_w, nmf_forward_batched

log = structlog.get_logger(__name__)

UNSTABLE_MAD = 0.2
CSV_COLUMNS = tuple(BenchRow.model_fields)


def _timed(fn: Callable[[], object]) -> tuple[object, int]:
    start = time.perf_counter_ns()
    result = fn()
    return result, max(time.perf_counter_ns() - start, 1)


def _mad_ratio(samples: list[int]) -> float:
    med = float(np.median(samples))
    return float(np.median(np.abs(np.asarray(samples) - med)) / med) if med > 0 else 0.0


def _run_arm(
    forward: Callable[[BufferLedger], object],
    backward: Callable[[object, BufferLedger], object],
    repetitions: int,
    warmup: int,
):
    fwd_ns, bwd_ns = [], []
    ledger = BufferLedger()
    result = None
    for rep in range(warmup + repetitions):
        ledger.reset()
        state, t_fwd = _timed(lambda: forward(ledger))
        result, t_bwd = _timed(lambda: backward(state, ledger))
        if rep >= warmup:
            fwd_ns.append(t_fwd)
            bwd_ns.append(t_bwd)
    return int(np.median(fwd_ns)), int(np.median(bwd_ns)), ledger.peak, _mad_ratio(bwd_ns), result


def bench_backward(
    layer: LayerBenchSpec,
    n_iters_list: Iterable[int],
    arms: Iterable[BenchArm] = tuple(BenchArm),
    repetitions: int = 11,
    warmup: int = 3,
    seed: int = 0,
    workers: int = 1,
    budget: Optional[int] = None,
) -> BenchReport:
    arms = [BenchArm(a) for a in arms]
    if not arms:
        raise NmfError("no benchmark arms selected")
    rng = np.random.default_rng(seed)
    S, I, B, eps = layer.S, layer.I, layer.batch, layer.epsilon
    rows: list[BenchRow] = []
    similarities: list[SimilarityRow] = []

    for n_iters in n_iters_list:
        x = rng.uniform(0.05, 1.0, (B, S))
        W = derive_w(NmfParams.init(S, I, rng).U)
        W_cnn = rng.standard_normal((S, I)) / np.sqrt(S)
        phi = rng.standard_normal((B, I))
        results = {}
        arm_rows = {}

        for arm in arms:
            if arm == BenchArm.CNN:

                def forward(ledger):
                    track(ledger, x)
                    return x @ W_cnn

                def backward(_, ledger):
                    dx, dw = phi @ W_cnn.T, x.T @ phi
                    track(ledger, dx, dw)
                    return dx, dw

            elif arm == BenchArm.NMF_APPROX:

                def forward(ledger):
                    return nmf_forward_batched(x, W, n_iters, eps, workers)

                def backward(state, ledger):
                    phi_in = backprop_input(phi, state, W, GradMode.CHAIN, ledger)
                    return phi_in, weight_grad(phi, state, W, ledger)

            else:

                def forward(ledger):
                    return record_trajectory(x, W, n_iters, eps, budget, ledger)

                def backward(traj, ledger):
                    return reverse_sweep(traj, phi, ledger)

            try:
                fwd, bwd, peak, mad, results[arm] = _run_arm(forward, backward, repetitions, warmup)
            except BudgetExceededError as e:
                log.warning("budget exceeded", arm=arm.value, n_iters=n_iters, error=str(e))
                arm_rows[arm] = BenchRow(
                    arm=arm, n_iters=n_iters, forward_ns=0, backward_ns=0, peak_bytes=0, mad_ratio=0.0,
                    budget_exceeded=True,
                )
                continue
            arm_rows[arm] = BenchRow(
                arm=arm,
                n_iters=n_iters,
                forward_ns=fwd,
                backward_ns=bwd,
                peak_bytes=peak,
                mad_ratio=mad,
                unstable=mad >= UNSTABLE_MAD,
            )
            log.debug("arm done", arm=arm.value, n_iters=n_iters, backward_ns=bwd, peak_bytes=peak)

        base = arm_rows.get(BenchArm.CNN)
        for arm in arms:
            row = arm_rows[arm]
            if base is not None and not row.budget_exceeded:
                row.time_ratio = row.backward_ns / base.backward_ns
                row.memory_ratio = row.peak_bytes / base.peak_bytes if base.peak_bytes else None
            rows.append(row)

        if BenchArm.NMF_APPROX in results and BenchArm.NMF_UNROLLED in results:
            (phi_a, grad_a), (phi_u, grad_u) = results[BenchArm.NMF_APPROX], results[BenchArm.NMF_UNROLLED]
            similarities.append(
                SimilarityRow(n_iters=n_iters, cosine_phi=cosine(phi_a, phi_u), cosine_grad=cosine(grad_a, grad_u))
            )

    report = BenchReport(
        layer=layer, repetitions=repetitions, warmup=warmup, workers=workers, rows=rows, similarities=similarities
    )
    log.info("benchmark finished", rows=len(rows), S=S, I=I, batch=B)
    return report


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, BenchArm):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _sig3(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3g}"


def format_report(report: BenchReport) -> str:
    """Human-readable table; ratios and cosines to 3 significant figures."""
    header = f"{'arm':<13} {'N':>4} {'fwd_ms':>9} {'bwd_ms':>9} {'peak_kB':>9} {'t/cnn':>7} {'mem/cnn':>7}  flags"
    lines = [f"layer S={report.layer.S} I={report.layer.I} batch={report.layer.batch}", header]
    for r in report.rows:
        flags = ",".join(f for f, on in (("unstable", r.unstable), ("budget", r.budget_exceeded)) if on)
        lines.append(
            f"{r.arm.value:<13} {r.n_iters:>4} {r.forward_ns / 1e6:>9.3f} {r.backward_ns / 1e6:>9.3f} "
            f"{r.peak_bytes / 1024:>9.1f} {_sig3(r.time_ratio):>7} {_sig3(r.memory_ratio):>7}  {flags}"
        )
    for s in report.similarities:
        lines.append(f"cosine(approx, unrolled) N={s.n_iters}: phi {_sig3(s.cosine_phi)}, grad {_sig3(s.cosine_grad)}")
    return "\n".join(lines)


def emit_report(report: BenchReport, path: Union[str, Path]) -> str:
    """Write the rows as CSV (raw values, fixed column order) and return the table."""
    if not report.rows:
        raise NmfError("benchmark report has no rows")
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([_cell(getattr(row, c)) for c in CSV_COLUMNS])
    table = format_report(report)
    path.with_suffix(".txt").write_text(table + "\n")
    return table


def read_report_csv(path: Union[str, Path]) -> list[BenchRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise NmfError(f"{path}: unexpected columns {reader.fieldnames}")
        return [BenchRow.model_validate({k: (v if v != "" else None) for k, v in rec.items()}) for rec in reader]
