"""Forensic sweep engine: probe every checkpoint, assemble the gap
trajectory, detect the FP32-convergence onset, and segment the three phases
(rapid learning, meta-stable plateau, explosive divergence).

Trajectory CSVs use a fixed column order and shortest round-trip float
encoding, so export -> import -> export is byte-identical, which is also how
sweep resume avoids recomputation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import quant
from .evalset import EvalSet, perplexity
from .quant import Int4GroupScheme, Int8ChannelScheme
from .schedules import ScheduleSpec, eta_max_of, lr_at
from .stats import pooled_weight_kurtosis
from .weightstore import CheckpointManifest, QuantSelector, list_checkpoints, read_checkpoint

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "ppl_fp32", "ppl_int4", "gap_int4_pct",
               "ppl_int8", "gap_int8_pct", "lr", "lr_frac", "kurtosis", "phase"]


class AuditError(Exception):
    pass


@dataclass
class TrajectoryPoint:
    step: int
    ppl_fp32: float
    ppl_int4: float
    gap_int4_pct: float
    ppl_int8: float
    gap_int8_pct: float
    lr: float
    lr_frac: float
    kurtosis: float | None = None
    phase: int | None = None


@dataclass
class PhaseReport:
    boundary_12: int | None
    boundary_23: int | None
    min_ppl_step: int
    min_ppl_value: float
    stall_step: int | None
    partial: bool
    phase_summaries: dict[int, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_summaries"] = {str(k): v for k, v in self.phase_summaries.items()}
        return d


# ---------------------------------------------------------------------------
# sweep

def _default_model_factory(manifest: CheckpointManifest, tensors: dict[str, np.ndarray]):
    # imported lazily: toylab depends on this module for TrajectoryPoint
    from .toylab.model import model_from_checkpoint

    return model_from_checkpoint(manifest, tensors)


def probe_checkpoint(manifest: CheckpointManifest, tensors: dict[str, np.ndarray],
                     es: EvalSet, selector: QuantSelector,
                     schedule: ScheduleSpec,
                     int4_scheme: Int4GroupScheme | None = None,
                     int8_scheme: Int8ChannelScheme | None = None,
                     with_kurtosis: bool = False,
                     model_factory: Callable | None = None) -> TrajectoryPoint:
    """FP32 + INT4 + INT8 perplexities, gaps, LR fraction and optional kurtosis."""
    factory = model_factory or _default_model_factory
    int4_scheme = int4_scheme or Int4GroupScheme()
    int8_scheme = int8_scheme or Int8ChannelScheme()

    ppl_fp = perplexity(factory(manifest, tensors), es).ppl
    q4 = quant.quantize_model(tensors, selector, int4_scheme)
    ppl4 = perplexity(factory(manifest, q4), es).ppl
    q8 = quant.quantize_model(tensors, selector, int8_scheme)
    ppl8 = perplexity(factory(manifest, q8), es).ppl

    lr = lr_at(schedule, manifest.step)
    kurt = None
    if with_kurtosis:
        kurt = pooled_weight_kurtosis(tensors, selector, manifest=manifest).excess_kurtosis
    return TrajectoryPoint(
        step=manifest.step,
        ppl_fp32=ppl_fp,
        ppl_int4=ppl4,
        gap_int4_pct=quant.gap(ppl_fp, ppl4),
        ppl_int8=ppl8,
        gap_int8_pct=quant.gap(ppl_fp, ppl8),
        lr=lr,
        lr_frac=lr / eta_max_of(schedule),
        kurtosis=kurt,
    )


def sweep(root: str | Path, es: EvalSet, schedule: ScheduleSpec,
          selector: QuantSelector | None = None,
          int4_scheme: Int4GroupScheme | None = None,
          int8_scheme: Int8ChannelScheme | None = None,
          with_kurtosis: bool = False,
          model_factory: Callable | None = None,
          out_csv: str | Path | None = None,
          ) -> tuple[list[TrajectoryPoint], list[dict]]:
    """Probe every checkpoint under root in step order.

    Resumable: if ``out_csv`` already holds rows for some steps they are kept
    as-is and those checkpoints are skipped.  Per-checkpoint failures are
    recorded and skipped, never fatal.
    """
    selector = selector or QuantSelector()
    ckpts = list_checkpoints(root)
    if not ckpts:
        raise AuditError(f"no checkpoints found under {root}")

    done: dict[int, TrajectoryPoint] = {}
    if out_csv is not None and Path(out_csv).is_file():
        done = {p.step: p for p in import_trajectory_csv(out_csv)}

    rows: list[TrajectoryPoint] = []
    failures: list[dict] = []
    for step, path in ckpts:
        if step in done:
            rows.append(done[step])
            continue
        try:
            manifest, tensors = read_checkpoint(path)
            rows.append(probe_checkpoint(manifest, tensors, es, selector, schedule,
                                         int4_scheme, int8_scheme, with_kurtosis,
                                         model_factory))
        except Exception as exc:  # noqa: BLE001 - sweep must survive one bad checkpoint
            logger.warning("checkpoint at step %d failed: %s", step, exc)
            failures.append({"step": step, "path": str(path), "error": str(exc)})
    rows.sort(key=lambda p: p.step)
    if out_csv is not None:
        export(rows, "csv", out_csv)
    return rows, failures


# ---------------------------------------------------------------------------
# onset detection and phase segmentation

def detect_onset(traj: Sequence[TrajectoryPoint], window: int = 5,
                 rel_tol: float = 0.001) -> tuple[int, int | None]:
    """(min_ppl_step, stall_step) from the FP32 perplexity series.

    min_ppl_step is the global argmin (earliest on ties) -- the retrospective
    onset anchor.  stall_step is the causal variant: the first step at which
    the best-so-far perplexity has failed to improve by more than rel_tol
    (relative) over the trailing ``window`` checkpoints.
    """
    if len(traj) < window + 1:
        raise AuditError(f"trajectory too short: {len(traj)} rows < window+1={window + 1}")
    ppl = [p.ppl_fp32 for p in traj]
    steps = [p.step for p in traj]
    min_idx = min(range(len(ppl)), key=lambda i: (ppl[i], steps[i]))

    best = []
    cur = float("inf")
    for v in ppl:
        cur = min(cur, v)
        best.append(cur)
    stall_step = None
    for i in range(window, len(best)):
        if best[i] > best[i - window] * (1.0 - rel_tol):
            stall_step = steps[i]
            break
    return steps[min_idx], stall_step


def segment_phases(traj: Sequence[TrajectoryPoint], p1_rate: float = 0.05,
                   window: int = 3, rel_tol: float = 0.001,
                   onset_window: int = 5) -> PhaseReport:
    """Segment a trajectory into the three phases and label its rows.

    Phase 2/3 boundary is the FP32 perplexity argmin.  Phase 1/2 boundary is
    the first checkpoint whose relative perplexity improvement per 1,000
    steps drops below ``p1_rate`` and stays below for ``window`` consecutive
    checkpoints.  Degenerate trajectories come back flagged partial.
    """
    traj = sorted(traj, key=lambda p: p.step)
    steps = [p.step for p in traj]
    if len(set(steps)) != len(steps):
        raise AuditError("duplicate steps in trajectory")

    if len(traj) < max(3, window + 1):
        min_idx = min(range(len(traj)), key=lambda i: (traj[i].ppl_fp32, traj[i].step))
        return PhaseReport(boundary_12=None, boundary_23=None,
                           min_ppl_step=traj[min_idx].step,
                           min_ppl_value=traj[min_idx].ppl_fp32,
                           stall_step=None, partial=True)

    try:
        min_ppl_step, stall_step = detect_onset(traj, window=min(onset_window, len(traj) - 1),
                                                rel_tol=rel_tol)
    except AuditError:
        min_ppl_step, stall_step = detect_onset(traj, window=1, rel_tol=rel_tol)
    min_ppl_value = next(p.ppl_fp32 for p in traj if p.step == min_ppl_step)

    # improvement rate into row i, relative, per 1,000 steps
    rates = [None]
    for prev, cur in zip(traj, traj[1:]):
        dstep = cur.step - prev.step
        rates.append((prev.ppl_fp32 - cur.ppl_fp32) / prev.ppl_fp32 / dstep * 1000.0)

    boundary_12 = None
    for i in range(1, len(traj)):
        run = rates[i:i + window]
        if len(run) > 0 and all(r < p1_rate for r in run):
            boundary_12 = traj[i].step
            break

    partial = boundary_12 is None or boundary_12 > min_ppl_step
    if partial:
        boundary_12 = None

    for p in traj:
        if boundary_12 is not None and p.step < boundary_12:
            p.phase = 1
        elif p.step <= min_ppl_step:
            p.phase = 2 if boundary_12 is not None else 1
        else:
            p.phase = 3

    report = PhaseReport(boundary_12=boundary_12, boundary_23=min_ppl_step,
                         min_ppl_step=min_ppl_step, min_ppl_value=min_ppl_value,
                         stall_step=stall_step, partial=partial)
    for phase in (1, 2, 3):
        rows = [p for p in traj if p.phase == phase]
        if not rows:
            continue
        report.phase_summaries[phase] = {
            "n": len(rows),
            "step_start": rows[0].step,
            "step_end": rows[-1].step,
            "ppl_start": rows[0].ppl_fp32,
            "ppl_end": rows[-1].ppl_fp32,
            "gap_int4_mean": float(np.mean([p.gap_int4_pct for p in rows])),
            "gap_int4_max": float(np.max([p.gap_int4_pct for p in rows])),
        }
    return report


# ---------------------------------------------------------------------------
# import/export

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def export(traj: Sequence[TrajectoryPoint], format: str, path: str | Path) -> Path:
    """Write a trajectory as CSV or JSON with lossless float encoding."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for p in traj:
                writer.writerow([_cell(getattr(p, col)) for col in CSV_COLUMNS])
    elif format == "json":
        payload = []
        for p in traj:
            row = asdict(p)
            payload.append(row)
        path.write_text(json.dumps(payload, indent=1) + "\n")
    else:
        raise AuditError(f"unknown export format {format!r}")
    return path


def import_trajectory_csv(path: str | Path) -> list[TrajectoryPoint]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise AuditError(f"unexpected trajectory columns: {reader.fieldnames}")
        for rec in reader:
            rows.append(TrajectoryPoint(
                step=int(rec["step"]),
                ppl_fp32=float(rec["ppl_fp32"]),
                ppl_int4=float(rec["ppl_int4"]),
                gap_int4_pct=float(rec["gap_int4_pct"]),
                ppl_int8=float(rec["ppl_int8"]),
                gap_int8_pct=float(rec["gap_int8_pct"]),
                lr=float(rec["lr"]),
                lr_frac=float(rec["lr_frac"]),
                kurtosis=float(rec["kurtosis"]) if rec["kurtosis"] else None,
                phase=int(rec["phase"]) if rec["phase"] else None,
            ))
    rows.sort(key=lambda p: p.step)
    return rows


def import_trajectory_json(path: str | Path) -> list[TrajectoryPoint]:
    payload = json.loads(Path(path).read_text())
    rows = [TrajectoryPoint(**rec) for rec in payload]
    rows.sort(key=lambda p: p.step)
    return rows
