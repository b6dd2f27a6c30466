"""Deterministic AdamW training with checkpointing, plus the three-condition
fork-experiment runner.

Training is single-threaded and fully seeded, so same-seed runs are
bit-identical end to end.  The LR applied at update t is exactly
lr_at(schedule, t).  Fork runs restart from byte-identical base weights with
fresh optimizer state and reuse the sweep engine for probing, so every run
emits an audit-format trajectory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import audit
from ..evalset import EvalSet
from ..quant import Int4GroupScheme, Int8ChannelScheme
from ..schedules import (OLISpec, PhaseTag, ScheduleSpec, classify_step,
                         lr_at, schedule_to_dict)
from ..stats import StatsError, WinRecord, pairwise_wins, welch_t
from ..weightstore import (QuantSelector, build_manifest, checkpoint_step_dir,
                           read_checkpoint, write_checkpoint)
from .corpus import synth_corpus, train_validation_split
from .model import TinyLM, TinyLMConfig, ToyLabError, forward_loss, init_model, single_thread

logger = logging.getLogger(__name__)


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.01  # decoupled

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ToyLabError("betas must be in (0, 1)")


@dataclass
class RunConfig:
    seed: int
    total_steps: int
    schedule: ScheduleSpec
    checkpoint_every: int = 200
    batch_size: int = 4
    corpus_seed: int = 0
    corpus_length: int = 120_000
    val_reserve: int = 8_192
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.checkpoint_every < 1:
            raise ToyLabError("checkpoint_every must be >= 1")
        if self.total_steps < 0:
            raise ToyLabError("total_steps must be >= 0")


@dataclass
class TrainResult:
    checkpoints: list[Path]
    losses: list[float]
    final_step: int


def run_corpus_splits(run: RunConfig, cfg: TinyLMConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train, validation) token streams; the validation tail is reserved."""
    corpus = synth_corpus(run.corpus_seed, run.corpus_length, cfg.vocab_size)
    return train_validation_split(corpus, run.val_reserve)


def _checkpoint_meta(run: RunConfig, cfg: TinyLMConfig, step: int) -> dict[str, str]:
    return {
        "model_config": cfg.to_json(),
        "schedule": json.dumps(schedule_to_dict(run.schedule), sort_keys=True),
        "seed": str(run.seed),
        "corpus_seed": str(run.corpus_seed),
        "corpus_length": str(run.corpus_length),
        "step": str(step),
    }


def _write_step_checkpoint(model: TinyLM, run: RunConfig, cfg: TinyLMConfig,
                           step: int, out_dir: Path) -> Path:
    tensors = model.to_tensors()
    manifest = build_manifest(step, tensors, meta=_checkpoint_meta(run, cfg, step))
    return write_checkpoint(manifest, tensors, checkpoint_step_dir(out_dir, step))


def train(run: RunConfig, cfg: TinyLMConfig, out_dir: str | Path,
          start_tensors: dict[str, np.ndarray] | None = None,
          start_step: int = 0) -> TrainResult:
    """Train (or continue) a TinyLM, checkpointing at the configured cadence.

    Checkpoints are written at the start step and every ``checkpoint_every``
    updates, plus the final step.  A NaN loss aborts with the step recorded.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_tokens, _ = run_corpus_splits(run, cfg)
    if train_tokens.size <= cfg.seq_len:
        raise ToyLabError("training split shorter than one sequence")

    torch.manual_seed(run.seed)
    if start_tensors is None:
        model = init_model(cfg, run.seed)
    else:
        model = TinyLM(cfg)
        model.load_tensors(start_tensors)
    opt_cfg = run.optimizer
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=0.0,
        betas=(opt_cfg.beta1, opt_cfg.beta2),
        eps=opt_cfg.epsilon, weight_decay=opt_cfg.weight_decay,
    )
    rng = np.random.default_rng(run.seed)
    max_start = train_tokens.size - cfg.seq_len

    checkpoints = [_write_step_checkpoint(model, run, cfg, start_step, out_dir)]
    losses: list[float] = []
    with single_thread():
        for i in range(run.total_steps):
            step = start_step + i
            starts = rng.integers(0, max_start + 1, size=run.batch_size)
            batch = np.stack([train_tokens[s:s + cfg.seq_len] for s in starts])
            lr = lr_at(run.schedule, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            try:
                loss, _ = forward_loss(model, batch)
            except ToyLabError as exc:
                raise ToyLabError(f"{exc} (training step {step})") from exc
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

            done = step + 1
            if done % run.checkpoint_every == 0 or i == run.total_steps - 1:
                checkpoints.append(_write_step_checkpoint(model, run, cfg, done, out_dir))

    final_step = start_step + run.total_steps
    with open(out_dir / "losses.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{start_step + i},{loss!r}\n")
    return TrainResult(checkpoints=checkpoints, losses=losses, final_step=final_step)


# ---------------------------------------------------------------------------
# fork experiment

@dataclass
class ConditionSummary:
    name: str
    final_gaps: list[float]           # final-probe INT4 gap per seed
    mean_gap: float
    std_gap: float
    wins_vs_control: WinRecord | None
    cool_mean_gap: float | None = None       # OLI only: settled probes
    bump_mean_gap: float | None = None
    cool_welch: dict | None = None           # OLI cool vs control at matching steps

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "final_gaps": self.final_gaps,
            "mean_gap": self.mean_gap,
            "std_gap": self.std_gap,
            "wins_vs_control": (
                {"wins": self.wins_vs_control.wins, "ties": self.wins_vs_control.ties,
                 "total": self.wins_vs_control.total}
                if self.wins_vs_control else None
            ),
            "cool_mean_gap": self.cool_mean_gap,
            "bump_mean_gap": self.bump_mean_gap,
            "cool_welch": self.cool_welch,
        }


@dataclass
class ForkResult:
    base_step: int
    fork_steps: int
    seeds: list[int]
    trajectories: dict[tuple[str, int], list[audit.TrajectoryPoint]]
    summaries: list[ConditionSummary]
    failures: list[dict]

    def to_dict(self) -> dict:
        return {
            "base_step": self.base_step,
            "fork_steps": self.fork_steps,
            "seeds": self.seeds,
            "conditions": [s.to_dict() for s in self.summaries],
            "failures": self.failures,
        }


def fork(base_ckpt: str | Path, conditions: list[tuple[str, ScheduleSpec]],
         steps: int, seeds: list[int], es: EvalSet, out_dir: str | Path,
         cadence: int = 100,
         selector: QuantSelector | None = None,
         int4_scheme: Int4GroupScheme | None = None,
         int8_scheme: Int8ChannelScheme | None = None) -> ForkResult:
    """Continue training from one checkpoint under several schedules x seeds.

    Every run starts from byte-identical base weights with fresh optimizer
    state, checkpoints every ``cadence`` steps, and is swept into a
    trajectory CSV.  The summary reports final gaps, pairwise wins against
    the first condition, and for bump/cool schedules the settled-phase
    statistics.  One failed run does not abort the matrix.
    """
    if not conditions:
        raise ToyLabError("need at least one condition")
    if not seeds:
        raise ToyLabError("need at least one seed")
    selector = selector or QuantSelector()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest, base_tensors = read_checkpoint(base_ckpt)
    cfg = TinyLMConfig.from_json(manifest.meta["model_config"])
    base_step = manifest.step
    corpus_seed = int(manifest.meta.get("corpus_seed", "0"))
    corpus_length = int(manifest.meta.get("corpus_length", "120000"))

    trajectories: dict[tuple[str, int], list[audit.TrajectoryPoint]] = {}
    failures: list[dict] = []
    for name, schedule in conditions:
        for seed in seeds:
            run_dir = out_dir / f"{name}-seed{seed}"
            run = RunConfig(seed=seed, total_steps=steps, schedule=schedule,
                            checkpoint_every=cadence,
                            corpus_seed=corpus_seed, corpus_length=corpus_length)
            try:
                train(run, cfg, run_dir, start_tensors=base_tensors,
                      start_step=base_step)
                traj, sweep_failures = audit.sweep(
                    run_dir, es, schedule, selector=selector,
                    int4_scheme=int4_scheme, int8_scheme=int8_scheme,
                    out_csv=run_dir / "trajectory.csv",
                )
                failures.extend(sweep_failures)
                trajectories[(name, seed)] = traj
            except Exception as exc:  # noqa: BLE001 - run isolation
                logger.warning("fork run %s seed %d failed: %s", name, seed, exc)
                failures.append({"condition": name, "seed": seed, "error": str(exc)})

    summaries = _summarize(conditions, seeds, trajectories, base_step)
    result = ForkResult(base_step=base_step, fork_steps=steps, seeds=list(seeds),
                        trajectories=trajectories, summaries=summaries,
                        failures=failures)
    (out_dir / "summary.json").write_text(json.dumps(result.to_dict(), indent=1) + "\n")
    return result


def _summarize(conditions, seeds, trajectories, base_step) -> list[ConditionSummary]:
    control_name = conditions[0][0]
    control_final = _final_gaps(control_name, seeds, trajectories)
    control_by_step: dict[int, list[float]] = {}
    for seed in seeds:
        for p in trajectories.get((control_name, seed), []):
            control_by_step.setdefault(p.step, []).append(p.gap_int4_pct)

    summaries = []
    for name, schedule in conditions:
        finals = _final_gaps(name, seeds, trajectories)
        wins = None
        if name != control_name and finals and control_final:
            wins = pairwise_wins(finals, control_final, lower_is_better=True)
        summary = ConditionSummary(
            name=name, final_gaps=finals,
            mean_gap=float(np.mean(finals)) if finals else float("nan"),
            std_gap=float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0,
            wins_vs_control=wins,
        )
        if isinstance(schedule, OLISpec):
            _add_bump_cool_stats(summary, schedule, name, seeds, trajectories,
                                 control_by_step)
        summaries.append(summary)
    return summaries


def _final_gaps(name, seeds, trajectories) -> list[float]:
    gaps = []
    for seed in seeds:
        traj = trajectories.get((name, seed))
        if traj:
            gaps.append(traj[-1].gap_int4_pct)
    return gaps


def _add_bump_cool_stats(summary: ConditionSummary, schedule: OLISpec, name,
                         seeds, trajectories, control_by_step) -> None:
    cool, bump, control_matched = [], [], []
    for seed in seeds:
        for p in trajectories.get((name, seed), []):
            tag = classify_step(schedule, p.step)
            if tag is PhaseTag.BUMP:
                bump.append(p.gap_int4_pct)
            else:
                cool.append(p.gap_int4_pct)
                control_matched.extend(control_by_step.get(p.step, []))
    summary.cool_mean_gap = float(np.mean(cool)) if cool else None
    summary.bump_mean_gap = float(np.mean(bump)) if bump else None
    if len(cool) >= 2 and len(control_matched) >= 2:
        try:
            w = welch_t(cool, control_matched)
            summary.cool_welch = {"t": w.t, "df": w.df, "p_two_sided": w.p_two_sided,
                                  "n_cool": w.n_a, "n_control": w.n_b}
        except StatsError as exc:
            logger.warning("cool-phase Welch test skipped: %s", exc)
