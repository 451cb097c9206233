"""Synthetic fab with a planted, known mapping from wafer latents to sensor cycles and targets.

Every wafer gets a latent vector. The cubic-trend coefficients the featurizer
recovers are an affine image of that latent, and every target is an affine
function of those coefficients. With ``noise_scale=0`` the whole pipeline is
therefore exactly identifiable.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from app.errors import MissingTargetError, UnknownWaferError
from app.schemas import RunManifest, StepKind, SynthConfig, WaferEntry
from app.services.featurize import CUBIC_TERMS, FeatureLayout, tail_window
from app.services.ingest import (
    MetrologyRecord,
    SegmentEntry,
    SegmentationMap,
    SensorTrace,
    WaferRun,
    write_metrology,
    write_segmentation,
    write_trace,
)
from app.services.parallel import run_tasks

logger = logging.getLogger(__name__)

SAMPLE_PERIOD = 0.5
OTHER_STEP_ROWS = 5
LEAD_SPIKE = 10.0
# Magnitude of each cubic term so trends stay O(1) over a dozen cycles.
TERM_SCALES = np.array([1.0, 0.1, 0.01, 0.001])


@dataclass(frozen=True, eq=False)
class GroundTruth:
    layout: FeatureLayout
    latents: dict[str, np.ndarray]
    groups: dict[str, int]
    planted: dict[str, np.ndarray]  # flat cubic coefficients per wafer, canonical layout
    target_intercepts: dict[str, float]
    target_weights: dict[str, np.ndarray]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for wafer_id in self.latents:
            row = {"wafer_id": wafer_id, "group": self.groups[wafer_id]}
            row.update({f"z{i}": float(v) for i, v in enumerate(self.latents[wafer_id])})
            row.update({f"oracle_{t}": oracle_predict(self, wafer_id, t) for t in self.target_weights})
            rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True, eq=False)
class _FabParams:
    offset: np.ndarray  # (D,)
    mixing: np.ndarray  # (D, latent_dim)
    shift_direction: np.ndarray
    target_intercepts: dict[str, float]
    target_weights: dict[str, np.ndarray]


def oracle_predict(gt: GroundTruth, wafer_id: str, target_name: str) -> float:
    """Exact noiseless target of a wafer."""
    if wafer_id not in gt.planted:
        raise UnknownWaferError(f"wafer {wafer_id!r} is not part of the synthetic run set")
    if target_name not in gt.target_weights:
        raise MissingTargetError(f"unknown synthetic target {target_name!r}")
    return float(gt.target_intercepts[target_name] + gt.target_weights[target_name] @ gt.planted[wafer_id])


@functools.lru_cache(maxsize=None)
def _cycle_basis(n: int, tail_fraction: float) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Sample index t, a tail bump h orthogonal to span{1, t}, and their tail means."""
    t = np.arange(n, dtype=float)
    tail = tail_window(n, tail_fraction)
    indicator = np.zeros(n)
    indicator[n - tail:] = 1.0
    basis = np.column_stack([np.ones(n), t])
    coef, _, _, _ = np.linalg.lstsq(basis, indicator, rcond=None)
    h = indicator - basis @ coef
    return t, h, float(t[n - tail:].mean()), float(h[n - tail:].mean())


def cycle_samples(m: float, b: float, f: float, n: int, tail_fraction: float) -> np.ndarray:
    """Samples whose OLS line is exactly (m, b) and whose tail mean is exactly f."""
    t, h, t_tail, h_tail = _cycle_basis(n, tail_fraction)
    alpha = (f - b - m * t_tail) / h_tail
    return b + m * t + alpha * h


def _fab_params(cfg: SynthConfig, seed: np.random.SeedSequence) -> _FabParams:
    rng = np.random.default_rng(seed)
    layout = FeatureLayout(variables=tuple(cfg.variables), steps=tuple(s.step_id for s in cfg.steps))
    scales = np.broadcast_to(TERM_SCALES, layout.shape).reshape(-1)
    offset = rng.standard_normal(layout.size) * scales
    mixing = rng.standard_normal((layout.size, cfg.latent_dim)) * (0.5 * scales)[:, None]
    direction = rng.standard_normal(cfg.latent_dim)
    direction /= np.linalg.norm(direction)

    # target = t0 + spread * u.z, rewritten as an affine map of the planted coefficients
    unmix = np.linalg.pinv(mixing)
    intercepts: dict[str, float] = {}
    weights: dict[str, np.ndarray] = {}
    for name, t0 in cfg.targets.items():
        u = rng.standard_normal(cfg.latent_dim)
        beta = cfg.target_spread * (unmix.T @ u)
        weights[name] = beta
        intercepts[name] = float(t0 - beta @ offset)
    return _FabParams(offset, mixing, direction, intercepts, weights)


def _wafer_cycles(cfg: SynthConfig, wafer_id: str, rng: np.random.Generator) -> dict[str, int]:
    lo, hi = cfg.cycles_per_step
    override = cfg.cycles_overrides.get(wafer_id)
    return {s.step_id: override if override is not None else int(rng.integers(lo, hi + 1)) for s in cfg.steps}


def _generate_wafer(
    cfg: SynthConfig,
    index: int,
    fab: _FabParams,
    seed: np.random.SeedSequence,
) -> tuple[WaferRun, list[MetrologyRecord], np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    wafer_id = cfg.wafer_ids()[index]
    group = cfg.group_of(index)
    latent = rng.standard_normal(cfg.latent_dim) + cfg.group_shift * (group - 1) * fab.shift_direction
    planted = fab.offset + fab.mixing @ latent

    layout = FeatureLayout(variables=tuple(cfg.variables), steps=tuple(s.step_id for s in cfg.steps))
    cubics = layout.unflatten(planted)  # (variables, steps, 3, 4)
    cycles = _wafer_cycles(cfg, wafer_id, rng)
    k = len(cfg.early_cycle_weights)
    n = cfg.samples_per_cycle
    width = cfg.lead_samples + n
    sensor_sd = cfg.noise_scale * cfg.sensor_scale

    blocks: list[np.ndarray] = []
    entries: list[SegmentEntry] = []
    row = 0
    for step_id in cfg.other_steps:
        blocks.append(np.zeros((OTHER_STEP_ROWS, len(cfg.variables))))
        entries.append(SegmentEntry(row, row + OTHER_STEP_ROWS, step_id, StepKind.OTHER, 0))
        row += OTHER_STEP_ROWS
    for s, step in enumerate(cfg.steps):
        for i in range(cycles[step.step_id]):
            # the first k cycles share the trend value at j=0 so the weighted head lands on it
            j = float(max(i - k + 1, 0))
            powers = j ** np.arange(len(CUBIC_TERMS))
            block = np.empty((width, len(cfg.variables)))
            for v in range(len(cfg.variables)):
                m, b, f = cubics[v, s] @ powers
                samples = cycle_samples(m, b, f, n, cfg.tail_fraction)
                block[: cfg.lead_samples, v] = samples[0] + LEAD_SPIKE
                block[cfg.lead_samples :, v] = samples
            blocks.append(block)
            entries.append(SegmentEntry(row, row + width, step.step_id, step.kind, i))
            row += width

    values = np.vstack(blocks)
    if sensor_sd > 0:
        values = values + rng.normal(0.0, sensor_sd, size=values.shape)
    trace = SensorTrace(
        wafer_id=wafer_id,
        time=np.arange(row, dtype=float) * SAMPLE_PERIOD,
        names=tuple(cfg.variables),
        values=values,
    )
    run = WaferRun(
        wafer_id=wafer_id,
        group_label=f"G{group}",
        trace=trace,
        segmentation=SegmentationMap.build(entries),
    )

    ilo, ihi = cfg.images_per_wafer
    n_images = int(rng.integers(ilo, ihi + 1))
    jitter_sd = cfg.noise_scale * cfg.target_spread
    records = []
    for r in range(n_images):
        targets = {}
        for name in cfg.targets:
            exact = fab.target_intercepts[name] + fab.target_weights[name] @ planted
            targets[name] = float(exact + (rng.normal(0.0, jitter_sd) if jitter_sd > 0 else 0.0))
        records.append(MetrologyRecord(wafer_id=wafer_id, image_id=f"IMG{r + 1:02d}", targets=targets))
    return run, records, latent, planted


def generate(cfg: SynthConfig, jobs: int = 1) -> tuple[list[WaferRun], list[MetrologyRecord], GroundTruth]:
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_wafers + 1)
    fab = _fab_params(cfg, seeds[0])
    results = run_tasks(
        _generate_wafer,
        [(cfg, i, fab, seeds[i + 1]) for i in range(cfg.n_wafers)],
        jobs=jobs,
    )
    runs = [r[0] for r in results]
    records = [rec for r in results for rec in r[1]]
    ids = cfg.wafer_ids()
    gt = GroundTruth(
        layout=FeatureLayout(variables=tuple(cfg.variables), steps=tuple(s.step_id for s in cfg.steps)),
        latents={w: r[2] for w, r in zip(ids, results)},
        groups={w: cfg.group_of(i) for i, w in enumerate(ids)},
        planted={w: r[3] for w, r in zip(ids, results)},
        target_intercepts=dict(fab.target_intercepts),
        target_weights=dict(fab.target_weights),
    )
    logger.info(
        "Generated synthetic runs",
        extra={"count": len(runs), "images": len(records), "seed": cfg.seed},
    )
    return runs, records, gt


def write_synth(cfg: SynthConfig, out_dir: Union[str, Path], jobs: int = 1) -> Path:
    """Write traces, segmentations, metrology, ground truth and a run manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    runs, records, gt = generate(cfg, jobs=jobs)
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    (out_dir / "segmentation").mkdir(parents=True, exist_ok=True)

    entries = []
    for run in runs:
        trace_rel = Path("traces") / f"{run.wafer_id}.csv"
        seg_rel = Path("segmentation") / f"{run.wafer_id}.csv"
        write_trace(out_dir / trace_rel, run.trace)
        write_segmentation(out_dir / seg_rel, run.segmentation)
        entries.append(WaferEntry(wafer_id=run.wafer_id, group=run.group_label, trace=trace_rel, segmentation=seg_rel))

    write_metrology(out_dir / "metrology.csv", records)
    gt.to_frame().to_csv(out_dir / "ground_truth.csv", index=False, lineterminator="\n")
    (out_dir / "featurize.json").write_text(cfg.featurize_config().model_dump_json(indent=2) + "\n", encoding="utf-8")

    manifest = RunManifest(
        featurize_config=Path("featurize.json"),
        target=next(iter(cfg.targets)),
        holdout=list(cfg.holdout),
        metrology=[Path("metrology.csv")],
        wafers=entries,
    )
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info("Wrote synthetic run set", extra={"path": str(out_dir), "count": len(runs)})
    return manifest_path
