"""Builders shared by the test modules."""

import numpy as np

from app.schemas import FeaturizeConfig, Hyperparams, StepKind, StepSpec, SynthConfig
from app.services.ingest import MetrologyRecord, SegmentEntry, SegmentationMap, SensorTrace, WaferRun


def small_synth_config(**overrides) -> SynthConfig:
    base = dict(
        n_wafers=6,
        variables=["V1", "V2"],
        steps=[
            StepSpec(step_id="S1", kind=StepKind.DEPOSITION),
            StepSpec(step_id="S2", kind=StepKind.ACTIVATION),
        ],
        cycles_per_step=(6, 8),
        samples_per_cycle=20,
        images_per_wafer=(2, 3),
        group_boundaries=[3],
        holdout=["R26"],
        targets={"recess": 120.0},
        seed=3,
    )
    base.update(overrides)
    return SynthConfig(**base)


def line_run(wafer_id: str, cycles: int, samples: int = 10, steps=("S1",), slope=2.0, intercept=1.0) -> WaferRun:
    """Every cycle of every step is the exact line slope*t + intercept."""
    entries = []
    blocks = []
    row = 0
    for step_id in steps:
        for i in range(cycles):
            blocks.append(intercept + slope * np.arange(samples, dtype=float))
            entries.append(SegmentEntry(row, row + samples, step_id, StepKind.ACTIVATION, i))
            row += samples
    values = np.concatenate(blocks)[:, None]
    trace = SensorTrace(wafer_id=wafer_id, time=np.arange(row, dtype=float), names=("V1",), values=values)
    return WaferRun(wafer_id=wafer_id, group_label="G1", trace=trace, segmentation=SegmentationMap.build(entries))


def line_config(steps=("S1",), **overrides) -> FeaturizeConfig:
    return FeaturizeConfig(variable_names=["V1"], step_ids=list(steps), **overrides)


def linear_hyperparams(**overrides) -> Hyperparams:
    base = dict(
        hidden_layers=[],
        l2=0.0,
        learning_rate=0.002,
        decay=0.0,
        batch_size=1000,
        epochs=200,
        es_patience=1000,
        seed=0,
    )
    base.update(overrides)
    return Hyperparams(**base)


def records_for(wafer_ids, target="recess", images=2, base=10.0):
    return [
        MetrologyRecord(wafer_id=w, image_id=f"IMG{r}", targets={target: base + i + 0.1 * r})
        for i, w in enumerate(wafer_ids)
        for r in range(images)
    ]
