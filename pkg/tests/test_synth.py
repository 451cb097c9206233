import numpy as np
import pytest

from app.errors import UnknownWaferError
from app.schemas import RunManifest, SynthConfig
from app.services.dataset import split_holdout
from app.services.params import load_json_config
from app.services.synth import cycle_samples, generate, oracle_predict, write_synth
from app.services.featurize import intracycle_fit

from helpers import small_synth_config


def test_cycle_samples_have_exact_line_and_tail():
    x = cycle_samples(m=-0.3, b=4.0, f=1.25, n=40, tail_fraction=0.1)
    fit = intracycle_fit(x, 0.1)
    assert fit.m == pytest.approx(-0.3, abs=1e-12)
    assert fit.b == pytest.approx(4.0, abs=1e-12)
    assert fit.f == pytest.approx(1.25, abs=1e-12)


def test_reference_shaped_roster(reference_synth, reference_dataset):
    cfg, runs, records, _ = reference_synth
    assert [r.wafer_id for r in runs] == [f"R{n}" for n in range(21, 35)]
    groups = [r.group_label for r in runs]
    assert groups.count("G1") == 8 and groups.count("G2") == 4 and groups.count("G3") == 2
    counts = {w: sum(1 for r in records if r.wafer_id == w) for w in cfg.wafer_ids()}
    assert set(counts.values()) <= {5, 6}
    train, test = split_holdout(reference_dataset, cfg.holdout)
    assert len(train.wafers()) == 12
    assert test.wafers() == ["R22", "R34"]
    assert reference_dataset.feature_dim == 252


def test_cycle_counts_follow_configured_range(reference_synth):
    cfg, runs, _, _ = reference_synth
    lo, hi = cfg.cycles_per_step
    for run in runs:
        for step in cfg.steps:
            assert lo <= run.segmentation.cycle_count(step.step_id) <= hi
        assert run.segmentation.kind_of("purge").value == "other"


def test_noiseless_targets_equal_oracle():
    runs, records, gt = generate(small_synth_config())
    for rec in records:
        assert rec.targets["recess"] == oracle_predict(gt, rec.wafer_id, "recess")


def test_oracle_is_mean_of_images_as_noise_vanishes():
    _, records, gt = generate(small_synth_config(noise_scale=1e-6))
    for w in gt.planted:
        mean = np.mean([r.targets["recess"] for r in records if r.wafer_id == w])
        assert mean == pytest.approx(oracle_predict(gt, w, "recess"), abs=1e-4)


def test_group_shift_moves_latents_across_boundary():
    cfg = small_synth_config(group_shift=25.0)
    _, _, gt = generate(cfg)
    shifted = np.mean([gt.latents[w] for w in ["R24", "R25", "R26"]], axis=0)
    base = np.mean([gt.latents[w] for w in ["R21", "R22", "R23"]], axis=0)
    assert np.linalg.norm(shifted - base) > 10
    assert oracle_predict(gt, "R21", "recess") != oracle_predict(gt, "R26", "recess")


def test_oracle_unknown_wafer():
    _, _, gt = generate(small_synth_config())
    with pytest.raises(UnknownWaferError):
        oracle_predict(gt, "R99", "recess")


def test_generation_is_deterministic():
    a = generate(small_synth_config(noise_scale=0.3))
    b = generate(small_synth_config(noise_scale=0.3))
    for ra, rb in zip(a[0], b[0]):
        assert ra.trace == rb.trace
        assert ra.segmentation == rb.segmentation
    assert [r.targets for r in a[1]] == [r.targets for r in b[1]]
    for w in a[2].planted:
        assert oracle_predict(a[2], w, "recess") == oracle_predict(b[2], w, "recess")


def test_infeasible_config_is_rejected():
    with pytest.raises(ValueError):
        SynthConfig(cycles_per_step=(4, 8))
    with pytest.raises(ValueError):
        SynthConfig(holdout=["R99"])


def test_write_synth_outputs_are_byte_identical(tmp_path):
    cfg = small_synth_config(noise_scale=0.1)
    write_synth(cfg, tmp_path / "a")
    write_synth(cfg, tmp_path / "b", jobs=2)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert len(files_a) == 2 * cfg.n_wafers + 4
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_write_synth_manifest_resolves(tmp_path):
    path = write_synth(small_synth_config(), tmp_path)
    manifest = load_json_config(RunManifest, path)
    assert manifest.target == "recess"
    assert manifest.holdout == ["R26"]
    assert all((tmp_path / w.trace).is_file() for w in manifest.wafers)
    assert (tmp_path / "ground_truth.csv").is_file()
