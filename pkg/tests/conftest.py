from pathlib import Path

import pytest

from app.schemas import SynthConfig
from app.services.dataset import build_examples
from app.services.featurize import featurize_runs
from app.services.synth import generate

from helpers import small_synth_config


@pytest.fixture
def write_csv(tmp_path):
    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    return _write


@pytest.fixture
def small_cfg() -> SynthConfig:
    return small_synth_config()


@pytest.fixture(scope="session")
def reference_synth():
    """Fourteen noiseless wafers in groups 8/4/2, three sensors, seven steps."""
    cfg = SynthConfig(seed=11)
    runs, records, gt = generate(cfg)
    return cfg, runs, records, gt


@pytest.fixture(scope="session")
def reference_dataset(reference_synth):
    cfg, runs, records, gt = reference_synth
    vectors = featurize_runs(runs, cfg.featurize_config())
    groups = {r.wafer_id: r.group_label for r in runs}
    return build_examples(vectors, records, "remaining_mask", wafer_groups=groups)
