"""Head-schedule comparison harness: runs, reports, and validates inputs."""

import json

import numpy as np
import pytest

from flowdit.ablation import compare_head_schedules
from flowdit.errors import ConfigError


def test_harness_emits_both_curves(tmp_path):
    out = tmp_path / "report.json"
    report = compare_head_schedules(layers=4, model_dim=192, seeds=(0,),
                                    steps=6, batch_size=2, out_path=out)
    saved = json.loads(out.read_text())
    assert saved["curves"].keys() == {"uniform", "scheduled"}
    for variant in ("uniform", "scheduled"):
        assert len(saved["curves"][variant]["0"]["loss"]) == 6
    # identical seeds and data: both variants see the same first batch, and
    # both start from zero-output models, so step-0 losses agree
    u0 = report["curves"]["uniform"]["0"]["loss"][0]
    s0 = report["curves"]["scheduled"]["0"]["loss"][0]
    assert u0 == pytest.approx(s0, rel=1e-5)


def test_harness_rejects_bad_schedule_length():
    with pytest.raises(ConfigError):
        compare_head_schedules(layers=4, scheduled=[8, 16], steps=2)
