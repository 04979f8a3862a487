import math

import numpy as np
import pytest

from metasample import meta
from metasample import models as M
from metasample.experiment import ExperimentConfig, MissingCheckpoint, ModelCheckpoints, run_experiment
from metasample.sampler import SamplePattern


@pytest.fixture(scope="module")
def phong_ck():
    model = M.PhongModel()
    phi = meta.OptimizerState.fresh(model, np.random.default_rng(0), 1e-2)
    return ModelCheckpoints(model, phi, {2: SamplePattern.from_sobol(2)})


def test_single_cell_report(family, phong_ck):
    cfg = ExperimentConfig(methods=("ours",), ns=(2,), seeds=5, eval_count=128, inner_steps=3)
    rep = run_experiment(cfg, family[:1], {"phong": phong_ck})
    assert len(rep.rows) == 1
    row = rep.rows[0]
    assert row["seeds"] == 1 and row["steps"] == 3 and np.isfinite(row["loss"])


def test_seed_means_and_aggregates(family, phong_ck):
    cfg = ExperimentConfig(methods=("random", "meta", "ours"), ns=(2,), seeds=3, eval_count=128,
                           inner_steps=3, render=True, render_size=16)
    rep = run_experiment(cfg, family[:2], {"phong": phong_ck})
    assert len(rep.rows) == 6
    assert {r["seeds"] for r in rep.rows if r["method"] != "ours"} == {3}
    assert all({"dssim", "l2", "psnr"} <= set(r) for r in rep.rows)
    for agg in rep.aggregates():
        rows = [r["loss"] for r in rep.rows if r["method"] == agg["method"]]
        assert abs(agg["loss"] - math.fsum(rows) / len(rows)) < 1e-12


def test_linear_reports_mapped_error_and_takes_no_steps(family, pca):
    model = M.LinearModel(pca)
    ck = ModelCheckpoints(model, None, {2: SamplePattern.from_sobol(2)})
    cfg = ExperimentConfig(models=("linear",), methods=("random", "meta", "ours"), ns=(2,), seeds=2,
                           eval_count=128)
    rep = run_experiment(cfg, family[:1], {"linear": ck})
    assert all(r["steps"] == 0 and r["mapped"] >= 0 for r in rep.rows)


def test_missing_checkpoints(family, phong_ck):
    with pytest.raises(MissingCheckpoint):
        run_experiment(ExperimentConfig(ns=(4,)), family[:1], {"phong": phong_ck})
    with pytest.raises(MissingCheckpoint):
        run_experiment(ExperimentConfig(models=("neural",)), family[:1], {"phong": phong_ck})
    bare = ModelCheckpoints(M.PhongModel())
    with pytest.raises(MissingCheckpoint):
        run_experiment(ExperimentConfig(methods=("meta",), ns=(2,)), family[:1], {"phong": bare})
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("magic",))
