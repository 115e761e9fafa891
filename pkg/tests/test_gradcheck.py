import numpy as np
import pytest

from era_kd import autodiff as ad
from era_kd import gradcheck as gc


def test_quick_suite_passes():
    report = gc.run_suite(seeds=3)
    assert report.passed, "\n".join(report.lines())
    assert report.max_rel_error <= gc.TOL


def test_report_covers_every_loss_and_block():
    names = {c.name for c in gc.run_suite(seeds=1).cases}
    for required in ("cross_entropy", "kl_distillation", "logit_distillation", "feature_mse",
                     "total_era_loss", "branch FD k=0", "branch cls k=1", "ERA total (detached)",
                     "ERA total (attached)", "LinearLayer", "BatchNormLayer", "MlpEncoder",
                     "ClassifierHead", "ResMBranch"):
        assert required in names


def test_lines_show_status_and_seed():
    report = gc.run_suite(seeds=2, cases=gc.CASES[:1], era=False)
    (line,) = report.lines()
    assert line.startswith("ok") and "matmul" in line and "over 2 seeds" in line


def test_broken_relu_fails(monkeypatch):
    real = ad.relu

    def leaky_backward(a):
        out = real(a)
        return ad.record("relu", out.values, (a,), lambda o, g: setattr(a, "grad", a.grad + g))

    monkeypatch.setattr(ad, "relu", leaky_backward)
    relu_case = [c for c in gc.CASES if c[0] == "relu"]
    report = gc.run_suite(seeds=2, cases=relu_case, era=False)
    assert not report.passed
    assert report.cases[0].max_rel_error > 1e-2


def test_era_terms_all_small():
    errs = gc.era_terms_check(np.random.default_rng(0))
    assert set(errs) == set(gc.ERA_TERMS)
    assert max(errs.values()) <= gc.TOL


@pytest.mark.parametrize("seed", range(3))
def test_attached_targets_check(seed):
    errs = gc.era_terms_check(np.random.default_rng(seed), detach=False)
    assert errs["total"] <= gc.TOL
