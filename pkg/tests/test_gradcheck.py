import pytest

from ssdas import gradcheck, numerics as nx


def test_rel_err_floor():
    assert gradcheck.rel_err(1e-9, 2e-9) < 1e-2
    assert gradcheck.rel_err(1.0, 1.0 + 1e-6) == pytest.approx(1e-6, rel=1e-3)


@pytest.mark.parametrize("name", [n for n in gradcheck.builders() if not n.startswith("composed")])
def test_primitive_passes(name):
    res = gradcheck.run_suite(seed=3, points=20, names=(name,))[0]
    assert res.passed, res


def test_composed_small_run_passes():
    for res in gradcheck.run_suite(seed=1, points=5, names=("composed_G_J", "composed_scope")):
        assert res.passed, res


def test_corrupted_kernel_gradient_is_caught(monkeypatch):
    real = nx.conv2d

    def broken(x, kernels, bias=None):
        out = real(x, kernels, bias)
        rule = out._backward

        def bad(g):
            gx, gw, *rest = rule(g)
            return (gx, None if gw is None else gw * 1.01, *rest)

        out._backward = bad
        return out

    monkeypatch.setattr(nx, "conv2d", broken)
    res = gradcheck.run_suite(seed=0, points=5, names=("conv2d",))[0]
    assert not res.passed
    assert res.max_rel_err > 1e-3


def test_report_lists_every_check():
    results = gradcheck.run_suite(seed=0, points=2, names=("add_broadcast", "softmax"))
    text = gradcheck.format_report(results)
    assert "add_broadcast" in text and "softmax" in text
    assert "2/2 passed" in text
