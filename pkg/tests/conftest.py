import numpy as np
import pytest
import torch

from adakd.nn import ModelSpec, TinyTransformerLM


@pytest.fixture
def tiny_spec():
    return ModelSpec(vocab_size=11, context_length=8, layer_count=2, head_count=2, model_width=8)


@pytest.fixture
def tiny_model(tiny_spec):
    return TinyTransformerLM(tiny_spec, seed=3)


def central_difference_check(model, loss_fn, h=1e-5, rtol=1e-4, atol=1e-8):
    """Compare autograd gradients with central differences on every parameter coordinate.

    Returns the list of failing (name, index, analytic, numeric) tuples.
    """
    for p in model.parameters():
        p.grad = None
    loss_fn().backward()
    failures = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            analytic = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = analytic[i].item()
                if abs(a - num) > max(rtol * max(abs(a), abs(num)), atol):
                    failures.append((name, i, a, num))
    return failures


# -- acceptance reporting: one PASS/FAIL line per criterion at the end of the run --

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
    if report.failed or report.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}")
