import time

import pytest

CRITERIA = {
    1: "rough core: δδ = 0, geometric and Chen identities, sewing slope, quadrature",
    2: "RDE: self-convergence, closed forms, Jacobian vs FD, noise-flow inverse",
    3: "Pontryagin: residuals, suboptimal detection, β sweeps, duality",
    4: "q-function: four-way spread, unperturbed q = 0",
    5: "Gibbs: optimality, value identity, q-policy identity",
    6: "policy improvement: monotone values, open-loop limit",
    7: "determinism and runtime",
}

_outcomes: dict[int, list[bool]] = {}
_session_start = time.perf_counter()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion the test belongs to")


def pytest_runtest_logreport(report):
    k = report.user_properties and dict(report.user_properties).get("criterion")
    if not k:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(k, []).append(report.outcome == "passed")


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", m.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, label in CRITERIA.items():
        res = _outcomes.get(k)
        if res is None:
            tr.write_line(f"criterion {k}: NOT RUN  {label}")
            continue
        verdict = "PASS" if all(res) else "FAIL"
        tr.write_line(f"criterion {k}: {verdict}  ({sum(res)}/{len(res)} checks)  {label}")
    tr.write_line(f"session wall time {time.perf_counter() - _session_start:.1f} s")
