"""Shared pytest hooks: a one-line verdict per acceptance criterion."""

import re

CRITERIA = {
    1: "oracle equivalence on randomized instances",
    2: "analytic gradients match central differences",
    3: "attention factorization locality and residual identity",
    4: "closed-form loss values at tiny batch sizes",
    5: "audio stem kernel law over random geometries",
    6: "default model trains to the localization bars",
    7: "mean and max negative bags are distinct objectives",
    8: "metric boundary behavior",
    9: "determinism and persistence round-trips",
}

_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)\b")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(outcome, []):
            match = _PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                verdicts[int(match.group(1))] = label
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(verdicts):
        name = CRITERIA.get(number, "")
        terminalreporter.write_line(
            f"criterion {number}: {verdicts[number]} - {name}")
