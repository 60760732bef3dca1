import re

_TITLES = {
    1: "parameter accounting",
    2: "gradient fidelity",
    3: "metric oracle equivalence",
    4: "shape contract",
    5: "end-to-end learnability",
    6: "threshold-sweep monotonicity",
    7: "loss semantics",
    8: "determinism and serialization",
    9: "optimizer unit",
}

_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for category, verdict in (("passed", "PASS"), ("failed", "FAIL"),
                              ("error", "FAIL"), ("skipped", "SKIP")):
        for report in terminalreporter.stats.get(category, []):
            match = _PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                number = int(match.group(1))
                # a FAIL from any phase outranks a PASS from another
                if outcomes.get(number) != "FAIL":
                    outcomes[number] = verdict
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(outcomes):
        title = _TITLES.get(number, "?")
        terminalreporter.write_line(
            f"criterion {number} ({title}): {outcomes[number]}")
