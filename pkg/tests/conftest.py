from __future__ import annotations

from types import SimpleNamespace

import pytest

from backx import harness

_ACCEPTANCE_LINES = []


@pytest.fixture()
def acceptance_log():
    """Collects one status line per acceptance criterion; the terminal
    summary hook prints them after the run, outside output capture."""

    def record(number: int, status: str, detail: str):
        line = f"criterion {number:02d} {status}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full pipeline run on the small synthetic setup.

    Shared by the acceptance gate and the module tests that need a real
    trojan; everything downstream treats it as read-only.
    """
    out = tmp_path_factory.mktemp("desk")
    config = harness.desk_config(str(out))
    outcomes = harness.cmd_all(config)
    poisoned, _ = outcomes["poison"]
    card, gate, _ = outcomes["train"]
    archives, _ = outcomes["attribute"]
    reports, _ = outcomes["evaluate"]
    trigger = poisoned.plan.trigger
    return SimpleNamespace(
        config=config,
        poisoned=poisoned,
        card=card,
        gate=gate,
        archives=archives,
        reports={r.method: r for r in reports},
        pairs=harness._build_pairs(config, poisoned),
        trigger=trigger,
        ratio=float(trigger.trigger_ratio),
        plot_paths=outcomes["report"],
        out=out,
    )
