import pytest
import torch

from promptner.tokenization import WordPieceTokenizer

WORDS = "steve jobs founded apple in 1976 . find some entities such as none person company".split()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tokenizer():
    # whole words for the common vocabulary; anything else falls back to characters
    return WordPieceTokenizer.build([WORDS], min_freq=1)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("title", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, title in sorted(lines):
            terminalreporter.write_line(f"{verdict}  criterion {num}: {title}")
