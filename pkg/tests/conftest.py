import pytest

from adma.config import parse_config

TINY = {
    "embed_dim": "16",
    "depth": "1",
    "heads": "2",
    "ffn_multiplier": "2",
    "source_count": "40",
    "holdout_count": "8",
    "pretrain_epochs": "1",
    "corruptions": "fog,contrast",
    "per_domain_count": "3",
    "seeds": "0",
    "mc_passes": "3",
    "lr": "1e-3",
}


@pytest.fixture
def tiny_cfg(tmp_path):
    return parse_config(overrides=dict(TINY, out_dir=str(tmp_path / "out")))


# acceptance reporting: one line per criterion in the terminal summary
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion(request):
    n = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {n}: {ACCEPTANCE[n][0]} {detail}")
        return ok

    yield record
    ACCEPTANCE.setdefault(n, ("FAIL", "error before a verdict was recorded"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
