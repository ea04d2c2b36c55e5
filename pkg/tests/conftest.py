import functools
import json
from pathlib import Path

import pytest

from exitscan import ctlproto
from exitscan.circuitmgr import CircuitManager
from exitscan.probes import load_decoys, specs_from_decoys
from exitscan.simnet import run_virtual, start_sim
from exitscan.simnet.fixtures import first_hops

GOLDEN = Path(__file__).parent / "golden"
VECTORS_PATH = GOLDEN / "ctlproto_vectors.json"


def virtual(fn):
    """Run an async test body on the simulator's virtual clock."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return run_virtual(fn(*args, **kwargs))
    return wrapper


async def scanning_session(config):
    control, socks, inspection = start_sim(config)
    session = await ctlproto.open_session(control, config.cookie)
    await ctlproto.configure_scanning(session)
    return session, socks, inspection


async def scan(config, exits, probes, parallelism=10, **kwargs):
    """Full-stack scan of ``exits``; returns (results, accounting, inspection)."""
    session, socks, inspection = await scanning_session(config)
    try:
        async with CircuitManager(session, socks, first_hops(config), **kwargs) as mgr:
            results, accounting = await mgr.run_scan(exits, probes, parallelism)
    finally:
        await session.close()
    return results, accounting, inspection


@pytest.fixture(scope="session")
def decoys():
    return load_decoys()


@pytest.fixture(scope="session")
def specs(decoys):
    return specs_from_decoys(decoys)


@pytest.fixture(scope="session")
def golden():
    return json.loads(VECTORS_PATH.read_text())


# One line per acceptance criterion, printed after the run.
ACCEPTANCE = {}


def record(number, ok, detail):
    line = "acceptance %d: %s  %s" % (number, "PASS" if ok else "FAIL", detail)
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
