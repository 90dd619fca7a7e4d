"""natsim: call home behind a simulated NAT.

Runs an agent and a manager in one process over an in-memory network on a
fake clock. The agent gets no listener at all, so the only way a session
can happen is the agent dialling out. A scenario file looks like::

    [scenario]
    agent_config = agent.conf        # its [listen] section is ignored
    manager_config = manager.conf    # needs [callhome_listen]
    agent_host = router.lan
    operation = get-config --source running
    kill_manager = false             # true: drop the manager after the operation
    observe_attempts = 7             # reconnect attempts to record after the kill
    timeout = 10                     # wall-clock budget, seconds

    assert.established = true
    assert.sessions = 1
    assert.role_reversal = true
    assert.agent_unreachable = true
    assert.reply_contains = <hostname>openwrt</hostname>
    assert.username = admin
    assert.reconnect_schedule = 1, 3, 7, 15
    assert.max_wall_seconds = 2

Each assertion prints one PASS/FAIL line; the exit status is 1 if any
failed, 2 for a bad scenario file.
"""

from __future__ import annotations

import argparse
import io
import shlex
import sys
import threading
import time
from pathlib import Path

from ..callhome import CallHomeEngine, ManagerListener
from ..channel import LoopbackNetwork
from ..clock import FakeClock
from ..config import ConfigError, load_agent_config, load_manager_config, load_scenario
from . import EXIT_CONFIG, EXIT_OK, EXIT_RPC_ERROR
from .agentd import build_agent
from .common import setup_logging
from .netctl import UsageError, _op_parser, run_op

AGENT_PORT = 6513


class Outcome:
    """What happened during a run; the assertions are checked against this."""

    def __init__(self):
        self.sessions = 0
        self.usernames: list[str | None] = []
        self.role_reversal: list[bool] = []
        self.output = ""
        self.errors = ""
        self.exit_code: int | None = None
        self.wall_to_reply: float | None = None
        self.death_time: float | None = None
        self.schedule: list[float] = []
        self.agent_unreachable: bool | None = None
        self.listener_failures: list[str] = []


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def run_scenario(path) -> tuple[Outcome, dict]:
    path = Path(path)
    settings, asserts = load_scenario(path)
    base = path.parent
    try:
        agent_cfg = load_agent_config(base / settings["agent_config"])
        mgr_cfg = load_manager_config(base / settings["manager_config"])
    except KeyError as exc:
        raise ConfigError(f"{path}: [scenario] {exc.args[0]} is required") from None
    if agent_cfg.callhome is None:
        raise ConfigError(f"{path}: the agent config has no [callhome] section")
    if mgr_cfg.callhome_listen is None or mgr_cfg.tls is None:
        raise ConfigError(f"{path}: the manager config needs [callhome_listen] and [tls]")
    try:
        op_args = _op_parser().parse_args(shlex.split(settings.get("operation", "get-config")))
    except UsageError as exc:
        raise ConfigError(f"{path}: [scenario] operation: {exc}") from None
    kill = _bool(settings.get("kill_manager", "false"))
    observe = int(settings.get("observe_attempts", "0"))
    budget = float(settings.get("timeout", "10"))
    agent_host = settings.get("agent_host", "agent.lan")

    clock = FakeClock()
    net = LoopbackNetwork(clock)
    # journal into memory only: a scenario must not touch the filesystem
    agent_cfg.journal_path = None
    agent = build_agent(agent_cfg, clock=clock)
    out = Outcome()
    replied = threading.Event()
    teardown = threading.Event()
    holder = {}

    def sink(session) -> None:
        out.sessions += 1
        out.usernames.append(session.username)
        raw = session.channel.raw
        # the manager accepted TCP, so the session-id must have come from the dialler
        out.role_reversal.append(not raw.initiator and session.received_session_id
                                 and not session.sent_session_id)
        if replied.is_set():
            teardown.wait(budget)
            session.close_session()
            return
        stdout, stderr = io.StringIO(), io.StringIO()
        out.exit_code = run_op(session, op_args, mgr_cfg.output, stdout, stderr)
        out.output, out.errors = stdout.getvalue(), stderr.getvalue()
        out.wall_to_reply = time.perf_counter() - started
        if kill:
            out.death_time = clock.monotonic()
            holder["listener"].close()
            session.close()
            replied.set()
            return
        replied.set()
        teardown.wait(budget)
        session.close_session()

    ch = mgr_cfg.callhome_listen
    listener = ManagerListener(net.listen(ch.address, ch.port), mgr_cfg.tls, sink,
                               hello_timeout=mgr_cfg.hello_timeout, parallel=True)
    holder["listener"] = listener
    engine = CallHomeEngine(agent, agent_cfg.callhome, agent_cfg.tls, net.connect, clock=clock)
    started = time.perf_counter()
    listener.start()
    engine.start()
    try:
        net.connect(agent_host, AGENT_PORT)
        out.agent_unreachable = False
    except ConnectionRefusedError:
        out.agent_unreachable = True

    deadline = time.perf_counter() + budget
    while time.perf_counter() < deadline and not replied.is_set() and engine.running:
        time.sleep(0.01)
    if replied.is_set() and kill and observe:
        while time.perf_counter() < deadline:
            after = [t for t, _, _ in engine.attempt_log if t > out.death_time]
            if len(after) >= observe or not engine.running:
                break
            time.sleep(0.01)
    engine.stop()
    teardown.set()
    engine.join(5)
    listener.close()
    agent.close()
    if out.death_time is not None:
        out.schedule = [t - out.death_time for t, _, _ in engine.attempt_log if t > out.death_time][:observe or None]
    out.listener_failures = list(listener.failures)
    return out, asserts


def _numbers(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def check(out: Outcome, asserts: dict) -> list[tuple[str, bool, str]]:
    results = []
    for key, expected in asserts.items():
        if key == "established":
            got = out.sessions > 0
            ok = got == _bool(expected)
        elif key == "sessions":
            got = out.sessions
            ok = got == int(expected)
        elif key == "role_reversal":
            got = bool(out.role_reversal) and all(out.role_reversal)
            ok = got == _bool(expected)
        elif key == "agent_unreachable":
            got = out.agent_unreachable
            ok = got == _bool(expected)
        elif key == "reply_contains":
            got = " ".join(out.output.split())[:120]
            ok = expected in out.output
        elif key == "exit_code":
            got = out.exit_code
            ok = got == int(expected)
        elif key == "username":
            got = out.usernames
            ok = bool(got) and all(u == expected for u in got)
        elif key == "reconnect_schedule":
            want = _numbers(expected)
            got = out.schedule[:len(want)]
            ok = got == want
        elif key == "max_wall_seconds":
            got = out.wall_to_reply
            ok = got is not None and got < float(expected)
        else:
            raise ConfigError(f"unknown assertion assert.{key}")
        results.append((key, ok, f"expected {expected}, got {got}"))
    return results


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    p = argparse.ArgumentParser(prog="natsim", description="Call home through a simulated NAT.")
    p.add_argument("scenarios", nargs="+", type=Path)
    ns = p.parse_args(argv)
    status = EXIT_OK
    for path in ns.scenarios:
        try:
            out, asserts = run_scenario(path)
            results = check(out, asserts)
        except (ConfigError, ValueError) as exc:
            print(f"natsim: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for key, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {path.name} assert.{key}: {detail}")
        failed = [key for key, ok, _ in results if not ok]
        if failed:
            print(f"natsim: {path.name}: first failed assertion: assert.{failed[0]}", file=sys.stderr)
            status = EXIT_RPC_ERROR
    return status


if __name__ == "__main__":
    sys.exit(main())
