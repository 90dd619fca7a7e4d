"""agentd: the NETCONF agent daemon.

Boots the datastores from the startup file (an empty tree when the file is
absent), then listens for managers, calls home, or both, as configured.
SIGINT or SIGTERM shut it down cleanly (exit 0).
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from ..agent import Agent
from ..callhome import CallHomeEngine
from ..channel import TcpNetwork
from ..config import ConfigError, ListenConfig, load_agent_config
from ..sysmodel import CommandPlatform, JournalPlatform
from . import EXIT_BIND, EXIT_CONFIG, EXIT_OK
from .common import setup_logging

log = logging.getLogger("netkit.agentd")


def build_agent(cfg, clock=None) -> Agent:
    if cfg.sim_platform:
        platform = JournalPlatform(cfg.journal_path, clock=clock)
    else:
        platform = CommandPlatform(cfg.restart_command, cfg.shutdown_command, cfg.journal_path, clock=clock)
    return Agent(startup_path=cfg.startup_path, platform=platform, clock=clock,
                 hello_timeout=cfg.hello_timeout)


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    p = argparse.ArgumentParser(prog="agentd", description="NETCONF over TLS agent.",
                                epilog="exit codes: 0 clean shutdown, 2 config error, 3 bind failure")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--port", type=int, help="override the [listen] port (0 picks a free one)")
    p.add_argument("--startup", type=Path, help="override [agent] startup_path")
    ns = p.parse_args(argv)

    try:
        cfg = load_agent_config(ns.config)
    except ConfigError as exc:
        print(f"agentd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if ns.port is not None:
        cfg.listen = ListenConfig(cfg.listen.address if cfg.listen else "0.0.0.0", ns.port)
    if ns.startup is not None:
        cfg.startup_path = ns.startup

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())

    try:
        agent = build_agent(cfg)
    except Exception as exc:  # unreadable or invalid startup file
        print(f"agentd: cannot load startup configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    network = TcpNetwork()
    if cfg.listen is not None:
        try:
            server = agent.listen(network, cfg.listen.address, cfg.listen.port, cfg.tls)
        except OSError as exc:
            print(f"agentd: cannot listen on {cfg.listen.address}:{cfg.listen.port}: {exc.strerror or exc}",
                  file=sys.stderr)
            return EXIT_BIND
        host, port = server.address
        print(f"agentd: listening on {host}:{port}", file=sys.stderr, flush=True)
    engine = None
    if cfg.callhome is not None:
        engine = CallHomeEngine(agent, cfg.callhome, cfg.tls, network.connect)
        engine.start()
        print("agentd: calling home to " + ", ".join(str(e) for e in cfg.callhome.endpoints),
              file=sys.stderr, flush=True)

    while not stop.wait(0.5):
        if engine is not None and cfg.listen is None and not engine.running:
            log.warning("call home gave up (%s) and nothing is listening", engine.stopped_reason)
            break
    log.info("shutting down")
    if engine is not None:
        engine.stop()
    agent.close()
    if engine is not None:
        engine.join(5)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
