"""netctl: NETCONF manager.

    netctl --config manager.conf get-config --source running
    netctl --config manager.conf edit-config --target candidate change.xml
    netctl --config manager.conf --callhome listen --port 4335 get-config

Without ``--callhome`` netctl connects to ``[connect]`` and runs one
operation. With ``--callhome`` (or the ``listen`` subcommand) it listens
for agents calling home and runs the operation against each session;
``--interactive`` reads operations from stdin instead, one per line.
"""

from __future__ import annotations

import argparse
import shlex
import sys
import threading
import time
from pathlib import Path

from ..callhome import CALLHOME_SSH_PORT, CALLHOME_TLS_PORT, ManagerListener
from ..channel import TcpNetwork
from ..config import ConfigError, ListenConfig, load_manager_config
from ..message import MalformedMessage, parse_xml
from ..session import ManagerSession, SessionError
from ..tls import TlsError, tls_connect
from . import EXIT_CONFIG, EXIT_OK, EXIT_RPC_ERROR, EXIT_TRANSPORT
from .common import render_errors, render_reply, setup_logging

DATASTORES = ("running", "candidate", "startup")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _op_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="netctl", add_help=True)
    p.add_argument("--output", choices=("xml", "compact"), default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="op", required=True, parser_class=_Parser)

    s = sub.add_parser("get", help="running config plus state data")
    s.add_argument("--filter", type=Path, help="file holding subtree filter content")
    s = sub.add_parser("get-config", help="read a configuration datastore")
    s.add_argument("--source", choices=DATASTORES, default="running")
    s.add_argument("--filter", type=Path)
    s = sub.add_parser("edit-config", help="apply an edit document")
    s.add_argument("--target", choices=DATASTORES, default="candidate")
    s.add_argument("--default-operation", choices=("merge", "replace", "none"))
    s.add_argument("--error-option", choices=("stop-on-error", "continue-on-error", "rollback-on-error"))
    s.add_argument("--test-option", choices=("test-then-set", "set", "test-only"))
    s.add_argument("payload", help="XML file with the <config> content, or - for stdin")
    s = sub.add_parser("lock", help="lock a datastore")
    s.add_argument("--target", choices=DATASTORES, default="running")
    s.add_argument("--hold", type=float, default=0.0, metavar="SECONDS",
                   help="keep the session (and the lock) open this long before exiting")
    s = sub.add_parser("unlock")
    s.add_argument("--target", choices=DATASTORES, default="running")
    s = sub.add_parser("validate")
    s.add_argument("--source", choices=DATASTORES, default="candidate")
    sub.add_parser("commit")
    sub.add_parser("discard", help="discard-changes")
    s = sub.add_parser("copy-config")
    s.add_argument("--source", choices=DATASTORES, required=True)
    s.add_argument("--target", choices=DATASTORES, required=True)
    s = sub.add_parser("kill-session")
    s.add_argument("session_id", type=int)
    return p


def _main_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="netctl", description="NETCONF over TLS manager.",
                epilog="exit codes: 0 ok, 1 rpc-error, 2 usage/config error, 4 transport error")
    p.add_argument("--config", type=Path, required=True, help="manager config file")
    p.add_argument("--callhome", action="store_true", help="listen for agents calling home")
    p.add_argument("--host", help="agent address (overrides [connect] address)")
    p.add_argument("--port", type=int, help="agent port, or listen port with --callhome")
    p.add_argument("--identity", help="expected agent name in its certificate")
    p.add_argument("--output", choices=("xml", "compact"))
    p.add_argument("--timeout", type=float, help="reply timeout in seconds")
    p.add_argument("command", nargs=argparse.REMAINDER, help="subcommand and its options")
    return p


def _listen_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="netctl listen")
    p.add_argument("--port", type=int)
    p.add_argument("--address")
    p.add_argument("--parallel", action="store_true", help="handle call-home sessions concurrently")
    p.add_argument("--interactive", action="store_true", help="read operations from stdin")
    p.add_argument("--count", type=int, default=0, help="stop after N sessions (0: run until interrupted)")
    p.add_argument("command", nargs=argparse.REMAINDER)
    return p


def _read_file(path: Path) -> str:
    if str(path) == "-":
        return sys.stdin.read()
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _filter(args):
    if getattr(args, "filter", None) is None:
        return None
    return _read_file(args.filter)


def run_op(session: ManagerSession, args, output: str, out=None, err=None) -> int:
    """Run one parsed operation; print the outcome; return the exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    op = args.op
    if op == "get":
        reply = session.get(filter=_filter(args))
    elif op == "get-config":
        reply = session.get_config(args.source, filter=_filter(args))
    elif op == "edit-config":
        text = _read_file(Path(args.payload))
        try:
            parse_xml(f"<x>{text}</x>".encode())
        except MalformedMessage as exc:
            raise UsageError(f"{args.payload}: not XML: {exc}") from None
        reply = session.edit_config(f"<config xmlns=\"urn:ietf:params:xml:ns:netconf:base:1.0\">{text}</config>",
                                    target=args.target, default_operation=args.default_operation,
                                    error_option=args.error_option, test_option=args.test_option)
    elif op == "lock":
        reply = session.lock(args.target)
    elif op == "unlock":
        reply = session.unlock(args.target)
    elif op == "validate":
        reply = session.validate(args.source)
    elif op == "commit":
        reply = session.commit()
    elif op == "discard":
        reply = session.discard_changes()
    elif op == "copy-config":
        reply = session.copy_config(args.source, args.target)
    elif op == "kill-session":
        reply = session.kill_session(args.session_id)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown operation {op}")
    if reply.errors:
        err.write(render_errors(reply))
        err.flush()
        return EXIT_RPC_ERROR
    out.write(render_reply(reply, output))
    out.flush()
    if op == "lock" and args.hold > 0:
        time.sleep(args.hold)
    return EXIT_OK


def _guarded(fn, *a) -> int:
    try:
        return fn(*a)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (SessionError, TlsError, OSError) as exc:
        print(f"netctl: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


def _connect(cfg, ns, op_args, output) -> int:
    if cfg.tls is None:
        raise UsageError(f"{ns.config}: missing [tls] section")
    target = cfg.connect or ListenConfig("127.0.0.1")
    host = ns.host or target.address
    port = ns.port or target.port
    raw = TcpNetwork().connect(host, port)
    chan = tls_connect(raw, cfg.tls, expected_identity=ns.identity or cfg.server_identity or host)
    session = ManagerSession.establish(chan, hello_timeout=cfg.hello_timeout,
                                       reply_timeout=ns.timeout or cfg.reply_timeout)
    try:
        return run_op(session, op_args, output)
    finally:
        session.close_session()


def _interactive(session: ManagerSession, output: str) -> int:
    parser = _op_parser()
    worst = EXIT_OK
    print(f"# session {session.session_id} ({session.negotiated.name}); 'quit' ends it", flush=True)
    for line in sys.stdin:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("quit", "exit", "close"):
            break
        try:
            args = parser.parse_args(shlex.split(line))
            code = run_op(session, args, getattr(args, "output", output))
        except UsageError as exc:
            print(exc, file=sys.stderr, flush=True)
            continue
        worst = max(worst, code)
        if not session.established:
            return EXIT_TRANSPORT
    return worst


def _listen(cfg, ns, rest: list[str], output) -> int:
    largs = _listen_parser().parse_args(rest)
    if cfg.tls is None:
        raise UsageError(f"{ns.config}: missing [tls] section")
    op_args = None
    if not largs.interactive:
        if not largs.command:
            raise UsageError("netctl listen: give an operation to run, or --interactive")
        op_args = _op_parser().parse_args(largs.command)
        output = getattr(op_args, "output", output)
    base = cfg.callhome_listen or ListenConfig("0.0.0.0", CALLHOME_TLS_PORT)
    port = next(p for p in (largs.port, ns.port, base.port) if p is not None)
    if port == CALLHOME_SSH_PORT:
        raise UsageError("netctl: port 4334 is SSH call home, transport not built")
    address = largs.address or base.address
    listener = TcpNetwork().listen(address, port)
    print(f"netctl: listening for call home on {listener.address[0]}:{listener.address[1]}",
          file=sys.stderr, flush=True)

    codes: list[int] = []
    done = threading.Event()
    lock = threading.Lock()

    def sink(session: ManagerSession) -> None:
        try:
            if largs.interactive:
                code = _interactive(session, output)
            else:
                code = _guarded(run_op, session, op_args, output)
        finally:
            session.close_session()
        with lock:
            codes.append(code)
            if largs.count and len(codes) >= largs.count:
                done.set()

    ml = ManagerListener(listener, cfg.tls, sink, hello_timeout=cfg.hello_timeout,
                         parallel=largs.parallel, probe_interval=cfg.probe_interval,
                         reply_timeout=ns.timeout or cfg.reply_timeout)
    ml.start()
    try:
        while not done.wait(0.2):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        ml.close()
    return max(codes, default=EXIT_OK)


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    try:
        ns = _main_parser().parse_args(argv)
        cfg = load_manager_config(ns.config)
        output = ns.output or cfg.output
        if not ns.command:
            raise UsageError("netctl: missing subcommand")
        if ns.command[0] == "listen" or ns.callhome:
            rest = ns.command[1:] if ns.command[0] == "listen" else ns.command
            return _guarded(_listen, cfg, ns, rest, output)
        op_args = _op_parser().parse_args(ns.command)
        output = getattr(op_args, "output", output)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"netctl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return _guarded(_connect, cfg, ns, op_args, output)


if __name__ == "__main__":
    sys.exit(main())
