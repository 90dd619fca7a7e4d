"""running / candidate / startup datastores with RFC 6241 edit semantics."""

from __future__ import annotations

import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Callable

from lxml import etree

from .message import BASE_NS, RpcError, parse_xml, qn
from .tree import (
    ConfigNode, SchemaNode, apply_filter, canonical, children_from_element, identity,
    new_root, schema_child, segment, tree_equal,
)

log = logging.getLogger(__name__)

KINDS = ("running", "candidate", "startup")


class EditFailed(Exception):
    """An edit stopped on ``error``; ``tree`` holds whatever was applied first."""

    def __init__(self, error: RpcError, tree: ConfigNode):
        super().__init__(str(error))
        self.error = error
        self.tree = tree


def _err(tag, path, message):
    return RpcError(tag, "application", error_message=message, error_path=path)


def _check_writable(node: ConfigNode, sn: SchemaNode | None, path: str):
    if sn is not None and not sn.config:
        raise _err("invalid-value", path, f"{node.name} is read-only state data")


def _materialize(edit: ConfigNode, sn: SchemaNode | None, path: str) -> ConfigNode:
    """A fresh node built from an edit payload, honouring nested operations."""
    if edit.is_leaf:
        return ConfigNode(edit.name, edit.namespace, edit.value)
    fresh = ConfigNode(edit.name, edit.namespace)
    _edit_children(fresh, edit.children, "merge", sn, path)
    return fresh


def _prepend_keys(target: ConfigNode, edit: ConfigNode, sn: SchemaNode | None):
    if sn is None or sn.kind != "list":
        return
    keys = [edit.child(k) for k in sn.keys]
    present = {c.name for c in target.children}
    target.children[:0] = [k.copy() for k in keys if k is not None and k.name not in present]


def _edit_children(target: ConfigNode, edits: list[ConfigNode], inherited: str,
                   parent_sn: SchemaNode | None, path: str) -> None:
    for e in edits:
        sn = schema_child(parent_sn, e)
        seg = segment(e, sn)
        here = f"{path}/{seg}"
        op = e.operation or inherited
        if op != "none" or e.operation:
            _check_writable(e, sn, here)
        ident = identity(e, sn)
        idx = next((i for i, c in enumerate(target.children)
                    if identity(c, schema_child(parent_sn, c)) == ident), None)
        existing = target.children[idx] if idx is not None else None

        if op == "create":
            if existing is not None:
                raise _err("data-exists", here, f"{seg} already exists")
            target.children.append(_materialize(e, sn, here))
        elif op == "delete":
            if existing is None:
                raise _err("data-missing", here, f"{seg} does not exist")
            del target.children[idx]
        elif op == "remove":
            if existing is not None:
                del target.children[idx]
        elif op == "replace":
            fresh = _materialize(e, sn, here)
            if existing is None:
                target.children.append(fresh)
            else:
                target.children[idx] = fresh
        elif op == "merge":
            if existing is None:
                target.children.append(_materialize(e, sn, here))
            elif existing.is_leaf != e.is_leaf:
                raise _err("invalid-value", here, f"{seg}: leaf/container mismatch")
            elif e.is_leaf:
                existing.value = e.value
            else:
                _edit_children(existing, e.children, "merge", sn, here)
        else:  # none
            if e.is_leaf:
                continue
            if existing is None:
                placeholder = ConfigNode(e.name, e.namespace)
                _edit_children(placeholder, e.children, "none", sn, here)
                if placeholder.children:
                    _prepend_keys(placeholder, e, sn)
                    target.children.append(placeholder)
            elif existing.is_leaf:
                raise _err("invalid-value", here, f"{seg}: leaf/container mismatch")
            else:
                _edit_children(existing, e.children, "none", sn, here)


def apply_edit(root: ConfigNode, edits: list[ConfigNode], default_op: str = "merge",
               error_op: str = "rollback-on-error", schema: SchemaNode | None = None) -> ConfigNode:
    """Apply an edit to a copy of ``root`` and return the new tree.

    ``root`` itself is never modified. On failure under rollback-on-error
    the RpcError propagates; under stop-on-error ``EditFailed`` carries the
    partially edited tree.
    """
    if default_op not in ("merge", "replace", "none"):
        raise RpcError("invalid-value", "protocol", error_message=f"bad default-operation {default_op!r}")
    if error_op not in ("stop-on-error", "rollback-on-error"):
        raise RpcError("operation-not-supported", "protocol",
                       error_message=f"error-option {error_op!r} is not supported")
    work = root.copy()
    try:
        _edit_children(work, edits, default_op, schema, "")
    except RpcError as exc:
        if error_op == "stop-on-error":
            raise EditFailed(exc, work) from None
        raise
    return work


class Datastores:
    """The agent's configuration datastores.

    All mutation happens under one lock by copy-modify-swap, so readers only
    ever see whole trees and a failed edit leaves nothing behind.
    """

    def __init__(self, schema: SchemaNode | None = None, startup_path=None,
                 validator: Callable[[ConfigNode], None] | None = None,
                 state_provider: Callable[[], ConfigNode] | None = None,
                 on_running_change: Callable[[ConfigNode, ConfigNode, int | None], None] | None = None,
                 initial: ConfigNode | None = None):
        self.schema = schema
        self.startup_path = Path(startup_path) if startup_path else None
        self.validator = validator
        self.state_provider = state_provider
        self.on_running_change = on_running_change
        self._mutex = threading.RLock()
        self._locks: dict[str, int | None] = {k: None for k in KINDS}
        startup = self._load_startup()
        if startup is None:
            startup = initial.copy() if initial is not None else new_root()
        self._trees = {"startup": startup, "running": startup.copy(), "candidate": startup.copy()}

    # -- persistence --------------------------------------------------------

    def _load_startup(self) -> ConfigNode | None:
        if self.startup_path is None or not self.startup_path.exists():
            return None
        doc = parse_xml(self.startup_path.read_bytes())
        if doc.tag != qn("data"):
            raise ValueError(f"{self.startup_path}: root element must be <data>")
        root = new_root()
        root.children = children_from_element(doc, self.schema)
        return root

    def _save_startup(self) -> None:
        if self.startup_path is None:
            return
        data = canonical(self._trees["startup"])
        self.startup_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.startup_path.parent, prefix=".startup-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.startup_path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    # -- helpers ------------------------------------------------------------

    def _kind(self, name: str) -> str:
        if name not in KINDS:
            raise RpcError("invalid-value", "protocol", error_message=f"unknown datastore {name!r}")
        return name

    def _check_lock(self, kind: str, session_id: int | None) -> None:
        holder = self._locks[kind]
        if holder is not None and holder != session_id:
            raise RpcError("in-use", "protocol", error_message=f"{kind} is locked by session {holder}",
                           error_info=[("session-id", str(holder))])

    def _set(self, kind: str, tree: ConfigNode, session_id: int | None) -> None:
        old = self._trees[kind]
        self._trees[kind] = tree
        if kind == "startup":
            self._save_startup()
        elif kind == "running" and self.on_running_change is not None:
            self.on_running_change(old, tree, session_id)

    def _validate(self, tree: ConfigNode) -> None:
        if self.validator is not None:
            self.validator(tree)

    def snapshot(self, kind: str) -> ConfigNode:
        with self._mutex:
            return self._trees[self._kind(kind)].copy()

    @property
    def dirty(self) -> bool:
        with self._mutex:
            return not tree_equal(self._trees["candidate"], self._trees["running"])

    def lock_holder(self, kind: str) -> int | None:
        return self._locks[self._kind(kind)]

    # -- operations ---------------------------------------------------------

    def get_config(self, source: str, flt=None) -> ConfigNode:
        with self._mutex:
            tree = self._trees[self._kind(source)]
            return apply_filter(tree, flt)

    def get(self, flt=None) -> ConfigNode:
        """Running configuration merged with state data."""
        with self._mutex:
            tree = self._trees["running"].copy()
        if self.state_provider is not None:
            state = self.state_provider()
            tree.children.extend(state.children)
        return apply_filter(tree, flt)

    def edit_config(self, target: str, edits: list[ConfigNode], default_op: str = "merge",
                    error_op: str = "stop-on-error", session_id: int | None = None,
                    test_option: str = "test-then-set") -> None:
        with self._mutex:
            target = self._kind(target)
            self._check_lock(target, session_id)
            try:
                new = apply_edit(self._trees[target], edits, default_op, error_op, self.schema)
            except EditFailed as failed:
                # stop-on-error keeps whatever was applied before the failure
                if target != "running" or self._passes(failed.tree):
                    self._set(target, failed.tree, session_id)
                raise failed.error from None
            if target != "candidate" and test_option != "set":
                self._validate(new)
            self._set(target, new, session_id)

    def _passes(self, tree: ConfigNode) -> bool:
        try:
            self._validate(tree)
        except RpcError:
            return False
        return True

    def copy_config(self, source, target: str, session_id: int | None = None) -> None:
        with self._mutex:
            target = self._kind(target)
            if isinstance(source, str):
                source = self._kind(source)
                if source == target:
                    raise RpcError("invalid-value", "protocol",
                                   error_message=f"cannot copy {source} onto itself")
                tree = self._trees[source].copy()
            else:
                tree = source.copy()
            self._check_lock(target, session_id)
            if target == "running":
                self._validate(tree)
            self._set(target, tree, session_id)

    def delete_config(self, target: str, session_id: int | None = None) -> None:
        with self._mutex:
            if target != "startup":
                raise RpcError("invalid-value", "protocol",
                               error_message=f"delete-config is only allowed on startup, not {target!r}")
            self._check_lock("startup", session_id)
            self._set("startup", new_root(), session_id)

    def validate(self, source) -> None:
        if isinstance(source, ConfigNode):
            self._validate(source)
            return
        self._validate(self.snapshot(source))

    def commit(self, session_id: int | None = None) -> None:
        with self._mutex:
            self._check_lock("running", session_id)
            self._check_lock("candidate", session_id)
            candidate = self._trees["candidate"]
            if tree_equal(candidate, self._trees["running"]):
                return
            self._validate(candidate)
            self._set("running", candidate.copy(), session_id)

    def discard_changes(self, session_id: int | None = None) -> None:
        with self._mutex:
            self._check_lock("candidate", session_id)
            self._trees["candidate"] = self._trees["running"].copy()

    def lock(self, target: str, session_id: int) -> None:
        with self._mutex:
            target = self._kind(target)
            holder = self._locks[target]
            if holder is not None:
                raise RpcError("lock-denied", "protocol",
                               error_message=f"{target} is already locked by session {holder}",
                               error_info=[("session-id", str(holder))])
            if target == "candidate" and self.dirty:
                raise RpcError("resource-denied", "protocol",
                               error_message="candidate has uncommitted changes",
                               error_info=[("session-id", "0")])
            self._locks[target] = session_id

    def unlock(self, target: str, session_id: int) -> None:
        with self._mutex:
            target = self._kind(target)
            if self._locks[target] != session_id:
                raise RpcError("invalid-value", "protocol",
                               error_message=f"session {session_id} does not hold the {target} lock")
            self._locks[target] = None

    def release_locks(self, session_id: int) -> list[str]:
        """Drop every lock ``session_id`` holds; returns the released targets."""
        with self._mutex:
            released = [k for k, v in self._locks.items() if v == session_id]
            for k in released:
                self._locks[k] = None
            if "candidate" in released and self.dirty:
                # RFC 6241: a lost candidate lock discards its uncommitted changes
                self._trees["candidate"] = self._trees["running"].copy()
            return released


def parse_config_element(el, schema: SchemaNode | None = None) -> list[ConfigNode]:
    """Edit payload nodes from a ``<config>`` element."""
    return children_from_element(el, schema, edit=True)


def config_from_string(xml: str | bytes, schema: SchemaNode | None = None, edit: bool = False) -> list[ConfigNode]:
    """Nodes from an XML fragment, wrapped for parsing in a base-namespace <config>."""
    if isinstance(xml, str):
        xml = xml.encode()
    doc = parse_xml(b'<config xmlns="' + BASE_NS.encode() + b'">' + xml + b"</config>")
    return children_from_element(doc, schema, edit)


def tree_from_string(xml: str | bytes, schema: SchemaNode | None = None) -> ConfigNode:
    root = new_root()
    root.children = config_from_string(xml, schema)
    return root


def to_xml(root: ConfigNode) -> str:
    return etree.tostring(
        etree.fromstring(canonical(root)), pretty_print=True, encoding="unicode")
