"""Bits shared by the command-line programs."""

from __future__ import annotations

import logging
import os
import sys

from lxml import etree

from ..message import RpcReply
from ..sysmodel import SCHEMA
from ..tree import children_from_element, schema_child, segment


def setup_logging() -> None:
    level = os.environ.get("NETKIT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _leaf_lines(nodes, sn, prefix, out):
    for node in nodes:
        csn = schema_child(sn, node)
        here = f"{prefix}/{segment(node, csn)}"
        if node.is_leaf:
            out.append(f"{here} = {node.value}")
        else:
            _leaf_lines(node.children, csn, here, out)


def render_reply(reply: RpcReply, mode: str = "xml") -> str:
    """Text for stdout. Error replies are rendered by ``render_errors``."""
    if reply.data is None:
        return "<ok/>\n" if mode == "xml" else "ok\n"
    if mode == "compact":
        out: list[str] = []
        _leaf_lines(children_from_element(reply.data, SCHEMA), SCHEMA, "", out)
        return "".join(line + "\n" for line in out)
    data = etree.fromstring(etree.tostring(reply.data),
                            etree.XMLParser(remove_blank_text=True))
    return etree.tostring(data, pretty_print=True, encoding="unicode")


def render_errors(reply: RpcReply) -> str:
    lines = []
    for err in reply.errors:
        line = f"rpc-error: {err.error_tag} ({err.error_type}/{err.severity})"
        if err.error_message:
            line += f": {err.error_message}"
        if err.error_path:
            line += f" [path {err.error_path}]"
        for item in err.error_info:
            if isinstance(item, tuple):
                line += f" {item[0]}={item[1]}"
            else:
                line += f" {etree.QName(item).localname}={item.text}"
        lines.append(line)
    return "".join(line + "\n" for line in lines)
