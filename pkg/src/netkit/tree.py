"""Configuration trees: nodes, schema description, XML mapping, subtree
filtering and leaf-level diffs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from lxml import etree

from .message import BASE_NS, RpcError, localname, namespace, qn

OPERATION_ATTRS = (qn("operation"), "operation")
EDIT_OPERATIONS = ("merge", "replace", "create", "delete", "remove")


@dataclass
class ConfigNode:
    """One element of a configuration tree.

    Leaves carry ``value`` (possibly ``""``); interior nodes carry
    ``children``. ``operation`` is only meaningful in edit payloads.
    """

    name: str
    namespace: str = ""
    value: str | None = None
    children: list["ConfigNode"] = field(default_factory=list)
    operation: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.value is not None

    @property
    def key(self) -> tuple[str, str]:
        return (self.namespace, self.name)

    def copy(self) -> "ConfigNode":
        return ConfigNode(self.name, self.namespace, self.value,
                          [c.copy() for c in self.children], self.operation)

    def child(self, name: str, ns: str | None = None) -> "ConfigNode | None":
        for c in self.children:
            if c.name == name and (ns is None or c.namespace == ns):
                return c
        return None

    def find(self, path: str) -> "ConfigNode | None":
        """Walk a slash-separated path of local names (no predicates)."""
        node = self
        for part in path.strip("/").split("/"):
            if not part:
                continue
            node = node.child(part)
            if node is None:
                return None
        return node

    def leaf(self, path: str) -> str | None:
        node = self.find(path)
        return node.value if node is not None else None

    def to_element(self, parent_ns: str | None = None):
        nsmap = {None: self.namespace} if self.namespace and self.namespace != parent_ns else None
        el = etree.Element(f"{{{self.namespace}}}{self.name}" if self.namespace else self.name, nsmap=nsmap)
        if self.is_leaf:
            el.text = self.value
        for c in self.children:
            el.append(c.to_element(self.namespace))
        return el


def new_root() -> ConfigNode:
    return ConfigNode("data", BASE_NS)


@dataclass
class SchemaNode:
    name: str
    namespace: str
    kind: str  # container | leaf | list | leaf-list
    children: dict = field(default_factory=dict)  # local name -> SchemaNode
    keys: tuple[str, ...] = ()
    config: bool = True
    check: Callable[[str], bool] | None = None
    type_name: str = "string"

    def child(self, name: str, ns: str) -> "SchemaNode | None":
        sn = self.children.get(name)
        if sn is not None and sn.namespace == ns:
            return sn
        return None

    @property
    def interior(self) -> bool:
        return self.kind in ("container", "list")


def schema_root(children) -> SchemaNode:
    return SchemaNode("data", BASE_NS, "container", {c.name: c for c in children})


def schema_child(sn: SchemaNode | None, node: ConfigNode) -> SchemaNode | None:
    if sn is None:
        return None
    return sn.child(node.name, node.namespace)


def identity(node: ConfigNode, sn: SchemaNode | None):
    """What distinguishes a node among its siblings."""
    if sn is not None and sn.kind == "list" and sn.keys:
        return (node.namespace, node.name, tuple(node.leaf(k) for k in sn.keys))
    if sn is not None and sn.kind == "leaf-list":
        return (node.namespace, node.name, node.value)
    return (node.namespace, node.name)


def segment(node: ConfigNode, sn: SchemaNode | None) -> str:
    if sn is not None and sn.kind == "list" and sn.keys:
        return node.name + "".join(f"[{k}='{node.leaf(k)}']" for k in sn.keys)
    if sn is not None and sn.kind == "leaf-list":
        return f"{node.name}[.='{node.value}']"
    return node.name


def from_element(el, schema: SchemaNode | None = None, edit: bool = False) -> ConfigNode:
    """Build a node from XML. Interior-ness comes from the schema when known,
    otherwise from the presence of child elements."""
    name, ns = localname(el), namespace(el) or ""
    sn = schema.child(name, ns) if schema is not None else None
    elems = [c for c in el if isinstance(c.tag, str)]
    interior = sn.interior if sn is not None else bool(elems)
    node = ConfigNode(name, ns)
    if edit:
        for attr in OPERATION_ATTRS:
            op = el.get(attr)
            if op is not None:
                if op not in EDIT_OPERATIONS:
                    raise RpcError("bad-attribute", "protocol", error_message=f"unknown operation {op!r}",
                                   error_info=[("bad-attribute", "operation"), ("bad-element", name)])
                node.operation = op
                break
    if interior:
        node.children = [from_element(c, sn, edit) for c in elems]
    else:
        if elems:
            raise RpcError("invalid-value", "application",
                           error_message=f"leaf {name!r} must not have child elements")
        node.value = el.text or ""
    return node


def children_from_element(el, schema: SchemaNode | None = None, edit: bool = False) -> list[ConfigNode]:
    return [from_element(c, schema, edit) for c in el if isinstance(c.tag, str)]


def root_to_element(root: ConfigNode, tag: str = "data"):
    el = etree.Element(qn(tag), nsmap={None: BASE_NS})
    for c in root.children:
        el.append(c.to_element(BASE_NS))
    return el


def canonical(root: ConfigNode) -> bytes:
    return etree.tostring(root_to_element(root), encoding="UTF-8", xml_declaration=False)


def tree_equal(a: ConfigNode, b: ConfigNode) -> bool:
    return (a.name == b.name and a.namespace == b.namespace and a.value == b.value
            and len(a.children) == len(b.children)
            and all(tree_equal(x, y) for x, y in zip(a.children, b.children)))


# -- subtree filtering ------------------------------------------------------

@dataclass
class FilterNode:
    name: str
    namespace: str | None  # None matches any namespace
    text: str | None
    children: list["FilterNode"] = field(default_factory=list)

    @property
    def is_content_match(self) -> bool:
        return not self.children and self.text is not None and self.text.strip() != ""

    @property
    def is_selection(self) -> bool:
        return not self.children and not self.is_content_match


def parse_filter(el) -> list[FilterNode]:
    """Children of a ``<filter type="subtree">`` element."""
    ftype = el.get("type", "subtree")
    if ftype != "subtree":
        raise RpcError("invalid-value", "protocol", error_message=f"unsupported filter type {ftype!r}",
                       error_info=[("bad-attribute", "type"), ("bad-element", "filter")])

    def conv(e):
        kids = [conv(c) for c in e if isinstance(c.tag, str)]
        return FilterNode(localname(e), namespace(e), e.text if not kids else None, kids)

    return [conv(c) for c in el if isinstance(c.tag, str)]


def _name_match(d: ConfigNode, f: FilterNode) -> bool:
    return d.name == f.name and (f.namespace is None or f.namespace == d.namespace)


def _filter_siblings(data: list[ConfigNode], flt: list[FilterNode]) -> list[ConfigNode] | None:
    """Selected nodes among ``data``, or None when a content-match test fails."""
    content = [f for f in flt if f.is_content_match]
    for f in content:
        if not any(_name_match(d, f) and d.is_leaf and d.value.strip() == f.text.strip() for d in data):
            return None
    if content and len(content) == len(flt):
        return [d.copy() for d in data]
    out = []
    for d in data:
        picked = None
        for f in flt:
            if not _name_match(d, f):
                continue
            if f.is_content_match:
                picked = d.copy()
                break
            if f.is_selection:
                picked = d.copy()
                break
            if d.is_leaf:
                continue
            sub = _filter_siblings(d.children, f.children)
            if sub:
                picked = ConfigNode(d.name, d.namespace, None, sub)
                break
        if picked is not None:
            out.append(picked)
    return out


def apply_filter(root: ConfigNode, flt: list[FilterNode] | None) -> ConfigNode:
    """Filtered deep copy of ``root``; ``None`` selects everything."""
    if flt is None:
        return root.copy()
    result = new_root()
    result.name, result.namespace = root.name, root.namespace
    if flt:
        result.children = _filter_siblings(root.children, flt) or []
    return result


# -- diffs -------------------------------------------------------------------

@dataclass(frozen=True)
class LeafChange:
    path: str
    old_value: str | None
    new_value: str | None


def leaf_diff(old: ConfigNode, new: ConfigNode, schema: SchemaNode | None = None) -> list[LeafChange]:
    """Leaf-level changes from ``old`` to ``new``, new-tree order first, then removals."""
    changes: list[LeafChange] = []
    _diff(old, new, schema, "", changes)
    return changes


def _leaves(node: ConfigNode, sn, prefix: str, out: list, side: str):
    path = prefix + "/" + segment(node, sn)
    if node.is_leaf:
        out.append(LeafChange(path, node.value, None) if side == "old" else LeafChange(path, None, node.value))
        return
    for c in node.children:
        _leaves(c, schema_child(sn, c), path, out, side)


def _diff(old: ConfigNode | None, new: ConfigNode | None, sn, prefix: str, out: list):
    old_kids = old.children if old is not None else []
    new_kids = new.children if new is not None else []
    old_by_id = {}
    for c in old_kids:
        old_by_id.setdefault(identity(c, schema_child(sn, c)), c)
    seen = set()
    for c in new_kids:
        csn = schema_child(sn, c)
        ident = identity(c, csn)
        seen.add(ident)
        prev = old_by_id.get(ident)
        path = prefix + "/" + segment(c, csn)
        if prev is None:
            _leaves(c, csn, prefix, out, "new")
        elif c.is_leaf and prev.is_leaf:
            if c.value != prev.value:
                out.append(LeafChange(path, prev.value, c.value))
        elif c.is_leaf or prev.is_leaf:
            _leaves(prev, csn, prefix, out, "old")
            _leaves(c, csn, prefix, out, "new")
        else:
            _diff(prev, c, csn, path, out)
    for c in old_kids:
        csn = schema_child(sn, c)
        if identity(c, csn) not in seen:
            _leaves(c, csn, prefix, out, "old")
