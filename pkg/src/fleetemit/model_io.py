"""Portable tree documents, DOT diagrams, and complexity-table CSVs.

Trees serialize to a versioned JSON document with nodes in pre-order and
full round-trip float precision. DOT diagrams follow the convention that
answering yes at a node always moves down the left branch; for numeric
rules the branch with the smaller mean is drawn on the left, so the
printed comparison flips between "<" and ">=" accordingly.
"""

from __future__ import annotations

import csv
import json
import math
from typing import Union

from fleetemit.cart import CpRow, Node, RegressionTree, Split, _resolve_min_sizes

FORMAT_NAME = "fleetemit-tree"
FORMAT_VERSION = 1


def tree_document(tree: RegressionTree) -> dict:
    """Plain-dict form of a fitted tree."""
    nodes = []

    def visit(node: Node) -> int:
        entry: dict = {
            "id": len(nodes),
            "n": node.n,
            "mean": node.mean,
            "deviance": node.deviance,
        }
        nodes.append(entry)
        if node.split is not None:
            s = node.split
            if s.kind == "numeric":
                entry["split"] = {"feature": s.feature, "threshold": s.threshold}
            else:
                entry["split"] = {
                    "feature": s.feature,
                    "left_set": sorted(s.left_set),
                    "categories": sorted(s.categories or ()),
                }
            entry["alpha"] = None if math.isinf(node.collapse_alpha) else node.collapse_alpha
            entry["left"] = visit(node.left)
            entry["right"] = visit(node.right)
        return entry["id"]

    visit(tree.root_)
    kinds = ["categorical" if i in set(tree.categorical_features) else "numeric"
             for i in range(tree.n_features_in_)]
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "target_kind": tree.target_kind,
        "feature_names": list(tree.resolved_feature_names()),
        "feature_kinds": kinds,
        "params": {
            "cp": tree.cp,
            "minsplit": tree.minsplit,
            "minbucket": tree.minbucket,
            "xval": tree.xval,
            "max_depth": tree.max_depth,
            "seed": tree.seed,
        },
        "root_deviance": tree.root_deviance_,
        "nodes": nodes,
        "cp_table": [
            {"cp": r.cp, "nsplit": r.nsplit, "rel_error": r.rel_error,
             "xerror": r.xerror, "xstd": r.xstd}
            for r in tree.cp_table_
        ],
    }


def serialize(tree: RegressionTree) -> bytes:
    return json.dumps(tree_document(tree), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def deserialize(data: Union[bytes, str, dict]) -> RegressionTree:
    """Rebuild a fitted tree from a document; predicts identically."""
    if isinstance(data, (bytes, str)):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed tree document: {exc}") from exc
    else:
        doc = data
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ValueError("not a tree document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported document version: {doc.get('version')}")
    try:
        kinds = list(doc["feature_kinds"])
        params = doc["params"]
        tree = RegressionTree(
            cp=params["cp"], minsplit=params["minsplit"], minbucket=params["minbucket"],
            xval=params["xval"], max_depth=params["max_depth"], seed=params["seed"],
            categorical_features=tuple(i for i, k in enumerate(kinds) if k == "categorical"),
            feature_names=tuple(doc["feature_names"]),
            target_kind=doc["target_kind"],
        )
        by_id = {entry["id"]: entry for entry in doc["nodes"]}
        if len(by_id) != len(doc["nodes"]):
            raise ValueError("duplicate node ids")
        tree.root_ = _build_node(by_id, doc["nodes"][0]["id"], kinds, set())
        tree.root_deviance_ = float(doc["root_deviance"])
        tree.cp_table_ = [
            CpRow(cp=float(r["cp"]), nsplit=int(r["nsplit"]), rel_error=float(r["rel_error"]),
                  xerror=None if r["xerror"] is None else float(r["xerror"]),
                  xstd=None if r["xstd"] is None else float(r["xstd"]))
            for r in doc["cp_table"]
        ]
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"malformed tree document: {exc!r}") from exc
    tree.n_features_in_ = len(kinds)
    tree._kinds_ = kinds
    tree.minsplit_, tree.minbucket_ = _resolve_min_sizes(params["minsplit"], params["minbucket"])
    return tree


def _build_node(by_id: dict, node_id: int, kinds: list, seen: set) -> Node:
    if node_id in seen:
        raise ValueError(f"node {node_id} referenced twice")
    seen.add(node_id)
    entry = by_id[node_id]
    n = int(entry["n"])
    if n < 1:
        raise ValueError(f"node {node_id}: n must be positive")
    node = Node(n=n, mean=float(entry["mean"]), deviance=float(entry["deviance"]))
    if "split" in entry:
        raw = entry["split"]
        feature = int(raw["feature"])
        if not 0 <= feature < len(kinds):
            raise ValueError(f"node {node_id}: bad feature index {feature}")
        if "threshold" in raw:
            split = Split(feature, "numeric", threshold=float(raw["threshold"]))
        else:
            split = Split(feature, "categorical",
                          left_set=frozenset(raw["left_set"]),
                          categories=frozenset(raw.get("categories", raw["left_set"])))
        node.split = split
        alpha = entry.get("alpha")
        node.collapse_alpha = math.inf if alpha is None else float(alpha)
        node.left = _build_node(by_id, entry["left"], kinds, seen)
        node.right = _build_node(by_id, entry["right"], kinds, seen)
        if node.left.n + node.right.n != node.n:
            raise ValueError(f"node {node_id}: child counts do not add up")
    return node


def write_tree(tree: RegressionTree, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(tree))


def read_tree(path) -> RegressionTree:
    with open(path, "rb") as f:
        return deserialize(f.read())


# ---------------------------------------------------------------------------
# DOT export


def _num(value: float) -> str:
    return format(value, "g")


def export_dot(tree: RegressionTree) -> str:
    """Graphviz text for a fitted tree, left child as the yes branch."""
    names = tree.resolved_feature_names()
    root_n = tree.root_.n
    lines = [
        "digraph tree {",
        '  node [shape=box, fontname="Helvetica"];',
        '  edge [fontname="Helvetica"];',
    ]
    counter = {"next": 0}

    def visit(node: Node) -> int:
        my_id = counter["next"]
        counter["next"] += 1
        pct = 100.0 * node.n / root_n
        if node.split is None:
            label = f"{_num(node.mean)}\\nn={node.n} ({pct:.0f}%)"
            lines.append(f'  n{my_id} [label="{label}"];')
            return my_id
        rule, yes_child, no_child = _display_rule(node, names)
        label = f"{rule}\\nmean {_num(node.mean)}\\nn={node.n} ({pct:.0f}%)"
        lines.append(f'  n{my_id} [label="{label}"];')
        yes_id = visit(yes_child)
        no_id = visit(no_child)
        lines.append(f'  n{my_id} -> n{yes_id} [label="yes"];')
        lines.append(f'  n{my_id} -> n{no_id} [label="no"];')
        return my_id

    visit(tree.root_)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _display_rule(node: Node, names) -> tuple:
    """(rule text, yes child, no child) with the smaller mean drawn left."""
    s = node.split
    name = names[s.feature]
    if s.kind == "categorical":
        members = ",".join(sorted(s.left_set))
        return f"{name} in {{{members}}}", node.left, node.right
    if node.left.mean <= node.right.mean:
        return f"{name} < {_num(s.threshold)}", node.left, node.right
    return f"{name} >= {_num(s.threshold)}", node.right, node.left


# ---------------------------------------------------------------------------
# CP table CSV


def write_cp_table(tree: RegressionTree, destination) -> None:
    """CSV of the complexity table; CV columns are empty when CV was off."""
    stream, should_close = (destination, False) if hasattr(destination, "write") else (
        open(destination, "w", encoding="utf-8", newline=""), True)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["CP", "nsplit", "rel_error", "xerror", "xstd"])
        for row in tree.cp_table_:
            w.writerow([
                repr(row.cp), row.nsplit, repr(row.rel_error),
                "" if row.xerror is None else repr(row.xerror),
                "" if row.xstd is None else repr(row.xstd),
            ])
    finally:
        if should_close:
            stream.close()
