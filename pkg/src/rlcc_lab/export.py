"""
Ensemble files and if-else pseudocode.

The ensemble file is versioned text: a header, then one line per node in
preorder as ``tree,node,kind,feature,threshold|value``. Numbers carry 17
significant digits so a round trip reproduces predictions bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .distill import RegressionTree, TreeEnsemble, TreeNode, count_ops

logger = logging.getLogger(__name__)

ENSEMBLE_MAGIC = "rlcc-ensemble v1"
NODE_HEADER = "tree,node,kind,feature,threshold|value"


class EnsembleFormatError(ValueError):
    pass


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _preorder(tree: RegressionTree) -> list[TreeNode]:
    out: list[TreeNode] = []

    def walk(idx: int) -> None:
        node = tree.nodes[idx]
        out.append(node)
        if node.kind == "split":
            walk(node.left)
            walk(node.right)

    walk(0)
    return out


def ensemble_to_text(ens: TreeEnsemble) -> str:
    lines = [
        ENSEMBLE_MAGIC,
        f"trees {len(ens.trees)}",
        f"depth {ens.max_depth}",
        f"eta {_fmt(ens.eta)}",
        f"f0 {_fmt(ens.f0)}",
        f"op_count {count_ops(ens)}",
        f"n_features {ens.n_features}",
        NODE_HEADER,
    ]
    for t, tree in enumerate(ens.trees):
        for n, node in enumerate(_preorder(tree)):
            if node.kind == "split":
                lines.append(f"{t},{n},split,{node.feature},{_fmt(node.threshold)}")
            else:
                lines.append(f"{t},{n},leaf,,{_fmt(node.value)}")
    return "\n".join(lines) + "\n"


def _header(lines: list[str], pos: int, key: str) -> str:
    if pos >= len(lines):
        raise EnsembleFormatError(f"missing header field '{key}'")
    parts = lines[pos].split()
    if len(parts) != 2 or parts[0] != key:
        raise EnsembleFormatError(f"expected '{key} <value>', got '{lines[pos]}'")
    return parts[1]


def _rebuild(rows: list[tuple[str, int, float]], tree_idx: int) -> RegressionTree:
    nodes: list[TreeNode] = []
    pos = 0

    def build() -> int:
        nonlocal pos
        if pos >= len(rows):
            raise EnsembleFormatError(f"tree {tree_idx}: split without both children")
        kind, feature, number = rows[pos]
        pos += 1
        idx = len(nodes)
        if kind == "leaf":
            nodes.append(TreeNode("leaf", value=number))
            return idx
        node = TreeNode("split", feature=feature, threshold=number)
        nodes.append(node)
        node.left = build()
        node.right = build()
        return idx

    build()
    if pos != len(rows):
        raise EnsembleFormatError(f"tree {tree_idx}: {len(rows) - pos} trailing nodes")
    return RegressionTree(nodes)


def ensemble_from_text(text: str) -> TreeEnsemble:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ENSEMBLE_MAGIC:
        raise EnsembleFormatError(f"not an ensemble file (missing '{ENSEMBLE_MAGIC}')")
    try:
        n_trees = int(_header(lines, 1, "trees"))
        depth = int(_header(lines, 2, "depth"))
        eta = float(_header(lines, 3, "eta"))
        f0 = float(_header(lines, 4, "f0"))
        op_count = int(_header(lines, 5, "op_count"))
        n_features = int(_header(lines, 6, "n_features"))
    except ValueError as exc:
        if isinstance(exc, EnsembleFormatError):
            raise
        raise EnsembleFormatError(f"malformed header: {exc}") from exc
    if len(lines) < 8 or lines[7] != NODE_HEADER:
        raise EnsembleFormatError(f"expected node header '{NODE_HEADER}'")

    per_tree: dict[int, list[tuple[str, int, float]]] = {t: [] for t in range(n_trees)}
    for line in lines[8:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise EnsembleFormatError(f"malformed node line '{line}'")
        try:
            t, kind = int(parts[0]), parts[2]
            if kind == "split":
                feature = int(parts[3])
                if not (0 <= feature < n_features):
                    raise EnsembleFormatError(f"feature {feature} out of range in '{line}'")
            elif kind == "leaf":
                feature = -1
            else:
                raise EnsembleFormatError(f"unknown node kind '{kind}'")
            number = float(parts[4])
        except ValueError as exc:
            if isinstance(exc, EnsembleFormatError):
                raise
            raise EnsembleFormatError(f"malformed node line '{line}': {exc}") from exc
        if t not in per_tree:
            raise EnsembleFormatError(f"node for tree {t}, header declares {n_trees} trees")
        per_tree[t].append((kind, feature, number))

    trees = [_rebuild(per_tree[t], t) for t in range(n_trees)]
    ens = TreeEnsemble(f0=f0, eta=eta, trees=trees, n_features=n_features)
    if count_ops(ens) != op_count:
        raise EnsembleFormatError(f"op_count {op_count} does not match the trees ({count_ops(ens)})")
    if ens.max_depth != depth:
        raise EnsembleFormatError(f"depth {depth} does not match the trees ({ens.max_depth})")
    return ens


def save_ensemble(ens: TreeEnsemble, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ensemble_to_text(ens))
    logger.info(f"Saved ensemble ({count_ops(ens)} ops) to {path}")
    return path


def load_ensemble(path: str | Path) -> TreeEnsemble:
    return ensemble_from_text(Path(path).read_text())


def _emit_tree(tree: RegressionTree, idx: int, indent: int, out: list[str]) -> None:
    node = tree.nodes[idx]
    pad = "  " * indent
    if node.kind == "leaf":
        out.append(f"{pad}acc = acc + {_fmt(node.value)}")
        return
    out.append(f"{pad}if x[{node.feature}] <= {_fmt(node.threshold)} then")
    _emit_tree(tree, node.left, indent + 1, out)
    out.append(f"{pad}else")
    _emit_tree(tree, node.right, indent + 1, out)
    out.append(f"{pad}end")


def to_pseudocode(ens: TreeEnsemble) -> str:
    out = [
        f"# trees={len(ens.trees)} depth={ens.max_depth} ops={count_ops(ens)}",
        "function decide(x):",
    ]
    if not ens.trees:
        out.append(f"  return {_fmt(ens.f0)}")
        return "\n".join(out) + "\n"
    out.append("  acc = 0")
    for t, tree in enumerate(ens.trees):
        out.append(f"  # tree {t}")
        _emit_tree(tree, 0, 1, out)
    out.append(f"  return {_fmt(ens.f0)} + {_fmt(ens.eta)} * acc")
    return "\n".join(out) + "\n"


@dataclass
class ExportedSource:
    description: str
    pseudocode: str


def export_tree_source(ens: TreeEnsemble) -> ExportedSource:
    return ExportedSource(ensemble_to_text(ens), to_pseudocode(ens))


def write_export(ens: TreeEnsemble, out: str | Path) -> tuple[Path, Path]:
    """Write the pseudocode to ``out`` and the structured description next to it."""
    source = export_tree_source(ens)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(source.pseudocode)
    description = out.with_suffix(".ensemble")
    description.write_text(source.description)
    logger.info(f"Exported pseudocode to {out} and description to {description}")
    return out, description
