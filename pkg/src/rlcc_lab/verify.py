"""
Independent evaluation of exported pseudocode.

Intended usage: after exporting an ensemble, run the pseudocode and the
reloaded description against the in-memory ensemble on random inputs and
confirm that every output matches exactly. Any mismatch means the export is
not faithful and must not ship.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .distill import TreeEnsemble
from .export import ensemble_from_text, export_tree_source

_IF = re.compile(r"^if x\[(\d+)\] <= (\S+) then$")
_ADD = re.compile(r"^acc = acc \+ (\S+)$")
_RET_AFFINE = re.compile(r"^return (\S+) \+ (\S+) \* acc$")
_RET_CONST = re.compile(r"^return (\S+)$")


class PseudocodeError(ValueError):
    pass


@dataclass
class _If:
    feature: int
    threshold: float
    then: list = field(default_factory=list)
    otherwise: list = field(default_factory=list)


@dataclass
class Program:
    body: list
    # (f0, eta) for "return f0 + eta * acc", (c, None) for "return c"
    ret: tuple[float, float | None]


def parse_pseudocode(source: str) -> Program:
    lines = [ln.strip() for ln in source.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != "function decide(x):":
        raise PseudocodeError("expected 'function decide(x):'")

    body: list = []
    # each frame: (statement list being filled, owning _If or None)
    stack: list[tuple[list, _If | None]] = [(body, None)]
    ret = None
    for line in lines[1:]:
        if ret is not None:
            raise PseudocodeError(f"statement after return: '{line}'")
        if line == "acc = 0":
            continue
        if m := _IF.match(line):
            node = _If(int(m.group(1)), float(m.group(2)))
            stack[-1][0].append(node)
            stack.append((node.then, node))
        elif line == "else":
            _, owner = stack.pop()
            if owner is None:
                raise PseudocodeError("'else' without 'if'")
            stack.append((owner.otherwise, owner))
        elif line == "end":
            _, owner = stack.pop()
            if owner is None:
                raise PseudocodeError("'end' without 'if'")
        elif m := _ADD.match(line):
            stack[-1][0].append(float(m.group(1)))
        elif m := _RET_AFFINE.match(line):
            ret = (float(m.group(1)), float(m.group(2)))
        elif m := _RET_CONST.match(line):
            ret = (float(m.group(1)), None)
        else:
            raise PseudocodeError(f"unrecognised line '{line}'")
        if len(stack) == 0:
            raise PseudocodeError("unbalanced block structure")
    if len(stack) != 1:
        raise PseudocodeError("unterminated 'if' block")
    if ret is None:
        raise PseudocodeError("missing return")
    return Program(body, ret)


def _run(block: list, x: np.ndarray, acc: float) -> float:
    for stmt in block:
        if isinstance(stmt, _If):
            acc = _run(stmt.then if x[stmt.feature] <= stmt.threshold else stmt.otherwise, x, acc)
        else:
            acc = acc + stmt
    return acc


def run_program(program: Program, x: np.ndarray) -> float:
    acc = _run(program.body, np.asarray(x, dtype=float), 0.0)
    base, eta = program.ret
    if eta is None:
        return base
    return base + eta * acc


def evaluate_pseudocode(source: str, x: np.ndarray) -> float:
    return run_program(parse_pseudocode(source), x)


@dataclass
class ExportCheck:
    n_inputs: int
    description_mismatches: int
    pseudocode_mismatches: int
    max_abs_diff: float

    @property
    def ok(self) -> bool:
        return self.description_mismatches == 0 and self.pseudocode_mismatches == 0


def verify_export(ens: TreeEnsemble, n_inputs: int = 10_000, seed: int = 0,
                  low: float = -1.5, high: float = 1.5) -> ExportCheck:
    """
    Compare the in-memory ensemble with its reloaded description and its
    interpreted pseudocode on uniform random inputs; equality is exact.
    """
    source = export_tree_source(ens)
    reloaded = ensemble_from_text(source.description)
    program = parse_pseudocode(source.pseudocode)
    X = np.random.default_rng(seed).uniform(low, high, size=(n_inputs, ens.n_features))

    expected = ens.predict_many(X)
    from_description = reloaded.predict_many(X)
    from_source = np.array([run_program(program, x) for x in X])
    worst = 0.0
    if n_inputs:
        worst = float(max(np.max(np.abs(expected - from_description)), np.max(np.abs(expected - from_source))))
    return ExportCheck(
        n_inputs=n_inputs,
        description_mismatches=int(np.sum(expected != from_description)),
        pseudocode_mismatches=int(np.sum(expected != from_source)),
        max_abs_diff=worst,
    )
