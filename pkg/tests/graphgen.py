"""Random composite-graph programs for gradient checking.

A program is a replayable recipe: leaf shapes/values plus a sequence of op
applications ending in a scalar reduction. The same program evaluates under
the tape (for backward) and as a plain function of leaf values (for the
finite-difference oracle).
"""

from dataclasses import dataclass

import numpy as np

from pila import diffcore as dc

UNARY = ("tanh", "arctan", "sigmoid", "square", "neg", "softplus",
         "exp_bounded", "log_positive", "sqrt_positive", "half")
BINARY = ("add", "sub", "mul", "div_safe", "matmul_t", "concat")


@dataclass
class Program:
    leaf_values: list
    steps: list  # (op, arg indices)
    reduction: str

    def describe(self) -> str:
        ops = " -> ".join(op for op, _ in self.steps)
        return f"[{ops}] -> {self.reduction}"


def _apply_unary(op, t):
    if op == "tanh":
        return dc.tanh(t)
    if op == "arctan":
        return dc.arctan(t)
    if op == "sigmoid":
        return dc.sigmoid(t)
    if op == "square":
        return dc.square(t)
    if op == "neg":
        return dc.mul(t, -1.0)
    if op == "softplus":
        return dc.softplus(t)
    if op == "exp_bounded":
        return dc.exp(dc.tanh(t))
    if op == "log_positive":
        return dc.log(dc.add(dc.softplus(t), 0.1))
    if op == "sqrt_positive":
        return dc.sqrt(dc.add(dc.softplus(t), 0.1))
    if op == "half":
        return dc.mul(t, 0.5)
    raise AssertionError(op)


def _apply_binary(op, a, b):
    if op == "add":
        return dc.add(a, b)
    if op == "sub":
        return dc.sub(a, b)
    if op == "mul":
        return dc.mul(a, b)
    if op == "div_safe":
        return dc.div(a, dc.add(dc.softplus(b), 0.5))
    if op == "matmul_t":
        return dc.matmul(a, dc.transpose(b))
    if op == "concat":
        return dc.concat_last([a, b])
    raise AssertionError(op)


def random_program(rng: np.random.Generator, max_layers: int = 4,
                   max_dim: int = 16) -> Program:
    n_leaves = int(rng.integers(1, 4))
    rows = int(rng.integers(1, max_dim // 2 + 1))
    cols = int(rng.integers(1, max_dim // 2 + 1))
    leaf_values = [rng.standard_normal((rows, cols)) for _ in range(n_leaves)]
    steps = []
    shapes = [(rows, cols)] * n_leaves
    n_layers = int(rng.integers(1, max_layers + 1))
    for _ in range(n_layers):
        if rng.random() < 0.5 or len(shapes) < 2:
            op = UNARY[rng.integers(len(UNARY))]
            src = int(rng.integers(len(shapes)))
            steps.append((op, (src,)))
            shapes.append(shapes[src])
        else:
            op = BINARY[rng.integers(len(BINARY))]
            same = [
                (i, j)
                for i in range(len(shapes))
                for j in range(len(shapes))
                if shapes[i] == shapes[j]
            ]
            i, j = same[rng.integers(len(same))]
            steps.append((op, (i, j)))
            if op == "matmul_t":
                shapes.append((shapes[i][0], shapes[j][0]))
            elif op == "concat":
                shapes.append((shapes[i][0], shapes[i][1] + shapes[j][1]))
            else:
                shapes.append(shapes[i])
    reduction = "mean" if rng.random() < 0.5 else "sum_scaled"
    return Program(leaf_values=leaf_values, steps=steps, reduction=reduction)


def run_program(program: Program, leaves) -> dc.Tensor:
    nodes = list(leaves)
    for op, args in program.steps:
        if len(args) == 1:
            nodes.append(_apply_unary(op, nodes[args[0]]))
        else:
            nodes.append(_apply_binary(op, nodes[args[0]], nodes[args[1]]))
    final = nodes[-1]
    if program.reduction == "mean":
        return dc.mean(dc.square(final))
    return dc.mul(dc.tsum(dc.square(final)), 1e-2)
