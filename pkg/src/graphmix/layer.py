"""The gated mixing block and parameter sharing across decomposition parts.

Block: u = prenorm(X); core = forward(u) over the configured topology;
gated = core ∘ swish(u W_z); out = X + f_y(GatedMLP(gated)). The final
projection is zero-initialized, so a fresh block is the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import InvalidModeError
from .graphs import DagPlan, Decomposition, Graph
from .masks import ForwardConfig, forward
from .params import ParamStore, init_projection_store

SHARING_MODES = ("none", "complete", "row-wise", "diagonal")

_DIAGONAL_GROUPS = {"right-down": 0, "left-up": 0, "left-down": 1, "right-up": 1}


def part_labels(structure) -> list[str]:
    if isinstance(structure, Decomposition):
        return [p.label for p in structure.parts]
    return ["all"]


def sharing_groups(labels: list[str], mode: str) -> list[str]:
    """Map decomposition parts to weight-set keys.

    none: one set per part; complete: a single set; row-wise: parts scanning
    the same horizontal direction share; diagonal: diagonally-opposite grid
    parts share. Both paired modes collapse to complete on 2-part lines.
    """
    if mode not in SHARING_MODES:
        raise InvalidModeError(f"unknown sharing mode '{mode}'; valid: {', '.join(SHARING_MODES)}")
    if mode == "complete" or len(labels) == 1:
        return ["g0"] * len(labels)
    if mode == "none":
        return [f"g{i}" for i in range(len(labels))]
    if set(labels) == {"fwd", "rev"}:
        return ["g0"] * len(labels)
    if mode == "row-wise":
        for lab in labels:
            if not (lab.startswith("right") or lab.startswith("left")):
                raise InvalidModeError(f"row-wise sharing undefined for part '{lab}'")
        return ["g0" if lab.startswith("right") else "g1" for lab in labels]
    try:
        return [f"g{_DIAGONAL_GROUPS[lab]}" for lab in labels]
    except KeyError as exc:
        raise InvalidModeError(f"diagonal sharing undefined for part {exc}") from None


@dataclass
class BlockConfig:
    channels: int
    dstate: int
    heads: int = 1
    expansion: int = 2
    sharing: str = "complete"
    forward: ForwardConfig = field(default_factory=ForwardConfig)


def init_block_store(
    store: ParamStore,
    rng: np.random.Generator,
    prefix: str,
    cfg: BlockConfig,
    structure,
    edge_dim: int | None = None,
    dt_bias: float = 0.0,
    zero_output: bool = False,
) -> list[str]:
    """Create one block's weights; returns the per-part projection prefixes.

    `zero_output` zero-initializes the final projection, making the block the
    identity map bit-exactly; the default small random init keeps gradients
    flowing into the mixing core from the first step.
    """
    d = cfg.channels
    e = cfg.expansion
    std = 1.0 / np.sqrt(d)
    groups = sharing_groups(part_labels(structure), cfg.sharing)
    prefixes = [f"{prefix}.{g}" for g in groups]
    for p in dict.fromkeys(prefixes):
        init_projection_store(store, rng, p, channels=d, dstate=cfg.dstate,
                              heads=cfg.heads, edge_dim=edge_dim,
                              directed_selectivity=cfg.forward.directed_selectivity,
                              dt_bias=dt_bias)
    store[f"{prefix}.norm.gain"] = np.ones(d)
    store[f"{prefix}.norm.bias"] = np.zeros(d)
    store[f"{prefix}.gate.w"] = rng.normal(0.0, std, size=(d, d))
    store[f"{prefix}.gate.bias"] = np.zeros(d)
    store[f"{prefix}.mlp.w_in"] = rng.normal(0.0, std, size=(d, e * d))
    store[f"{prefix}.mlp.b_in"] = np.zeros(e * d)
    store[f"{prefix}.mlp.w_gate"] = rng.normal(0.0, std, size=(d, e * d))
    store[f"{prefix}.mlp.b_gate"] = np.zeros(e * d)
    store[f"{prefix}.mlp.w_out"] = rng.normal(0.0, 1.0 / np.sqrt(e * d), size=(e * d, d))
    store[f"{prefix}.mlp.b_out"] = np.zeros(d)
    if zero_output:
        store[f"{prefix}.out.w"] = np.zeros((d, d))
    else:
        store[f"{prefix}.out.w"] = rng.normal(0.0, 0.5 * std, size=(d, d))
    store[f"{prefix}.out.bias"] = np.zeros(d)
    return prefixes


def block_forward(
    tape: Tape,
    store: ParamStore,
    prefix: str,
    structure: Graph | DagPlan | Decomposition,
    x: Var,
    cfg: BlockConfig,
) -> Var:
    p = lambda name: tape.parameter(f"{prefix}.{name}", store[f"{prefix}.{name}"])
    groups = sharing_groups(part_labels(structure), cfg.sharing)
    prefixes = [f"{prefix}.{g}" for g in groups]

    u = ad.layernorm(tape, x, p("norm.gain"), p("norm.bias"))
    core = forward(tape, structure, store, cfg.forward, x=u, part_prefixes=prefixes)
    gate = ad.swish(tape, ad.add_rows(tape, ad.matmul(tape, u, p("gate.w")), p("gate.bias")))
    gated = ad.mul(tape, core, gate)

    lin = ad.add_rows(tape, ad.matmul(tape, gated, p("mlp.w_in")), p("mlp.b_in"))
    gmask = ad.swish(tape, ad.add_rows(tape, ad.matmul(tape, gated, p("mlp.w_gate")), p("mlp.b_gate")))
    hidden = ad.add_rows(tape, ad.matmul(tape, ad.mul(tape, gmask, lin), p("mlp.w_out")), p("mlp.b_out"))
    out = ad.add_rows(tape, ad.matmul(tape, hidden, p("out.w")), p("out.bias"))
    return ad.add(tape, x, out)


@dataclass
class ModelConfig:
    """A stack of identical blocks plus a scalar linear readout."""

    block: BlockConfig
    blocks: int = 1


def init_model_store(rng: np.random.Generator, cfg: ModelConfig, structure,
                     edge_dim: int | None = None, dt_bias: float = 0.0,
                     zero_output: bool = False) -> ParamStore:
    store: ParamStore = {}
    for b in range(cfg.blocks):
        init_block_store(store, rng, f"block{b}", cfg.block, structure,
                         edge_dim=edge_dim, dt_bias=dt_bias, zero_output=zero_output)
    d = cfg.block.channels
    store["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
    store["head.bias"] = np.asarray(0.0, dtype=np.float64)
    return store


def model_forward(tape: Tape, store: ParamStore, structure, x: np.ndarray | Var,
                  cfg: ModelConfig) -> Var:
    """Run the block stack and the readout; returns per-node predictions (T,)."""
    h = x if isinstance(x, Var) else tape.const(np.asarray(x, dtype=np.float64))
    for b in range(cfg.blocks):
        h = block_forward(tape, store, f"block{b}", structure, h, cfg.block)
    pred = ad.add_scalar(tape, ad.matvec(tape, h, tape.parameter("head.w", store["head.w"])),
                         tape.parameter("head.bias", store["head.bias"]))
    return pred
