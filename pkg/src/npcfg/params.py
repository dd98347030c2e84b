"""Neural parameterizations that produce grammar rule probabilities.

Two modes are implemented:

``baseline``
    Root and unary logits come from inner products between output embeddings
    and a residual ReLU MLP applied to the parent embedding; binary logits
    are raw inner products between the parent embedding and one output
    embedding per child pair. Every distribution is a softmax. Because each
    child-pair embedding is shared by all parents, its scale multiplies every
    parent's logit for that pair, which couples the shapes of all binary
    distributions.

``relaxed``
    The root distribution is a single linear layer over the root embedding.
    Binary and unary logits are ``norm(parent) * cos(parent, child)``,
    computed as the inner product between the parent representation and the
    unit-normalized child embedding, so rescaling any child row cannot move
    the logits. Parent representations come from a stack of
    linear -> RMSNorm -> GELU blocks without residual connections.

All arithmetic is float64 numpy. Gradients are propagated by explicit
reverse-mode code in :func:`backward`, verified against finite differences
in the test suite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError
from .grammar import Grammar, SymbolTable

log = logging.getLogger(__name__)

MODES = ("baseline", "relaxed")
RMS_EPS = 1e-8

# Residual ReLU blocks for the baseline networks, norm-then-GELU blocks for
# the relaxed ones.
BLOCK_RESIDUAL_RELU = "residual_relu"
BLOCK_RMS_GELU = "rms_gelu"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian error linear unit, x * Phi(x), using erf (no tanh fit)."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`gelu`: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=float)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def rms_norm(v: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    v = np.asarray(v, dtype=float)
    rho = np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    return v / rho * gain


def normalize_children(u: np.ndarray) -> np.ndarray:
    """Rescale each row to unit Euclidean norm.

    Zero rows pass through unchanged (and are logged). The norm is computed
    with a fixed-order plain sum, which makes the result bit-identical under
    any power-of-two rescaling of a row and invariant to machine precision
    under arbitrary positive rescaling.
    """
    u = np.asarray(u, dtype=float)
    norms = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    zero = norms[..., 0] == 0.0
    if np.any(zero):
        log.warning("normalize_children: %d zero row(s) passed through", int(zero.sum()))
        norms = np.where(norms == 0.0, 1.0, norms)
    return u / norms


def log_softmax(rows: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; max entry of each output row is <= 0."""
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class LayerBlock:
    """One MLP block: a square weight, plus a gain vector for RMSNorm blocks."""

    kind: str
    weight: np.ndarray
    gain: np.ndarray | None = None


@dataclass
class ParameterSet:
    """All learnable tensors for one parameterization mode.

    Embeddings: ``root_embed`` (d,), ``nt_embed`` (|N|, d) feeding the binary
    network, ``pt_embed`` (|P|, d) feeding the unary network; the networks do
    not share symbol embeddings. Output sides: ``root_out`` (|N|, d),
    ``children_out`` (C^2, d) with one row per child pair in combined-child
    order, ``terminal_out`` (V, d).

    MLP stacks by mode: baseline uses ``root_mlp``/``terminal_mlp`` (residual
    ReLU); relaxed uses ``binary_mlp``/``unary_mlp`` (linear -> RMSNorm ->
    GELU by default; ``norm_after_activation`` swaps the last two stages).
    """

    mode: str
    symbols: SymbolTable
    vocab_size: int
    embed_dim: int
    depth: int
    root_embed: np.ndarray
    nt_embed: np.ndarray
    pt_embed: np.ndarray
    root_out: np.ndarray
    children_out: np.ndarray
    terminal_out: np.ndarray
    root_mlp: list[LayerBlock] = field(default_factory=list)
    terminal_mlp: list[LayerBlock] = field(default_factory=list)
    binary_mlp: list[LayerBlock] = field(default_factory=list)
    unary_mlp: list[LayerBlock] = field(default_factory=list)
    norm_after_activation: bool = False

    def mlp_stacks(self):
        yield "root_mlp", self.root_mlp
        yield "terminal_mlp", self.terminal_mlp
        yield "binary_mlp", self.binary_mlp
        yield "unary_mlp", self.unary_mlp

    def param_items(self):
        """Yield (name, array) for every learnable tensor, in a fixed order."""
        yield "root_embed", self.root_embed
        yield "nt_embed", self.nt_embed
        yield "pt_embed", self.pt_embed
        yield "root_out", self.root_out
        yield "children_out", self.children_out
        yield "terminal_out", self.terminal_out
        for stack_name, stack in self.mlp_stacks():
            for i, block in enumerate(stack):
                yield f"{stack_name}.{i}.weight", block.weight
                if block.gain is not None:
                    yield f"{stack_name}.{i}.gain", block.gain

    def get_param(self, name: str) -> np.ndarray:
        for n, arr in self.param_items():
            if n == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ParameterSet":
        def copy_stack(stack):
            return [
                LayerBlock(b.kind, b.weight.copy(), None if b.gain is None else b.gain.copy())
                for b in stack
            ]

        return ParameterSet(
            mode=self.mode,
            symbols=self.symbols,
            vocab_size=self.vocab_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            root_embed=self.root_embed.copy(),
            nt_embed=self.nt_embed.copy(),
            pt_embed=self.pt_embed.copy(),
            root_out=self.root_out.copy(),
            children_out=self.children_out.copy(),
            terminal_out=self.terminal_out.copy(),
            root_mlp=copy_stack(self.root_mlp),
            terminal_mlp=copy_stack(self.terminal_mlp),
            binary_mlp=copy_stack(self.binary_mlp),
            unary_mlp=copy_stack(self.unary_mlp),
            norm_after_activation=self.norm_after_activation,
        )


def init_parameters(
    mode: str,
    symbols: SymbolTable,
    vocab_size: int,
    embed_dim: int = 256,
    depth: int = 2,
    seed: int | None = None,
    norm_after_activation: bool = False,
) -> ParameterSet:
    """Draw a fresh ParameterSet, entries N(0, 1/sqrt(d)), gains at one."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
    if embed_dim < 1:
        raise ConfigError("embed_dim must be positive")
    if depth < 0:
        raise ConfigError("depth must be >= 0")
    if vocab_size < 1:
        raise ConfigError("vocab_size must be positive")

    rng = np.random.default_rng(seed)
    d = embed_dim
    std = 1.0 / math.sqrt(d)
    c = symbols.num_children

    def draw(*shape):
        return rng.normal(0.0, std, size=shape)

    def blocks(kind):
        out = []
        for _ in range(depth):
            gain = np.ones(d) if kind == BLOCK_RMS_GELU else None
            out.append(LayerBlock(kind, draw(d, d), gain))
        return out

    p = ParameterSet(
        mode=mode,
        symbols=symbols,
        vocab_size=vocab_size,
        embed_dim=d,
        depth=depth,
        root_embed=draw(d),
        nt_embed=draw(symbols.num_nonterminals, d),
        pt_embed=draw(symbols.num_preterminals, d),
        root_out=draw(symbols.num_nonterminals, d),
        children_out=draw(c * c, d),
        terminal_out=draw(vocab_size, d),
        norm_after_activation=norm_after_activation,
    )
    if mode == "baseline":
        p.root_mlp = blocks(BLOCK_RESIDUAL_RELU)
        p.terminal_mlp = blocks(BLOCK_RESIDUAL_RELU)
    else:
        p.binary_mlp = blocks(BLOCK_RMS_GELU)
        p.unary_mlp = blocks(BLOCK_RMS_GELU)
    return p


# ---------------------------------------------------------------------------
# Forward


@dataclass
class _BlockCache:
    x: np.ndarray  # block input
    z: np.ndarray  # linear output
    rho: np.ndarray | None = None  # per-row RMS denominator
    r: np.ndarray | None = None  # RMSNorm output (norm-first order)
    a: np.ndarray | None = None  # activation output (activation-first order)


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by :func:`backward`."""

    grammar: Grammar
    root_probs: np.ndarray  # softmax over |N|
    binary_probs: np.ndarray  # (|N|, C*C)
    unary_probs: np.ndarray  # (|P|, V)
    root_parent: np.ndarray  # representation that scored the root family
    binary_parent: np.ndarray
    unary_parent: np.ndarray
    root_blocks: list[_BlockCache]
    binary_blocks: list[_BlockCache]
    unary_blocks: list[_BlockCache]
    children_unit: np.ndarray | None = None  # relaxed: normalized children_out
    children_norms: np.ndarray | None = None
    terminal_unit: np.ndarray | None = None
    terminal_norms: np.ndarray | None = None
    activations: dict | None = None  # network -> list of post-activation arrays


def mlp_forward(
    x: np.ndarray,
    blocks: list[LayerBlock],
    norm_after_activation: bool = False,
    caches: list[_BlockCache] | None = None,
    capture: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Apply a block stack to rows of ``x``.

    Residual blocks compute ``x + relu(x W)``. RMS-GELU blocks compute
    ``gelu(rms_norm(x W))`` by default, or ``rms_norm(gelu(x W))`` when the
    swapped order is requested. ``capture`` collects the post-activation
    arrays (the ReLU or GELU outputs) for diagnostics.
    """
    h = x
    for block in blocks:
        z = h @ block.weight
        if block.kind == BLOCK_RESIDUAL_RELU:
            a = np.maximum(z, 0.0)
            if caches is not None:
                caches.append(_BlockCache(x=h, z=z))
            if capture is not None:
                capture.append(a)
            h = h + a
        elif block.kind == BLOCK_RMS_GELU:
            if norm_after_activation:
                a = gelu(z)
                rho = np.sqrt(np.mean(a * a, axis=-1, keepdims=True) + RMS_EPS)
                out = a / rho * block.gain
                if caches is not None:
                    caches.append(_BlockCache(x=h, z=z, rho=rho, a=a))
                if capture is not None:
                    capture.append(a)
                h = out
            else:
                rho = np.sqrt(np.mean(z * z, axis=-1, keepdims=True) + RMS_EPS)
                r = z / rho * block.gain
                a = gelu(r)
                if caches is not None:
                    caches.append(_BlockCache(x=h, z=z, rho=rho, r=r))
                if capture is not None:
                    capture.append(a)
                h = a
        else:
            raise ConfigError(f"unknown block kind {block.kind!r}")
    return h


def forward_with_cache(p: ParameterSet, capture_activations: bool = False) -> tuple[Grammar, ForwardCache]:
    """Compute grammar log-probabilities and keep intermediates for backward."""
    if p.mode not in MODES:
        raise ConfigError(f"unknown mode {p.mode!r}")
    n = p.symbols.num_nonterminals
    c = p.symbols.num_children

    acts = {"root": [], "binary": [], "unary": []} if capture_activations else None
    root_blocks: list[_BlockCache] = []
    binary_blocks: list[_BlockCache] = []
    unary_blocks: list[_BlockCache] = []

    children_unit = children_norms = None
    terminal_unit = terminal_norms = None

    if p.mode == "baseline":
        root_parent = mlp_forward(
            p.root_embed[None, :], p.root_mlp,
            caches=root_blocks, capture=None if acts is None else acts["root"],
        )
        root_logits = (root_parent @ p.root_out.T)[0]

        binary_parent = p.nt_embed  # scored directly, no MLP on this network
        binary_logits = binary_parent @ p.children_out.T

        unary_parent = mlp_forward(
            p.pt_embed, p.terminal_mlp,
            caches=unary_blocks, capture=None if acts is None else acts["unary"],
        )
        unary_logits = unary_parent @ p.terminal_out.T
    else:
        root_parent = p.root_embed[None, :]  # single linear layer
        root_logits = (root_parent @ p.root_out.T)[0]

        binary_parent = mlp_forward(
            p.nt_embed, p.binary_mlp, p.norm_after_activation,
            caches=binary_blocks, capture=None if acts is None else acts["binary"],
        )
        children_norms = np.sqrt(np.sum(p.children_out * p.children_out, axis=1, keepdims=True))
        children_unit = p.children_out / np.where(children_norms == 0.0, 1.0, children_norms)
        binary_logits = binary_parent @ children_unit.T

        unary_parent = mlp_forward(
            p.pt_embed, p.unary_mlp, p.norm_after_activation,
            caches=unary_blocks, capture=None if acts is None else acts["unary"],
        )
        terminal_norms = np.sqrt(np.sum(p.terminal_out * p.terminal_out, axis=1, keepdims=True))
        terminal_unit = p.terminal_out / np.where(terminal_norms == 0.0, 1.0, terminal_norms)
        unary_logits = unary_parent @ terminal_unit.T

    root_lp = log_softmax(root_logits[None, :])[0]
    binary_lp = log_softmax(binary_logits)
    unary_lp = log_softmax(unary_logits)

    grammar = Grammar(
        symbols=p.symbols,
        root_logprobs=root_lp,
        binary_logprobs=binary_lp.reshape(n, c, c),
        unary_logprobs=unary_lp,
    )
    cache = ForwardCache(
        grammar=grammar,
        root_probs=np.exp(root_lp),
        binary_probs=np.exp(binary_lp),
        unary_probs=np.exp(unary_lp),
        root_parent=root_parent,
        binary_parent=binary_parent,
        unary_parent=unary_parent,
        root_blocks=root_blocks,
        binary_blocks=binary_blocks,
        unary_blocks=unary_blocks,
        children_unit=children_unit,
        children_norms=children_norms,
        terminal_unit=terminal_unit,
        terminal_norms=terminal_norms,
        activations=acts,
    )
    return grammar, cache


def compute_grammar(p: ParameterSet) -> Grammar:
    """Forward pass only: the grammar induced by the current parameters."""
    grammar, _ = forward_with_cache(p)
    return grammar


def parent_representation(p: ParameterSet, network: str) -> np.ndarray:
    """The representation each network scores its parents with.

    ``network`` is one of "root", "binary", "unary". For the baseline binary
    network this is the raw embedding matrix (that network has no MLP).
    """
    if network == "root":
        if p.mode == "baseline":
            return mlp_forward(p.root_embed[None, :], p.root_mlp)[0]
        return p.root_embed
    if network == "binary":
        if p.mode == "baseline":
            return p.nt_embed
        return mlp_forward(p.nt_embed, p.binary_mlp, p.norm_after_activation)
    if network == "unary":
        if p.mode == "baseline":
            return mlp_forward(p.pt_embed, p.terminal_mlp)
        return mlp_forward(p.pt_embed, p.unary_mlp, p.norm_after_activation)
    raise ConfigError(f"unknown network {network!r}")


def collect_activations(p: ParameterSet) -> dict:
    """Post-activation arrays per network from one forward pass.

    Networks without an activation function (the relaxed root, the baseline
    binary network) fall back to the parent representation itself so that
    callers always get something to measure.
    """
    _, cache = forward_with_cache(p, capture_activations=True)
    out = {}
    for name, parent in (
        ("root", cache.root_parent),
        ("binary", cache.binary_parent),
        ("unary", cache.unary_parent),
    ):
        captured = cache.activations[name]
        out[name] = captured if captured else [parent]
    return out


# ---------------------------------------------------------------------------
# Backward


def _softmax_backward(grad_lp: np.ndarray, probs: np.ndarray) -> np.ndarray:
    # d/dlogits of sum(grad_lp * log_softmax(logits))
    return grad_lp - probs * grad_lp.sum(axis=-1, keepdims=True)


def mlp_backward(
    grad_h: np.ndarray,
    blocks: list[LayerBlock],
    caches: list[_BlockCache],
    norm_after_activation: bool,
    grads: dict,
    prefix: str,
) -> np.ndarray:
    """Backpropagate through a block stack; fills grads, returns d(input)."""
    g = grad_h
    for i in range(len(blocks) - 1, -1, -1):
        block, cache = blocks[i], caches[i]
        if block.kind == BLOCK_RESIDUAL_RELU:
            da = g * (cache.z > 0.0)
            grads[f"{prefix}.{i}.weight"] = cache.x.T @ da
            g = g + da @ block.weight.T
        else:
            d = block.weight.shape[0]
            if norm_after_activation:
                # h = rms_norm(gelu(z)) * gain
                a, rho = cache.a, cache.rho
                grads[f"{prefix}.{i}.gain"] = (g * a / rho).sum(axis=0)
                gg = g * block.gain
                da = gg / rho - a * ((gg * a).sum(axis=-1, keepdims=True) / (d * rho**3))
                dz = da * gelu_grad(cache.z)
            else:
                # h = gelu(rms_norm(z) * gain)
                r, rho = cache.r, cache.rho
                dr = g * gelu_grad(r)
                grads[f"{prefix}.{i}.gain"] = (dr * cache.z / rho).sum(axis=0)
                drg = dr * block.gain
                dz = drg / rho - cache.z * (
                    (drg * cache.z).sum(axis=-1, keepdims=True) / (d * rho**3)
                )
            grads[f"{prefix}.{i}.weight"] = cache.x.T @ dz
            g = dz @ block.weight.T
    return g


def _normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # Through u_hat = u / ||u||; zero rows were passed through unchanged.
    proj = (grad_unit * unit).sum(axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return (grad_unit - unit * proj) / safe


def backward(
    p: ParameterSet,
    grad_root: np.ndarray,
    grad_binary: np.ndarray,
    grad_unary: np.ndarray,
    cache: ForwardCache | None = None,
) -> dict:
    """Gradients of a scalar loss w.r.t. every learnable tensor.

    The upstream gradients are taken w.r.t. the grammar's log-probabilities
    (shapes matching ``root_logprobs``, ``binary_logprobs``,
    ``unary_logprobs``). Returns a dict keyed like ``param_items``.
    """
    if cache is None:
        _, cache = forward_with_cache(p)
    n = p.symbols.num_nonterminals

    grads: dict[str, np.ndarray] = {}

    d_root_logits = _softmax_backward(np.asarray(grad_root)[None, :], cache.root_probs[None, :])
    d_binary_logits = _softmax_backward(
        np.asarray(grad_binary).reshape(n, -1), cache.binary_probs
    )
    d_unary_logits = _softmax_backward(np.asarray(grad_unary), cache.unary_probs)

    if p.mode == "baseline":
        # root: logits = f1(root_embed) @ root_out.T
        grads["root_out"] = d_root_logits.T @ cache.root_parent
        dh = d_root_logits @ p.root_out
        grads["root_embed"] = mlp_backward(
            dh, p.root_mlp, cache.root_blocks, False, grads, "root_mlp"
        )[0]

        # binary: logits = nt_embed @ children_out.T
        grads["children_out"] = d_binary_logits.T @ p.nt_embed
        grads["nt_embed"] = d_binary_logits @ p.children_out

        # unary: logits = f2(pt_embed) @ terminal_out.T
        grads["terminal_out"] = d_unary_logits.T @ cache.unary_parent
        dh = d_unary_logits @ p.terminal_out
        grads["pt_embed"] = mlp_backward(
            dh, p.terminal_mlp, cache.unary_blocks, False, grads, "terminal_mlp"
        )
    else:
        # root: logits = root_embed @ root_out.T (single linear layer)
        grads["root_out"] = d_root_logits.T @ cache.root_parent
        grads["root_embed"] = (d_root_logits @ p.root_out)[0]

        # binary: logits = mlp(nt_embed) @ unit(children_out).T
        dv = d_binary_logits @ cache.children_unit
        d_unit = d_binary_logits.T @ cache.binary_parent
        grads["children_out"] = _normalize_backward(
            d_unit, cache.children_unit, cache.children_norms
        )
        grads["nt_embed"] = mlp_backward(
            dv, p.binary_mlp, cache.binary_blocks, p.norm_after_activation, grads, "binary_mlp"
        )

        # unary: logits = mlp(pt_embed) @ unit(terminal_out).T
        dv = d_unary_logits @ cache.terminal_unit
        d_unit = d_unary_logits.T @ cache.unary_parent
        grads["terminal_out"] = _normalize_backward(
            d_unit, cache.terminal_unit, cache.terminal_norms
        )
        grads["pt_embed"] = mlp_backward(
            dv, p.unary_mlp, cache.unary_blocks, p.norm_after_activation, grads, "unary_mlp"
        )

    # Tensors untouched by the active mode's graph get zero gradients so the
    # result always mirrors param_items.
    for name, arr in p.param_items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads
