"""Two-layer graph convolutional network over radiology-concept nodes.

Node states start from a 1-D convolution over the report's token embeddings
(one output channel per node, kernel shared across embedding dimensions,
valid padding, mean-pooled over positions). With Ahat the symmetrically
normalized adjacency, H1 = ReLU(Ahat H0 W0 + b0) and Z = row-softmax of
(Ahat H1 W1 + b1). The flattened H1 is what feeds the fusion model; Z is kept
for inspection.

The packaged graph (data/chest_graph.txt) is a hand-drawn placeholder over
the 13 abnormality labels plus No_Finding, not an expert-curated artifact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .autodiff import ComputationTape, ShapeError, glorot_uniform

__all__ = [
    "GraphSpec",
    "GcnParams",
    "normalize_adjacency",
    "sliding_means",
    "init_nodes",
    "gcn_forward",
    "gcn_features",
    "init_gcn_params",
    "build_gcn_tape",
    "load_graph",
    "sample_graph",
]


def normalize_adjacency(adjacency) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0.0, 1.0)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    a_tilde = a + np.eye(a.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * np.outer(inv_sqrt_deg, inv_sqrt_deg)


@dataclass(frozen=True)
class GraphSpec:
    """Named nodes, a binary symmetric adjacency, and its normalized form."""

    node_names: tuple
    adjacency: np.ndarray
    normalized: np.ndarray = field(init=False, default=None)

    def __post_init__(self):
        names = tuple(str(n) for n in self.node_names)
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        a = np.asarray(self.adjacency, dtype=np.float64)
        norm = normalize_adjacency(a)
        if len(names) != a.shape[0]:
            raise ValueError(f"{len(names)} names for adjacency of size {a.shape[0]}")
        a.setflags(write=False)
        norm.setflags(write=False)
        object.__setattr__(self, "node_names", names)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "normalized", norm)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)


@dataclass(frozen=True)
class GcnParams:
    """Conv node-init bank plus the two graph-convolution layers.

    conv_kernel (N, k), conv_bias (N,), w0 (d0, h), b0 (h,), w1 (h, c),
    b1 (c,). All finite; N and h determine the flattened feature length.
    """

    conv_kernel: np.ndarray
    conv_bias: np.ndarray
    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray

    def __post_init__(self):
        for name in ("conv_kernel", "conv_bias", "w0", "b0", "w1", "b1"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n, _ = _shape2(self.conv_kernel, "conv_kernel")
        if self.conv_bias.shape != (n,):
            raise ShapeError(
                f"conv_bias shape {self.conv_bias.shape} does not match {n} kernel channels"
            )
        d0, h = _shape2(self.w0, "w0")
        if self.b0.shape != (h,):
            raise ShapeError(f"b0 shape {self.b0.shape} does not match hidden width {h}")
        h1, c = _shape2(self.w1, "w1")
        if h1 != h:
            raise ShapeError(f"w1 rows {h1} do not match hidden width {h}")
        if self.b1.shape != (c,):
            raise ShapeError(f"b1 shape {self.b1.shape} does not match {c} classes")

    @property
    def n_nodes(self) -> int:
        return self.conv_kernel.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.w0.shape[1]


def _shape2(arr: np.ndarray, name: str) -> tuple[int, int]:
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr.shape


def sliding_means(tokens, k: int) -> np.ndarray:
    """(k, d) matrix whose row s is the mean of tokens[s : s + m - k + 1].

    Mean-pooling a valid 1-D convolution equals kernel @ sliding_means, which
    keeps the conv expressible with plain matrix ops.
    """
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 1:
        raise ValueError(f"tokens must be (m, d) with m >= 1, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise ValueError("token embeddings must be finite")
    m = t.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} tokens, got {m}")
    windows = m - k + 1
    return np.stack([t[s : s + windows].mean(axis=0) for s in range(k)])


def init_nodes(tokens, kernel, bias) -> np.ndarray:
    """Per-node features: 1-D conv over tokens, mean-pooled, one row per channel."""
    kern = np.asarray(kernel, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    n, k = _shape2(kern, "kernel")
    if b.shape != (n,):
        raise ShapeError(f"bias shape {b.shape} does not match {n} channels")
    return kern @ sliding_means(tokens, k) + b[:, None]


def gcn_forward(a_hat, h0, params: GcnParams):
    """(H1, Z): the hidden node states and the row-stochastic output."""
    a = np.asarray(a_hat, dtype=np.float64)
    h = np.asarray(h0, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"a_hat must be square, got {a.shape}")
    if h.ndim != 2 or h.shape[0] != n:
        raise ShapeError(f"h0 shape {h.shape} does not match {n} nodes")
    if h.shape[1] != params.w0.shape[0]:
        raise ShapeError(
            f"h0 width {h.shape[1]} does not match w0 rows {params.w0.shape[0]}"
        )
    h1 = np.maximum(a @ h @ params.w0 + params.b0, 0.0)
    logits = a @ h1 @ params.w1 + params.b1
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    z = shifted / shifted.sum(axis=1, keepdims=True)
    return h1, z


def gcn_features(a_hat, tokens, params: GcnParams) -> np.ndarray:
    """Row-major flattening of H1: the text-branch feature vector (N * h)."""
    h0 = init_nodes(tokens, params.conv_kernel, params.conv_bias)
    h1, _ = gcn_forward(a_hat, h0, params)
    return h1.reshape(-1)


def init_gcn_params(
    seed,
    n_nodes: int,
    embed_dim: int = 768,
    hidden: int = 16,
    classes: int = 2,
    kernel_size: int = 3,
) -> GcnParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return GcnParams(
        conv_kernel=glorot_uniform(rng, (n_nodes, kernel_size)),
        conv_bias=np.zeros(n_nodes),
        w0=glorot_uniform(rng, (embed_dim, hidden)),
        b0=np.zeros(hidden),
        w1=glorot_uniform(rng, (hidden, classes)),
        b1=np.zeros(classes),
    )


def build_gcn_tape() -> ComputationTape:
    """Tape of the full text path, conv init included.

    Binding shapes: token_means (k, d), conv_kernel (N, k), conv_bias (N, 1),
    a_hat (N, N), w0 (d, h), b0 (1, h), w1 (h, c), b1 (1, c). Outputs "h0",
    "h1" and "z". Parameters are trainable; extend with a loss node before
    the first forward if gradients are needed.
    """
    tape = ComputationTape()
    means = tape.input("token_means")
    kernel = tape.input("conv_kernel", trainable=True)
    conv_bias = tape.input("conv_bias", trainable=True)
    a_hat = tape.input("a_hat")
    w0 = tape.input("w0", trainable=True)
    b0 = tape.input("b0", trainable=True)
    w1 = tape.input("w1", trainable=True)
    b1 = tape.input("b1", trainable=True)
    h0 = tape.output(tape.add(tape.matmul(kernel, means), conv_bias, name="h0"))
    mixed0 = tape.add(tape.matmul(tape.matmul(a_hat, h0), w0), b0)
    h1 = tape.output(tape.relu(mixed0, name="h1"))
    mixed1 = tape.add(tape.matmul(tape.matmul(a_hat, h1), w1), b1)
    tape.output(tape.softmax(mixed1, name="z"))
    return tape


def load_graph(source) -> GraphSpec:
    """Read the edge-list format: a header "N name..." then "name_a name_b" lines.

    Blank lines and lines starting with "#" are skipped. Edges are undirected;
    unknown names, self-edges, and malformed lines are rejected.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    lines = [
        ln.strip()
        for ln in text.splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise ValueError("graph file has no content")
    header = lines[0].split()
    try:
        n = int(header[0])
    except ValueError:
        raise ValueError(f"header must start with the node count: {lines[0]!r}") from None
    names = header[1:]
    if len(names) != n:
        raise ValueError(f"header declares {n} nodes but names {len(names)}")
    index = {name: i for i, name in enumerate(names)}
    if len(index) != n:
        raise ValueError("node names must be unique")
    adjacency = np.zeros((n, n))
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ValueError(f"edge line must name two nodes: {ln!r}")
        a, b = parts
        for name in (a, b):
            if name not in index:
                raise ValueError(f"edge references unknown node {name!r}")
        if a == b:
            raise ValueError(f"self-edge on {a!r} not allowed; self-loops are implicit")
        adjacency[index[a], index[b]] = 1.0
        adjacency[index[b], index[a]] = 1.0
    return GraphSpec(node_names=tuple(names), adjacency=adjacency)


def sample_graph() -> GraphSpec:
    """The packaged 14-node placeholder graph."""
    text = resources.files("icusurv").joinpath("data/chest_graph.txt").read_text()
    return load_graph(io.StringIO(text))
