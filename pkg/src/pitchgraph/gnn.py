"""The spotting network.

Each non-empty graph in a 30-slot window runs through four dynamic
edge-convolution blocks (13 -> 64 -> 64 -> 64 -> 64) and is mean-pooled to
one 64-vector per slot.  The first 15 slots feed one NetVLAD (k = 64)
pooling, the last 15 another, preserving before/after temporal context; the
concatenated descriptors (optionally joined by mean-pooled audio/RGB feature
vectors) go through a fully connected layer to 18 logits (17 actions +
background).

Torch supplies tensors and reverse-mode autodiff; the architecture is
defined here.  Windows are converted once into padded tensor batches so
whole batches run vectorized.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ContractError, ParseError
from .graphs import GraphWindow, N_LABELS, NODE_DIM, WINDOW_SLOTS

HALF_SLOTS = WINDOW_SLOTS // 2

CHECKPOINT_MAGIC = b"PGM1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GNNConfig:
    hidden: int = 64
    n_blocks: int = 4
    k_dyn: int = 5  # feature-space kNN size in blocks 2..4
    vlad_clusters: int = 64
    fusion_dims: Tuple[Tuple[str, int], ...] = ()  # e.g. (("rgb", 512), ("audio", 512))
    block_type: str = "dynamic_edge_conv"
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 96
    patience: int = 7
    max_epochs: int = 100
    chunk_windows: int = 16  # forward sub-batch size, memory knob
    float64: bool = True  # 64-bit numerics (tests); False allows float32

    @property
    def dtype(self):
        return torch.float64 if self.float64 else torch.float32

    @property
    def fusion_total(self) -> int:
        return sum(d for _, d in self.fusion_dims)


# ---------------------------------------------------------------------------
# Reference (numpy) single-graph edge convolution, also the pluggable seam


def edge_conv_block(node_feats, edges, mlp):
    """Edge convolution over one graph: out_i = max_j mlp([x_i ; x_j - x_i]).

    Isolated nodes use the self pair [x_i ; 0].  ``mlp`` maps a (2*D,) vector
    to the output feature vector.  An empty graph returns an empty matrix.
    """
    x = np.asarray(node_feats, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return np.zeros((0, np.asarray(mlp(np.zeros(2 * x.shape[1]))).shape[0])) if x.ndim == 2 else x
    neighbors = [[] for _ in range(n)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    rows = []
    for i in range(n):
        if neighbors[i]:
            vals = [np.asarray(mlp(np.concatenate([x[i], x[j] - x[i]]))) for j in neighbors[i]]
            rows.append(np.max(vals, axis=0))
        else:
            rows.append(np.asarray(mlp(np.concatenate([x[i], np.zeros_like(x[i])]))))
    return np.stack(rows)


def knn_edges(node_feats, k) -> List[Tuple[int, int]]:
    """Directed kNN neighbor pairs (i, j) in feature space, k = min(n-1, k)."""
    x = np.asarray(node_feats, dtype=np.float64)
    n = x.shape[0]
    kk = min(n - 1, k)
    if kk <= 0:
        return []
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    pairs = []
    for i in range(n):
        for j in np.argsort(d2[i], kind="stable")[:kk]:
            pairs.append((i, int(j)))
    return pairs


# ---------------------------------------------------------------------------
# Window batching


@dataclass
class WindowBatch:
    """Padded tensors for a list of windows; G = B * 30 graphs."""

    nodes: torch.Tensor  # (G, N, 13)
    node_mask: torch.Tensor  # (G, N) bool
    counts: torch.Tensor  # (G,) long
    nb_idx: torch.Tensor  # (G, N, Dmax) long, physical-distance neighbors
    nb_valid: torch.Tensor  # (G, N, Dmax) bool
    labels: torch.Tensor  # (B,) long
    fusion: Optional[torch.Tensor]  # (B, fusion_total) or None
    size: int


def batch_windows(
    windows: Sequence[GraphWindow],
    dtype=torch.float64,
    fusion: Optional[Sequence[np.ndarray]] = None,
) -> WindowBatch:
    """Convert windows into padded tensors.

    Every node row (including padding and isolated nodes) carries at least
    one valid neighbor entry; for isolated and padded nodes that entry is the
    node itself, which reduces the edge-conv input to [x_i ; 0].

    Nodes are canonicalized (sorted lexicographically by feature vector, with
    adjacency lists sorted) so that any permutation of a graph's node
    numbering produces bit-identical tensors, making the whole forward pass
    exactly permutation invariant.
    """
    if not windows:
        raise ContractError("empty window batch")
    graphs = []
    for w in windows:
        for g in w.graphs:
            if g.n_nodes > 1:
                order = np.lexsort(g.nodes.T[::-1])
                inv = np.argsort(order)
                g = type(g)(
                    nodes=g.nodes[order],
                    edges=tuple(
                        (min(int(inv[i]), int(inv[j])), max(int(inv[i]), int(inv[j])))
                        for i, j in g.edges
                    ),
                    timestamp_s=g.timestamp_s,
                )
            graphs.append(g)
    G = len(graphs)
    N = max(1, max(g.n_nodes for g in graphs))
    adj = []
    for g in graphs:
        lists = [[] for _ in range(g.n_nodes)]
        for i, j in g.edges:
            lists[i].append(j)
            lists[j].append(i)
        adj.append([sorted(l) for l in lists])
    D = max(1, max((len(l) for lists in adj for l in lists), default=1))
    nodes = np.zeros((G, N, NODE_DIM), dtype=np.float64)
    mask = np.zeros((G, N), dtype=bool)
    counts = np.zeros(G, dtype=np.int64)
    nb_idx = np.tile(np.arange(N)[None, :, None], (G, 1, D))  # self indices by default
    nb_valid = np.zeros((G, N, D), dtype=bool)
    for gi, (g, lists) in enumerate(zip(graphs, adj)):
        n = g.n_nodes
        counts[gi] = n
        if n:
            nodes[gi, :n] = g.nodes
            mask[gi, :n] = True
        for i, nb in enumerate(lists):
            if nb:
                nb_idx[gi, i, : len(nb)] = nb
                nb_valid[gi, i, : len(nb)] = True
            else:
                nb_valid[gi, i, 0] = True  # isolated: self pair
    nb_valid[~mask] = False
    nb_valid[~mask, 0] = True  # padded rows stay finite through the max
    fusion_t = None
    if fusion is not None:
        fusion_t = torch.as_tensor(np.stack([np.asarray(f, dtype=np.float64) for f in fusion]), dtype=dtype)
    return WindowBatch(
        nodes=torch.as_tensor(nodes, dtype=dtype),
        node_mask=torch.as_tensor(mask),
        counts=torch.as_tensor(counts),
        nb_idx=torch.as_tensor(nb_idx),
        nb_valid=torch.as_tensor(nb_valid),
        labels=torch.as_tensor(np.array([w.label_index for w in windows], dtype=np.int64)),
        fusion=fusion_t,
        size=len(windows),
    )


# ---------------------------------------------------------------------------
# Modules


class EdgeMLP(nn.Module):
    """Two-layer perceptron 2*D_in -> D_out with leaky ReLUs."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.lin1 = nn.Linear(2 * in_dim, out_dim)
        self.lin2 = nn.Linear(out_dim, out_dim)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, h):
        return self.act(self.lin2(self.act(self.lin1(h))))


class DynamicEdgeConvBlock(nn.Module):
    """max_j MLP([x_i ; x_j - x_i]) over a padded graph batch."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.mlp = EdgeMLP(in_dim, out_dim)

    def forward(self, x, nb_idx, nb_valid, node_mask):
        # lin1([x_i ; x_j - x_i]) = (A - B) x_i + B x_j + b with lin1 = [A | B],
        # so the first layer runs per node instead of per neighbor pair.
        D = x.shape[-1]
        W = self.mlp.lin1.weight
        A, B = W[:, :D], W[:, D:]
        # contiguous transposes + batched matmul instead of nn.Linear: the 2-D
        # addmm lowering (and matmul against a transposed view) is not bitwise
        # stable under row permutation; this path is
        p = x @ (A - B).T.contiguous() + self.mlp.lin1.bias  # (G, N, D')
        q = x @ B.T.contiguous()
        G = x.shape[0]
        g_ar = torch.arange(G, device=x.device)[:, None, None]
        h = self.mlp.act(p.unsqueeze(2) + q[g_ar, nb_idx])  # (G, N, K, D')
        h = self.mlp.act(h @ self.mlp.lin2.weight.T.contiguous() + self.mlp.lin2.bias)
        h = h.masked_fill(~nb_valid.unsqueeze(-1), float("-inf"))
        out = h.max(dim=2).values
        return out * node_mask.unsqueeze(-1).to(out.dtype)


def feature_knn(x, node_mask, counts, k_dyn):
    """Per-graph kNN neighbor indices in feature space on padded tensors."""
    G, N, _ = x.shape
    d2 = torch.cdist(x, x, p=2.0) ** 2
    inf = torch.tensor(float("inf"), dtype=x.dtype, device=x.device)
    d2 = d2.masked_fill(~node_mask.unsqueeze(1), inf)
    eye = torch.eye(N, dtype=torch.bool, device=x.device).unsqueeze(0)
    d2 = d2.masked_fill(eye, inf)
    K = max(1, min(k_dyn, N - 1)) if N > 1 else 1
    order = torch.argsort(d2, dim=-1, stable=True)[..., :K]  # (G, N, K)
    valid_k = torch.clamp(counts - 1, min=0).clamp(max=K)  # (G,)
    ranks = torch.arange(K, device=x.device)
    nb_valid = (ranks[None, None, :] < valid_k[:, None, None]).expand(G, N, K).clone()
    nb_valid &= node_mask.unsqueeze(-1)
    nb_idx = order.clone()
    none_valid = ~nb_valid.any(dim=-1)  # isolated (n<=1) and padded rows
    self_idx = torch.arange(N, device=x.device)[None, :].expand(G, N)
    nb_idx[..., 0] = torch.where(none_valid, self_idx, nb_idx[..., 0])
    nb_valid[..., 0] = nb_valid[..., 0] | none_valid
    return nb_idx, nb_valid


class NetVLAD(nn.Module):
    """Soft-assignment pooling of T features into k cluster residuals.

    Per-cluster then global L2 normalization; an all-zero aggregate stays
    all-zero so empty content cannot blow up.
    """

    def __init__(self, n_clusters, dim):
        super().__init__()
        self.centers = nn.Parameter(torch.zeros(n_clusters, dim))
        self.assign_w = nn.Parameter(torch.zeros(n_clusters, dim))
        self.assign_b = nn.Parameter(torch.zeros(n_clusters))

    def forward(self, x):
        # x: (B, T, D) -> (B, K*D)
        if x.shape[1] < 1:
            raise ContractError("NetVLAD needs at least one feature")
        logits = torch.einsum("btd,kd->btk", x, self.assign_w) + self.assign_b
        a = torch.softmax(logits, dim=-1)  # (B, T, K)
        V = torch.einsum("btk,btd->bkd", a, x) - a.sum(dim=1).unsqueeze(-1) * self.centers
        intra = V.norm(dim=-1, keepdim=True)
        V = V / torch.where(intra > 0, intra, torch.ones_like(intra))
        flat = V.reshape(V.shape[0], -1)
        g = flat.norm(dim=-1, keepdim=True)
        return flat / torch.where(g > 0, g, torch.ones_like(g))


class ActionSpottingNet(nn.Module):
    """4 edge-conv blocks per graph, dual NetVLAD over time, FC head."""

    def __init__(self, config: GNNConfig = GNNConfig()):
        super().__init__()
        if config.block_type != "dynamic_edge_conv":
            raise ContractError(f"unsupported backbone block {config.block_type!r}")
        self.config = config
        dims = [NODE_DIM] + [config.hidden] * config.n_blocks
        self.blocks = nn.ModuleList(
            DynamicEdgeConvBlock(dims[i], dims[i + 1]) for i in range(config.n_blocks)
        )
        self.vlad_before = NetVLAD(config.vlad_clusters, config.hidden)
        self.vlad_after = NetVLAD(config.vlad_clusters, config.hidden)
        head_in = 2 * config.vlad_clusters * config.hidden + config.fusion_total
        self.head = nn.Linear(head_in, N_LABELS)
        self.to(config.dtype)

    def init_params(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.ndim >= 2:
                fan_in = p.shape[-1]
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            else:
                with torch.no_grad():
                    p.zero_()
        self.to(self.config.dtype)
        return self

    def slot_embeddings(self, batch: WindowBatch):
        x = batch.nodes
        for bi, block in enumerate(self.blocks):
            if bi == 0:
                nb_idx, nb_valid = batch.nb_idx, batch.nb_valid
            else:
                nb_idx, nb_valid = feature_knn(x, batch.node_mask, batch.counts, self.config.k_dyn)
            x = block(x, nb_idx, nb_valid, batch.node_mask)
        # sort before summing: canonical reduction order makes pooling exactly
        # invariant to node numbering (bitwise, not just up to rounding)
        masked = x * batch.node_mask.unsqueeze(-1).to(x.dtype)
        summed = torch.sort(masked, dim=1).values.sum(dim=1)
        denom = batch.counts.clamp(min=1).to(x.dtype).unsqueeze(-1)
        pooled = summed / denom  # (G, hidden); empty graphs stay zero
        return pooled.reshape(batch.size, WINDOW_SLOTS, -1)

    def forward(self, batch: WindowBatch):
        slots = self.slot_embeddings(batch)
        before = self.vlad_before(slots[:, :HALF_SLOTS])
        after = self.vlad_after(slots[:, HALF_SLOTS:])
        feats = [before, after]
        if self.config.fusion_total:
            if batch.fusion is None:
                raise ContractError("model expects fusion features but the batch has none")
            feats.append(batch.fusion)
        return self.head(torch.cat(feats, dim=-1))

    def freeze_backbone(self):
        """Late fusion: stop gradients everywhere except the FC head."""
        for name, p in self.named_parameters():
            p.requires_grad = name.startswith("head.")
        return self


def forward(window: GraphWindow, model: ActionSpottingNet, fusion: Optional[Dict[str, np.ndarray]] = None):
    """Logits (18,) for one window; fusion maps modality -> (T, dim) slice."""
    fus = None
    if fusion is not None:
        parts = [np.asarray(fusion[name], dtype=np.float64).mean(axis=0) for name, _ in model.config.fusion_dims]
        fus = [np.concatenate(parts)]
    batch = batch_windows([window], dtype=model.config.dtype, fusion=fus)
    with torch.no_grad():
        return model(batch)[0].cpu().numpy()


def loss_and_grad(windows: Sequence[GraphWindow], model: ActionSpottingNet, fusion=None):
    """Mean cross-entropy over a batch plus gradients keyed by parameter name."""
    if not windows:
        raise ContractError("loss_and_grad needs a non-empty batch")
    batch = batch_windows(windows, dtype=model.config.dtype, fusion=fusion)
    model.zero_grad(set_to_none=True)
    logits = _chunked_logits(model, windows, batch, fusion)
    losses = nn.functional.cross_entropy(logits, batch.labels, reduction="none")
    if not torch.all(torch.isfinite(losses)):
        bad = int(torch.nonzero(~torch.isfinite(losses))[0])
        raise ContractError(f"non-finite loss for window {bad} (center {windows[bad].center_time_s} s)")
    loss = losses.mean()
    loss.backward()
    grads = {
        name: (p.grad.detach().cpu().numpy().copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


def _chunked_logits(model, windows, batch: WindowBatch, fusion):
    if batch.size <= model.config.chunk_windows:
        return model(batch)
    outs = []
    for start in range(0, batch.size, model.config.chunk_windows):
        sub = windows[start : start + model.config.chunk_windows]
        fus = None if fusion is None else fusion[start : start + model.config.chunk_windows]
        outs.append(model(batch_windows(sub, dtype=model.config.dtype, fusion=fus)))
    return torch.cat(outs, dim=0)


def train(
    dataset: Sequence[GraphWindow],
    config: GNNConfig = GNNConfig(),
    seed: int = 0,
    fusion: Optional[Sequence[np.ndarray]] = None,
    freeze_backbone: bool = False,
    callback=None,
) -> ActionSpottingNet:
    """Adam training with plateau halving; deterministic given the seed."""
    labels = {w.label for w in dataset}
    if len(labels) < 2:
        raise ContractError("training needs at least 2 distinct classes")
    torch.set_num_threads(1)  # single-threaded for bit reproducibility
    model = ActionSpottingNet(config).init_params(seed)
    if freeze_backbone:
        model.freeze_backbone()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, betas=config.betas)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    bs = min(config.batch_size, n)
    best, stale, lr = np.inf, 0, config.lr
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            wins = [dataset[i] for i in idx]
            fus = None if fusion is None else [fusion[i] for i in idx]
            batch = batch_windows(wins, dtype=config.dtype, fusion=fus)
            opt.zero_grad(set_to_none=True)
            logits = model(batch)
            loss = nn.functional.cross_entropy(logits, batch.labels)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(wins)
        epoch_loss /= n
        if callback is not None:
            callback(epoch, epoch_loss, lr)
        if epoch_loss < best - 1e-12:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                lr /= 2.0
                stale = 0
                for group in opt.param_groups:
                    group["lr"] = lr
        if lr < 1e-6:
            break
    return model


def predict_proba(model: ActionSpottingNet, windows: Sequence[GraphWindow], fusion=None) -> np.ndarray:
    """(n_windows, 18) softmax probabilities, evaluated in chunks."""
    probs = []
    chunk = model.config.chunk_windows
    with torch.no_grad():
        for start in range(0, len(windows), chunk):
            sub = list(windows[start : start + chunk])
            fus = None if fusion is None else fusion[start : start + chunk]
            batch = batch_windows(sub, dtype=model.config.dtype, fusion=fus)
            probs.append(torch.softmax(model(batch), dim=-1).cpu().numpy())
    return np.concatenate(probs, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version byte, u32 tensor count, then per tensor
# u16 name length + utf-8 name, u8 ndim, u32 dims, float64 LE data.


def save_checkpoint(model: ActionSpottingNet, path):
    tensors = {name: p.detach().cpu().numpy().astype("<f8") for name, p in model.named_parameters()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)) + enc)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, config: GNNConfig = GNNConfig()) -> ActionSpottingNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 9
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        tensors[name] = arr
    model = ActionSpottingNet(config)
    state = {k: torch.as_tensor(v.copy(), dtype=config.dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model
