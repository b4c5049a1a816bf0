"""Part-aware graph convolutional network over pose descriptor tensors.

Feature tensors are (N, T, V=17, C). Each block aggregates joints
through a combined adjacency (fixed subsets + a learned matrix + a
per-sequence attention matrix), elementwise-masked to a body-part
partition, then mixes channels, batch-normalizes, applies a temporal
convolution and a residual skip.

The partition mask is applied to the attention logits before the row
softmax as well as to the combined adjacency. This keeps every masked
block strictly block-diagonal: activations at a joint depend only on
inputs at joints of the same part, exactly, which is what the partition
is for (a global softmax denominator would leak information across
parts).

A branch stacks small-part blocks first and wider-part blocks after,
each wider block with its own parameters. Branch outputs are pooled per
body part (mean + max over joints, then max over frames), passed
through one independent head per (branch, part) slot, and concatenated
into the final embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, softmax
from .errors import ConfigError, DataError
from .graph import PARTS5, V, build_adjacency_subsets, mask_set

BRANCH_CHANNELS = {"joint": 2, "angle": 1, "bone": 2, "fused": 5}

# part-pool order: the five small parts, then the whole body
PART_ORDER = ("head", "left_arm", "right_arm", "left_leg", "right_leg", "body")
PART_GROUPS = {**PARTS5, "body": tuple(range(V))}

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int
    branches: tuple = ("joint", "angle", "bone")
    parts5_channels: tuple = (64, 64, 128)
    larger_schemes: tuple = ("upper_lower", "three_groups", "left_right", "global")
    larger_channels: int = 128
    embed_dim: int = 128
    temporal_kernel: int = 3
    attention: bool = True
    use_masks: bool = True
    # optional (scheme name, groups) pairs replacing the built-in
    # partitions; groups are tuples of joint-index tuples
    partition_overrides: tuple = ()

    def __post_init__(self):
        for b in self.branches:
            if b not in BRANCH_CHANNELS:
                raise ConfigError(f"unknown branch {b!r}")
        if not self.parts5_channels:
            raise ConfigError("need at least one small-part block")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal kernel must be odd and >= 1")

    @property
    def num_parts(self) -> int:
        return len(self.branches) * len(PART_ORDER)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "branches": list(self.branches),
            "parts5_channels": list(self.parts5_channels),
            "larger_schemes": list(self.larger_schemes),
            "larger_channels": self.larger_channels,
            "embed_dim": self.embed_dim,
            "temporal_kernel": self.temporal_kernel,
            "attention": self.attention,
            "use_masks": self.use_masks,
            "partition_overrides": [
                [name, [list(g) for g in groups]]
                for name, groups in self.partition_overrides
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            num_classes=int(d["num_classes"]),
            branches=tuple(d["branches"]),
            parts5_channels=tuple(int(c) for c in d["parts5_channels"]),
            larger_schemes=tuple(d["larger_schemes"]),
            larger_channels=int(d["larger_channels"]),
            embed_dim=int(d["embed_dim"]),
            temporal_kernel=int(d["temporal_kernel"]),
            attention=bool(d["attention"]),
            use_masks=bool(d["use_masks"]),
            partition_overrides=tuple(
                (name, tuple(tuple(int(j) for j in g) for g in groups))
                for name, groups in d.get("partition_overrides", ())),
        )


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class SubsetParams:
    weight: Tensor        # (C_in, C_out) channel mix
    learned_adj: Tensor   # (V, V), zero-initialized
    attn_a: Tensor = None  # (C_in, C_e) attention projections
    attn_b: Tensor = None


@dataclass
class BlockParams:
    subsets: list  # list[SubsetParams], one per adjacency subset
    temporal_kernel: Tensor  # (k, C_out)
    bn1: BatchNormParams
    bn2: BatchNormParams
    mask_name: str
    in_channels: int
    out_channels: int


@dataclass
class HeadParams:
    fc_w: Tensor   # (C, D)
    fc_b: Tensor   # (D,)
    bnn: BatchNormParams  # BNNeck over the metric feature
    cls_w: Tensor  # (D, num_classes)


@dataclass
class ModelParams:
    config: NetworkConfig
    branches: dict                # branch name -> list[BlockParams]
    heads: list                   # num_parts HeadParams
    adjacency: np.ndarray         # (K_v, V, V) fixed subsets
    masks: dict = field(default_factory=dict)

    def named_parameters(self):
        """Ordered name -> Tensor mapping of every trainable tensor."""
        out = {}
        for bname in self.config.branches:
            for j, blk in enumerate(self.branches[bname]):
                prefix = f"branch/{bname}/block{j}"
                for k, sub in enumerate(blk.subsets):
                    out[f"{prefix}/k{k}/weight"] = sub.weight
                    out[f"{prefix}/k{k}/adj"] = sub.learned_adj
                    if sub.attn_a is not None:
                        out[f"{prefix}/k{k}/attn_a"] = sub.attn_a
                        out[f"{prefix}/k{k}/attn_b"] = sub.attn_b
                out[f"{prefix}/tkernel"] = blk.temporal_kernel
                out[f"{prefix}/bn1/gamma"] = blk.bn1.gamma
                out[f"{prefix}/bn1/beta"] = blk.bn1.beta
                out[f"{prefix}/bn2/gamma"] = blk.bn2.gamma
                out[f"{prefix}/bn2/beta"] = blk.bn2.beta
        for i, head in enumerate(self.heads):
            prefix = f"head/{i:02d}"
            out[f"{prefix}/fc_w"] = head.fc_w
            out[f"{prefix}/fc_b"] = head.fc_b
            out[f"{prefix}/bnn/gamma"] = head.bnn.gamma
            out[f"{prefix}/bnn/beta"] = head.bnn.beta
            out[f"{prefix}/cls_w"] = head.cls_w
        return out

    def named_buffers(self):
        """Ordered name -> ndarray mapping of running statistics."""
        out = {}
        for bname in self.config.branches:
            for j, blk in enumerate(self.branches[bname]):
                prefix = f"branch/{bname}/block{j}"
                out[f"{prefix}/bn1/mean"] = blk.bn1.running_mean
                out[f"{prefix}/bn1/var"] = blk.bn1.running_var
                out[f"{prefix}/bn2/mean"] = blk.bn2.running_mean
                out[f"{prefix}/bn2/var"] = blk.bn2.running_var
        for i, head in enumerate(self.heads):
            out[f"head/{i:02d}/bnn/mean"] = head.bnn.running_mean
            out[f"head/{i:02d}/bnn/var"] = head.bnn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray):
        holders = self._buffer_holders()
        holder, attr = holders[name]
        setattr(holder, attr, value)

    def _buffer_holders(self):
        holders = {}
        for bname in self.config.branches:
            for j, blk in enumerate(self.branches[bname]):
                prefix = f"branch/{bname}/block{j}"
                holders[f"{prefix}/bn1/mean"] = (blk.bn1, "running_mean")
                holders[f"{prefix}/bn1/var"] = (blk.bn1, "running_var")
                holders[f"{prefix}/bn2/mean"] = (blk.bn2, "running_mean")
                holders[f"{prefix}/bn2/var"] = (blk.bn2, "running_var")
        for i, head in enumerate(self.heads):
            holders[f"head/{i:02d}/bnn/mean"] = (head.bnn, "running_mean")
            holders[f"head/{i:02d}/bnn/var"] = (head.bnn, "running_var")
        return holders


def _attn_dim(c_in: int) -> int:
    return max(c_in // 4, 4)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_bn(channels: int) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )


def _init_block(rng, c_in, c_out, mask_name, cfg: NetworkConfig) -> BlockParams:
    subsets = []
    ce = _attn_dim(c_in)
    for _k in range(3):
        sub = SubsetParams(
            weight=Tensor(_uniform(rng, (c_in, c_out), c_in), requires_grad=True),
            learned_adj=Tensor(np.zeros((V, V)), requires_grad=True),
        )
        if cfg.attention:
            sub.attn_a = Tensor(_uniform(rng, (c_in, ce), c_in), requires_grad=True)
            sub.attn_b = Tensor(_uniform(rng, (c_in, ce), c_in), requires_grad=True)
        subsets.append(sub)
    k = cfg.temporal_kernel
    return BlockParams(
        subsets=subsets,
        temporal_kernel=Tensor(_uniform(rng, (k, c_out), k), requires_grad=True),
        bn1=_init_bn(c_out),
        bn2=_init_bn(c_out),
        mask_name=mask_name,
        in_channels=c_in,
        out_channels=c_out,
    )


def init_model(cfg: NetworkConfig, seed: int = 0) -> ModelParams:
    """Build a model with seeded parameter initialization.

    Learned adjacencies start at zero so an untrained model behaves
    like the plain predefined-graph network; mix weights use fan-in
    scaled uniform init.
    """
    rng = np.random.default_rng(seed)
    branches = {}
    for bname in cfg.branches:
        blocks = []
        c_in = BRANCH_CHANNELS[bname]
        for c_out in cfg.parts5_channels:
            blocks.append(_init_block(rng, c_in, c_out, "parts5", cfg))
            c_in = c_out
        for scheme in cfg.larger_schemes:
            blocks.append(_init_block(rng, c_in, cfg.larger_channels, scheme, cfg))
            c_in = cfg.larger_channels
        branches[bname] = blocks
    final_c = cfg.larger_channels if cfg.larger_schemes else cfg.parts5_channels[-1]
    heads = []
    for _ in range(cfg.num_parts):
        heads.append(HeadParams(
            fc_w=Tensor(_uniform(rng, (final_c, cfg.embed_dim), final_c),
                        requires_grad=True),
            fc_b=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
            bnn=_init_bn(cfg.embed_dim),
            cls_w=Tensor(_uniform(rng, (cfg.embed_dim, cfg.num_classes),
                                  cfg.embed_dim), requires_grad=True),
        ))
    masks = mask_set()
    for name, groups in cfg.partition_overrides:
        from .graph import PartitionScheme, build_partition_mask
        masks[name] = build_partition_mask(PartitionScheme(name, groups))
    if not cfg.use_masks:
        masks = {name: np.ones_like(m) for name, m in masks.items()}
    # distinct-parameter construction contract: no tensor object shared
    seen = set()
    model = ModelParams(config=cfg, branches=branches, heads=heads,
                        adjacency=build_adjacency_subsets(), masks=masks)
    for name, t in model.named_parameters().items():
        if id(t) in seen:
            raise ConfigError(f"parameter {name} aliases another tensor")
        seen.add(id(t))
    return model


# -- forward ops ------------------------------------------------------


def attention_adjacency(f_in: Tensor, attn_a: Tensor, attn_b: Tensor,
                        mask: np.ndarray = None) -> Tensor:
    """Per-sequence joint-affinity matrix from temporally pooled features.

    Returns (N, V, V) with rows summing to 1. When a partition mask is
    given, entries outside a row's part are excluded from the softmax
    so the result is block-diagonal.
    """
    pooled = f_in.mean(axis=1)              # (N, V, C)
    q = pooled @ attn_a                     # (N, V, C_e)
    k = pooled @ attn_b
    scale = 1.0 / np.sqrt(attn_a.shape[1])
    sim = (q @ k.transpose((0, 2, 1))) * scale
    bool_mask = None if mask is None else (np.asarray(mask) > 0)
    return softmax(sim, axis=-1, mask=bool_mask)


def pagcn_spatial(f_in: Tensor, block: BlockParams, adjacency: np.ndarray,
                  mask: np.ndarray, with_attention: bool = None) -> Tensor:
    """Masked graph aggregation followed by channel mixing, summed over
    the adjacency subsets."""
    if f_in.shape[-1] != block.in_channels:
        raise DataError(
            f"spatial conv expects {block.in_channels} channels, got {f_in.shape[-1]}")
    if with_attention is None:
        with_attention = block.subsets[0].attn_a is not None
    n, t = f_in.shape[0], f_in.shape[1]
    mask_t = Tensor(mask)
    out = None
    for k, sub in enumerate(block.subsets):
        combined = Tensor(adjacency[k]) + sub.learned_adj
        if with_attention and sub.attn_a is not None:
            attn = attention_adjacency(f_in, sub.attn_a, sub.attn_b, mask)
            combined = combined + attn            # (N, V, V)
            combined = combined * mask_t
            h = combined.reshape(n, 1, V, V)
        else:
            combined = combined * mask_t          # (V, V)
            h = combined
        # contract the joint axis: out[..., u, c] = sum_v f[..., v, c] h[v, u]
        agg = (f_in.transpose((0, 1, 3, 2)) @ h).transpose((0, 1, 3, 2))
        mixed = agg @ sub.weight
        out = mixed if out is None else out + mixed
    return out


def batch_norm(x: Tensor, bn: BatchNormParams, axes: tuple, training: bool,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization over the given axes (channel = last axis).

    Training mode normalizes with batch statistics and optionally folds
    them into the running averages; inference mode uses the stored
    running statistics.
    """
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = centered.square().mean(axis=axes, keepdims=True)
        xhat = centered / (var + BN_EPS).sqrt()
        if update_stats:
            bn.running_mean = (BN_MOMENTUM * bn.running_mean
                               + (1.0 - BN_MOMENTUM) * mu.data.reshape(-1))
            bn.running_var = (BN_MOMENTUM * bn.running_var
                              + (1.0 - BN_MOMENTUM) * var.data.reshape(-1))
    else:
        xhat = (x - bn.running_mean) / np.sqrt(bn.running_var + BN_EPS)
    return xhat * bn.gamma + bn.beta


def temporal_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise convolution along the frame axis, stride 1, zero
    padding that preserves T (works for T=1)."""
    k = kernel.shape[0]
    t = x.shape[1]
    pad = k // 2
    xp = x.pad_axis(1, pad, pad)
    out = None
    for d in range(k):
        sl = xp[:, d:d + t] * kernel[d]
        out = sl if out is None else out + sl
    return out


def pagcn_block(f_in: Tensor, block: BlockParams, adjacency: np.ndarray,
                masks: dict, training: bool = False,
                update_stats: bool = True) -> Tensor:
    """spatial -> norm -> relu -> temporal -> norm -> relu -> residual."""
    mask = masks[block.mask_name]
    y = pagcn_spatial(f_in, block, adjacency, mask)
    y = batch_norm(y, block.bn1, (0, 1, 2), training, update_stats).relu()
    y = temporal_conv(y, block.temporal_kernel)
    y = batch_norm(y, block.bn2, (0, 1, 2), training, update_stats).relu()
    if block.in_channels == block.out_channels:
        y = y + f_in
    return y


def branch_forward(x: Tensor, blocks: list, adjacency: np.ndarray,
                   masks: dict, training: bool = False,
                   update_stats: bool = True) -> Tensor:
    for block in blocks:
        x = pagcn_block(x, block, adjacency, masks, training, update_stats)
    return x


def part_pool(f_m: Tensor, groups=None) -> Tensor:
    """(N, T, V, C) -> (N, T, P, C): mean + max over each part's joints,
    for the five small parts and the whole body."""
    if groups is None:
        groups = [PART_GROUPS[name] for name in PART_ORDER]
    pooled = []
    for g in groups:
        if len(g) == 0:
            raise DataError("empty part group")
        sub = f_m.take(np.asarray(g), axis=2)
        v = sub.mean(axis=2) + sub.max(axis=2)
        n, t, c = v.shape
        pooled.append(v.reshape(n, t, 1, c))
    return concat(pooled, axis=2)


def temporal_pool(f_vp: Tensor) -> Tensor:
    """(N, T, P, C) -> (N, P, C): elementwise max over frames."""
    return f_vp.max(axis=1)


def per_part_head(vec: Tensor, head: HeadParams, training: bool,
                  update_stats: bool = True):
    """(N, C) -> metric feature (N, D) and classifier logits (N, K)."""
    metric = vec @ head.fc_w + head.fc_b
    necked = batch_norm(metric, head.bnn, (0,), training, update_stats)
    logits = necked @ head.cls_w
    return metric, logits


@dataclass
class ForwardResult:
    metrics: list    # num_parts tensors of (N, D)
    logits: list     # num_parts tensors of (N, num_classes)
    part_names: list
    captures: dict = field(default_factory=dict)

    def embedding_matrix(self) -> np.ndarray:
        """(N, num_parts, D) array of metric features."""
        return np.stack([m.data for m in self.metrics], axis=1)


def descriptor_inputs(cfg: NetworkConfig, joint, bone, angle) -> dict:
    """Map descriptor arrays to per-branch input tensors (N, T, V, C)."""
    inputs = {"joint": joint, "bone": bone, "angle": angle}
    out = {}
    for bname in cfg.branches:
        if bname == "fused":
            out[bname] = np.concatenate([joint, angle, bone], axis=-1)
        else:
            out[bname] = inputs[bname]
    return out


def network_forward(model: ModelParams, branch_inputs: dict,
                    training: bool = False, update_stats: bool = True,
                    capture: bool = False) -> ForwardResult:
    """Full network: branches -> pooling -> per-part heads.

    branch_inputs maps branch name to an (N, T, V, C) array or Tensor.
    Slot order is branch-major: all six parts of the first configured
    branch, then the next branch, and so on.
    """
    cfg = model.config
    metrics, logits, part_names = [], [], []
    captures = {}
    head_idx = 0
    for bname in cfg.branches:
        x = branch_inputs[bname]
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expect = BRANCH_CHANNELS[bname]
        if x.shape[-1] != expect or x.shape[2] != V:
            raise DataError(
                f"branch {bname!r} expects (N,T,{V},{expect}), got {x.shape}")
        f_m = branch_forward(x, model.branches[bname], model.adjacency,
                             model.masks, training, update_stats)
        if capture:
            captures[f"f_m/{bname}"] = f_m.data.copy()
        pooled = temporal_pool(part_pool(f_m))   # (N, P, C)
        for p, pname in enumerate(PART_ORDER):
            vec = pooled[:, p, :]
            metric, logit = per_part_head(vec, model.heads[head_idx],
                                          training, update_stats)
            metrics.append(metric)
            logits.append(logit)
            part_names.append(f"{bname}/{pname}")
            head_idx += 1
    return ForwardResult(metrics=metrics, logits=logits,
                         part_names=part_names, captures=captures)


def detached_view(model: ModelParams) -> ModelParams:
    """Model sharing the same arrays but with gradient tracking off.

    Forward passes through the view build no graph, which keeps
    inference cheap. Running statistics are shared (do not update them
    through a view).
    """
    def dt(t: Tensor) -> Tensor:
        return Tensor(t.data)

    def dbn(bn: BatchNormParams) -> BatchNormParams:
        return BatchNormParams(dt(bn.gamma), dt(bn.beta),
                               bn.running_mean, bn.running_var)

    branches = {}
    for bname, blocks in model.branches.items():
        branches[bname] = [
            BlockParams(
                subsets=[SubsetParams(
                    weight=dt(s.weight), learned_adj=dt(s.learned_adj),
                    attn_a=None if s.attn_a is None else dt(s.attn_a),
                    attn_b=None if s.attn_b is None else dt(s.attn_b),
                ) for s in blk.subsets],
                temporal_kernel=dt(blk.temporal_kernel),
                bn1=dbn(blk.bn1), bn2=dbn(blk.bn2),
                mask_name=blk.mask_name,
                in_channels=blk.in_channels, out_channels=blk.out_channels,
            )
            for blk in blocks
        ]
    heads = [HeadParams(fc_w=dt(h.fc_w), fc_b=dt(h.fc_b), bnn=dbn(h.bnn),
                        cls_w=dt(h.cls_w)) for h in model.heads]
    return ModelParams(config=model.config, branches=branches, heads=heads,
                       adjacency=model.adjacency, masks=model.masks)


def with_masks(model: ModelParams, mask_override: dict) -> ModelParams:
    """Same parameters, different partition masks (e.g. all ones)."""
    return ModelParams(config=model.config, branches=model.branches,
                       heads=model.heads, adjacency=model.adjacency,
                       masks=mask_override)


# -- checkpoint glue --------------------------------------------------


def model_tensors(model: ModelParams) -> dict:
    """Parameters then buffers, in their canonical directory order."""
    out = dict(model.named_parameters().items())
    for name, arr in model.named_buffers().items():
        out[name] = arr
    return {name: (t.data if isinstance(t, Tensor) else t)
            for name, t in out.items()}


def load_model_tensors(model: ModelParams, tensors: dict):
    """Copy checkpoint arrays into the model, validating shapes."""
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, t in params.items():
        if name not in tensors:
            raise DataError(f"checkpoint missing tensor {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise DataError(
                f"tensor {name}: checkpoint shape {arr.shape} != model {t.data.shape}")
        t.data = arr.astype(np.float64, copy=True)
    for name in buffers:
        if name not in tensors:
            raise DataError(f"checkpoint missing tensor {name}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(buffers[name].shape):
            raise DataError(
                f"tensor {name}: checkpoint shape {arr.shape} != model shape")
        model.set_buffer(name, arr.astype(np.float64, copy=True))
