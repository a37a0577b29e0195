"""Desk-scale ViT encoder: patch embedding, token assembly, pre-norm
masked multi-head attention blocks with optional distance biases, and a
classification head read from the global token.

Everything runs in float64 through the tape engine; a forward pass on a
non-recording tape is plain inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, ShapeError
from .grid import GridSpec, TokenLayout, build_layout
from .mask import AttentionMask, build_fractal_mask, build_full_mask
from .posenc import POLICIES, SCHEMES, alibi2d_bias, assemble_posenc
from .rng import Rng, substream_seed

INIT_STD = 0.02  # truncated normal for projection weights

CHECKPOINT_MAGIC = b"FVIT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Model hyperparameters plus the positional/mask configuration."""

    grid: GridSpec
    d: int
    n_heads: int
    n_layers: int
    n_classes: int
    patch_size: int
    mlp_ratio: int = 4
    scheme: str = "sincos2d"
    policy: str = "summary"
    mask: str = "fractal"
    seed: int = 0
    tau: float = 10000.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.mask not in ("full", "fractal"):
            raise ConfigError(f"mask must be 'full' or 'fractal', got {self.mask!r}")
        if self.scheme == "none" and self.policy == "summary":
            raise ConfigError(
                "scheme 'none' with policy 'summary' makes summary tokens "
                "indistinguishable"
            )
        if self.d < 1 or self.d % self.n_heads != 0:
            raise ConfigError(
                f"d={self.d} must be a positive multiple of n_heads={self.n_heads}"
            )
        if (self.scheme == "sincos2d" or self.policy == "sincos2d") and self.d % 4 != 0:
            raise ConfigError(f"sincos2d needs d divisible by 4, got {self.d}")
        if self.n_layers < 1 or self.n_classes < 2 or self.patch_size < 1:
            raise ConfigError("n_layers >= 1, n_classes >= 2, patch_size >= 1 required")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (
            self.grid.n_h * self.patch_size,
            self.grid.n_w * self.patch_size,
            3,
        )


class EncoderParams:
    """Named parameter tensors plus the fixed tables derived from a config."""

    def __init__(self, config: EncoderConfig, layout: TokenLayout,
                 mask: AttentionMask, tensors: dict[str, Tensor],
                 pos_trainable_rows: np.ndarray, alibi: np.ndarray | None):
        self.config = config
        self.layout = layout
        self.mask = mask
        self.tensors = tensors  # insertion order is the canonical order
        self.pos_trainable_rows = pos_trainable_rows
        self.alibi = alibi  # (n_heads, n, n) or None

    def t(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable_items(self):
        """Yield (name, tensor, row_mask) for every trainable tensor.

        ``row_mask`` is None except for a partially trainable position
        table, where it flags the rows the optimizer may touch.
        """
        for name, tensor in self.tensors.items():
            if name == "posenc":
                if self.pos_trainable_rows.any():
                    mask = None if self.pos_trainable_rows.all() \
                        else self.pos_trainable_rows
                    yield name, tensor, mask
            else:
                yield name, tensor, None

    def zero_grads(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def with_permuted_summaries(self, perm: np.ndarray) -> "EncoderParams":
        """Copy of the params with level-1 summary rows relabeled by ``perm``
        (row b of the copy holds row perm[b] of the original)."""
        if self.layout.n_additional == 0:
            raise ContractError("layout has no summary tokens to permute")
        n1 = self.layout.counts[1]
        if len(perm) != n1:
            raise ContractError(
                f"permutation of length {len(perm)} for {n1} level-1 summaries"
            )
        tensors = dict(self.tensors)
        summary = Tensor(self.t("summary_init").data)
        summary.data[:n1] = self.t("summary_init").data[list(perm)]
        tensors["summary_init"] = summary
        off = self.layout.offsets[1]
        pos = Tensor(self.t("posenc").data)
        pos.data[off:off + n1] = self.t("posenc").data[
            [off + p for p in perm]
        ]
        tensors["posenc"] = pos
        return EncoderParams(
            self.config, self.layout, self.mask, tensors,
            self.pos_trainable_rows, self.alibi,
        )


def init_params(config: EncoderConfig) -> EncoderParams:
    """Build layout, mask, position table, and freshly initialized weights.

    Projection weights are truncated normal (std 0.02); biases, the
    classifier weight, the summary tokens, and the global token start at
    zero; layer-norm gains start at one.
    """
    layout = build_layout(config.grid)
    mask = (
        build_fractal_mask(layout)
        if config.mask == "fractal"
        else build_full_mask(layout.total)
    )
    table = assemble_posenc(
        config.scheme, layout, config.d,
        seed=substream_seed(config.seed, 1),
        policy=config.policy, tau=config.tau,
    )
    alibi = None
    if config.scheme == "alibi2d":
        alibi = alibi2d_bias(
            layout, config.n_heads, regular_only=config.policy != "summary"
        ).biases

    rng = Rng(substream_seed(config.seed, 0))
    d, r = config.d, config.mlp_ratio
    tensors: dict[str, Tensor] = {}

    def weight(name, shape):
        tensors[name] = Tensor(rng.truncated_normal_array(shape, std=INIT_STD))

    def zeros(name, shape):
        tensors[name] = Tensor(np.zeros(shape))

    def ones(name, shape):
        tensors[name] = Tensor(np.ones(shape))

    weight("patch_w", (d, 3 * config.patch_size ** 2))
    zeros("patch_b", (d,))
    for i in range(config.n_layers):
        p = f"layer{i}."
        ones(p + "ln1_gain", (d,))
        zeros(p + "ln1_shift", (d,))
        weight(p + "wq", (d, d))
        weight(p + "wk", (d, d))
        weight(p + "wv", (d, d))
        weight(p + "wo", (d, d))
        ones(p + "ln2_gain", (d,))
        zeros(p + "ln2_shift", (d,))
        weight(p + "mlp_w1", (r * d, d))
        zeros(p + "mlp_b1", (r * d,))
        weight(p + "mlp_w2", (d, r * d))
        zeros(p + "mlp_b2", (d,))
    if layout.n_additional > 0:
        zeros("summary_init", (layout.n_additional, d))
    zeros("global_token", (1, d))
    ones("final_gain", (d,))
    zeros("final_shift", (d,))
    zeros("head_w", (config.n_classes, d))
    zeros("head_b", (config.n_classes,))
    tensors["posenc"] = Tensor(table.vectors)

    return EncoderParams(config, layout, mask, tensors, table.trainable, alibi)


def extract_patches(image: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Image (H, W, 3) -> matrix (n_regular, 3 * patch_size**2), patches
    row-major, each flattened in (row, col, channel) order."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != config.image_shape:
        raise ConfigError(
            f"image shape {image.shape} does not match configured "
            f"{config.image_shape}"
        )
    n_h, n_w = config.grid.n_h, config.grid.n_w
    ps = config.patch_size
    return (
        image.reshape(n_h, ps, n_w, ps, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n_h * n_w, 3 * ps * ps)
    )


def patch_embed(image: np.ndarray, config: EncoderConfig,
                params: EncoderParams, tape: Tape) -> Tensor:
    """Linear projection of each patch's RGB values to a d-vector."""
    patches = Tensor(extract_patches(image, config))
    return tape.linear(patches, params.t("patch_w"), params.t("patch_b"))


def assemble_tokens(regular: Tensor, params: EncoderParams, tape: Tape) -> Tensor:
    """[regular | summary inits | global] in canonical order, plus the
    position table."""
    layout = params.layout
    if regular.data.shape[0] != layout.n_regular:
        raise ContractError(
            f"{regular.data.shape[0]} regular tokens, layout has {layout.n_regular}"
        )
    parts = [regular]
    if layout.n_additional > 0:
        parts.append(params.t("summary_init"))
    parts.append(params.t("global_token"))
    seq = tape.concat(parts, axis=0)
    return tape.add(seq, params.t("posenc"))


def attention_block(x: Tensor, layer: int, params: EncoderParams,
                    tape: Tape, bits: np.ndarray | None = None,
                    alibi: np.ndarray | None = None) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)).

    ``bits``/``alibi`` default to the params' own tables; the batched
    forward passes block-diagonal tilings instead.
    """
    cfg = params.config
    p = f"layer{layer}."
    d, n_heads = cfg.d, cfg.n_heads
    dh = d // n_heads
    if bits is None:
        bits = params.mask.bits
    if alibi is None:
        alibi = params.alibi

    h = tape.layer_norm(x, params.t(p + "ln1_gain"), params.t(p + "ln1_shift"))
    q = tape.linear(h, params.t(p + "wq"))
    k = tape.linear(h, params.t(p + "wk"))
    v = tape.linear(h, params.t(p + "wv"))

    heads = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        qi = tape.slice_cols(q, lo, hi)
        ki = tape.slice_cols(k, lo, hi)
        vi = tape.slice_cols(v, lo, hi)
        logits = tape.scale(tape.matmul(qi, tape.transpose(ki)), inv_sqrt)
        bias = alibi[i] if alibi is not None else None
        attn = tape.masked_softmax(logits, bits, bias)
        heads.append(tape.matmul(attn, vi))
    merged = heads[0] if n_heads == 1 else tape.concat(heads, axis=1)
    x = tape.add(x, tape.linear(merged, params.t(p + "wo")))

    h2 = tape.layer_norm(x, params.t(p + "ln2_gain"), params.t(p + "ln2_shift"))
    m = tape.gelu(tape.linear(h2, params.t(p + "mlp_w1"), params.t(p + "mlp_b1")))
    m = tape.linear(m, params.t(p + "mlp_w2"), params.t(p + "mlp_b2"))
    return tape.add(x, m)


def forward(image: np.ndarray, config: EncoderConfig, params: EncoderParams,
            tape: Tape | None = None) -> Tensor:
    """Class logits (n_classes,) read from the global token."""
    if tape is None:
        tape = Tape(recording=False)
    x = assemble_tokens(patch_embed(image, config, params, tape), params, tape)
    for layer in range(config.n_layers):
        x = attention_block(x, layer, params, tape)
    x = tape.layer_norm(x, params.t("final_gain"), params.t("final_shift"))
    g = params.layout.global_index
    pooled = tape.slice_rows(x, g, g + 1)
    logits = tape.linear(pooled, params.t("head_w"), params.t("head_b"))
    return tape.reshape(logits, (config.n_classes,))


def loss(logits: Tensor, label: int, tape: Tape) -> Tensor:
    """Softmax cross-entropy of one logit vector against an integer label."""
    return tape.softmax_cross_entropy(logits, label)


def _attention_block_batch(x: Tensor, layer: int, b: int,
                           params: EncoderParams, tape: Tape) -> Tensor:
    """The pre-norm block over b stacked sequences: x is (b*n, d) and the
    per-head attention runs as stacked (b, n, n) matmuls."""
    cfg = params.config
    p = f"layer{layer}."
    d, n_heads = cfg.d, cfg.n_heads
    dh = d // n_heads
    n = params.layout.total
    bits = np.broadcast_to(params.mask.bits, (b, n, n))

    h = tape.layer_norm(x, params.t(p + "ln1_gain"), params.t(p + "ln1_shift"))
    q = tape.linear(h, params.t(p + "wq"))
    k = tape.linear(h, params.t(p + "wk"))
    v = tape.linear(h, params.t(p + "wv"))

    heads = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        qi = tape.reshape(tape.slice_cols(q, lo, hi), (b, n, dh))
        ki = tape.reshape(tape.slice_cols(k, lo, hi), (b, n, dh))
        vi = tape.reshape(tape.slice_cols(v, lo, hi), (b, n, dh))
        logits = tape.scale(tape.bmm(qi, tape.swap_last(ki)), inv_sqrt)
        bias = None
        if params.alibi is not None:
            bias = np.broadcast_to(params.alibi[i], (b, n, n))
        attn = tape.masked_softmax(logits, bits, bias)
        heads.append(tape.reshape(tape.bmm(attn, vi), (b * n, dh)))
    merged = heads[0] if n_heads == 1 else tape.concat(heads, axis=1)
    x = tape.add(x, tape.linear(merged, params.t(p + "wo")))

    h2 = tape.layer_norm(x, params.t(p + "ln2_gain"), params.t(p + "ln2_shift"))
    m = tape.gelu(tape.linear(h2, params.t(p + "mlp_w1"), params.t(p + "mlp_b1")))
    m = tape.linear(m, params.t(p + "mlp_w2"), params.t(p + "mlp_b2"))
    return tape.add(x, m)


def forward_batch(images, config: EncoderConfig, params: EncoderParams,
                  tape: Tape | None = None) -> Tensor:
    """Class logits (B, n_classes) for a batch of images.

    Runs all sequences through stacked attention; per image it computes
    exactly the same function as ``forward`` (up to float summation
    order).
    """
    if tape is None:
        tape = Tape(recording=False)
    layout = params.layout
    b = len(images)
    if b < 1:
        raise ContractError("forward_batch needs at least one image")
    n, n_reg = layout.total, layout.n_regular

    patches = Tensor(
        np.concatenate([extract_patches(img, config) for img in images])
    )
    tokens = tape.linear(patches, params.t("patch_w"), params.t("patch_b"))

    parts = []
    for i in range(b):
        parts.append(tape.slice_rows(tokens, i * n_reg, (i + 1) * n_reg))
        if layout.n_additional > 0:
            parts.append(params.t("summary_init"))
        parts.append(params.t("global_token"))
    seq = tape.concat(parts, axis=0)
    pos = params.t("posenc")
    x = tape.add(seq, tape.concat([pos] * b, axis=0) if b > 1 else pos)

    for layer in range(config.n_layers):
        x = _attention_block_batch(x, layer, b, params, tape)
    x = tape.layer_norm(x, params.t("final_gain"), params.t("final_shift"))
    pooled = tape.gather_rows(x, [i * n + layout.global_index for i in range(b)])
    return tape.linear(pooled, params.t("head_w"), params.t("head_b"))


def batch_loss(images, labels, config: EncoderConfig, params: EncoderParams,
               tape: Tape) -> Tensor:
    """Mean cross-entropy over a batch, via the block-diagonal forward."""
    logits = forward_batch(images, config, params, tape)
    return tape.softmax_cross_entropy_rows(logits, labels)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(path: str, params: EncoderParams) -> None:
    """Binary format: magic "FVIT", version u32 LE, then one record per
    tensor: name length u32, name bytes, rank u32, dims u32[], float64
    data little-endian row-major. Tensors appear in canonical order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> array, in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        state[name] = data.reshape(dims).astype(np.float64)
    return state


def apply_checkpoint(params: EncoderParams, state: dict[str, np.ndarray]) -> None:
    """Load saved arrays into the params, validating names and shapes."""
    missing = set(params.tensors) - set(state)
    extra = set(state) - set(params.tensors)
    if missing or extra:
        raise ShapeError(
            f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, array in state.items():
        tensor = params.tensors[name]
        if array.shape != tensor.data.shape:
            raise ShapeError(
                f"checkpoint tensor {name}: shape {array.shape} vs "
                f"expected {tensor.data.shape}"
            )
        tensor.data[...] = array
