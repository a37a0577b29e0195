"""Toy datasets, the training loop, permutation probes, and gradient checks.

The two tasks are deliberately tiny and noise-free so the symmetry caps
are exact: marked-patch (classify which patch differs from the
background) and same-block-pair (do two marked patches share a level-1
block). Evaluation sets are deterministic enumerations, not samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .encoder import (
    EncoderConfig,
    EncoderParams,
    batch_loss,
    forward,
    forward_batch,
    init_params,
    loss,
)
from .errors import ConfigError
from .grid import GridSpec
from .rng import Rng, substream_seed

BACKGROUND = 0.25
MARK = 0.9

PERM_KINDS = ("any", "within-block", "block", "cross-block-transposition")


@dataclass
class ToyDataset:
    samples: list  # (image, label) pairs
    task: str      # "marked" or "pair"
    seed: int
    n_classes: int
    grid: GridSpec
    patch_size: int

    def __len__(self) -> int:
        return len(self.samples)


def _blank_image(grid: GridSpec, patch_size: int) -> np.ndarray:
    return np.full(
        (grid.n_h * patch_size, grid.n_w * patch_size, 3), BACKGROUND
    )


def _paint(image: np.ndarray, pos: int, grid: GridSpec, patch_size: int) -> None:
    i, j = divmod(pos, grid.n_w)
    image[
        i * patch_size:(i + 1) * patch_size,
        j * patch_size:(j + 1) * patch_size,
        :,
    ] = MARK


def gen_marked_patch(grid: GridSpec, patch_size: int, count: int,
                     seed: int) -> ToyDataset:
    """Uniform background with exactly one marked patch; the label is the
    patch's row-major index."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    n = grid.n_h * grid.n_w
    rng = Rng(seed)
    samples = []
    for _ in range(count):
        pos = rng.below(n)
        image = _blank_image(grid, patch_size)
        _paint(image, pos, grid, patch_size)
        samples.append((image, pos))
    return ToyDataset(samples, "marked", seed, n, grid, patch_size)


def enumerate_marked_patch_eval(grid: GridSpec, patch_size: int,
                                repeats: int = 1) -> ToyDataset:
    """Every marker position, ``repeats`` times; the exact-cap eval set."""
    n = grid.n_h * grid.n_w
    samples = []
    for _ in range(repeats):
        for pos in range(n):
            image = _blank_image(grid, patch_size)
            _paint(image, pos, grid, patch_size)
            samples.append((image, pos))
    return ToyDataset(samples, "marked", 0, n, grid, patch_size)


def _block_cell(grid: GridSpec, pos: int):
    """Level-1 block cell of a patch position, or None outside coverage."""
    i, j = divmod(pos, grid.n_w)
    bh, bw = grid.n_h // grid.k, grid.n_w // grid.k
    bi, bj = i // grid.k, j // grid.k
    if bi >= bh or bj >= bw:
        return None
    return bi, bj


def _pair_label(grid: GridSpec, p: int, q: int) -> int:
    a, b = _block_cell(grid, p), _block_cell(grid, q)
    return int(a is not None and a == b)


def _pair_universe(grid: GridSpec):
    n = grid.n_h * grid.n_w
    same, cross = [], []
    for p in range(n):
        for q in range(p + 1, n):
            (same if _pair_label(grid, p, q) else cross).append((p, q))
    return same, cross


def _pair_image(grid: GridSpec, patch_size: int, p: int, q: int) -> np.ndarray:
    image = _blank_image(grid, patch_size)
    _paint(image, p, grid, patch_size)
    _paint(image, q, grid, patch_size)
    return image


def gen_same_block_pair(grid: GridSpec, patch_size: int, count: int,
                        seed: int) -> ToyDataset:
    """Two distinct marked patches; label 1 iff they share a level-1 block.

    The sampler alternates target labels, so class counts differ by at
    most one.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    same, cross = _pair_universe(grid)
    if not same or not cross:
        raise ConfigError(
            f"{grid.n_h}x{grid.n_w} grid with k={grid.k} cannot produce both "
            "pair labels"
        )
    n = grid.n_h * grid.n_w
    rng = Rng(seed)
    samples = []
    for idx in range(count):
        target = idx % 2
        while True:
            p = rng.below(n)
            q = rng.below(n)
            if p == q:
                continue
            if _pair_label(grid, p, q) == target:
                break
        samples.append((_pair_image(grid, patch_size, p, q), target))
    return ToyDataset(samples, "pair", seed, 2, grid, patch_size)


def enumerate_same_block_pair_eval(grid: GridSpec,
                                   patch_size: int) -> ToyDataset:
    """Balanced deterministic eval set: every same-block pair plus an
    evenly strided selection of cross-block pairs (or vice versa when
    cross pairs are the scarcer class)."""
    same, cross = _pair_universe(grid)
    if not same or not cross:
        raise ConfigError(
            f"{grid.n_h}x{grid.n_w} grid with k={grid.k} cannot produce both "
            "pair labels"
        )
    m = min(len(same), len(cross))

    def strided(pairs):
        return [pairs[(i * len(pairs)) // m] for i in range(m)]

    samples = []
    for p, q in strided(same):
        samples.append((_pair_image(grid, patch_size, p, q), 1))
    for p, q in strided(cross):
        samples.append((_pair_image(grid, patch_size, p, q), 0))
    return ToyDataset(samples, "pair", 0, 2, grid, patch_size)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainReport:
    task: str
    seed: int
    data_seed: int
    config_echo: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    train_accs: list = field(default_factory=list)
    eval_accs: list = field(default_factory=list)
    final_eval_acc: float = 0.0
    diverged: bool = False

    def to_text(self) -> str:
        lines = [f"{key} = {value}" for key, value in self.config_echo.items()]
        lines.append(f"diverged = {int(self.diverged)}")
        for e, (lo, ta, ea) in enumerate(
            zip(self.losses, self.train_accs, self.eval_accs)
        ):
            lines.append(
                f"epoch {e}: loss={lo!r} train_acc={ta!r} eval_acc={ea!r}"
            )
        lines.append(f"final_eval_acc = {self.final_eval_acc!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["epoch,loss,train_acc,eval_acc"]
        for e, (lo, ta, ea) in enumerate(
            zip(self.losses, self.train_accs, self.eval_accs)
        ):
            lines.append(f"{e},{lo!r},{ta!r},{ea!r}")
        return "\n".join(lines) + "\n"


def config_echo(config: EncoderConfig) -> dict:
    return {
        "grid": f"{config.grid.n_h}x{config.grid.n_w}",
        "k": str(config.grid.k),
        "levels": str(config.grid.levels),
        "dim": str(config.d),
        "heads": str(config.n_heads),
        "layers": str(config.n_layers),
        "mlp_ratio": str(config.mlp_ratio),
        "classes": str(config.n_classes),
        "patch": str(config.patch_size),
        "scheme": config.scheme,
        "policy": config.policy,
        "mask": config.mask,
        "seed": str(config.seed),
        "tau": repr(config.tau),
    }


def predict(config: EncoderConfig, params: EncoderParams,
            image: np.ndarray) -> np.ndarray:
    return forward(image, config, params).data


EVAL_CHUNK = 64  # bounds the block-diagonal attention size


def evaluate(config: EncoderConfig, params: EncoderParams,
             dataset: ToyDataset) -> float:
    hits = 0
    samples = dataset.samples
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start:start + EVAL_CHUNK]
        logits = forward_batch([img for img, _ in chunk], config, params).data
        hits += int(
            (np.argmax(logits, axis=1) == [label for _, label in chunk]).sum()
        )
    return hits / len(samples)


def default_eval_set(config: EncoderConfig, dataset: ToyDataset) -> ToyDataset:
    if dataset.task == "marked":
        return enumerate_marked_patch_eval(dataset.grid, dataset.patch_size)
    if dataset.task == "pair":
        return enumerate_same_block_pair_eval(dataset.grid, dataset.patch_size)
    raise ConfigError(f"unknown task {dataset.task!r}")


def train(config: EncoderConfig, dataset: ToyDataset, epochs: int, lr: float,
          batch: int, *, params: EncoderParams | None = None,
          eval_set: ToyDataset | None = None) -> TrainReport:
    """Mini-batch gradient descent with cosine decay and gradient clipping
    at global norm 1. Deterministic given the config and dataset seeds."""
    if dataset.n_classes != config.n_classes:
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes, config expects "
            f"{config.n_classes}"
        )
    if dataset.samples[0][0].shape != config.image_shape:
        raise ConfigError(
            f"dataset images {dataset.samples[0][0].shape} do not match "
            f"config images {config.image_shape}"
        )
    if epochs < 1 or batch < 1:
        raise ConfigError("epochs and batch must be >= 1")
    if params is None:
        params = init_params(config)
    if eval_set is None:
        eval_set = default_eval_set(config, dataset)

    report = TrainReport(
        task=dataset.task, seed=config.seed, data_seed=dataset.seed,
        config_echo=config_echo(config),
    )
    report.config_echo.update(
        task=dataset.task, data_seed=str(dataset.seed), count=str(len(dataset)),
        epochs=str(epochs), lr=repr(lr), batch=str(batch),
    )

    shuffle_rng = Rng(
        substream_seed(config.seed, 2) ^ substream_seed(dataset.seed, 3)
    )
    n = len(dataset.samples)
    steps_per_epoch = (n + batch - 1) // batch
    total_steps = epochs * steps_per_epoch
    trainables = list(params.trainable_items())
    step = 0

    for _ in range(epochs):
        order = list(range(n))
        shuffle_rng.shuffle(order)
        batch_losses = []
        for start in range(0, n, batch):
            chunk = order[start:start + batch]
            tape = Tape()
            objective = batch_loss(
                [dataset.samples[idx][0] for idx in chunk],
                [dataset.samples[idx][1] for idx in chunk],
                config, params, tape,
            )
            value = float(objective.data)
            if not math.isfinite(value):
                report.diverged = True
                break
            batch_losses.append(value)
            tape.backward(objective)

            sq_norm = 0.0
            grads = []
            with np.errstate(over="ignore", invalid="ignore"):
                for _, tensor, row_mask in trainables:
                    g = tensor.grad
                    if g is None:
                        g = np.zeros_like(tensor.data)
                    elif row_mask is not None:
                        g = g * row_mask[:, None]
                    grads.append(g)
                    sq_norm += float((g * g).sum())
            if not math.isfinite(sq_norm):
                # exploded gradients freeze under clipping; call it divergence
                report.diverged = True
                break
            clip = 1.0 if sq_norm <= 1.0 else 1.0 / math.sqrt(sq_norm)
            lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for (_, tensor, _), g in zip(trainables, grads):
                tensor.data -= (lr_t * clip) * g
            params.zero_grads()
            step += 1
        if batch_losses:
            report.losses.append(sum(batch_losses) / len(batch_losses))
            report.train_accs.append(evaluate(config, params, dataset))
            report.eval_accs.append(evaluate(config, params, eval_set))
        if report.diverged:
            break

    report.final_eval_acc = (
        report.eval_accs[-1] if report.eval_accs
        else evaluate(config, params, eval_set)
    )
    return report


# ----------------------------------------------------------------------
# symmetry probes
# ----------------------------------------------------------------------

def randomize_params(params: EncoderParams, rng: Rng, std: float = 0.2) -> None:
    """Overwrite every trainable tensor with generic random values.

    Layer-norm gains get 1 + noise so no feature direction collapses.
    The symmetry and gradient probes need this because the standard init
    zeroes the classifier head, which pins all logits to zero.
    """
    for name, tensor, row_mask in params.trainable_items():
        draw = rng.normal_array(tensor.data.shape, std=std)
        if name.endswith("_gain") or name.endswith("gain"):
            draw = 1.0 + draw
        if row_mask is None:
            tensor.data[...] = draw
        else:
            tensor.data[row_mask] = draw[row_mask]


def permute_patches(image: np.ndarray, perm, grid: GridSpec,
                    patch_size: int) -> np.ndarray:
    """New image whose patch t is the old image's patch perm[t]."""
    out = np.empty_like(image)
    for dst, src in enumerate(perm):
        di, dj = divmod(dst, grid.n_w)
        si, sj = divmod(src, grid.n_w)
        out[
            di * patch_size:(di + 1) * patch_size,
            dj * patch_size:(dj + 1) * patch_size,
            :,
        ] = image[
            si * patch_size:(si + 1) * patch_size,
            sj * patch_size:(sj + 1) * patch_size,
            :,
        ]
    return out


def _complete_blocks(grid: GridSpec) -> list[list[int]]:
    """Flat patch indices of each level-1 block cell, row-major."""
    k = grid.k
    bh, bw = grid.n_h // k, grid.n_w // k
    blocks = []
    for bi in range(bh):
        for bj in range(bw):
            blocks.append(
                [
                    (bi * k + di) * grid.n_w + (bj * k + dj)
                    for di in range(k)
                    for dj in range(k)
                ]
            )
    return blocks


def sample_permutation(config: EncoderConfig, kind: str, rng: Rng):
    """(patch_perm, summary_perm) for one trial; both map dest -> source.

    ``summary_perm`` is None unless the kind relabels whole blocks, in
    which case the level-1 summary rows must move with their blocks.
    """
    grid = config.grid
    n_reg = grid.n_h * grid.n_w
    if kind == "any":
        perm = list(range(n_reg))
        rng.shuffle(perm)
        return perm, None

    if grid.levels < 1:
        raise ConfigError(f"perm kind {kind!r} needs at least one summary level")
    blocks = _complete_blocks(grid)

    if kind == "within-block":
        perm = list(range(n_reg))
        for members in blocks:
            shuffled = list(members)
            rng.shuffle(shuffled)
            for dst, src in zip(members, shuffled):
                perm[dst] = src
        return perm, None

    if kind == "block":
        # Shuffle level-1 cells within their level-2 parent (arbitrary when
        # there is no level 2); children move with their cell, keeping the
        # same within-block offset.
        bh, bw = grid.n_h // grid.k, grid.n_w // grid.k
        groups: dict = {}
        for cell in range(bh * bw):
            bi, bj = divmod(cell, bw)
            if grid.levels >= 2:
                ph, pw = grid.level_shape(2)
                pi, pj = bi // grid.k, bj // grid.k
                key = (pi, pj) if pi < ph and pj < pw else None
            else:
                key = None
            groups.setdefault(key, []).append(cell)
        cell_perm = list(range(bh * bw))
        for members in groups.values():
            shuffled = list(members)
            rng.shuffle(shuffled)
            for dst, src in zip(members, shuffled):
                cell_perm[dst] = src
        perm = list(range(n_reg))
        for dst_cell, src_cell in enumerate(cell_perm):
            for offset, dst_flat in enumerate(blocks[dst_cell]):
                perm[dst_flat] = blocks[src_cell][offset]
        return perm, cell_perm

    if kind == "cross-block-transposition":
        cells = [
            (idx, pos)
            for idx, members in enumerate(blocks)
            for pos in members
        ]
        if len(blocks) < 2:
            raise ConfigError("cross-block transposition needs >= 2 blocks")
        while True:
            a = cells[rng.below(len(cells))]
            b = cells[rng.below(len(cells))]
            if a[0] != b[0]:
                break
        perm = list(range(n_reg))
        perm[a[1]], perm[b[1]] = b[1], a[1]
        return perm, None

    raise ConfigError(f"unknown perm kind {kind!r}, choose from {PERM_KINDS}")


def permutation_test(config: EncoderConfig, params: EncoderParams, kind: str,
                     trials: int, seed: int) -> float:
    """Max over trials of |logits(image) - logits(permuted image)|, with
    random images and the given (typically randomized) params."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = Rng(seed)
    worst = 0.0
    for _ in range(trials):
        image = rng.uniform_array(config.image_shape)
        perm, summary_perm = sample_permutation(config, kind, rng)
        base = predict(config, params, image)
        permuted_image = permute_patches(image, perm, config.grid,
                                         config.patch_size)
        trial_params = (
            params if summary_perm is None
            else params.with_permuted_summaries(summary_perm)
        )
        other = predict(config, trial_params, permuted_image)
        worst = max(worst, float(np.abs(base - other).max()))
    return worst


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

def gradcheck(config: EncoderConfig, eps: float = 1e-5, batch_size: int = 1,
              seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over every trainable parameter entry, on one random batch.

    Relative error uses a 1e-6 denominator floor so finite-difference
    noise on near-zero gradients does not register as disagreement.
    """
    params = init_params(config)
    rng = Rng(substream_seed(seed, 7))
    randomize_params(params, rng)
    batch = [
        (rng.uniform_array(config.image_shape), rng.below(config.n_classes))
        for _ in range(batch_size)
    ]

    def objective(tape: Tape) -> Tensor:
        total = None
        for image, label in batch:
            sample = loss(forward(image, config, params, tape), label, tape)
            total = sample if total is None else tape.add(total, sample)
        return tape.scale(total, 1.0 / len(batch))

    tape = Tape()
    tape.backward(objective(tape))
    analytic = {}
    for name, tensor, row_mask in params.trainable_items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        analytic[name] = (g.copy(), row_mask)
    params.zero_grads()

    notape = Tape(recording=False)
    worst = 0.0
    for name, tensor, _ in params.trainable_items():
        grad, row_mask = analytic[name]
        flat = tensor.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        if row_mask is None:
            indices = range(flat.size)
        else:
            cols = tensor.data.shape[1]
            indices = [
                r * cols + c
                for r in np.flatnonzero(row_mask)
                for c in range(cols)
            ]
        for idx in indices:
            saved = flat[idx]
            flat[idx] = saved + eps
            plus = float(objective(notape).data)
            flat[idx] = saved - eps
            minus = float(objective(notape).data)
            flat[idx] = saved
            fd = (plus - minus) / (2.0 * eps)
            a = grad_flat[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
