"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is exactly what the encoder needs: 2-D matmul and
transpose, trailing-shape additive broadcasting for biases, row/column
slicing and concatenation, layer norm, exact-CDF GELU, masked softmax,
and softmax cross-entropy. Nothing more.

Every op runs in float64. A ``Tape`` records the ops of one forward pass;
``Tape.backward`` replays the record once in reverse and accumulates
adjoints into each participating tensor's ``grad``. Repeated backward
calls without resetting grads keep accumulating, as an optimizer expects.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, InvalidMaskError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus an optional same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        """Adopt a freshly allocated float64 array without copying.

        Internal: only for op results that nothing else references.
        """
        out = object.__new__(cls)
        out.data = data
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Replaying the record in reverse visits every operation exactly once,
    which is all reverse mode needs. Constructing with ``recording=False``
    gives a tape that runs the same forward math with no bookkeeping, for
    inference and finite-difference loops.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._records: list[tuple[Tensor, object]] = []

    def _push(self, out: Tensor, pull) -> None:
        if self.recording:
            self._records.append((out, pull))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        The sweep works on a private adjoint map and only folds the final
        adjoints into ``grad`` at the end, so calling backward twice adds
        the same gradient twice rather than compounding.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        def accum(t: Tensor, delta: np.ndarray, owned: bool = False) -> None:
            """Add ``delta`` to t's adjoint; ``owned`` deltas are freshly
            allocated by the caller and may be adopted without a copy."""
            key = id(t)
            if key in adjoints:
                adjoints[key] += delta
            else:
                adjoints[key] = delta if owned else np.array(delta, dtype=np.float64)
                holders[key] = t

        for out, pull in reversed(self._records):
            g = adjoints.get(id(out))
            if g is not None:
                pull(g, accum)
        for key, g in adjoints.items():
            holder = holders[key]
            if holder.grad is None:
                holder.grad = g  # the map owns g; donate instead of copying
            else:
                holder.grad += g

    # ------------------------------------------------------------------
    # primitive operations
    # ------------------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise a + b; b may be a trailing-shape slice (bias row)."""
        broadcast = a.data.shape != b.data.shape
        if broadcast:
            nd, bd = a.data.ndim, b.data.ndim
            if bd > nd or b.data.shape != a.data.shape[nd - bd:]:
                raise ShapeError(
                    f"add: shapes {a.data.shape} and {b.data.shape} do not align"
                )
        out = Tensor._wrap(a.data + b.data)

        def pull(g, accum):
            accum(a, g)
            if broadcast:
                lead = tuple(range(a.data.ndim - b.data.ndim))
                accum(b, g.sum(axis=lead), owned=True)
            else:
                accum(b, g)

        self._push(out, pull)
        return out

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product of same-shape tensors."""
        if a.data.shape != b.data.shape:
            raise ShapeError(
                f"mul: shapes {a.data.shape} and {b.data.shape} differ"
            )
        out = Tensor._wrap(a.data * b.data)

        def pull(g, accum):
            accum(a, g * b.data, owned=True)
            accum(b, g * a.data, owned=True)

        self._push(out, pull)
        return out

    def scale(self, a: Tensor, c: float) -> Tensor:
        out = Tensor._wrap(a.data * c)

        def pull(g, accum):
            accum(a, g * c, owned=True)

        self._push(out, pull)
        return out

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain"
            )
        out = Tensor._wrap(a.data @ b.data)

        def pull(g, accum):
            accum(a, g @ b.data.T, owned=True)
            accum(b, a.data.T @ g, owned=True)

        self._push(out, pull)
        return out

    def linear(self, x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
        """x @ w.T (+ bias): the row-vector convention every projection uses.

        Fusing the transpose and bias keeps the tape short; w has shape
        (out_features, in_features).
        """
        if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
            raise ShapeError(
                f"linear: input {x.data.shape} and weight {w.data.shape} "
                "do not share an inner dimension"
            )
        out_data = x.data @ w.data.T
        if bias is not None:
            if bias.data.shape != (w.data.shape[0],):
                raise ShapeError(
                    f"linear: bias {bias.data.shape} does not match "
                    f"out features {w.data.shape[0]}"
                )
            out_data += bias.data
        out = Tensor._wrap(out_data)

        def pull(g, accum):
            accum(x, g @ w.data, owned=True)
            accum(w, g.T @ x.data, owned=True)
            if bias is not None:
                accum(bias, g.sum(axis=0), owned=True)

        self._push(out, pull)
        return out

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got {a.data.shape}")
        out = Tensor._wrap(np.ascontiguousarray(a.data.T))

        def pull(g, accum):
            accum(a, g.T)

        self._push(out, pull)
        return out

    def bmm(self, a: Tensor, b: Tensor) -> Tensor:
        """Batched matmul over the last two axes of stacked 3-D operands."""
        if (
            a.data.ndim != 3 or b.data.ndim != 3
            or a.data.shape[0] != b.data.shape[0]
            or a.data.shape[2] != b.data.shape[1]
        ):
            raise ShapeError(
                f"bmm: shapes {a.data.shape} and {b.data.shape} do not chain"
            )
        out = Tensor._wrap(a.data @ b.data)

        def pull(g, accum):
            accum(a, g @ b.data.swapaxes(-1, -2), owned=True)
            accum(b, a.data.swapaxes(-1, -2) @ g, owned=True)

        self._push(out, pull)
        return out

    def swap_last(self, a: Tensor) -> Tensor:
        """Transpose the trailing two axes of a stacked 3-D tensor."""
        if a.data.ndim != 3:
            raise ShapeError(f"swap_last expects 3-D, got {a.data.shape}")
        out = Tensor._wrap(np.ascontiguousarray(a.data.swapaxes(-1, -2)))

        def pull(g, accum):
            accum(a, g.swapaxes(-1, -2))

        self._push(out, pull)
        return out

    def reshape(self, a: Tensor, shape) -> Tensor:
        out = Tensor._wrap(a.data.reshape(shape).copy())

        def pull(g, accum):
            accum(a, g.reshape(a.data.shape))

        self._push(out, pull)
        return out

    def concat(self, parts: list[Tensor], axis: int = 0) -> Tensor:
        if axis not in (0, 1) or not parts:
            raise ShapeError("concat needs a non-empty list and axis 0 or 1")
        for p in parts:
            if p.data.ndim != 2:
                raise ShapeError(f"concat expects matrices, got {p.data.shape}")
        out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
        sizes = [p.data.shape[axis] for p in parts]

        def pull(g, accum):
            start = 0
            for p, size in zip(parts, sizes):
                sl = (slice(start, start + size), slice(None)) if axis == 0 \
                    else (slice(None), slice(start, start + size))
                accum(p, g[sl])
                start += size

        self._push(out, pull)
        return out

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        return self._slice(a, start, stop, axis=0)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        return self._slice(a, start, stop, axis=1)

    def _slice(self, a: Tensor, start: int, stop: int, axis: int) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"slice expects a matrix, got {a.data.shape}")
        n = a.data.shape[axis]
        if not (0 <= start < stop <= n):
            raise ContractError(f"slice [{start}:{stop}] outside axis of size {n}")
        sl = (slice(start, stop), slice(None)) if axis == 0 \
            else (slice(None), slice(start, stop))
        out = Tensor._wrap(a.data[sl].copy())

        def pull(g, accum):
            z = np.zeros_like(a.data)
            z[sl] = g
            accum(a, z, owned=True)

        self._push(out, pull)
        return out

    def gather_rows(self, a: Tensor, indices) -> Tensor:
        """Select rows of a matrix; backward scatter-adds into place."""
        if a.data.ndim != 2:
            raise ShapeError(f"gather_rows expects a matrix, got {a.data.shape}")
        idx = [int(i) for i in indices]
        n = a.data.shape[0]
        if any(not 0 <= i < n for i in idx):
            raise ContractError(f"gather indices outside [0, {n})")
        out = Tensor._wrap(a.data[idx].copy())

        def pull(g, accum):
            z = np.zeros_like(a.data)
            np.add.at(z, idx, g)
            accum(a, z, owned=True)

        self._push(out, pull)
        return out

    def sum_all(self, a: Tensor) -> Tensor:
        out = Tensor._wrap(np.asarray(a.data.sum()))

        def pull(g, accum):
            accum(a, np.full(a.data.shape, float(g)), owned=True)

        self._push(out, pull)
        return out

    def layer_norm(self, x: Tensor, gain: Tensor, shift: Tensor,
                   eps: float = 1e-6) -> Tensor:
        """Normalize the last axis to zero mean / unit population variance,
        then apply the affine ``gain * xhat + shift``."""
        d = x.data.shape[-1]
        if d < 2:
            raise ContractError("layer_norm needs at least 2 features")
        if gain.data.shape != (d,) or shift.data.shape != (d,):
            raise ShapeError(
                f"layer_norm affine shapes {gain.data.shape}/{shift.data.shape} "
                f"do not match feature dim {d}"
            )
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)  # population variance
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = Tensor._wrap(xhat * gain.data + shift.data)

        def pull(g, accum):
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            accum(x, (gy - m1 - xhat * m2) * inv, owned=True)
            lead = tuple(range(g.ndim - 1))
            accum(gain, (g * xhat).sum(axis=lead), owned=True)
            accum(shift, g.sum(axis=lead), owned=True)

        self._push(out, pull)
        return out

    def gelu(self, x: Tensor) -> Tensor:
        """x * Phi(x) with the exact Gaussian CDF (no tanh approximation)."""
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        out = Tensor._wrap(x.data * cdf)
        if self.recording:
            slope = cdf + x.data * (np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI)

            def pull(g, accum):
                accum(x, g * slope, owned=True)

            self._push(out, pull)
        return out

    def masked_softmax(self, logits: Tensor, mask: np.ndarray,
                       bias: Tensor | np.ndarray | None = None) -> Tensor:
        """Softmax over the allowed entries of each row.

        Excluded entries come out as bitwise 0.0. ``bias`` (same shape) is
        added to the logits before the softmax. A row with no allowed
        entry signals a malformed layout and raises.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.data.shape:
            raise ShapeError(
                f"mask shape {mask.shape} does not match logits {logits.data.shape}"
            )
        if not mask.any(axis=-1).all():
            raise InvalidMaskError("masked_softmax: row with no allowed entries")
        bias_t = bias if isinstance(bias, Tensor) else None
        z = logits.data
        if bias is not None:
            bias_data = bias.data if bias_t is not None else np.asarray(bias)
            if bias_data.shape != z.shape:
                raise ShapeError(
                    f"bias shape {bias_data.shape} does not match logits {z.shape}"
                )
            z = z + bias_data
        top = np.where(mask, z, -np.inf).max(axis=-1, keepdims=True)
        # keep exp off the -inf/underflow slow path: masked entries get a
        # benign argument first and are zeroed after
        e = np.exp(np.where(mask, z - top, 0.0))
        e = np.where(mask, e, 0.0)
        p = e / e.sum(axis=-1, keepdims=True)
        out = Tensor._wrap(p)

        def pull(g, accum):
            inner = (g * p).sum(axis=-1, keepdims=True)
            dz = p * (g - inner)  # exactly zero on excluded entries
            accum(logits, dz, owned=True)
            if bias_t is not None:
                accum(bias_t, dz)  # dz already adopted above; copy here

        self._push(out, pull)
        return out

    def softmax_cross_entropy_rows(self, logits: Tensor, labels) -> Tensor:
        """Mean softmax cross-entropy of a batch of logit rows."""
        if logits.data.ndim != 2:
            raise ShapeError(
                f"expected a batch of logit rows, got {logits.data.shape}"
            )
        b, n = logits.data.shape
        labels = [int(label) for label in labels]
        if len(labels) != b:
            raise ContractError(f"{len(labels)} labels for {b} rows")
        if any(not 0 <= label < n for label in labels):
            raise ContractError(f"label outside [0, {n})")
        rows = np.arange(b)
        top = logits.data.max(axis=-1, keepdims=True)
        shifted = logits.data - top
        lse = top[:, 0] + np.log(np.exp(shifted).sum(axis=-1))
        out = Tensor._wrap(np.asarray((lse - logits.data[rows, labels]).mean()))

        def pull(g, accum):
            p = np.exp(shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[rows, labels] -= 1.0
            accum(logits, p * (float(g) / b), owned=True)

        self._push(out, pull)
        return out

    def softmax_cross_entropy(self, logits: Tensor, label: int) -> Tensor:
        """Scalar cross-entropy of a single logit row against ``label``."""
        flat = logits.data.reshape(-1)
        n = flat.size
        if not 0 <= label < n:
            raise ContractError(f"label {label} outside [0, {n})")
        top = flat.max()
        shifted = flat - top
        lse = top + math.log(np.exp(shifted).sum())
        out = Tensor._wrap(np.asarray(lse - flat[label]))

        def pull(g, accum):
            p = np.exp(shifted)
            p /= p.sum()
            p[label] -= 1.0
            accum(logits, (p * float(g)).reshape(logits.data.shape), owned=True)

        self._push(out, pull)
        return out
