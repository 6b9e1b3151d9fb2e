"""Model blocks, their composition into a graph, and the shallow kernel baseline.

A structured deep kernel network alternates :class:`LinearKernelLayer`
(a bias-free fully connected map) with :class:`ActivationKernelLayer`
(a per-coordinate kernel expansion acting as a trainable activation).
An optional :class:`GruCell` consumes the time axis of sequence input;
blocks in front of it are applied to every time instance.

Blocks hold shapes only.  Weights live in a
:class:`~sdkn.autodiff.ParamStore` under ``"<block index>.<name>"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .exceptions import ConfigurationError, NumericalError
from .kernels import KernelSpec, apply_to_difference, gram_matrix

Getter = Callable[[str], Tensor]


@dataclass(frozen=True)
class LinearKernelLayer:
    d_in: int
    d_out: int

    kind = "linear"

    def param_shapes(self):
        return {"W": (self.d_out, self.d_in)}

    def n_parameters(self):
        return self.d_in * self.d_out

    def forward(self, x: Tensor, get: Getter) -> Tensor:
        return ad.matmul(x, ad.transpose(get("W")))


@dataclass(frozen=True)
class ActivationKernelLayer:
    """``out_i = sum_m A[i, m] * k(x_i, C[i, m])`` for every coordinate ``i``."""

    dim: int
    n_centers: int = 5
    kernel: KernelSpec = field(default_factory=KernelSpec)

    kind = "activation"

    def __post_init__(self):
        if self.kernel.family == "linear":
            raise ConfigurationError("activation layers need a scalar kernel (gaussian or wendland0)")
        if self.n_centers < 1:
            raise ConfigurationError("expansion size must be >= 1")

    @property
    def d_in(self):
        return self.dim

    @property
    def d_out(self):
        return self.dim

    def param_shapes(self):
        shape = (self.dim, self.n_centers)
        return {"C": shape, "A": shape}

    def n_parameters(self):
        return 2 * self.dim * self.n_centers

    def forward(self, x: Tensor, get: Getter) -> Tensor:
        b, d, m = x.shape[0], self.dim, self.n_centers
        xs = ad.broadcast_to(ad.reshape(x, (b, d, 1)), (b, d, m))
        cs = ad.broadcast_to(ad.reshape(get("C"), (1, d, m)), (b, d, m))
        a = ad.broadcast_to(ad.reshape(get("A"), (1, d, m)), (b, d, m))
        return ad.sum_(ad.mul(apply_to_difference(self.kernel, ad.sub(xs, cs)), a), axis=2)

    def profile(self, values: dict[str, np.ndarray], i: int, grid) -> np.ndarray:
        """Scalar activation of coordinate ``i`` tabulated on ``grid``."""
        grid = np.asarray(grid, dtype=np.float64)
        k = apply_to_difference(self.kernel, grid[:, None] - values["C"][i][None, :])
        return k @ values["A"][i]


@dataclass(frozen=True)
class GruCell:
    """Gated recurrent unit with one bias per gate.

    ``h_t = (1 - z_t) * h_{t-1} + z_t * tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)``.
    """

    input_size: int
    hidden_size: int

    kind = "gru"

    @property
    def d_in(self):
        return self.input_size

    @property
    def d_out(self):
        return self.hidden_size

    def param_shapes(self):
        h, i = self.hidden_size, self.input_size
        shapes = {}
        for g in "zrh":
            shapes[f"W_{g}"] = (h, i)
            shapes[f"U_{g}"] = (h, h)
            shapes[f"b_{g}"] = (h,)
        return shapes

    def n_parameters(self):
        h, i = self.hidden_size, self.input_size
        return 3 * (h * i + h * h + h)

    def forward(self, seq: Tensor, h: Tensor, get: Getter) -> Tensor:
        b, t_len, i = seq.shape
        hs = self.hidden_size
        if h.shape != (b, hs):
            raise ConfigurationError(f"gru: initial state shape {h.shape}, expected {(b, hs)}")
        flat = ad.reshape(seq, (b * t_len, i))
        proj, bias, rec = {}, {}, {}
        for g in "zrh":
            proj[g] = ad.reshape(ad.matmul(flat, ad.transpose(get(f"W_{g}"))), (b, t_len, hs))
            bias[g] = ad.broadcast_to(ad.reshape(get(f"b_{g}"), (1, hs)), (b, hs))
            rec[g] = ad.transpose(get(f"U_{g}"))
        for t in range(t_len):
            z = ad.sigmoid(ad.take(proj["z"], t, 1) + ad.matmul(h, rec["z"]) + bias["z"])
            r = ad.sigmoid(ad.take(proj["r"], t, 1) + ad.matmul(h, rec["r"]) + bias["r"])
            cand = ad.tanh(ad.take(proj["h"], t, 1) + ad.matmul(ad.mul(r, h), rec["h"]) + bias["h"])
            h = ad.add(ad.mul(1.0 - z, h), ad.mul(z, cand))
        return h


@dataclass(frozen=True)
class DenseLayer:
    d_in: int
    d_out: int
    activation: str = "relu"

    kind = "dense"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def param_shapes(self):
        return {"W": (self.d_out, self.d_in), "b": (self.d_out,)}

    def n_parameters(self):
        return self.d_out * self.d_in + self.d_out

    def forward(self, x: Tensor, get: Getter) -> Tensor:
        bias = ad.broadcast_to(ad.reshape(get("b"), (1, self.d_out)), (x.shape[0], self.d_out))
        out = ad.matmul(x, ad.transpose(get("W"))) + bias
        return ad.relu(out) if self.activation == "relu" else out


BLOCK_TYPES = {
    "linear": LinearKernelLayer,
    "activation": ActivationKernelLayer,
    "gru": GruCell,
    "dense": DenseLayer,
}


class ModelGraph:
    """Ordered, validated list of blocks mapping ``d_in`` features to ``d_out``."""

    def __init__(self, blocks: Sequence):
        self.blocks = list(blocks)
        self.validate()

    @property
    def d_in(self) -> int:
        return self.blocks[0].d_in

    @property
    def d_out(self) -> int:
        return self.blocks[-1].d_out

    @property
    def gru_index(self) -> int | None:
        idx = [i for i, b in enumerate(self.blocks) if isinstance(b, GruCell)]
        return idx[0] if idx else None

    @property
    def is_sequential(self) -> bool:
        return self.gru_index is not None

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigurationError("a model graph needs at least one block")
        for i, (a, b) in enumerate(zip(self.blocks, self.blocks[1:])):
            if a.d_out != b.d_in:
                raise ConfigurationError(
                    f"block {i} ({a.kind}) outputs {a.d_out} features but block {i + 1} ({b.kind}) expects {b.d_in}"
                )
        if sum(isinstance(b, GruCell) for b in self.blocks) > 1:
            raise ConfigurationError("at most one GRU block is supported")
        last = self.blocks[-1]
        ok_last = isinstance(last, LinearKernelLayer) or (
            isinstance(last, DenseLayer) and last.activation == "identity"
        )
        if not ok_last:
            raise ConfigurationError(
                "the last block must be a linear-kernel layer or an identity dense layer"
            )

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, block in enumerate(self.blocks):
            for name, shape in block.param_shapes().items():
                shapes[f"{i}.{name}"] = shape
        return shapes

    def activation_layers(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if isinstance(b, ActivationKernelLayer)]

    def to_dict(self) -> list[dict]:
        out = []
        for b in self.blocks:
            d = {"kind": b.kind}
            if isinstance(b, ActivationKernelLayer):
                d.update(dim=b.dim, n_centers=b.n_centers,
                         kernel={"family": b.kernel.family, "epsilon": b.kernel.epsilon})
            elif isinstance(b, GruCell):
                d.update(input_size=b.input_size, hidden_size=b.hidden_size)
            elif isinstance(b, DenseLayer):
                d.update(d_in=b.d_in, d_out=b.d_out, activation=b.activation)
            else:
                d.update(d_in=b.d_in, d_out=b.d_out)
            out.append(d)
        return out

    @classmethod
    def from_dict(cls, blocks: list[dict]) -> "ModelGraph":
        built = []
        for d in blocks:
            d = dict(d)
            kind = d.pop("kind")
            if kind not in BLOCK_TYPES:
                raise ConfigurationError(f"unknown block kind {kind!r}")
            if kind == "activation":
                d["kernel"] = KernelSpec(**d.get("kernel", {}))
            built.append(BLOCK_TYPES[kind](**d))
        return cls(built)

    def __eq__(self, other):
        return isinstance(other, ModelGraph) and self.blocks == other.blocks

    def __repr__(self):
        return f"ModelGraph({self.blocks!r})"


def build_sdkn(d_in: int, hidden_dims: Sequence[int], d_out: int, *,
               gru_hidden: int | None = None, gru_position: int = 1,
               kernel: KernelSpec | None = None, n_centers: int = 5) -> ModelGraph:
    """``lin, act, lin, act, ..., lin`` through ``hidden_dims``, GRU optionally inserted."""
    kernel = kernel or KernelSpec()
    layout = []
    for h in hidden_dims:
        layout += [("linear", h), ("activation", None)]
    layout.append(("linear", d_out))
    return _materialize(d_in, layout, gru_hidden, gru_position,
                        lambda kind, a, b: LinearKernelLayer(a, b) if kind == "linear"
                        else ActivationKernelLayer(a, n_centers, kernel))


def build_ann(d_in: int, hidden_dims: Sequence[int], d_out: int, *,
              gru_hidden: int | None = None, gru_position: int = 1) -> ModelGraph:
    """ReLU dense layers through ``hidden_dims`` with an identity output layer."""
    layout = [("dense", h) for h in hidden_dims] + [("out", d_out)]
    return _materialize(d_in, layout, gru_hidden, gru_position,
                        lambda kind, a, b: DenseLayer(a, b, "relu" if kind == "dense" else "identity"))


def _materialize(d_in, layout, gru_hidden, gru_position, make):
    if gru_hidden is not None:
        if not 0 <= gru_position < len(layout):
            raise ConfigurationError(f"GRU position {gru_position} outside 0..{len(layout) - 1}")
        layout = layout[:gru_position] + [("gru", gru_hidden)] + layout[gru_position:]
    blocks, dim = [], d_in
    for kind, size in layout:
        if kind == "gru":
            blocks.append(GruCell(dim, size))
            dim = size
        elif kind == "activation":
            blocks.append(make(kind, dim, dim))
        else:
            blocks.append(make(kind, dim, size))
            dim = size
    return ModelGraph(blocks)


def count_parameters(graph: ModelGraph) -> int:
    return sum(b.n_parameters() for b in graph.blocks)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _getter(params: ParamStore, i: int) -> Getter:
    prefix = f"{i}."
    return lambda name: params.var(prefix + name)


def _check_input(graph: ModelGraph, batch) -> Tensor:
    x = ad.as_tensor(batch)
    want = 3 if graph.is_sequential else 2
    if x.ndim != want:
        kind = "sequence (B, N_seq, d_in)" if want == 3 else "feature (B, d_in)"
        raise ConfigurationError(f"graph expects {kind} input, got shape {x.shape}")
    if x.shape[-1] != graph.d_in:
        raise ConfigurationError(f"graph expects {graph.d_in} input features, got {x.shape[-1]}")
    return x


def _forward_blocks(graph: ModelGraph, params: ParamStore, x: Tensor, stop: int) -> Tensor:
    seq_shape = x.shape[:2] if x.ndim == 3 else None
    if seq_shape is not None:
        x = ad.reshape(x, (seq_shape[0] * seq_shape[1], x.shape[2]))
    for i, block in enumerate(graph.blocks[:stop]):
        get = _getter(params, i)
        if isinstance(block, GruCell):
            b, t = seq_shape
            h0 = Tensor(np.zeros((b, block.hidden_size)))
            x = block.forward(ad.reshape(x, (b, t, block.input_size)), h0, get)
            seq_shape = None
        else:
            x = block.forward(x, get)
    if seq_shape is not None:
        x = ad.reshape(x, (seq_shape[0], seq_shape[1], x.shape[-1]))
    return x


def check_finite_params(graph: ModelGraph, params: ParamStore) -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            block = int(name.split(".", 1)[0])
            raise NumericalError(
                f"non-finite parameter {name!r} in block {block} ({graph.blocks[block].kind})"
            )


def sdkn_forward(graph: ModelGraph, params: ParamStore, batch) -> Tensor:
    """Apply every block of ``graph`` to a batch; returns ``(B, d_out)``.

    Recorded on the active tape, if any.
    """
    x = _check_input(graph, batch)
    check_finite_params(graph, params)
    return _forward_blocks(graph, params, x, len(graph.blocks))


def layer_inputs(graph: ModelGraph, params: ParamStore, batch, layer: int) -> np.ndarray:
    """Values entering block ``layer`` (time instances flattened before a GRU)."""
    x = _forward_blocks(graph, params, _check_input(graph, batch), layer)
    return x.data.reshape(-1, x.shape[-1])


def gru_forward(cell: GruCell, params: ParamStore, sequence, h0, prefix: str = "") -> Tensor:
    """Run ``cell`` over ``sequence`` (B, N_seq, i) from ``h0``; returns the last state."""
    seq = ad.as_tensor(sequence)
    if seq.ndim != 3 or seq.shape[1] < 1 or seq.shape[2] != cell.input_size:
        raise ConfigurationError(f"gru: bad sequence shape {seq.shape}")
    return cell.forward(seq, ad.as_tensor(h0), lambda n: params.var(prefix + n))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


IDENTITY_FIT_RCOND = 1e-3


def identity_coefficients(kernel: KernelSpec, centers: np.ndarray) -> np.ndarray:
    """Least-squares coefficients making ``sum_m a_m k(c, c_m)`` reproduce ``c`` at the centers.

    Singular values below ``IDENTITY_FIT_RCOND`` times the largest are
    discarded.  Nearby centers otherwise yield huge cancelling
    coefficients that stall training.
    """
    K = apply_to_difference(kernel, centers[:, None] - centers[None, :])
    return np.linalg.lstsq(K, centers, rcond=IDENTITY_FIT_RCOND)[0]


def init_params(graph: ModelGraph, seed: int, init_batch) -> ParamStore:
    """Seeded, data-dependent initialization.

    Weight matrices are uniform in ``+-1/sqrt(fan_in)``, biases zero.  Each
    activation layer takes its centers from ``n_centers`` distinct
    ``init_batch`` samples pushed through the already initialized blocks
    in front of it, and its coefficients from an identity fit on those
    centers.
    """
    init_batch = np.asarray(init_batch, dtype=np.float64)
    x = _check_input(graph, init_batch)
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError("init batch is empty")
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for i, block in enumerate(graph.blocks):
        if isinstance(block, ActivationKernelLayer):
            m = block.n_centers
            if m > n:
                raise ConfigurationError(
                    f"block {i} needs {m} distinct init samples, init batch has {n}"
                )
            pick = np.sort(rng.choice(n, size=m, replace=False))
            feats = _forward_blocks(graph, params, Tensor(init_batch[pick]), i).data
            if feats.ndim == 3:  # sequence input before a GRU: use the final instance
                feats = feats[:, -1, :]
            centers = np.ascontiguousarray(feats.T)
            coeffs = np.stack([identity_coefficients(block.kernel, c) for c in centers])
            params.add(f"{i}.C", centers)
            params.add(f"{i}.A", coeffs)
            continue
        for name, shape in block.param_shapes().items():
            if name.startswith("b"):
                params.add(f"{i}.{name}", np.zeros(shape))
            else:
                bound = 1.0 / np.sqrt(shape[1])
                params.add(f"{i}.{name}", rng.uniform(-bound, bound, size=shape))
    return params


# ---------------------------------------------------------------------------
# Shallow kernel ridge regression
# ---------------------------------------------------------------------------


@dataclass
class KrrModel:
    """``f(x) = sum_j alpha_j k(x, x_j)`` over stored centers ``x_j``."""

    kernel: KernelSpec
    centers: np.ndarray
    coefficients: np.ndarray
    regularization: float = 0.0

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return gram_matrix(self.kernel, X, self.centers) @ self.coefficients


def krr_fit(kernel: KernelSpec, X, Y, lam: float = 0.0) -> KrrModel:
    """Solve ``(K + lam * n * I) alpha = Y`` by Cholesky factorization.

    One step of iterative refinement is applied to the solution.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64)
    Y2 = Y.reshape(len(Y), -1)
    n = X.shape[0]
    if n < 1 or Y2.shape[0] != n:
        raise ConfigurationError(f"krr_fit: {n} inputs but {Y2.shape[0]} targets")
    if lam < 0:
        raise ConfigurationError("regularization must be non-negative")
    system = gram_matrix(kernel, X, X)
    system[np.diag_indices(n)] += lam * n
    try:
        factor = scipy.linalg.cho_factor(system, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "kernel matrix is not numerically positive definite; use a regularization lam > 0"
        ) from None
    alpha = scipy.linalg.cho_solve(factor, Y2)
    alpha += scipy.linalg.cho_solve(factor, Y2 - system @ alpha)
    residual = np.max(np.abs(system @ alpha - Y2))
    if not np.isfinite(residual) or residual >= 1e-8 * max(1.0, np.max(np.abs(Y2))):
        raise NumericalError(
            f"kernel system is ill-conditioned (residual {residual:.3g}); use a regularization lam > 0"
        )
    return KrrModel(kernel, X.copy(), alpha.reshape((n,) + Y.shape[1:]), float(lam))
