"""Small dense networks in float64 with hand-written reverse-mode gradients.

Every network in the package (base policy, residual actor, critics and their
target copies) is an :class:`MlpParams` laid out over one contiguous float64
buffer.  Weights, biases and layer-norm vectors are views into that buffer, so
Adam and Polyak averaging operate on a single array per network.

Weights are stored as ``(out, in)`` matrices and a layer computes
``x @ W.T + b``.  Inputs may be a single vector or a ``(batch, dim)`` array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._kernels import ACT_CODES, adam_update, layer_backward, layer_forward
from .exceptions import (
    DimensionError,
    TrainingDivergedError,
    TruncatedStreamError,
    VersionMismatchError,
)

LN_EPS = 1e-5
MAGIC = b"RFT1"

_HIDDEN_ACTS = ("relu", "tanh")
_OUTPUT_ACTS = ("linear", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    use_layernorm: Tuple[bool, ...] = ()

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        ln = self.use_layernorm
        if isinstance(ln, (bool, np.bool_)):
            ln = (bool(ln),) * len(hidden)
        ln = tuple(bool(v) for v in ln) or (False,) * len(hidden)
        object.__setattr__(self, "use_layernorm", ln)
        if len(ln) != len(hidden):
            raise ValueError("use_layernorm needs one flag per hidden layer")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in hidden):
            raise ValueError(f"all layer sizes must be >= 1, got {self}")
        if self.hidden_activation not in _HIDDEN_ACTS:
            raise ValueError(f"hidden_activation must be one of {_HIDDEN_ACTS}")
        if self.output_activation not in _OUTPUT_ACTS:
            raise ValueError(f"output_activation must be one of {_OUTPUT_ACTS}")

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layer_has_ln(self, i: int) -> bool:
        return i < len(self.hidden_dims) and self.use_layernorm[i]

    def layout(self) -> List[Tuple[int, int, int, bool]]:
        """(offset, fan_in, fan_out, has_layernorm) for every layer."""
        out, offset = [], 0
        dims = self.dims
        for i in range(self.n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            ln = self.layer_has_ln(i)
            out.append((offset, fan_in, fan_out, ln))
            offset += fan_out * fan_in + fan_out + (2 * fan_out if ln else 0)
        return out

    @property
    def n_params(self) -> int:
        off, fi, fo, ln = self.layout()[-1]
        return off + fo * fi + fo + (2 * fo if ln else 0)


@dataclass
class MlpParams:
    """Parameters of one network, as views into ``flat``.

    ``flat`` may also be 2-D with shape ``(n_members, n_params)``: an ensemble
    of identically shaped networks evaluated together.  Views then carry the
    member axis first, e.g. weights of shape ``(n_members, out, in)``.
    """

    spec: MlpSpec
    flat: np.ndarray = None
    weights: List[np.ndarray] = field(init=False, repr=False)
    biases: List[np.ndarray] = field(init=False, repr=False)
    ln_gains: List[Optional[np.ndarray]] = field(init=False, repr=False)
    ln_offsets: List[Optional[np.ndarray]] = field(init=False, repr=False)

    def __post_init__(self):
        n = self.spec.n_params
        if self.flat is None:
            self.flat = np.zeros(n)
        elif not (isinstance(self.flat, np.ndarray) and self.flat.dtype == np.float64
                  and self.flat.flags.c_contiguous):
            self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.ndim not in (1, 2) or self.flat.shape[-1] != n:
            raise DimensionError(f"expected {n} parameters, got {self.flat.shape}")
        lead = self.flat.shape[:-1]
        self.weights, self.biases, self.ln_gains, self.ln_offsets = [], [], [], []
        for off, fi, fo, ln in self.spec.layout():
            self.weights.append(self.flat[..., off:off + fo * fi].reshape(*lead, fo, fi))
            off += fo * fi
            self.biases.append(self.flat[..., off:off + fo])
            off += fo
            if ln:
                self.ln_gains.append(self.flat[..., off:off + fo])
                self.ln_offsets.append(self.flat[..., off + fo:off + 2 * fo])
            else:
                self.ln_gains.append(None)
                self.ln_offsets.append(None)

    @classmethod
    def stack(cls, members: Sequence["MlpParams"]) -> "MlpParams":
        """Copy same-spec networks into one ensemble buffer."""
        spec = members[0].spec
        if any(m.spec != spec for m in members):
            raise DimensionError("stacked networks must share one spec")
        return cls(spec, np.stack([m.flat for m in members]))

    @property
    def n_members(self) -> Optional[int]:
        return self.flat.shape[0] if self.flat.ndim == 2 else None

    def member(self, i: int) -> "MlpParams":
        """View of ensemble member ``i``; writes go through to the ensemble."""
        return MlpParams(self.spec, self.flat[i])

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.spec, np.zeros_like(self.flat))

    def layer_of(self, index: int) -> int:
        """Layer index owning flat parameter ``index`` (position within one member)."""
        index = index % self.spec.n_params
        layout = self.spec.layout()
        for i in range(len(layout) - 1, -1, -1):
            if index >= layout[i][0]:
                return i
        return 0


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> MlpParams:
    """Uniform fan-in initialisation; biases zero, layer-norm gains one.

    Hidden layers use the He-uniform bound sqrt(6 / fan_in), the output layer
    1 / sqrt(fan_in).  ``zero_last`` zeroes the output layer entirely.
    """
    params = MlpParams(spec)
    n = spec.n_layers
    for i, W in enumerate(params.weights):
        fan_in = W.shape[1]
        if i == n - 1:
            if zero_last:
                continue
            bound = 1.0 / np.sqrt(fan_in)
        else:
            bound = np.sqrt(6.0 / fan_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    for g in params.ln_gains:
        if g is not None:
            g[...] = 1.0
    return params


def _as_batch(params: MlpParams, spec: MlpSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    max_dim = 3 if params.flat.ndim == 2 else 2
    if not 2 <= x.ndim <= max_dim or x.shape[-1] != spec.input_dim:
        raise DimensionError(
            f"network expects input of length {spec.input_dim}, got shape {np.shape(x)}"
        )
    return x, single


def layer_norm(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalise each row over its units (last axis); returns (zhat, 1/std)."""
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    inv_std = 1.0 / np.sqrt((zc * zc).mean(axis=-1, keepdims=True) + LN_EPS)
    return zc * inv_std, inv_std


def _members(v: Optional[np.ndarray]) -> np.ndarray:
    # per-member vectors as (M, n); a placeholder when the layer has none
    if v is None:
        return _EMPTY_2D
    return v[None, :] if v.ndim == 1 else v


_EMPTY_2D = np.zeros((1, 1))
_EMPTY_3D = np.zeros((1, 1, 1))


def _lead(a: Optional[np.ndarray], ndim: int, empty: np.ndarray) -> np.ndarray:
    # add the member axis to single-network arrays
    if a is None:
        return empty
    return a[None] if a.ndim == ndim - 1 else a


def _forward(params: MlpParams, spec: MlpSpec, x: np.ndarray):
    """Returns (output, cache); cache holds (input, zhat, inv_std, output) per layer."""
    cache = []
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        z = np.ascontiguousarray(h @ np.swapaxes(params.weights[i], -1, -2))
        has_ln = spec.layer_has_ln(i)
        zhat = inv_std = None
        if has_ln:
            zhat = np.empty_like(z)
            inv_std = np.empty(z.shape[:-1])
        act = spec.output_activation if i == last else spec.hidden_activation
        layer_forward(_lead(z, 3, None), _members(params.biases[i]),
                      _members(params.ln_gains[i]), _members(params.ln_offsets[i]), has_ln,
                      ACT_CODES[act], LN_EPS, _lead(zhat, 3, _EMPTY_3D),
                      _lead(inv_std, 2, _EMPTY_2D))
        cache.append((h, zhat, inv_std, z))
        h = z
    return h, cache


def mlp_forward(params: MlpParams, spec: MlpSpec, x) -> np.ndarray:
    """Evaluate the network on a vector or a batch of row vectors.

    For an ensemble the output gains a leading member axis; the input may be
    shared ``(batch, in)`` or per member ``(members, batch, in)``.
    """
    xb, single = _as_batch(params, spec, x)
    out, _ = _forward(params, spec, xb)
    return out[..., 0, :] if single else out


def mlp_forward_cached(params: MlpParams, spec: MlpSpec, x):
    """Forward pass on a batch that also returns the cache for :func:`mlp_backward`."""
    xb, _ = _as_batch(params, spec, x)
    return _forward(params, spec, xb)


def mlp_backward(
    params: MlpParams,
    spec: MlpSpec,
    x,
    output_grad,
    cache=None,
    need_param_grads: bool = True,
) -> Tuple[Optional[MlpParams], np.ndarray]:
    """Backpropagate ``output_grad`` through the network.

    Parameter gradients are summed over the batch.  Returns
    ``(param_grads, input_grad)``; ``param_grads`` is None when
    ``need_param_grads`` is false (used when only d/d input is wanted).
    For an ensemble, ``output_grad`` and ``input_grad`` carry the member axis.
    """
    xb, single = _as_batch(params, spec, x)
    if cache is None:
        _, cache = _forward(params, spec, xb)
    g = np.array(output_grad, dtype=np.float64, order="C")
    if g.ndim == 1:
        g = g[None, :]
    expected = cache[-1][3].shape
    if g.shape != expected:
        raise DimensionError(f"output_grad must have shape {expected}, got {g.shape}")
    grads = params.zeros_like() if need_param_grads else None
    last = spec.n_layers - 1
    for i in range(last, -1, -1):
        h_in, zhat, inv_std, out = cache[i]
        has_ln = zhat is not None
        act = spec.output_activation if i == last else spec.hidden_activation
        if need_param_grads:
            g_bias = _members(grads.biases[i])
            g_gain, g_off = _members(grads.ln_gains[i]), _members(grads.ln_offsets[i])
        else:
            g_bias = g_gain = g_off = _EMPTY_2D
        layer_backward(_lead(g, 3, None), _lead(out, 3, None), _lead(zhat, 3, _EMPTY_3D),
                       _lead(inv_std, 2, _EMPTY_2D), _members(params.ln_gains[i]), has_ln,
                       ACT_CODES[act], need_param_grads, g_bias, g_gain, g_off)
        if need_param_grads:
            grads.weights[i][...] = np.swapaxes(g, -1, -2) @ h_in
        g = np.ascontiguousarray(g @ params.weights[i])
    return grads, (g[..., 0, :] if single else g)


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float = 3e-4, **kw) -> "AdamState":
        shape = params.flat.shape
        return cls(0, np.zeros(shape), np.zeros(shape), learning_rate, **kw)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState):
    """One bias-corrected Adam step, applied in place.  Returns (params, state)."""
    g = grads.flat
    if g.shape != params.flat.shape or state.m.shape != g.shape:
        raise DimensionError("gradient / moment shapes do not match parameters")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bad = adam_update(params.flat.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                      state.m.reshape(-1), state.v.reshape(-1), state.learning_rate, b1, b2,
                      state.eps, 1.0 - b1 ** step, 1.0 - b2 ** step)
    if bad >= 0:
        layer = params.layer_of(bad)
        raise TrainingDivergedError(f"non-finite gradient in layer {layer}", layer=layer)
    state.step = step
    return params, state


def polyak_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    """target <- rho * target + (1 - rho) * online, in place."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if target.flat.shape != online.flat.shape:
        raise DimensionError("target and online parameter shapes differ")
    if rho == 0.0:
        target.flat[...] = online.flat
    elif rho != 1.0:
        target.flat *= rho
        target.flat += (1.0 - rho) * online.flat
    return target


def params_digest(params: MlpParams) -> str:
    import hashlib

    return hashlib.sha256(params.flat.astype("<f8").tobytes()).hexdigest()


# -- checkpoint bytes -------------------------------------------------------

_ACT_CODE = {"relu": 0, "tanh": 1, "linear": 2}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def serialize_params(params: MlpParams) -> bytes:
    """Encode as ``RFT1`` + spec descriptor + little-endian float64 arrays."""
    if params.flat.ndim != 1:
        raise DimensionError("serialize ensemble members one at a time")
    spec = params.spec
    n_hidden = len(spec.hidden_dims)
    head = [MAGIC, struct.pack("<II", spec.input_dim, n_hidden)]
    head.append(struct.pack(f"<{n_hidden}I", *spec.hidden_dims))
    head.append(
        struct.pack(
            "<IBB",
            spec.output_dim,
            _ACT_CODE[spec.hidden_activation],
            _ACT_CODE[spec.output_activation],
        )
    )
    head.append(bytes(int(f) for f in spec.use_layernorm))
    return b"".join(head) + params.flat.astype("<f8").tobytes()


def deserialize_params(blob: bytes) -> Tuple[MlpParams, int]:
    """Decode one network from the start of ``blob``.

    Returns the params and the number of bytes consumed, so several networks
    may be concatenated in one stream.
    """
    mv = memoryview(blob)
    if len(mv) < 4 or bytes(mv[:4]) != MAGIC:
        raise VersionMismatchError(f"bad checkpoint magic {bytes(mv[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(mv):
            raise TruncatedStreamError(f"stream truncated in {what}")
        out = mv[pos:pos + n]
        pos += n
        return out

    input_dim, n_hidden = struct.unpack("<II", take(8, "header"))
    hidden = struct.unpack(f"<{n_hidden}I", take(4 * n_hidden, "header"))
    output_dim, hact, oact = struct.unpack("<IBB", take(6, "header"))
    ln = tuple(bool(b) for b in take(n_hidden, "header"))
    try:
        spec = MlpSpec(input_dim, hidden, output_dim, _CODE_ACT[hact], _CODE_ACT[oact], ln)
    except (KeyError, ValueError) as exc:
        raise VersionMismatchError(f"unreadable network descriptor: {exc}") from exc
    chunks = []
    for i, (_, fi, fo, has_ln) in enumerate(spec.layout()):
        n = fo * fi + fo + (2 * fo if has_ln else 0)
        chunks.append(np.frombuffer(take(8 * n, f"layer {i}"), dtype="<f8"))
    flat = np.concatenate(chunks).astype(np.float64)
    return MlpParams(spec, flat), pos
