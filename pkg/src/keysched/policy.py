"""Two-action policy network with analytic gradients.

The network is an MLP with ReLU hidden layers over the deviation feature.
The two expert channels (KAR and the scaled last-key distance) are
concatenated onto the last hidden layer right before the output layer,
which produces the logits for (non-key, key).

Weights use the ``x @ W + b`` convention, so ``W`` has shape
``(fan_in, fan_out)``. Every routine here has a batched core working on
``(N, ...)`` arrays; the single-state functions wrap it with ``N = 1``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericInputError, ShapeError, VersionError

NONKEY, KEY = 0, 1
EXPERT_DIM = 2
CKPT_MAGIC = "KEYSCHED-POLICY"
CKPT_VERSION = "v1"
_LOG_TINY = float(np.log(1e-300))


@dataclass(frozen=True)
class PolicyArch:
    input_dim: int = 8
    hidden_sizes: tuple[int, ...] = (64, 64, 16)
    expert_dim: int = EXPERT_DIM
    lkd_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive sizes")
        if self.expert_dim != EXPERT_DIM:
            raise ValueError("expert_dim is fixed at 2 (KAR, LKD)")
        if not self.lkd_scale > 0:
            raise ValueError("lkd_scale must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_sizes]
        shapes = [(sizes[j], sizes[j + 1]) for j in range(len(self.hidden_sizes))]
        shapes.append((self.hidden_sizes[-1] + self.expert_dim, 2))
        return shapes

    def tensor_names(self) -> list[str]:
        names = []
        for j in range(self.n_layers):
            names += [f"W{j}", f"b{j}"]
        return names


@dataclass
class PolicyParams:
    """Trainable tensors plus a fixed affine input normaliser."""

    arch: PolicyArch
    tensors: dict[str, np.ndarray]
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        d = self.arch.input_dim
        if self.input_shift is None:
            self.input_shift = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64).reshape(d)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64).reshape(d)
        for name, (fi, fo) in zip(self.arch.tensor_names()[::2], self.arch.layer_shapes()):
            if self.tensors[name].shape != (fi, fo):
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {(fi, fo)}")
            b = "b" + name[1:]
            if self.tensors[b].shape != (fo,):
                raise ShapeError(f"{b} has shape {self.tensors[b].shape}, expected {(fo,)}")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                            self.input_shift.copy(), self.input_scale.copy())

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in self.arch.tensor_names():
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        h.update(self.input_shift.tobytes())
        h.update(self.input_scale.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (self.arch == other.arch
                and all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.arch.tensor_names())
                and np.array_equal(self.input_shift, other.input_shift)
                and np.array_equal(self.input_scale, other.input_scale))


@dataclass
class SchedulerState:
    deviation: np.ndarray
    kar: float
    lkd: int
    lkd_scale: float = 100.0

    @property
    def lkd_norm(self) -> float:
        return self.lkd / self.lkd_scale

    def expert(self) -> np.ndarray:
        return np.array([self.kar, self.lkd_norm])


@dataclass
class ActionDist:
    p_nonkey: float
    p_key: float
    logits: np.ndarray
    logp: np.ndarray = field(repr=False)
    cache: dict = field(repr=False, default=None)

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.p_nonkey, self.p_key])


@dataclass
class OptState:
    acc: dict[str, np.ndarray]
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    steps: int = 0

    def __eq__(self, other):
        if not isinstance(other, OptState):
            return NotImplemented
        return ((self.lr, self.rho, self.eps, self.steps) == (other.lr, other.rho, other.eps, other.steps)
                and self.acc.keys() == other.acc.keys()
                and all(np.array_equal(self.acc[k], other.acc[k]) for k in self.acc))


def init_params(arch: PolicyArch, seed: int) -> PolicyParams:
    """Glorot-uniform weights, zero biases."""
    gen = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    tensors = {}
    for j, (fi, fo) in enumerate(arch.layer_shapes()):
        bound = np.sqrt(6.0 / (fi + fo))
        tensors[f"W{j}"] = gen.uniform(-bound, bound, size=(fi, fo))
        tensors[f"b{j}"] = np.zeros(fo)
    return PolicyParams(arch, tensors)


def zero_params(arch: PolicyArch) -> PolicyParams:
    tensors = {}
    for j, (fi, fo) in enumerate(arch.layer_shapes()):
        tensors[f"W{j}"] = np.zeros((fi, fo))
        tensors[f"b{j}"] = np.zeros(fo)
    return PolicyParams(arch, tensors)


def init_opt_state(params: PolicyParams, lr=0.001, rho=0.9, eps=1e-8) -> OptState:
    return OptState({k: np.zeros_like(v) for k, v in params.tensors.items()}, lr=lr, rho=rho, eps=eps)


# -- batched core --------------------------------------------------------------

def forward_batch(params: PolicyParams, X: np.ndarray, E: np.ndarray):
    """Forward pass for N states.

    X is ``(N, input_dim)`` raw deviation features, E is ``(N, 2)`` holding
    ``[kar, lkd_norm]``. Returns ``(probs, logp, cache)`` with probs/logp of
    shape ``(N, 2)``.
    """
    X = np.asarray(X, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim or E.shape != (X.shape[0], EXPERT_DIM):
        raise ShapeError(f"state batch shapes {X.shape}, {E.shape} do not match the architecture")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(E))):
        raise NumericInputError("non-finite value in policy input")
    t = params.tensors
    a = (X - params.input_shift) / params.input_scale
    acts = [a]
    pres = []
    for j in range(len(params.arch.hidden_sizes)):
        z = a @ t[f"W{j}"] + t[f"b{j}"]
        a = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(a)
    cat = np.concatenate([a, E], axis=1)
    last = params.arch.n_layers - 1
    logits = cat @ t[f"W{last}"] + t[f"b{last}"]
    zmax = np.max(logits, axis=1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax), axis=1, keepdims=True))
    logp = logits - lse
    probs = np.exp(logp)
    cache = {"acts": acts, "pres": pres, "cat": cat, "logits": logits}
    return probs, logp, cache


def backward_batch(params: PolicyParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Sum over the batch of d(sum_n dlogits[n] . logits[n]) / d(params)."""
    t = params.tensors
    last = params.arch.n_layers - 1
    grads = {}
    grads[f"W{last}"] = cache["cat"].T @ dlogits
    grads[f"b{last}"] = dlogits.sum(axis=0)
    h_last = params.arch.hidden_sizes[-1]
    da = (dlogits @ t[f"W{last}"].T)[:, :h_last]
    for j in range(last - 1, -1, -1):
        dz = da * (cache["pres"][j] > 0)
        grads[f"W{j}"] = cache["acts"][j].T @ dz
        grads[f"b{j}"] = dz.sum(axis=0)
        if j:
            da = dz @ t[f"W{j}"].T
    return {name: grads[name] for name in params.arch.tensor_names()}


def entropy_batch(probs: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return -np.sum(probs * np.maximum(logp, _LOG_TINY), axis=1)


def dlogits_logprob(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(actions)), actions] = 1.0
    return onehot - probs


def dlogits_entropy(probs: np.ndarray, logp: np.ndarray) -> np.ndarray:
    # dH/dz_j = -p_j (log p_j + H)
    lp = np.maximum(logp, _LOG_TINY)
    H = -np.sum(probs * lp, axis=1, keepdims=True)
    return -probs * (lp + H)


def effective_key_prob(p_key: np.ndarray, epsilon: float) -> np.ndarray:
    """Key probability after the epsilon clamp on over-confident posteriors."""
    p_key = np.asarray(p_key, dtype=np.float64)
    p_non = 1.0 - p_key
    return np.where(p_key > epsilon, epsilon, np.where(p_non > epsilon, 1.0 - epsilon, p_key))


# -- single-state API --------------------------------------------------------------

def _state_arrays(state: SchedulerState):
    return np.asarray(state.deviation, dtype=np.float64)[None, :], state.expert()[None, :]


def forward(params: PolicyParams, state: SchedulerState) -> ActionDist:
    X, E = _state_arrays(state)
    probs, logp, cache = forward_batch(params, X, E)
    return ActionDist(p_nonkey=float(probs[0, 0]), p_key=float(probs[0, 1]),
                      logits=cache["logits"][0].copy(), logp=logp[0].copy(), cache=cache)


def grad_logprob(params: PolicyParams, state: SchedulerState, action: int,
                 dist: ActionDist | None = None) -> dict[str, np.ndarray]:
    """Gradient of log pi(action | state) with respect to every tensor."""
    if dist is None:
        dist = forward(params, state)
    probs = dist.probs[None, :]
    return backward_batch(params, dist.cache, dlogits_logprob(probs, np.array([action])))


def entropy(dist: ActionDist) -> float:
    return float(entropy_batch(dist.probs[None, :], dist.logp[None, :])[0])


def grad_entropy(params: PolicyParams, state: SchedulerState,
                 dist: ActionDist | None = None) -> dict[str, np.ndarray]:
    if dist is None:
        dist = forward(params, state)
    return backward_batch(params, dist.cache, dlogits_entropy(dist.probs[None, :], dist.logp[None, :]))


def sample_action(dist: ActionDist, epsilon: float, rng: np.random.Generator) -> int:
    """Draw an action; if either posterior exceeds epsilon, its argmax is kept
    only with probability epsilon."""
    p = float(effective_key_prob(dist.p_key, epsilon))
    return KEY if rng.random() < p else NONKEY


def rmsprop_step(params: PolicyParams, grads: dict[str, np.ndarray], opt: OptState):
    """One RMSProp ascent step; returns new (params, opt_state)."""
    if set(grads) != set(params.tensors):
        raise ShapeError(f"gradient tensors {sorted(grads)} do not match parameters {sorted(params.tensors)}")
    new_t, new_acc = {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape or opt.acc[name].shape != p.shape:
            raise ShapeError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        acc = opt.rho * opt.acc[name] + (1.0 - opt.rho) * g * g
        new_acc[name] = acc
        new_t[name] = p + opt.lr * g / (np.sqrt(acc) + opt.eps)
    new_params = PolicyParams(params.arch, new_t, params.input_shift.copy(), params.input_scale.copy())
    return new_params, OptState(new_acc, opt.lr, opt.rho, opt.eps, opt.steps + 1)


# -- gradient-structure helpers -------------------------------------------------

def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    return {k: a[k] + scale * b[k] for k in a}


def flatten(tensors: dict[str, np.ndarray], arch: PolicyArch) -> np.ndarray:
    return np.concatenate([tensors[n].ravel() for n in arch.tensor_names()])


def unflatten(vec: np.ndarray, arch: PolicyArch) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for j, (fi, fo) in enumerate(arch.layer_shapes()):
        out[f"W{j}"] = vec[pos:pos + fi * fo].reshape(fi, fo)
        pos += fi * fo
        out[f"b{j}"] = vec[pos:pos + fo].copy()
        pos += fo
    return out


# -- checkpoint I/O -------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_tensor(lines: list, name: str, arr: np.ndarray) -> None:
    arr2 = arr.reshape(1, -1) if arr.ndim == 1 else arr
    lines.append(f"{name},{arr2.shape[0]},{arr2.shape[1]}")
    for row in arr2:
        lines.append(",".join(_fmt(v) for v in row))


def save_checkpoint(path, params: PolicyParams, opt: OptState | None = None) -> None:
    a = params.arch
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}",
             (f"arch: input_dim={a.input_dim} hidden={','.join(map(str, a.hidden_sizes))} "
              f"expert_dim={a.expert_dim} lkd_scale={_fmt(a.lkd_scale)}")]
    if opt is not None:
        lines.append(f"opt: lr={_fmt(opt.lr)} rho={_fmt(opt.rho)} eps={_fmt(opt.eps)} steps={opt.steps}")
    else:
        lines.append("opt: none")
    _write_tensor(lines, "input_shift", params.input_shift)
    _write_tensor(lines, "input_scale", params.input_scale)
    for name in a.tensor_names():
        _write_tensor(lines, name, params.tensors[name])
    if opt is not None:
        for name in a.tensor_names():
            _write_tensor(lines, f"acc:{name}", opt.acc[name])
    Path(path).write_text("\n".join(lines) + "\n")


def _kv(line: str, prefix: str, lineno: int, path) -> dict[str, str]:
    if not line.startswith(prefix):
        raise FormatError(f"expected '{prefix}' line", lineno, path)
    out = {}
    for tok in line[len(prefix):].split():
        k, sep, v = tok.partition("=")
        if not sep:
            raise FormatError(f"malformed token {tok!r}", lineno, path)
        out[k] = v
    return out


def load_checkpoint(path) -> tuple[PolicyParams, OptState | None]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(CKPT_MAGIC):
        raise FormatError(f"missing '{CKPT_MAGIC}' header", 1, path)
    parts = lines[0].split()
    if len(parts) != 2 or parts[1] != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version line {lines[0]!r}", 1, path)
    try:
        kv = _kv(lines[1], "arch:", 2, path)
        arch = PolicyArch(input_dim=int(kv["input_dim"]),
                          hidden_sizes=tuple(int(h) for h in kv["hidden"].split(",")),
                          expert_dim=int(kv["expert_dim"]), lkd_scale=float(kv["lkd_scale"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad arch line: {exc}", 2, path) from None
    if len(lines) < 3:
        raise FormatError("missing 'opt:' line", 3, path)
    opt_kv = None
    if lines[2].strip() != "opt: none":
        opt_kv = _kv(lines[2], "opt:", 3, path)
    tensors = {}
    pos = 3
    while pos < len(lines):
        head = lines[pos].split(",")
        try:
            name, rows, cols = head[0], int(head[1]), int(head[2])
        except (IndexError, ValueError):
            raise FormatError(f"bad tensor header {lines[pos]!r}", pos + 1, path) from None
        if pos + 1 + rows > len(lines):
            raise FormatError(f"truncated tensor {name}", len(lines), path)
        arr = np.empty((rows, cols))
        for r in range(rows):
            cells = lines[pos + 1 + r].split(",")
            if len(cells) != cols:
                raise FormatError(f"tensor {name}: expected {cols} values", pos + 2 + r, path)
            try:
                arr[r] = [float(c) for c in cells]
            except ValueError:
                raise FormatError(f"tensor {name}: unparseable value", pos + 2 + r, path) from None
        tensors[name] = arr
        pos += 1 + rows
    try:
        main = {}
        for n in arch.tensor_names():
            main[n] = tensors[n].reshape(-1) if n.startswith("b") else tensors[n]
        params = PolicyParams(arch, main, tensors["input_shift"], tensors["input_scale"])
        opt = None
        if opt_kv is not None:
            acc = {n: tensors[f"acc:{n}"].reshape(main[n].shape) for n in arch.tensor_names()}
            opt = OptState(acc, lr=float(opt_kv["lr"]), rho=float(opt_kv["rho"]),
                           eps=float(opt_kv["eps"]), steps=int(opt_kv["steps"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete checkpoint: {exc}", None, path) from None
    return params, opt
