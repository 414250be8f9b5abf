"""Affine coupling flows (RNVP and latent-noisy NVP) and signed compositions.

A coupling block keeps the coordinates in its mask fixed and applies an
elementwise affine map to the others,

    z'[free] = z[free] * exp(s(z[mask], u)) + t(z[mask], u),

with closed-form inverse and log-Jacobian ``sum(s)``.  ``s`` and ``t`` are
one-hidden-layer perceptrons (leaky-relu hidden layer, ``tanh`` head for ``s``
and identity head for ``t``).  When the block takes innovation noise ``u``,
it is fed to the hidden layer alongside ``z[mask]``.

All functions accept either plain arrays or tape values for the parameters
and points, see :mod:`metflow.grad`.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import grad as G
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class RnvpBlock:
    """Structure of one coupling block; weights live in a parameter tree.

    Attributes:
        dim: dimension D of the state.
        mask: indices of the conditioning coordinates (kept fixed).
        hidden: hidden width of the ``s`` and ``t`` networks.
        noise_dim: 0 for plain RNVP, otherwise the length of ``u``.
        prefix: parameter-name prefix, e.g. ``"flow/step0/block1/"``.
    """

    dim: int
    mask: tuple
    hidden: int
    noise_dim: int = 0
    prefix: str = ""

    def __post_init__(self):
        mask = tuple(sorted(int(i) for i in self.mask))
        object.__setattr__(self, "mask", mask)
        if len(set(mask)) != len(mask) or any(i < 0 or i >= self.dim for i in mask):
            raise ConfigError(f"invalid mask {mask} for dimension {self.dim}")
        # a one-dimensional state has no proper nonempty mask; the block then
        # conditions on the noise (or on nothing) and acts as an affine map
        if len(mask) == self.dim or (not mask and self.dim > 1):
            raise ConfigError(f"mask {mask} must be a nonempty proper subset of range({self.dim})")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")

    @cached_property
    def cond_idx(self):
        return np.array(self.mask, dtype=np.intp)

    @cached_property
    def free_idx(self):
        return np.array([i for i in range(self.dim) if i not in self.mask], dtype=np.intp)

    @cached_property
    def _selectors(self):
        eye = np.eye(self.dim)
        return eye[self.cond_idx], eye[self.free_idx]

    def param_shapes(self):
        n_in, n_out, h = len(self.mask), len(self.free_idx), self.hidden
        shapes = {}
        for net in ("s", "t"):
            shapes[f"{self.prefix}{net}/W1"] = (h, n_in)
            if self.noise_dim:
                shapes[f"{self.prefix}{net}/U1"] = (h, self.noise_dim)
            shapes[f"{self.prefix}{net}/b1"] = (h,)
            shapes[f"{self.prefix}{net}/W2"] = (n_out, h)
            shapes[f"{self.prefix}{net}/b2"] = (n_out,)
        return shapes

    def init_params(self, rng, out_scale=0.0):
        """Hidden layers get scaled Gaussian weights; output layers start at
        ``out_scale`` (zero gives an identity block)."""
        params = {}
        n_in = len(self.mask) + self.noise_dim
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit("/", 1)[1]
            if leaf in ("W1", "U1"):
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(max(n_in, 1)), size=shape)
            elif leaf == "b1":
                params[name] = np.zeros(shape)
            else:
                params[name] = out_scale * rng.normal(size=shape) if out_scale else np.zeros(shape)
        return params


def _as_batch(z, dim):
    if isinstance(z, G.Var):
        shape = z.shape
    else:
        z = np.asarray(z, dtype=np.float64)
        shape = z.shape
    if len(shape) not in (1, 2) or shape[-1] != dim:
        raise ShapeError(f"expected points of dimension {dim}, got shape {shape}")
    return z, len(shape) == 1


def _columns(z, idx, selector):
    if isinstance(z, G.Var):
        return G.matvec(z, selector)
    return z[..., idx]


def _assemble(block, cond, free):
    sel_c, sel_f = block._selectors
    if isinstance(cond, G.Var) or isinstance(free, G.Var):
        if not block.mask:
            return G.matvec(free, sel_f.T)
        return G.matvec(cond, sel_c.T) + G.matvec(free, sel_f.T)
    out = np.empty(cond.shape[:-1] + (block.dim,))
    out[..., block.cond_idx] = cond
    out[..., block.free_idx] = free
    return out


def _net(block, params, name, x, u):
    p = block.prefix + name
    pre = params[p + "/b1"]
    if x.shape[-1]:
        pre = G.matvec(x, params[p + "/W1"]) + pre
    if block.noise_dim:
        pre = G.matvec(u, params[p + "/U1"]) + pre
    hidden = G.leaky_relu(pre)
    out = G.matvec(hidden, params[p + "/W2"]) + params[p + "/b2"]
    return G.tanh(out) if name == "s" else out


def _conditioner(block, params, cond, u, batch_shape):
    if block.noise_dim:
        if u is None:
            raise ShapeError("latent-noisy block requires innovation noise u")
        u_shape = u.shape if isinstance(u, G.Var) else np.shape(u)
        if u_shape[-1] != block.noise_dim:
            raise ShapeError(f"noise has dimension {u_shape[-1]}, expected {block.noise_dim}")
    elif u is not None:
        raise ShapeError("plain RNVP block does not take noise")
    s = _net(block, params, "s", cond, u)
    t = _net(block, params, "t", cond, u)
    # with an empty mask and shared noise the nets return unbatched vectors
    if isinstance(s, np.ndarray) and s.shape[:-1] != batch_shape:
        s = np.broadcast_to(s, batch_shape + s.shape[-1:])
        t = np.broadcast_to(t, batch_shape + t.shape[-1:])
    return s, t


def block_forward(block, params, z, u=None):
    """Apply one coupling block.

    Args:
        block: block structure.
        params: mapping from parameter names to arrays or tape values.
        z: point of shape ``(D,)`` or batch ``(B, D)``.
        u: innovation noise, required iff ``block.noise_dim > 0``; either one
            vector shared by the batch or one row per point.

    Returns:
        ``(z_new, log_jac)`` with ``log_jac`` of shape ``()`` or ``(B,)``.
    """
    z, single = _as_batch(z, block.dim)
    batch_shape = () if single else (z.shape[0],)
    sel_c, sel_f = block._selectors
    cond = _columns(z, block.cond_idx, sel_c)
    free = _columns(z, block.free_idx, sel_f)
    s, t = _conditioner(block, params, cond, u, batch_shape)
    new_free = free * G.exp(s) + t
    return _assemble(block, cond, new_free), _broadcast_sum(s, batch_shape)


def block_inverse(block, params, z, u=None):
    """Invert :func:`block_forward`; returns the inverse map's log-Jacobian."""
    z, single = _as_batch(z, block.dim)
    batch_shape = () if single else (z.shape[0],)
    sel_c, sel_f = block._selectors
    cond = _columns(z, block.cond_idx, sel_c)
    free = _columns(z, block.free_idx, sel_f)
    s, t = _conditioner(block, params, cond, u, batch_shape)
    old_free = (free - t) * G.exp(-s)
    return _assemble(block, cond, old_free), -_broadcast_sum(s, batch_shape)


def _broadcast_sum(s, batch_shape):
    total = G.sum(s)
    if np.shape(G.value_of(total)) != batch_shape:
        total = total + np.zeros(batch_shape)
    return total


def default_masks(dim, n_blocks):
    """Alternating complementary half masks; empty masks when ``dim == 1``."""
    if dim == 1:
        return [()] * n_blocks
    half = dim // 2
    first, second = tuple(range(half)), tuple(range(half, dim))
    return [first if b % 2 == 0 else second for b in range(n_blocks)]


@dataclass(frozen=True)
class FlowStack:
    """K transforms, each a composition of B coupling blocks.

    With ``shared=False`` every step owns its parameters (deterministic
    setting).  With ``shared=True`` all steps use one parameter set and differ
    only through the innovation noise they are given.
    """

    dim: int
    n_steps: int
    n_blocks: int = 2
    hidden: int = 4
    shared: bool = False
    noisy: bool = False
    prefix: str = "flow/"

    def __post_init__(self):
        if self.n_steps < 1 or self.n_blocks < 1:
            raise ConfigError("a flow stack needs K >= 1 steps of B >= 1 blocks")
        if self.shared and not self.noisy:
            raise ConfigError("shared parameters need innovation noise to distinguish steps")

    @cached_property
    def _blocks(self):
        masks = default_masks(self.dim, self.n_blocks)
        noise_dim = self.dim if self.noisy else 0
        steps = []
        for k in range(1 if self.shared else self.n_steps):
            tag = "shared" if self.shared else f"step{k}"
            steps.append(
                tuple(
                    RnvpBlock(self.dim, masks[b], self.hidden, noise_dim, f"{self.prefix}{tag}/block{b}/")
                    for b in range(self.n_blocks)
                )
            )
        return tuple(steps)

    def blocks(self, k):
        if not 0 <= k < self.n_steps and not self.shared:
            raise IndexError(f"step {k} out of range for K={self.n_steps}")
        return self._blocks[0 if self.shared else k]

    def param_shapes(self):
        shapes = {}
        for step in self._blocks:
            for block in step:
                shapes.update(block.param_shapes())
        return shapes

    def init_params(self, rng, out_scale=0.0):
        params = {}
        for step in self._blocks:
            for block in step:
                params.update(block.init_params(rng, out_scale))
        return params

    def step_forward(self, params, k, z, u=None):
        """``T_k(z)`` and its log-Jacobian."""
        log_jac = 0.0
        for block in self.blocks(k):
            z, lj = block_forward(block, params, z, u)
            log_jac = lj + log_jac
        return z, log_jac

    def step_inverse(self, params, k, z, u=None):
        """``T_k^{-1}(z)`` and the inverse map's log-Jacobian."""
        log_jac = 0.0
        for block in reversed(self.blocks(k)):
            z, lj = block_inverse(block, params, z, u)
            log_jac = lj + log_jac
        return z, log_jac

    def step(self, params, k, z, u, direction):
        if direction == 1:
            return self.step_forward(params, k, z, u)
        if direction == -1:
            return self.step_inverse(params, k, z, u)
        raise ValueError(f"direction must be +1 or -1, got {direction}")


def _rows(x, idx):
    if x is None:
        return None
    if isinstance(x, G.Var):
        return G.take(x, idx) if x.ndim >= 1 else x
    x = np.asarray(x)
    return x[idx]


def signed_step(stack, params, k, z, u, direction, active=None):
    """Apply ``T_k^{direction}`` row by row on a batch.

    Args:
        z: batch ``(B, D)``.
        u: noise for this step: ``None``, one shared vector ``(D,)`` or rows
            ``(B, D)``.
        direction: ``(B,)`` array of ±1.
        active: optional ``(B,)`` boolean; inactive rows are left unchanged
            with zero log-Jacobian.

    Returns:
        ``(z_new, log_jac)`` with signed log-Jacobians ``log J_{T^v}(z)``.
    """
    direction = np.asarray(direction)
    n = direction.shape[0]
    if active is None:
        active = np.ones(n, dtype=bool)
    per_row_u = u is not None and np.ndim(G.value_of(u)) == 2
    parts_z, parts_j, idxs = [], [], []
    for sign in (1, -1):
        idx = np.flatnonzero(active & (direction == sign))
        if idx.size == 0:
            continue
        u_rows = _rows(u, idx) if per_row_u else u
        zs, lj = stack.step(params, k, _rows(z, idx), u_rows, sign)
        parts_z.append(zs)
        parts_j.append(lj)
        idxs.append(idx)
    idle = np.flatnonzero(~active)
    if idle.size:
        parts_z.append(_rows(z, idle))
        parts_j.append(np.zeros(idle.size))
        idxs.append(idle)
    return G.stitch(parts_z, idxs, n), G.stitch(parts_j, idxs, n)


def stack_apply(stack, params, z0, a, v, u=None):
    """Run ``z_k = T_k^{v_k a_k}(z_{k-1})`` for k = 1..K.

    Args:
        z0: point ``(D,)`` or batch ``(B, D)``.
        a: accept bits, shape ``(K,)`` or ``(B, K)``.
        v: directions in {-1, +1}, same shape as ``a``.
        u: per-step noise: ``None`` or an array whose first axis is K.

    Returns:
        ``(z_K, log_jac, states)``: the endpoint, the summed signed
        log-Jacobians of the accepted steps, and the list ``[z_0, ..., z_K]``.
    """
    z0_val = G.value_of(z0)
    single = np.ndim(z0_val) == 1
    z = z0
    if single:
        z = np.asarray(z0_val)[None, :] if not isinstance(z0, G.Var) else z0
    if isinstance(z, G.Var) and z.ndim == 1:
        raise ShapeError("tape inputs to stack_apply must be batched")
    n = np.shape(G.value_of(z))[0]
    a = np.broadcast_to(np.atleast_2d(np.asarray(a, dtype=int)), (n, stack.n_steps))
    v = np.broadcast_to(np.atleast_2d(np.asarray(v, dtype=int)), (n, stack.n_steps))
    if a.shape[1] != stack.n_steps or v.shape[1] != stack.n_steps:
        raise ShapeError(f"a and v must have length K={stack.n_steps}")
    if not np.all(np.isin(v, (-1, 1))) or not np.all(np.isin(a, (0, 1))):
        raise ValueError("a must be 0/1 and v must be ±1")
    states = [z]
    log_jac = np.zeros(n)
    for k in range(stack.n_steps):
        u_k = None if u is None else u[k]
        z, lj = signed_step(stack, params, k, z, u_k, v[:, k], active=a[:, k] == 1)
        log_jac = log_jac + lj
        states.append(z)
    if single:
        states = [s[0] if not isinstance(s, G.Var) else s for s in states]
        return states[-1], (log_jac[0] if not isinstance(log_jac, G.Var) else log_jac), states
    return z, log_jac, states
