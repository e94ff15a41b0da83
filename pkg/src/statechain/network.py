"""Stack of selective-scan blocks with an optional terminal-state chain.

Per block (``x`` is the residual stream, raster token order)::

    s      = x + t_embed
    xn     = RMSNorm(s)
    u, z   = xn @ w_in, xn @ w_z
    u_p    = permute(u)                      # block's scan rule
    y_p, h_T = scan(heads(u_p), h0)          # y_p includes d_skip * u_p
    y      = unpermute(y_p) * silu(z)
    x_out  = x + y @ w_out

With the chain enabled, block ``l`` starts from ``boundary_map(h_T of block
l-1)``; block 0 always starts from zero.  Gradients are derived by hand;
in the reverse sweep the adjoint of block ``l``'s initial state becomes
the terminal-state seed of block ``l-1``.

Parameters live in a flat ``dict[str, ndarray]`` (``"blocks.3.w_in"`` etc.).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fused import discretize, fused_scan_backward, fused_scan_forward
from .orders import RULES, ScanOrder, assign_orders, make_order
from .scan import READOUTS, AdjointSeed, BoundaryState, scan_backward, scan_forward_prefix, scan_forward_seq
from .ssm import (
    DELTA_MAX,
    DELTA_MIN,
    SsmParams,
    head_projections,
    selective_heads,
    selective_heads_backward,
    sigmoid,
    step_size_grad,
)

SSM_KEYS = ("a_log", "d_skip", "w_b", "w_c", "w_delta", "b_delta")
BOUNDARY_MAPS = ("identity",)
SCAN_IMPLS = ("fused", "reference")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    d_inner: int
    d_state: int
    readout: str = "pre"
    rule: str = "row_serpentine"

    def __post_init__(self):
        if min(self.d_model, self.d_inner, self.d_state) < 1:
            raise ValueError("block dimensions must be >= 1")
        if self.rule not in RULES:
            raise ValueError(f"unknown scan rule {self.rule!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")


@dataclass
class NetworkConfig:
    depth: int = 6
    d_model: int = 64
    expand: int = 2
    d_state: int = 16
    height: int = 8
    width: int = 8
    in_channels: int = 1
    arcee_enabled: bool = False
    boundary_map: str = "identity"
    k: int = 1
    state_readout: str = "pre"
    time_freq_dim: int = 32
    time_hidden: int = 64
    delta_min: float = DELTA_MIN
    delta_max: float = DELTA_MAX
    scan_impl: str = "fused"
    chunk: int = 16
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.boundary_map not in BOUNDARY_MAPS:
            raise ValueError(f"boundary_map must be one of {BOUNDARY_MAPS}")
        if self.scan_impl not in SCAN_IMPLS:
            raise ValueError(f"scan_impl must be one of {SCAN_IMPLS}")
        if self.time_freq_dim % 2:
            raise ValueError("time_freq_dim must be even")
        if self.state_readout not in READOUTS:
            raise ValueError(f"state_readout must be one of {READOUTS}")
        assign_orders(self.depth, self.k)  # validates k

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def seq_len(self) -> int:
        return self.height * self.width

    @property
    def blocks(self) -> list[BlockConfig]:
        return [BlockConfig(self.d_model, self.d_inner, self.d_state, self.state_readout, rule)
                for rule in assign_orders(self.depth, self.k)]


def boundary_map(name, h):
    if name == "identity":
        return h
    raise ValueError(name)


def boundary_map_vjp(name, h, g):
    """``J_T^T g`` for the boundary map ``name`` evaluated at ``h``."""
    if name == "identity":
        return g
    raise ValueError(name)


# ---------------------------------------------------------------- init


def init_params(cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    D, Di, N, C = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.in_channels
    F, H = cfg.time_freq_dim, cfg.time_hidden

    def unif(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, shape)

    p = {
        "embed.w": unif(C, (C, D)),
        "embed.b": np.zeros(D),
        "pos": 0.02 * rng.standard_normal((cfg.seq_len, D)),
        "time.w1": unif(F, (F, H)),
        "time.b1": np.zeros(H),
        "time.w2": unif(H, (H, D)),
        "time.b2": np.zeros(D),
    }
    for i in range(cfg.depth):
        ssm = SsmParams.init(Di, N, rng, delta_min=cfg.delta_min, delta_max=cfg.delta_max)
        p[f"blocks.{i}.norm"] = np.ones(D)
        p[f"blocks.{i}.w_in"] = unif(D, (D, Di))
        p[f"blocks.{i}.w_z"] = unif(D, (D, Di))
        for k in SSM_KEYS:
            p[f"blocks.{i}.{k}"] = getattr(ssm, k)
        p[f"blocks.{i}.w_out"] = unif(Di, (Di, D))
    p["final.norm"] = np.ones(D)
    p["head.w"] = unif(D, (D, C))
    p["head.b"] = np.zeros(C)
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def block_params(params, i):
    prefix = f"blocks.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _ssm(bp, cfg_net_or_limits):
    lo, hi = cfg_net_or_limits
    return SsmParams(**{k: bp[k] for k in SSM_KEYS}, delta_min=lo, delta_max=hi)


# ---------------------------------------------------------------- layers


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rmsnorm(x, g, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xh = x * r
    return xh * g, (xh, r)


def rmsnorm_backward(g_out, g, cache):
    xh, r = cache
    g_g = np.sum(g_out * xh, axis=tuple(range(g_out.ndim - 1)))
    g_xh = g_out * g
    g_x = r * (g_xh - xh * np.mean(g_xh * xh, axis=-1, keepdims=True))
    return g_x, g_g


def _sum_rows(a):
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def _outer(x, g):
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def time_features(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


# ---------------------------------------------------------------- block


@dataclass
class BlockCache:
    x: np.ndarray
    norm: tuple
    xn: np.ndarray
    u_p: np.ndarray
    z: np.ndarray
    y: np.ndarray
    h0: np.ndarray
    order: ScanOrder
    scan: dict = field(default_factory=dict)


def block_forward(x, t_embed, h0, bp, cfg: BlockConfig, *, norm_eps=1e-5, delta_limits=(DELTA_MIN, DELTA_MAX),
                  scan_impl="fused", chunk=16, order: ScanOrder | None = None):
    """One block. ``x`` is (B, T, d_model), ``t_embed`` (B, d_model), ``h0`` (B, d_inner, d_state) or None.

    Returns ``(x_out, h_terminal, cache)``; ``h_terminal`` is the raw scan
    state, untouched by the output gate.  Without ``order`` the tokens are
    treated as a single grid row.
    """
    B, T, _ = x.shape
    if order is None:
        order = make_order(cfg.rule, 1, T)
    if h0 is None:
        h0 = np.zeros((B, cfg.d_inner, cfg.d_state), dtype=x.dtype)
    s = x + t_embed[:, None, :]
    xn, ncache = rmsnorm(s, bp["norm"], norm_eps)
    u = xn @ bp["w_in"]
    z = xn @ bp["w_z"]
    u_p = np.ascontiguousarray(u[:, order.perm])
    ssm = _ssm(bp, delta_limits)
    scan_cache = {}
    if scan_impl == "fused":
        b, c, delta, pre = head_projections(u_p, ssm)
        a = ssm.a
        a_bar, coef = discretize(delta, a)
        y_p, h_t, states = fused_scan_forward(a_bar, coef, b, c, u_p, h0, cfg.readout == "post")
        y_p = y_p + ssm.d_skip * u_p
        scan_cache.update(b=b, c=c, delta=delta, pre=pre, a=a, a_bar=a_bar, coef=coef, states=states)
    else:
        inputs = selective_heads(u_p, ssm)
        out = scan_forward_prefix(inputs, BoundaryState(h0), chunk, cfg.readout)
        y_p, h_t = out.y, out.h_terminal.h
        scan_cache.update(inputs=inputs, checkpoints=out.checkpoints)
    y = y_p[:, order.inv_perm]
    x_out = x + (y * silu(z)) @ bp["w_out"]
    cache = BlockCache(x=x, norm=ncache, xn=xn, u_p=u_p, z=z, y=y, h0=h0, order=order, scan=scan_cache)
    return x_out, h_t, cache


def block_backward(g_out, g_h_terminal, cache: BlockCache, bp, cfg: BlockConfig, *, delta_limits=(DELTA_MIN, DELTA_MAX),
                   scan_impl="fused", chunk=16):
    """Reverse of :func:`block_forward`.

    ``g_h_terminal`` seeds the scan's terminal adjoint (zero or None when no
    later block reads the state).  Returns ``(g_x, g_t_embed, g_h0, grads)``.
    """
    order, u_p, z, y = cache.order, cache.u_p, cache.z, cache.y
    ssm = _ssm(bp, delta_limits)
    grads = {}
    gate = silu(z)
    o = y * gate
    grads["w_out"] = _outer(o, g_out)
    g_o = g_out @ bp["w_out"].T
    g_y = g_o * gate
    g_z = g_o * y * silu_grad(z)
    g_y_p = np.ascontiguousarray(g_y[:, order.perm])
    if g_h_terminal is None:
        g_h_terminal = np.zeros_like(cache.h0)

    if scan_impl == "fused":
        sc = cache.scan
        g_u_s, g_delta, g_a, g_b, g_c, g_h0 = fused_scan_backward(
            sc["a_bar"], sc["coef"], sc["delta"], sc["a"], sc["b"], sc["c"], u_p, sc["states"],
            g_y_p, np.ascontiguousarray(g_h_terminal, dtype=u_p.dtype), cfg.readout == "post")
        grads["d_skip"] = _sum_rows(g_y_p * u_p)
        g_pre = step_size_grad(g_delta, sc["pre"], ssm)
        grads["a_log"] = g_a * sc["a"]
        grads["w_b"] = _outer(u_p, g_b)
        grads["w_c"] = _outer(u_p, g_c)
        grads["w_delta"] = _outer(u_p, g_pre)
        grads["b_delta"] = _sum_rows(g_pre)
        g_u_p = (g_y_p * ssm.d_skip + g_u_s + g_b @ ssm.w_b.T + g_c @ ssm.w_c.T
                 + g_pre @ ssm.w_delta.T)
    else:
        inputs = cache.scan["inputs"]
        sg = scan_backward(inputs, BoundaryState(cache.h0), g_y_p, AdjointSeed(g_h_terminal), cfg.readout,
                           checkpoints=cache.scan["checkpoints"], chunk=chunk)
        hg, g_u_p = selective_heads_backward(u_p, ssm, sg.g_a_bar, sg.g_b_bar_u, sg.g_c, g_u=sg.g_u)
        grads.update(hg)
        grads["d_skip"] = sg.g_d_skip
        g_h0 = sg.g_h0

    g_u = g_u_p[:, order.inv_perm]
    grads["w_in"] = _outer(cache.xn, g_u)
    grads["w_z"] = _outer(cache.xn, g_z)
    g_xn = g_u @ bp["w_in"].T + g_z @ bp["w_z"].T
    g_s, grads["norm"] = rmsnorm_backward(g_xn, bp["norm"], cache.norm)
    g_x = g_out + g_s
    g_temb = g_s.sum(axis=1)
    return g_x, g_temb, g_h0, grads


# ---------------------------------------------------------------- chain


@dataclass
class ChainState:
    """Initial and terminal states of every block from the last forward pass."""

    h0: list = field(default_factory=list)
    h_terminal: list = field(default_factory=list)
    seeds: list = field(default_factory=list)  # terminal adjoint seed per block, filled by backward
    g_h0: list = field(default_factory=list)


def _orders(cfg: NetworkConfig):
    return [make_order(b.rule, cfg.height, cfg.width) for b in cfg.blocks]


def chain_forward(x, t, params, cfg: NetworkConfig):
    """Vector-field prediction for tokens ``x`` (B, T, in_channels) at times ``t``.

    Returns ``(v, cache)``; ``cache["chain"]`` is the :class:`ChainState`.
    """
    x = np.asarray(x)
    dtype = params["embed.w"].dtype
    x = x.astype(dtype, copy=False)
    if x.ndim == 2:
        x = x[None]
    B, T, C = x.shape
    if T != cfg.seq_len or C != cfg.in_channels:
        raise ValueError(f"expected tokens (B, {cfg.seq_len}, {cfg.in_channels}), got {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    feats = time_features(t, cfg.time_freq_dim).astype(dtype)
    th = feats @ params["time.w1"] + params["time.b1"]
    temb = silu(th) @ params["time.w2"] + params["time.b2"]
    h = x @ params["embed.w"] + params["embed.b"] + params["pos"]

    chain = ChainState()
    caches = []
    boundary = None
    for i, (bcfg, order) in enumerate(zip(cfg.blocks, _orders(cfg))):
        h0 = boundary_map(cfg.boundary_map, boundary) if (cfg.arcee_enabled and boundary is not None) else None
        h, h_t, bc = block_forward(h, temb, h0, block_params(params, i), bcfg, norm_eps=cfg.norm_eps,
                                   delta_limits=(cfg.delta_min, cfg.delta_max), scan_impl=cfg.scan_impl,
                                   chunk=cfg.chunk, order=order)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activations after block {i}")
        chain.h0.append(bc.h0)
        chain.h_terminal.append(h_t)
        caches.append(bc)
        if cfg.arcee_enabled:
            boundary = h_t
    xn, ncache = rmsnorm(h, params["final.norm"], cfg.norm_eps)
    v = xn @ params["head.w"] + params["head.b"]
    cache = dict(x=x, feats=feats, th=th, xn=xn, norm=ncache, blocks=caches, chain=chain)
    return v, cache


def chain_backward(g_v, cache, params, cfg: NetworkConfig):
    """Gradients of ``<g_v, v>`` for all parameters; returns ``(grads, g_x)``.

    Walking blocks in reverse, block ``l-1`` receives ``J_T^T g_h0(l)`` as its
    terminal seed when the chain is enabled, and zero otherwise.
    """
    g_v = np.asarray(g_v, dtype=params["embed.w"].dtype)
    grads = {}
    grads["head.w"] = _outer(cache["xn"], g_v)
    grads["head.b"] = _sum_rows(g_v)
    g_h, grads["final.norm"] = rmsnorm_backward(g_v @ params["head.w"].T, params["final.norm"], cache["norm"])

    chain: ChainState = cache["chain"]
    L = cfg.depth
    chain.seeds = [None] * L
    chain.g_h0 = [None] * L
    g_temb = np.zeros((g_h.shape[0], cfg.d_model), dtype=g_h.dtype)
    seed = np.zeros_like(chain.h_terminal[-1])
    for i in range(L - 1, -1, -1):
        chain.seeds[i] = seed
        g_h, g_te, g_h0, bgrads = block_backward(g_h, seed, cache["blocks"][i], block_params(params, i), cfg.blocks[i],
                                                 delta_limits=(cfg.delta_min, cfg.delta_max),
                                                 scan_impl=cfg.scan_impl, chunk=cfg.chunk)
        if not (np.all(np.isfinite(g_h)) and np.all(np.isfinite(g_h0))):
            raise FloatingPointError(f"non-finite gradients in block {i}")
        chain.g_h0[i] = g_h0
        g_temb += g_te
        for k, v in bgrads.items():
            grads[f"blocks.{i}.{k}"] = v
        if cfg.arcee_enabled and i > 0:
            seed = boundary_map_vjp(cfg.boundary_map, chain.h_terminal[i - 1], g_h0)
        else:
            seed = np.zeros_like(g_h0)

    grads["pos"] = g_h.sum(axis=0)
    grads["embed.w"] = _outer(cache["x"], g_h)
    grads["embed.b"] = _sum_rows(g_h)
    g_x = g_h @ params["embed.w"].T
    grads["time.w2"] = _outer(silu(cache["th"]), g_temb)
    grads["time.b2"] = _sum_rows(g_temb)
    g_th = (g_temb @ params["time.w2"].T) * silu_grad(cache["th"])
    grads["time.w1"] = _outer(cache["feats"], g_th)
    grads["time.b1"] = _sum_rows(g_th)
    return {k: np.asarray(grads[k], dtype=params[k].dtype) for k in params}, g_x


class VectorFieldNet:
    """Callable wrapper: flat data vectors (B, H*W*C) in, vector field out."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    def _tokens(self, x):
        x = np.asarray(x)
        return x.reshape(x.shape[0], self.cfg.seq_len, self.cfg.in_channels)

    def forward(self, x, t):
        v, cache = chain_forward(self._tokens(x), t, self.params, self.cfg)
        return v.reshape(np.shape(x)), cache

    def backward(self, g_v, cache):
        grads, _ = chain_backward(self._tokens(g_v), cache, self.params, self.cfg)
        return grads

    def __call__(self, x, t):
        return self.forward(x, t)[0]

    @property
    def n_params(self) -> int:
        return param_count(self.params)


def cross_block_rank_probe(cfg: NetworkConfig, rng: np.random.Generator, src=0, dst=None, eps=1e-3, rtol=1e-7):
    """Numerical rank of d(scan output of block ``dst``)/d(scan input of block ``src``).

    Blocks after ``src`` get their own fixed random scan inputs, so ``dst``
    sees ``src`` only through the terminal-state handoff.  With the
    selection frozen by those inputs, everything downstream of ``h_T`` of
    block ``src`` is affine in that state, so central differences stay in
    the range of the true Jacobian and a fairly large ``eps`` is safe.
    Counts float64 singular values above ``rtol * sigma_max`` and returns
    ``(rank, singular_values)``.
    """
    dst = cfg.depth - 1 if dst is None else dst
    if not 0 <= src < dst < cfg.depth:
        raise ValueError("need 0 <= src < dst < depth")
    params = init_params(cfg, rng, dtype=np.float64)
    T, Di = cfg.seq_len, cfg.d_inner
    us = rng.standard_normal((cfg.depth, T, Di))
    ssms = [_ssm(block_params(params, j), (cfg.delta_min, cfg.delta_max)) for j in range(cfg.depth)]
    frozen = {j: selective_heads(us[j], ssms[j]) for j in range(src + 1, dst + 1)}

    def f(u_src):
        inp = selective_heads(u_src, ssms[src])
        h = scan_forward_seq(inp, BoundaryState.zeros(inp), readout=cfg.state_readout).h_terminal.h
        for j in range(src + 1, dst + 1):
            h0 = BoundaryState(boundary_map(cfg.boundary_map, h), j) if cfg.arcee_enabled else BoundaryState.zeros(frozen[j])
            out = scan_forward_seq(frozen[j], h0, readout=cfg.state_readout)
            h = out.h_terminal.h
        return out.y.reshape(-1)

    base = us[src].reshape(-1)
    cols = []
    for k in range(base.size):
        e = np.zeros_like(base)
        e[k] = eps
        cols.append((f((base + e).reshape(T, Di)) - f((base - e).reshape(T, Di))) / (2 * eps))
    sv = np.linalg.svd(np.stack(cols, axis=1), compute_uv=False)
    if sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > rtol * sv[0])), sv
