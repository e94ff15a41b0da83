"""Optimizer, parameter EMA, toy image datasets, sample metrics and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .flow import InterpolantSchedule, cfm_loss
from .network import NetworkConfig, VectorFieldNet, init_params, param_count
from .sampler import SamplerConfig, integrate_batched

GENERATORS = ("gauss_blobs", "two_moons_image", "checker_image")
CSV_COLUMNS = ("step", "loss", "ema_loss", "energy_distance", "mean_gap", "cov_gap", "nfe", "wallclock_s")


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Bias-corrected AdamW with decoupled weight decay; updates ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.999

    @classmethod
    def from_params(cls, params, decay=0.999):
        return cls({k: p.copy() for k, p in params.items()}, decay)


def ema_update(ema: EmaState, params: dict[str, np.ndarray], decay: float | None = None) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params`` in place."""
    beta = ema.decay if decay is None else decay
    for k, s in ema.shadow.items():
        if beta == 0.0:
            s[...] = params[k]
        elif beta != 1.0:
            s *= beta
            s += (1.0 - beta) * params[k]
    return ema


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class ToyDataset:
    generator: str = "gauss_blobs"
    height: int = 8
    width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.height < 2 or self.width < 2:
            raise ValueError("grid must be at least 2x2")


def _bump(rows, cols, cy, cx, width):
    r2 = (rows[None] - cy[:, None, None]) ** 2 + (cols[None] - cx[:, None, None]) ** 2
    return np.exp(-r2 / (2.0 * width[:, None, None] ** 2))


def _two_moons(rng, n, noise=0.08):
    upper = rng.random(n) < 0.5
    ang = rng.uniform(0.0, np.pi, n)
    x = np.where(upper, np.cos(ang), 1.0 - np.cos(ang))
    y = np.where(upper, np.sin(ang), 0.5 - np.sin(ang))
    pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
    # map the bounding box [-1.25, 2.25] x [-0.75, 1.25] onto the unit square
    return (pts - [-1.25, -0.75]) / [3.5, 2.0]


def generate_dataset(ds: ToyDataset, n: int, seed: int | None = None) -> np.ndarray:
    """``n`` flattened images in ``[-1, 1]``, shape (n, height * width), float32."""
    rng = np.random.default_rng(ds.seed if seed is None else seed)
    h, w = ds.height, ds.width
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    if ds.generator == "gauss_blobs":
        cy = rng.uniform(0.0, h - 1.0, n)
        cx = rng.uniform(0.0, w - 1.0, n)
        width = rng.uniform(0.6, 0.2 * min(h, w) + 0.6, n)
        img = 2.0 * _bump(rows, cols, cy, cx, width) - 1.0
    elif ds.generator == "two_moons_image":
        p = np.clip(_two_moons(rng, n), 0.0, 1.0)
        img = 2.0 * _bump(rows, cols, p[:, 1] * (h - 1), p[:, 0] * (w - 1), np.full(n, 0.12 * min(h, w))) - 1.0
    else:
        cell = rng.choice([1, 2, 4], n)
        oy, ox = rng.integers(0, 4, n), rng.integers(0, 4, n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        parity = ((rows[None] + oy[:, None, None]) // cell[:, None, None]
                  + (cols[None] + ox[:, None, None]) // cell[:, None, None]) % 2
        img = sign[:, None, None] * (2.0 * parity - 1.0)
    return np.clip(img, -1.0, 1.0).reshape(n, h * w).astype(np.float32)


# ---------------------------------------------------------------- metrics


def energy_distance(x, y) -> float:
    """U-statistic estimate of ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("need at least two samples per set")
    return float(2.0 * cdist(x, y).mean() - pdist(x).mean() - pdist(y).mean())


def eval_metrics(generated, held_out) -> dict[str, float]:
    g, d = np.asarray(generated, dtype=np.float64), np.asarray(held_out, dtype=np.float64)
    return {
        "energy_distance": energy_distance(g, d),
        "mean_gap": float(np.linalg.norm(g.mean(0) - d.mean(0))),
        "cov_gap": float(np.linalg.norm(np.cov(g, rowvar=False) - np.cov(d, rowvar=False))),
    }


# ---------------------------------------------------------------- loop


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    grad_clip: float = 0.0  # 0 disables clipping
    log_every: int = 100
    eval_every: int = 0  # 0: sample-based metrics only at the final step
    loss_window: int = 100
    n_train: int = 20000
    n_heldout: int = 2048
    n_eval: int = 512
    n_ema_loss: int = 256
    sample_batch: int = 128
    log_wallclock: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.log_every < 1 or self.loss_window < 1:
            raise ValueError("log_every and loss_window must be >= 1")


@dataclass
class ExperimentResult:
    rows: list[dict] = field(default_factory=list)
    losses: np.ndarray | None = None
    final: dict = field(default_factory=dict)
    params: dict | None = None
    ema: dict | None = None
    samples: np.ndarray | None = None
    n_params: int = 0
    wallclock_s: float = 0.0

    def smoothed_loss(self, window: int, where: str) -> float:
        seg = self.losses[:window] if where == "initial" else self.losses[-window:]
        return float(np.mean(seg))


def _streams(seed):
    init, train, evals = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(train), evals


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def format_rows(rows) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def train(net_cfg: NetworkConfig, trainer: TrainerConfig, data: ToyDataset, sampler: SamplerConfig,
          schedule: InterpolantSchedule, eps_t: float, seed: int, progress=None) -> ExperimentResult:
    """Train a vector-field network with CFM and evaluate the EMA weights.

    Everything random is drawn from streams derived from ``seed`` (init,
    minibatches and paths, evaluation noise) and from ``data.seed``
    (training and held-out images), so runs that differ only in the state
    chain flag see the same init, batches and evaluation noise.
    """
    if (data.height, data.width) != (net_cfg.height, net_cfg.width):
        raise ValueError("dataset grid and network grid differ")
    rng_init, rng_train, eval_seq = _streams(seed)
    train_set = generate_dataset(data, trainer.n_train, seed=data.seed)
    held_out = generate_dataset(data, trainer.n_heldout, seed=data.seed + 1_000_003)
    eval_rng = np.random.default_rng(eval_seq)
    eval_noise = eval_rng.standard_normal((trainer.n_eval, net_cfg.seq_len)).astype(np.float32)
    ema_batch = held_out[: trainer.n_ema_loss]
    ema_path_seed = int(eval_rng.integers(2**63))

    params = init_params(net_cfg, rng_init, dtype=np.float32)
    net = VectorFieldNet(net_cfg, params)
    opt = OptimState.zeros_like(params, lr=trainer.lr, betas=(trainer.beta1, trainer.beta2), eps=trainer.adam_eps,
                                weight_decay=trainer.weight_decay)
    ema = EmaState.from_params(params, trainer.ema_decay)
    losses = np.empty(trainer.steps)
    result = ExperimentResult(n_params=param_count(params))
    t_start = time.perf_counter()

    def evaluate(step, full):
        ema_net = VectorFieldNet(net_cfg, ema.shadow)
        row = {"step": step, "loss": float(np.mean(losses[max(0, step - trainer.loss_window):step]))}
        row["ema_loss"], _ = cfm_loss(ema_batch, ema_net, np.random.default_rng(ema_path_seed), schedule, eps_t,
                                      with_grad=False)
        if full:
            out = integrate_batched(ema_net, eval_noise, sampler, trainer.sample_batch)
            if not np.all(np.isfinite(out.x)):
                raise FloatingPointError(f"non-finite samples at step {step}")
            row.update(eval_metrics(out.x, held_out))
            row["nfe"] = out.nfe
            result.samples = out.x
        if trainer.log_wallclock:
            row["wallclock_s"] = time.perf_counter() - t_start
        return row

    for step in range(1, trainer.steps + 1):
        batch = train_set[rng_train.integers(0, trainer.n_train, trainer.batch_size)]
        loss, grads = cfm_loss(batch, net, rng_train, schedule, eps_t)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step} (seed {seed})")
        losses[step - 1] = loss
        if trainer.grad_clip:
            clip_global_norm(grads, trainer.grad_clip)
        try:
            adamw_step(params, grads, opt)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} at step {step} (seed {seed})") from None
        ema_update(ema, params)
        last = step == trainer.steps
        full = last or (trainer.eval_every and step % trainer.eval_every == 0)
        if last or step % trainer.log_every == 0:
            result.rows.append(evaluate(step, full))
            if progress:
                progress(result.rows[-1])

    result.losses = losses
    result.params = params
    result.ema = ema.shadow
    result.final = dict(result.rows[-1])
    result.wallclock_s = time.perf_counter() - t_start
    return result
