"""Joint training: contrastive density gradient, Langevin sampler, Adam.

The loss has three parts: soft-target cross-entropy for the classifier,
an estimated negative log-likelihood for the energy head, and the
head-tying penalty.  The density term's gradient is intractable (it hides
a normalizer), so it is estimated contrastively from sampler negatives:
grad E at the data minus grad E at the negatives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import hybrid_model as hm
from .diffcore import GradientMap, Tensor, backward, forward
from .hybrid_model import RAW_DIAG_FLOOR, HybridModel


class TrainingDiverged(RuntimeError):
    """Every sampler chain went non-finite within one epoch."""


@dataclass
class SgldConfig:
    """Langevin sampler settings.

    The update is x <- x - (step_size / 2) * dE/dx + noise, with noise drawn
    N(0, noise_variance) per element.  `noise_variance` defaults to the step
    size (the step-size symbol doubles as the noise variance in the update
    rule; set it explicitly for the std-deviation reading).  `grad_clip`
    bounds each element of dE/dx; None disables clipping.
    """

    n_steps: int = 20
    step_size: float = 1.0
    noise_variance: float | None = None
    init_low: float = -1.0
    init_high: float = 1.0
    reinit_prob: float = 0.05
    grad_clip: float | None = 0.01

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not self.init_low < self.init_high:
            raise ValueError("init_low must be below init_high")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ValueError("reinit_prob must lie in [0, 1]")
        if self.noise_variance is None:
            self.noise_variance = self.step_size


class ReplayBuffer:
    """Ring of persisted sampler end-states used to start new chains.

    Persisting chains lets a 20-step sampler track the model distribution
    across updates instead of re-mixing from scratch each batch.
    """

    def __init__(self, capacity: int = 1000, seed: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.seed = seed  # provenance only; draws use the training rng
        self._storage: np.ndarray | None = None
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    def push(self, samples: np.ndarray) -> None:
        if self._storage is None:
            self._storage = np.empty((self.capacity, samples.shape[1]))
        for row in samples:
            self._storage[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def draw(self, k: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self._size, size=k)
        return self._storage[idx].copy()

    def peek(self, idx: np.ndarray) -> np.ndarray:
        return self._storage[idx].copy()


@dataclass
class LossBreakdown:
    ce_term: float
    nll_term: float
    tie_term: float
    total: float
    lam: float


class AdamState:
    """Bias-corrected first/second moment accumulators for a parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.skipped_steps = 0


def _uniform_init(cfg: SgldConfig, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(cfg.init_low, cfg.init_high, size=(n, dim))


def sgld_sample(model: HybridModel, cfg: SgldConfig, buffer: ReplayBuffer,
                batch: int, rng: np.random.Generator) -> tuple[Tensor, int]:
    """Draw a batch of negatives by n_steps of noisy gradient descent on the energy.

    Chains start from the replay buffer (probability 1 - reinit_prob) or fresh
    uniform noise; finished chains are written back.  Returns the samples and
    the number of chains that went non-finite and were restarted.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    dim = model.input_dim
    fresh = rng.random(batch) < cfg.reinit_prob
    reuse_idx = rng.integers(0, max(len(buffer), 1), size=batch)  # drawn unconditionally for determinism
    x = _uniform_init(cfg, batch, dim, rng)
    if len(buffer) > 0:
        reused = ~fresh
        x[reused] = buffer.peek(reuse_idx[reused])
    ever_bad = np.zeros(batch, dtype=bool)
    noise_std = np.sqrt(cfg.noise_variance)
    per_chain: dict[str, np.ndarray] = {}

    def energy_sum(t: Tensor) -> Tensor:
        e = hm.total_energy_t(model, t)
        per_chain["e"] = e.data
        return e.sum()

    for _ in range(cfg.n_steps):
        leaf = Tensor(x, requires_grad=True)
        _, tape = forward(energy_sum, [leaf], wrt=[leaf])
        grad = backward(tape, Tensor(1.0))[leaf]
        bad = ~(np.isfinite(per_chain["e"]) & np.isfinite(grad).all(axis=1))
        if bad.any():
            ever_bad |= bad
            x[bad] = _uniform_init(cfg, int(bad.sum()), dim, rng)
            grad[bad] = 0.0
        if cfg.grad_clip is not None:
            grad = np.clip(grad, -cfg.grad_clip, cfg.grad_clip)
        noise = rng.normal(0.0, noise_std, size=x.shape) if cfg.noise_variance > 0 else 0.0
        x = x - 0.5 * cfg.step_size * grad + noise
    buffer.push(x)
    return Tensor(x), int(ever_bad.sum())


def nll_gradient(model: HybridModel, data_batch: Tensor, negatives: Tensor) -> GradientMap:
    """Estimated gradient of the average negative log-density over the batch.

    grad = mean over data of dE/dtheta - mean over negatives of dE/dtheta;
    identical batches cancel exactly.
    """
    data_arr = data_batch.data if isinstance(data_batch, Tensor) else np.asarray(data_batch)
    neg_arr = negatives.data if isinstance(negatives, Tensor) else np.asarray(negatives)
    if data_arr.size == 0 or neg_arr.size == 0:
        raise ValueError("nll_gradient needs non-empty data and negative batches")

    def surrogate():
        e_data = hm.total_energy_t(model, Tensor(data_arr)).mean()
        e_neg = hm.total_energy_t(model, Tensor(neg_arr)).mean()
        return e_data - e_neg

    out, tape = forward(lambda: surrogate(), [])
    return backward(tape, Tensor(1.0))


def _soft_ce_t(model: HybridModel, x: Tensor, targets: np.ndarray) -> Tensor:
    logp = dc.log_softmax(hm.classifier_logits_t(model, x), axis=1)
    return -(Tensor(targets) * logp).sum(axis=1).mean()


def joint_loss_and_grads(model: HybridModel, labeled_batch, soft_targets,
                         all_batch, negatives, lam: float,
                         nll_weight: float = 1.0) -> tuple[LossBreakdown, GradientMap]:
    """One tape over all three loss terms; returns per-term values and gradients.

    Cross-entropy uses soft target rows (must sum to 1); the density term is
    the contrastive surrogate whose gradient matches `nll_gradient`; the tying
    penalty is weighted by lam.  Negatives are treated as constants.
    """
    labeled = np.asarray(labeled_batch.data if isinstance(labeled_batch, Tensor) else labeled_batch)
    targets = np.asarray(soft_targets, dtype=np.float64)
    if labeled.shape[0] != targets.shape[0]:
        raise dc.ShapeError("joint_loss targets", labeled.shape, targets.shape)
    row_sums = targets.sum(axis=1)
    if targets.size and not np.allclose(row_sums, 1.0, atol=1e-6):
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"soft target row {worst} sums to {row_sums[worst]!r}, expected 1")
    all_arr = np.asarray(all_batch.data if isinstance(all_batch, Tensor) else all_batch)
    neg_arr = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives)

    terms: dict[str, Tensor] = {}

    def build():
        ce = _soft_ce_t(model, Tensor(labeled), targets) if labeled.shape[0] else Tensor(0.0)
        if nll_weight != 0.0 and all_arr.shape[0]:
            contrast = hm.total_energy_t(model, Tensor(all_arr)).mean() \
                - hm.total_energy_t(model, Tensor(neg_arr)).mean()
            nll = contrast * nll_weight
        else:
            nll = Tensor(0.0)
        tie = hm.tying_penalty_t(model)
        terms["ce"], terms["nll"], terms["tie"] = ce, nll, tie
        return ce + nll + tie * lam

    out, tape = forward(lambda: build(), [])
    grads = backward(tape, Tensor(1.0))
    breakdown = LossBreakdown(
        ce_term=float(terms["ce"].data),
        nll_term=float(terms["nll"].data),
        tie_term=float(terms["tie"].data),
        total=float(out.data),
        lam=lam,
    )
    return breakdown, grads


def adam_step(state: AdamState, model: HybridModel, grads: GradientMap) -> None:
    """Standard Adam update in place; skipped entirely on non-finite gradients.

    After the step the raw covariance-factor diagonal is re-projected above
    the positive-definiteness floor.
    """
    gs = [grads[p] for p in state.params]
    if not all(np.isfinite(g).all() for g in gs):
        state.skipped_steps += 1
        return
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(state.params, gs, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    raw = model.ebm.chol_raw.data
    d = np.diagonal(raw).copy()
    np.fill_diagonal(raw, np.maximum(d, RAW_DIAG_FLOOR))


@dataclass
class TrainConfig:
    """Per-epoch optimization settings (file-loadable key-value record)."""

    epochs: int = 1
    batch_size: int = 64
    lam: float = 0.001
    nll_weight: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    buffer_capacity: int = 1000
    seed: int = 0
    sgld: SgldConfig = field(default_factory=SgldConfig)


def write_config_file(cfg: TrainConfig, path) -> None:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "sgld":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    for f in fields(SgldConfig):
        lines.append(f"sgld.{f.name} = {getattr(cfg.sgld, f.name)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config_file(path) -> TrainConfig:
    """Parse `key = value` lines; unknown keys are an error."""
    plain = {f.name: f for f in fields(TrainConfig) if f.name != "sgld"}
    sgld_fields = {f.name for f in fields(SgldConfig)}
    kwargs: dict = {}
    sgld_kwargs: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key.startswith("sgld."):
            sub = key[len("sgld."):]
            if sub not in sgld_fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            sgld_kwargs[sub] = _parse_scalar(value)
        elif key in plain:
            kwargs[key] = _parse_scalar(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    kwargs["sgld"] = SgldConfig(**sgld_kwargs)
    return TrainConfig(**kwargs)


def _parse_scalar(text: str):
    if text == "None":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"cannot parse config value {text!r}")


class TrainState:
    """Mutable per-run training state: optimizer, chains, rng stream."""

    def __init__(self, model: HybridModel, cfg: TrainConfig):
        self.adam = AdamState(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, seed=cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)

    def rebind(self, model: HybridModel, cfg: TrainConfig) -> None:
        """Point the optimizer at a model whose parameter tensors were replaced."""
        self.adam = AdamState(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.adam_eps)


@dataclass
class EpochData:
    """Resolved sample pools for one epoch: CE pool (with targets) + density pool."""

    ce_X: np.ndarray
    ce_targets: np.ndarray
    all_X: np.ndarray


@dataclass
class EpochStats:
    ce: float
    nll: float
    tie: float
    total: float
    diverged_chains: int
    wall_ms: float


def train_epoch(model: HybridModel, data: EpochData, cfg: TrainConfig,
                state: TrainState) -> EpochStats:
    """One pass over the density pool; the CE pool is cycled proportionally.

    Every batch contributes to both loss terms: the density term sees a slice
    of all samples, the CE term a proportional slice of the labeled +
    pseudo-labeled pool.
    """
    if data.ce_X.shape[0] == 0:
        raise ValueError("train_epoch needs at least one labeled sample")
    start = time.perf_counter()
    rng = state.rng
    n_all = data.all_X.shape[0]
    n_ce = data.ce_X.shape[0]
    use_nll = cfg.nll_weight != 0.0 and n_all > 0
    if use_nll:
        order_all = rng.permutation(n_all)
        n_batches = max(1, int(np.ceil(n_all / cfg.batch_size)))
        ce_bs = max(1, round(n_ce * cfg.batch_size / n_all))
    else:
        n_batches = max(1, int(np.ceil(n_ce / cfg.batch_size)))
        ce_bs = min(cfg.batch_size, n_ce)
    order_ce = rng.permutation(n_ce)
    ce_cursor = 0
    sums = np.zeros(4)
    diverged = 0
    total_chains = 0
    for b in range(n_batches):
        take = []
        for _ in range(ce_bs):
            take.append(order_ce[ce_cursor])
            ce_cursor += 1
            if ce_cursor == n_ce:  # cycle, reshuffling to keep batches varied
                order_ce = rng.permutation(n_ce)
                ce_cursor = 0
        idx_ce = np.array(take)
        labeled = data.ce_X[idx_ce]
        targets = data.ce_targets[idx_ce]
        if use_nll:
            idx_all = order_all[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            all_batch = data.all_X[idx_all]
            negatives, n_div = sgld_sample(model, cfg.sgld, state.buffer,
                                           all_batch.shape[0], rng)
            diverged += n_div
            total_chains += all_batch.shape[0] * cfg.sgld.n_steps
        else:
            all_batch = np.empty((0, model.input_dim))
            negatives = Tensor(all_batch)
        breakdown, grads = joint_loss_and_grads(
            model, labeled, targets, all_batch, negatives,
            lam=cfg.lam, nll_weight=cfg.nll_weight)
        adam_step(state.adam, model, grads)
        sums += (breakdown.ce_term, breakdown.nll_term, breakdown.tie_term, breakdown.total)
    if use_nll and total_chains > 0 and diverged >= total_chains:
        raise TrainingDiverged(
            f"all {total_chains} sampler chain steps diverged this epoch")
    means = sums / n_batches
    wall_ms = (time.perf_counter() - start) * 1000.0
    return EpochStats(ce=means[0], nll=means[1], tie=means[2], total=means[3],
                      diverged_chains=diverged, wall_ms=wall_ms)
