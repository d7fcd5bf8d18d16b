"""Gradient-sign attacks under an l-infinity budget.

All iterative attacks share one loop: estimate an (optionally
transform-averaged) input gradient, optionally smooth it with a TIM kernel,
fold its L1-normalised value into the momentum buffer and take a signed step
that is projected back onto the budget ball and the valid pixel range.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .exceptions import ConfigurationError, ShapeError
from .tensor import Tensor
from .transforms import (Admix, Bsr, BsrConfig, Composite, Dim, Sim, TimKernel, adjoint_chain,
                         apply_chain, parse_transform, smooth_gradient, tim_kernel_of)
from .validation import check_images, check_labels

BUDGET_SLACK = 2.0 ** -20
MAX_BATCH = 500

ATTACKS = ("fgsm", "ifgsm", "mifgsm", "dim", "tim", "sim", "admix", "bsr", "bs", "br")


@dataclass
class AttackConfig:
    """Budget and schedule of an attack. ``step_size=None`` means epsilon / num_iters."""

    epsilon: float = 16 / 255
    num_iters: int = 10
    step_size: float | None = None
    decay: float = 1.0
    transform: object = None
    copies: int | None = None
    tim_kernel: np.ndarray | None = None
    clip_to_valid_range: bool = True
    seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not isinstance(self.num_iters, (int, np.integer)) or self.num_iters < 1:
            raise ConfigurationError(f"num_iters must be an integer >= 1, got {self.num_iters!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError(f"step_size must be > 0, got {self.step_size}")
        if not self.decay >= 0:
            raise ConfigurationError(f"decay must be >= 0, got {self.decay}")
        if self.copies is not None and self.copies < 1:
            raise ConfigurationError(f"copies must be >= 1, got {self.copies}")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.num_iters if self.step_size is None else self.step_size

    @property
    def kernel(self):
        return self.tim_kernel if self.tim_kernel is not None else tim_kernel_of(self.transform)

    def describe(self) -> dict:
        """Flat, serialisable echo of every setting."""
        out = {
            "epsilon": self.epsilon, "epsilon_255": self.epsilon * 255, "num_iters": self.num_iters,
            "step_size": self.alpha, "decay": self.decay, "copies": self.copies,
            "clip_to_valid_range": self.clip_to_valid_range, "seed": self.seed,
            "transform": describe_transform(self.transform),
        }
        kernel = self.kernel
        if kernel is not None:
            out["tim_kernel_size"] = int(np.asarray(kernel).shape[0])
        return out


def describe_transform(transform) -> str:
    if transform is None:
        return "none"
    parts = transform.parts if isinstance(transform, Composite) else (transform,)
    text = []
    for p in parts:
        if isinstance(p, Bsr):
            c = p.config
            text.append(f"bsr(n={c.n},tau={c.tau:g},copies={c.copies},min_block_fraction={c.min_block_fraction:g},"
                        f"interpolation={c.interpolation},shuffle={c.shuffle})")
        elif isinstance(p, TimKernel):
            sigma = p.size / 3.0 if p.sigma is None else p.sigma
            text.append(f"tim(size={p.size},sigma={sigma:g})")
        elif isinstance(p, Dim):
            text.append(f"dim(probability={p.probability:g},resize_low_fraction={p.resize_low_fraction:g})")
        elif isinstance(p, Sim):
            text.append(f"sim(num_scales={p.num_scales})")
        elif isinstance(p, Admix):
            text.append(f"admix(num_mix={p.num_mix},strength={p.strength:g},num_scales={p.num_scales})")
    return "+".join(text)


def make_config(name: str, epsilon: float = 16 / 255, num_iters: int = 10, step_size=None, decay: float = 1.0,
                bsr: BsrConfig | None = None, seed: int = 0, **kwargs) -> AttackConfig:
    """Configuration of a named attack.

    ``fgsm`` is one step of size epsilon, ``ifgsm`` drops momentum, every
    other name is MI-FGSM with the matching input transform; ``bs`` and
    ``br`` are the shuffle-only and rotation-only variants of ``bsr``.
    Names joined with ``+`` stack transforms in the given order.
    """
    name = name.lower().strip()
    bsr = bsr or BsrConfig()
    if name == "fgsm":
        return AttackConfig(epsilon, 1, epsilon, 0.0, seed=seed, **kwargs)
    if name == "ifgsm":
        return AttackConfig(epsilon, num_iters, step_size, 0.0, seed=seed, **kwargs)
    if name == "mifgsm":
        return AttackConfig(epsilon, num_iters, step_size, decay, seed=seed, **kwargs)
    if name == "bs":
        transform = Bsr(replace(bsr, tau=0.0))
    elif name == "br":
        transform = Bsr(replace(bsr, shuffle=False))
    else:
        transform = parse_transform(name, bsr=bsr)
    return AttackConfig(epsilon, num_iters, step_size, decay, transform=transform, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _as_models(models) -> list:
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    if not models:
        raise ConfigurationError("at least one model is required")
    first = models[0]
    for m in models[1:]:
        if tuple(m.input_shape) != tuple(first.input_shape) or m.num_classes != first.num_classes:
            raise ShapeError(
                f"ensemble members disagree: {tuple(first.input_shape)}/{first.num_classes} classes vs "
                f"{tuple(m.input_shape)}/{m.num_classes} classes")
    return models


def ensemble_logits(models, x: Tensor) -> Tensor:
    """Equal-weight average of the members' logits."""
    logits = models[0].forward(x)
    for m in models[1:]:
        logits = T.add(logits, m.forward(x))
    return logits if len(models) == 1 else T.mul_scalar(logits, 1.0 / len(models))


def input_gradient(models, x: np.ndarray, y: np.ndarray, max_batch: int = MAX_BATCH):
    """Per-image cross-entropy gradient with respect to the input and per-image loss.

    The loss is summed over the batch, so each image's gradient does not
    depend on its batch mates.
    """
    models = _as_models(models)
    grads = np.empty_like(x)
    losses = np.empty(x.shape[0], dtype=np.float64)
    for start in range(0, x.shape[0], max_batch):
        xb = Tensor(x[start:start + max_batch], requires_grad=True)
        yb = y[start:start + max_batch]
        logp = T.log_softmax(ensemble_logits(models, xb))
        T.backward(T.nll_loss(logp, yb, reduction="sum"))
        grads[start:start + max_batch] = xb.grad
        losses[start:start + max_batch] = -logp.data[np.arange(len(yb)), yb]
    return grads, losses


@dataclass
class GradientEstimate:
    grad: np.ndarray
    copies_used: int
    loss: np.ndarray | None = None


def _image_rngs(seed, indices):
    return [np.random.default_rng([int(seed), int(i)]) for i in indices]


def _pool_for(pool_x, pool_y, label):
    if pool_x is None:
        return None
    if pool_y is None:
        return pool_x
    return pool_x[pool_y != label]


def average_gradient(models, x_adv, y, transform=None, copies=None, rng=None, pool=None,
                     max_batch: int = MAX_BATCH) -> GradientEstimate:
    """Mean input gradient over independently sampled transformed copies.

    ``rng`` is one generator per image (or a single generator for a batch
    of one). ``pool`` is an ``(images, labels)`` pair supplying admixing
    partners; only partners with a different label are used. Without a
    transform a single plain gradient is returned whatever ``copies`` is.
    """
    x_adv = check_images(x_adv)
    y = check_labels(y, x_adv.shape[0])
    if transform is None or isinstance(transform, TimKernel):
        g, loss = input_gradient(models, x_adv, y, max_batch)
        return GradientEstimate(g, 1, loss)
    if rng is None:
        raise ConfigurationError("a random generator is required for randomised transforms")
    rngs = rng if isinstance(rng, (list, tuple)) else [rng]
    if len(rngs) != x_adv.shape[0]:
        raise ConfigurationError(f"need one generator per image, got {len(rngs)} for {x_adv.shape[0]} images")
    pool_x, pool_y = (None, None) if pool is None else (pool if isinstance(pool, tuple) else (pool, None))
    chains, owners, batch = [], [], []
    for b in range(x_adv.shape[0]):
        image_chains = transform.sample(x_adv.shape[1:], rngs[b], _pool_for(pool_x, pool_y, y[b]), copies=copies)
        for chain in image_chains:
            chains.append(chain)
            owners.append(b)
            batch.append(apply_chain(x_adv[b], chain))
    owners = np.asarray(owners)
    g_copies, loss_copies = input_gradient(models, np.stack(batch), y[owners], max_batch)
    grad = np.zeros(x_adv.shape, dtype=np.float64)
    loss = np.zeros(x_adv.shape[0], dtype=np.float64)
    counts = np.bincount(owners, minlength=x_adv.shape[0])
    # copies are summed in sampling order; float64 keeps N identical copies / N exact
    for k, chain in enumerate(chains):
        grad[owners[k]] += adjoint_chain(g_copies[k], chain)
        loss[owners[k]] += loss_copies[k]
    grad /= counts[:, None, None, None]
    return GradientEstimate(grad.astype(np.float32), int(counts.max()), loss / counts)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

@dataclass
class AttackState:
    x: np.ndarray
    x_adv: np.ndarray
    momentum: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, x: np.ndarray) -> "AttackState":
        return cls(x, x.copy(), np.zeros(x.shape, dtype=np.float64), 0)


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float, clip: bool = True) -> np.ndarray:
    eps = np.float32(epsilon)
    out = np.clip(x_adv, x - eps, x + eps)
    if clip:
        out = np.clip(out, np.float32(0), np.float32(1))
    return out


def l1_normalize(g: np.ndarray) -> np.ndarray:
    """Per-image division by the L1 norm, carried out in float64; all-zero images stay zero."""
    g = g.astype(np.float64)
    norms = np.abs(g).reshape(g.shape[0], -1).sum(axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where((norms > 0)[:, None, None, None], g / safe[:, None, None, None], 0.0)


def momentum_step(state: AttackState, g_bar: np.ndarray, config: AttackConfig) -> AttackState:
    """Accumulate the normalised gradient into the momentum and take one signed, projected step."""
    if g_bar.shape != state.x_adv.shape:
        raise ShapeError(f"gradient shape {g_bar.shape} does not match image {state.x_adv.shape}")
    momentum = config.decay * state.momentum + l1_normalize(g_bar)
    step = np.float32(config.alpha) * np.sign(momentum).astype(np.float32)
    x_adv = project(state.x_adv + step, state.x, config.epsilon, config.clip_to_valid_range)
    return AttackState(state.x, x_adv, momentum, state.t + 1)


def _check_budget(x_adv, x, epsilon, clip):
    excess = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)).max(initial=0.0) - epsilon
    if excess > BUDGET_SLACK:
        raise AssertionError(f"perturbation budget exceeded by {excess:.3g}")
    if clip and x_adv.size and (x_adv.min() < 0 or x_adv.max() > 1):
        raise AssertionError("adversarial pixels left [0, 1]")


def fgsm(models, x, y, epsilon: float, clip: bool = True) -> np.ndarray:
    """Single signed step of size epsilon along the loss gradient."""
    x = check_images(x)
    y = check_labels(y, x.shape[0])
    g, _ = input_gradient(_as_models(models), x, y)
    x_adv = project(x + np.float32(epsilon) * np.sign(g).astype(np.float32), x, epsilon, clip)
    _check_budget(x_adv, x, epsilon, clip)
    return x_adv


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: list = field(default_factory=list)


def run_attack(models, x, y, config: AttackConfig, indices=None, pool=None,
               max_batch: int = MAX_BATCH) -> AttackResult:
    """Iterate the momentum sign attack for ``config.num_iters`` steps.

    ``models`` may be a single classifier or a list (logit-averaged
    ensemble). ``indices`` are the global image indices used to derive each
    image's generator from ``config.seed``; they default to 0..N-1.
    ``pool`` supplies admixing partners and defaults to ``(x, y)``.
    """
    models = _as_models(models)
    x = check_images(x, shape=models[0].input_shape)
    y = check_labels(y, x.shape[0], models[0].num_classes)
    indices = np.arange(x.shape[0]) if indices is None else np.asarray(indices)
    rngs = _image_rngs(config.seed, indices)
    pool = (x, y) if pool is None else pool
    kernel = config.kernel
    state = AttackState.start(x)
    trace = []
    for _ in range(config.num_iters):
        est = average_gradient(models, state.x_adv, y, config.transform, config.copies, rngs, pool, max_batch)
        g_bar = est.grad if kernel is None else smooth_gradient(est.grad, kernel)
        state = momentum_step(state, g_bar, config)
        _check_budget(state.x_adv, x, config.epsilon, config.clip_to_valid_range)
        if config.record_trace:
            diff = np.abs(state.x_adv.astype(np.float64) - x).reshape(x.shape[0], -1)
            trace.append({
                "iteration": state.t,
                "loss": est.loss,
                "grad_l1": np.abs(g_bar.astype(np.float64)).reshape(x.shape[0], -1).sum(axis=1),
                "linf": diff.max(axis=1),
                "min_pixel": state.x_adv.reshape(x.shape[0], -1).min(axis=1),
                "max_pixel": state.x_adv.reshape(x.shape[0], -1).max(axis=1),
            })
    return AttackResult(state.x_adv, trace)


# ---------------------------------------------------------------------------
# estimator front end
# ---------------------------------------------------------------------------

class TransferAttack(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper turning clean images into adversarial ones.

    Parameters
    ----------
    model : classifier or list of classifiers
        Surrogate model(s); a list is attacked as a logit-averaged ensemble.
    attack : str
        One of :data:`ATTACKS` or a ``+``-joined transform stack such as
        ``"dim+tim+bsr"``.
    epsilon : float
        Budget on the [0, 1] pixel scale.
    n_blocks, tau, copies : BSR settings.

    ``fit`` remembers the clean images and labels as admixing partners;
    ``transform(X, y)`` crafts adversarial examples (labels default to the
    surrogate's predictions).
    """

    def __init__(self, model=None, attack="bsr", epsilon=16 / 255, num_iters=10, step_size=None, decay=1.0,
                 n_blocks=2, tau=24.0, copies=20, interpolation="nearest", seed=0, clip=True):
        self.model = model
        self.attack = attack
        self.epsilon = epsilon
        self.num_iters = num_iters
        self.step_size = step_size
        self.decay = decay
        self.n_blocks = n_blocks
        self.tau = tau
        self.copies = copies
        self.interpolation = interpolation
        self.seed = seed
        self.clip = clip

    def config(self) -> AttackConfig:
        bsr = BsrConfig(n=self.n_blocks, tau=self.tau, copies=self.copies, interpolation=self.interpolation)
        return make_config(self.attack, epsilon=self.epsilon, num_iters=self.num_iters, step_size=self.step_size,
                           decay=self.decay, bsr=bsr, seed=self.seed, clip_to_valid_range=self.clip)

    def fit(self, X, y=None):
        models = _as_models(self.model)
        self.config_ = self.config()
        X = check_images(X, shape=models[0].input_shape)
        self.pool_ = (X, None if y is None else check_labels(y, X.shape[0], models[0].num_classes))
        return self

    def transform(self, X, y=None):
        models = _as_models(self.model)
        config = getattr(self, "config_", None) or self.config()
        X = check_images(X, shape=models[0].input_shape)
        if y is None:
            y = ensemble_logits(models, Tensor(X)).data.argmax(axis=1)
        pool = getattr(self, "pool_", None)
        if pool is not None and pool[1] is None:
            pool = (pool[0], ensemble_logits(models, Tensor(pool[0])).data.argmax(axis=1))
        result = run_attack(models, X, y, config, pool=pool)
        self.trace_ = result.trace
        return result.x_adv

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
