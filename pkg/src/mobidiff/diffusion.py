"""Noise schedule, training with the combined individual/population loss,
reverse sampling, and location recovery from embeddings.

The model predicts the clean embedding directly. Training corrupts a clean
per-slot embedding with the closed-form forward marginal, asks the denoiser
for the clean signal back, and penalizes both the reconstruction error and the
mismatch between the recovered per-slot location distribution and the
population field.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import PopulationField, Trajectory
from .denoiser import Denoiser, DenoiserConfig


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption variances and derived quantities, 1-indexed by step."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.beta.size

    def at(self, t: int) -> tuple[float, float, float, float]:
        """(beta, alpha, alpha_bar, posterior_var) at step t in [1, T]."""
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"step {t} outside [1, {self.n_steps}]")
        i = t - 1
        return (float(self.beta[i]), float(self.alpha[i]),
                float(self.alpha_bar[i]), float(self.posterior_var[i]))

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(n_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with the matching posterior variances."""
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, n_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    posterior_var[0] = beta[0]
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         posterior_var=posterior_var)


def forward_diffuse(e0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t) * e0 + sqrt(1 - abar_t) * eps."""
    _, _, abar, _ = sched.at(t)
    e0 = np.asarray(e0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if e0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} must match signal shape {e0.shape}")
    return np.sqrt(abar) * e0 + np.sqrt(1.0 - abar) * eps


def loss_ind(e0: np.ndarray, e0_hat: np.ndarray) -> float:
    """Reconstruction loss: mean squared error over slots and dimensions."""
    return float(ad.mse(ad.constant(e0_hat), ad.constant(e0)).value)


def loss_pop(d_probs: np.ndarray, pop: PopulationField | np.ndarray) -> float:
    """Mean over slots of the cross entropy between recovered and population rows."""
    p = pop.probs if isinstance(pop, PopulationField) else np.asarray(pop)
    d = np.asarray(d_probs, dtype=np.float64)
    if d.shape[-1] != p.shape[-1] or d.shape[-2] != p.shape[-2]:
        raise ValueError(f"shape mismatch: recovered {d.shape} vs population {p.shape}")
    return float(ad.cross_entropy(ad.constant(d), p).value)


# ---------------------------------------------------------------------------
# location recovery
# ---------------------------------------------------------------------------

def default_ridge(m: np.ndarray) -> float:
    """Scale-adaptive ridge: 1e-6 * trace(M^T M) / d."""
    m = np.asarray(m, dtype=np.float64)
    return 1e-6 * float((m * m).sum()) / m.shape[1]


def recovery_matrix(m: np.ndarray, ridge: float | None = None) -> np.ndarray:
    """Transposed ridge pseudo-inverse of the embedding table, shape (d, rows)."""
    if ridge is None:
        ridge = default_ridge(m)
    return ad.ridge_pseudo_inverse(np.asarray(m, dtype=np.float64), ridge)


def active_cells(m: np.ndarray) -> np.ndarray:
    """Boolean mask of cells whose embedding row is not all-zero padding."""
    m = np.asarray(m)
    return np.any(m[1:] != 0.0, axis=1)


def recover_probabilities(e0_hat: np.ndarray, m: np.ndarray,
                          ridge: float | None = None,
                          temperature: float = 1.0) -> np.ndarray:
    """Per-slot probability over cells recovered from a clean embedding.

    Scores come from the pseudo-inverse product against the embedding table;
    the reserved row 0 and any all-zero padding rows are masked out before the
    softmax, so column c of the output corresponds to cell c and cells without
    an embedding get probability zero. The temperature multiplies the scores;
    argmax locations do not depend on it.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    active = active_cells(m)
    if not active.any():
        raise ValueError("embedding table has no nonzero cell rows")
    pm = recovery_matrix(m, ridge)
    scores = np.asarray(e0_hat, dtype=np.float64) @ pm
    scores = scores[..., 1:] * temperature
    scores = np.where(active, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def recover_locations(d_probs: np.ndarray) -> np.ndarray:
    """Argmax cell per slot; ties break toward the lowest cell id."""
    return np.argmax(np.asarray(d_probs), axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the full-scale setup."""

    lambda_pop: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 16
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 1
    seed: int = 0
    ridge: float | None = None
    # "prototypes" scores each slot against the embedding rows themselves
    # (dot-product softmax), which pulls predictions toward the embeddings of
    # populous cells; "recovery" softmaxes the pseudo-inverse recovery scores
    # instead. The prototype form trains far more stably because its gradient
    # moves predictions along embedding rows, not their ill-conditioned duals.
    pop_loss_on: str = "prototypes"
    pop_temperature: float = 2.0

    def __post_init__(self) -> None:
        if self.lambda_pop < 0:
            raise ValueError("lambda_pop must be nonnegative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.diffusion_steps < 1:
            raise ValueError("diffusion_steps must be positive")
        if self.pop_loss_on not in ("prototypes", "recovery"):
            raise ValueError(f"unknown pop_loss_on {self.pop_loss_on!r}")
        if self.pop_temperature <= 0:
            raise ValueError("pop_temperature must be positive")


@dataclass
class TrainResult:
    denoiser: Denoiser
    schedule: NoiseSchedule
    curve: list[tuple[int, float, float, float]]  # step, loss_ind, loss_pop, loss_total
    pop_loss_evals: int


def embed_trajectories(trajectories: list[Trajectory], m: np.ndarray) -> np.ndarray:
    """Stack per-slot embedding rows; cell c maps to table row c + 1."""
    cells = np.stack([t.cells for t in trajectories])
    return m[cells + 1]


def train(trajectories: list[Trajectory], pop: PopulationField, m: np.ndarray,
          cfg: TrainConfig, dcfg: DenoiserConfig | None = None) -> TrainResult:
    """Optimize the denoiser on a trajectory set, conditioned on its population field.

    Each step corrupts a batch at a uniformly drawn diffusion step, predicts the
    clean embedding, and descends the combined loss. With lambda_pop = 0 the
    population branch of the loss is never evaluated.
    """
    if not trajectories:
        raise ValueError("training needs a nonempty dataset")
    m = np.asarray(m, dtype=np.float64)
    n_cells = m.shape[0] - 1
    if pop.n_cells != n_cells:
        raise ValueError("population field and embedding table disagree on cell count")
    if dcfg is None:
        dcfg = DenoiserConfig(n_cells=n_cells, d=m.shape[1])
    if dcfg.d != m.shape[1]:
        raise ValueError("denoiser width must match the embedding dimension")

    rng = np.random.default_rng(cfg.seed)
    sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    model = Denoiser(dcfg, rng=rng)
    opt = ad.Adam(model.params, lr=cfg.learning_rate)

    score_basis = None
    pop_target = None
    softmax_mask = None
    pop_norm = 1.0
    if cfg.lambda_pop > 0:
        if cfg.pop_loss_on == "prototypes":
            score_basis = ad.constant(m[1:].T)
        else:
            score_basis = ad.constant(recovery_matrix(m, cfg.ridge)[:, 1:])
        # floor the field at half a count so unobserved cells repel with
        # finite strength rather than dominating the loss
        pop_target = np.maximum(pop.probs, 1.0 / (2.0 * len(trajectories)))
        softmax_mask = np.where(active_cells(m), 0.0, -1e30)
        pop_norm = 1.0 / n_cells

    e_all = embed_trajectories(trajectories, m)
    n = len(trajectories)
    curve: list[tuple[int, float, float, float]] = []
    pop_loss_evals = 0
    step = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = e_all[order[lo:lo + cfg.batch_size]]
            t = int(rng.integers(1, sched.n_steps + 1))
            eps = rng.standard_normal(batch.shape)
            e_t = forward_diffuse(batch, t, eps, sched)

            model.params.zero_grad()
            with ad.Tape() as tape:
                e0_hat = model.denoise(e_t, t, pop.probs)
                li = ad.mse(e0_hat, ad.constant(batch))
                if cfg.lambda_pop > 0:
                    scores = ad.scale(ad.matmul(e0_hat, score_basis), cfg.pop_temperature)
                    probs_t = ad.softmax(ad.add(scores, ad.constant(softmax_mask)))
                    lp = ad.scale(ad.cross_entropy(probs_t, pop_target), pop_norm)
                    pop_loss_evals += 1
                    total = ad.add(li, ad.scale(lp, cfg.lambda_pop))
                    lp_val = float(lp.value)
                else:
                    total = li
                    lp_val = 0.0
                if not np.isfinite(total.value):
                    raise RuntimeError(f"non-finite loss at step {step}")
                tape.backward(total)
            opt.step()
            curve.append((step, float(li.value), lp_val, float(total.value)))
            step += 1

    return TrainResult(denoiser=model, schedule=sched, curve=curve,
                       pop_loss_evals=pop_loss_evals)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class GeneratedBatch:
    trajectories: list[Trajectory]
    probs: np.ndarray  # (n, n_slots, n_cells) recovered location distributions


def sample(n: int, pop: PopulationField, model, m: np.ndarray,
           sched: NoiseSchedule, seed: int, ridge: float | None = None,
           temperature: float = 1.0) -> GeneratedBatch:
    """Reverse-sample n trajectories conditioned on a population field.

    Starts from standard normal noise, and at each step predicts the clean
    embedding, then draws the previous latent from the closed-form posterior
    around it. The final prediction is decoded to per-slot cell distributions
    and argmax locations.
    """
    m = np.asarray(m, dtype=np.float64)
    n_slots, d = pop.n_slots, m.shape[1]
    if n == 0:
        return GeneratedBatch(trajectories=[],
                              probs=np.zeros((0, n_slots, m.shape[0] - 1)))

    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, n_slots, d))
    for t in range(sched.n_steps, 1, -1):
        beta, alpha, abar, pvar = sched.at(t)
        abar_prev = sched.alpha_bar_prev(t)
        e0_hat = model.denoise(e, t, pop.probs).value
        coef_e0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
        coef_et = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
        mean = coef_e0 * e0_hat + coef_et * e
        e = mean + np.sqrt(pvar) * rng.standard_normal(e.shape)
    e0 = model.denoise(e, 1, pop.probs).value

    probs = recover_probabilities(e0, m, ridge, temperature)
    cells = recover_locations(probs)
    trajectories = [Trajectory(user_id=f"s{i:05d}", day_index=0, cells=cells[i])
                    for i in range(n)]
    return GeneratedBatch(trajectories=trajectories, probs=probs)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_loss_curve(path: str, curve: list[tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_ind", "loss_pop", "loss_total"])
        for step, li, lp, total in curve:
            writer.writerow([step, f"{li:.17g}", f"{lp:.17g}", f"{total:.17g}"])


def save_model(path: str, model: Denoiser, cfg: TrainConfig) -> None:
    model.save(path, extra_meta={
        "diffusion_steps": str(cfg.diffusion_steps),
        "beta_start": f"{cfg.beta_start:.17g}",
        "beta_end": f"{cfg.beta_end:.17g}",
    })


def load_model(path: str) -> tuple[Denoiser, NoiseSchedule]:
    model, meta = Denoiser.load(path)
    try:
        sched = make_schedule(int(meta["diffusion_steps"]),
                              float(meta["beta_start"]), float(meta["beta_end"]))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint is missing schedule metadata") from exc
    return model, sched
