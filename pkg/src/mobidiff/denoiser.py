"""Population-conditioned noise predictor.

Maps a noisy per-slot trajectory embedding, a diffusion step, and the per-slot
population distribution to a predicted clean embedding. The pipeline is:
sinusoidal step embedding -> temporal self-attention encoder -> population
projection -> multi-head cross-attention over population slots -> convolutional
gated decoder. All stages run on the autodiff tape so training can backprop
through the whole stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; widths default to the full-scale setup."""

    n_cells: int
    d: int = 128
    n_heads: int = 8
    n_layers: int = 4
    conv_channels: int = 64
    conv_width: int = 3
    step_dim: int = 128
    ff_hidden: int = 0       # 0 means 4 * d
    pop_hidden: int = 0      # 0 means d
    value_source: str = "population"  # "population" or "trajectory"
    slot_positions: bool = True  # False keeps the encoder permutation-equivariant

    def __post_init__(self) -> None:
        if self.d % 2 != 0 or self.d % self.n_heads != 0:
            raise ValueError("d must be even and divisible by n_heads")
        if self.step_dim % 2 != 0:
            raise ValueError("step_dim must be even")
        if self.conv_width % 2 == 0:
            raise ValueError("conv_width must be odd")
        if self.value_source not in ("population", "trajectory"):
            raise ValueError(f"unknown value_source {self.value_source!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def ff(self) -> int:
        return self.ff_hidden or 4 * self.d

    @property
    def pop_h(self) -> int:
        return self.pop_hidden or self.d


def step_embedding(t: int, dim: int = 128) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step.

    Entry j is sin(10^(j*4/(dim/2-1)) * t) for the first half and the matching
    cosine for the second half, so every entry lies in [-1, 1].
    """
    if t < 0:
        raise ValueError("step must be nonnegative")
    half = dim // 2
    exponents = np.arange(half) * (4.0 / (half - 1))
    freqs = 10.0 ** exponents
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def slot_positional_table(n_slots: int, d: int) -> np.ndarray:
    """Classic sinusoidal position table over slot indices, shape (n_slots, d)."""
    pos = np.arange(n_slots)[:, None]
    j = np.arange(d)[None, :]
    angle = pos / (10_000.0 ** (2 * (j // 2) / d))
    table = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class Denoiser:
    """The conditional denoiser: config plus a ParamStore of all weights."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator | None = None,
                 params: ad.ParamStore | None = None, zero_final: bool = True) -> None:
        self.cfg = cfg
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ValueError("pass an rng to initialize parameters")
            self.params = self._init_params(rng, zero_final)

    def _init_params(self, rng: np.random.Generator, zero_final: bool) -> ad.ParamStore:
        """Weights drawn uniform by fan-in; every residual branch's output
        projection starts at zero (when zero_final) so the whole network is the
        identity map at initialization and conditioning pathways wake up
        through their gradients."""
        cfg = self.cfg

        def maybe_zero(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
            draw = _uniform(rng, shape, fan_in)  # keep the rng stream fixed
            return np.zeros(shape) if zero_final else draw

        p = ad.ParamStore()
        p.add("step.w", maybe_zero((cfg.step_dim, cfg.d), cfg.step_dim))
        p.add("step.b", np.zeros(cfg.d))
        for i in range(cfg.n_layers):
            pre = f"enc{i}"
            p.add(f"{pre}.ln1.g", np.ones(cfg.d))
            p.add(f"{pre}.ln1.b", np.zeros(cfg.d))
            for w in ("wq", "wk", "wv"):
                p.add(f"{pre}.{w}", _uniform(rng, (cfg.d, cfg.d), cfg.d))
            p.add(f"{pre}.wo", maybe_zero((cfg.d, cfg.d), cfg.d))
            p.add(f"{pre}.ln2.g", np.ones(cfg.d))
            p.add(f"{pre}.ln2.b", np.zeros(cfg.d))
            p.add(f"{pre}.w1", _uniform(rng, (cfg.d, cfg.ff), cfg.d))
            p.add(f"{pre}.b1", np.zeros(cfg.ff))
            p.add(f"{pre}.w2", maybe_zero((cfg.ff, cfg.d), cfg.ff))
            p.add(f"{pre}.b2", np.zeros(cfg.d))
        p.add("pop.w1", _uniform(rng, (cfg.n_cells, cfg.pop_h), cfg.n_cells))
        p.add("pop.b1", np.zeros(cfg.pop_h))
        p.add("pop.w2", _uniform(rng, (cfg.pop_h, cfg.d), cfg.pop_h))
        p.add("pop.b2", np.zeros(cfg.d))
        p.add("xattn.wq", _uniform(rng, (cfg.d, cfg.d), cfg.d))
        p.add("xattn.wk", _uniform(rng, (cfg.d, cfg.d), cfg.d))
        p.add("xattn.wv", maybe_zero((cfg.d, cfg.d), cfg.d))
        width, c = cfg.conv_width, cfg.conv_channels
        p.add("dec.wf", _uniform(rng, (width, cfg.d, c), width * cfg.d))
        p.add("dec.bf", np.zeros(c))
        p.add("dec.wg", _uniform(rng, (width, cfg.d, c), width * cfg.d))
        p.add("dec.bg", np.zeros(c))
        p.add("dec.wo", maybe_zero((width, c, cfg.d), width * c))
        p.add("dec.bo", np.zeros(cfg.d))
        return p

    # -- stages -------------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else ad.constant(x)

    def encode(self, e_t, t_emb) -> Tensor:
        """Add the projected step embedding to every slot, then run the encoder."""
        cfg, p = self.cfg, self.params
        x = self._as_tensor(e_t)
        if x.shape[-1] != cfg.d:
            raise ValueError(f"encoder expects width {cfg.d}, got {x.shape}")
        temb = self._as_tensor(t_emb)
        if temb.value.ndim == 1:
            temb = ad.reshape(temb, (1, temb.value.shape[0]))
        proj = ad.add(ad.matmul(temb, p["step.w"]), p["step.b"])
        x = ad.add(x, proj)
        pe = None
        if cfg.slot_positions:
            pe = ad.constant(slot_positional_table(x.shape[-2], cfg.d))
        for i in range(cfg.n_layers):
            pre = f"enc{i}"
            h = ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            if pe is not None:
                h = ad.add(h, pe)  # slot identity fed to the branch, not the trunk
            x = ad.add(x, self._self_attention(h, pre))
            h = ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            ff = ad.add(ad.matmul(h, p[f"{pre}.w1"]), p[f"{pre}.b1"])
            ff = ad.add(ad.matmul(ad.relu(ff), p[f"{pre}.w2"]), p[f"{pre}.b2"])
            x = ad.add(x, ff)
        return x

    def _self_attention(self, h: Tensor, pre: str) -> Tensor:
        cfg, p = self.cfg, self.params
        qs = ad.split(ad.matmul(h, p[f"{pre}.wq"]), cfg.n_heads)
        ks = ad.split(ad.matmul(h, p[f"{pre}.wk"]), cfg.n_heads)
        vs = ad.split(ad.matmul(h, p[f"{pre}.wv"]), cfg.n_heads)
        temper = 1.0 / math.sqrt(cfg.d_head)
        heads = []
        for q, k, v in zip(qs, ks, vs):
            att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), temper))
            heads.append(ad.matmul(att, v))
        return ad.matmul(ad.concat(heads), p[f"{pre}.wo"])

    def project_population(self, pop) -> Tensor:
        """Two-layer perceptron mapping per-slot cell distributions to width d."""
        cfg, p = self.cfg, self.params
        x = self._as_tensor(pop)
        squeeze = x.value.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, x.value.shape[0]))
        if x.shape[-1] != cfg.n_cells:
            raise ValueError(f"population rows must have {cfg.n_cells} cells, got {x.shape}")
        sums = x.value.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("population rows must be normalized distributions")
        h = ad.tanh(ad.add(ad.matmul(x, p["pop.w1"]), p["pop.b1"]))
        out = ad.add(ad.matmul(h, p["pop.w2"]), p["pop.b2"])
        return ad.reshape(out, (cfg.d,)) if squeeze else out

    def cross_attention(self, enc: Tensor, pop_proj: Tensor,
                        return_weights: bool = False):
        """Per-slot attention from the trajectory stream onto population slots."""
        cfg, p = self.cfg, self.params
        enc = self._as_tensor(enc)
        pop_proj = self._as_tensor(pop_proj)
        if enc.shape[-2] != pop_proj.shape[-2]:
            raise ValueError(f"slot counts differ: {enc.shape} vs {pop_proj.shape}")
        q_in = enc
        if cfg.slot_positions:
            # positional queries let slot n seek its own population slot; keys
            # stay pure projections so constant fields still attend uniformly
            q_in = ad.add(enc, ad.constant(slot_positional_table(enc.shape[-2], cfg.d)))
        qs = ad.split(ad.matmul(q_in, p["xattn.wq"]), cfg.n_heads)
        ks = ad.split(ad.matmul(pop_proj, p["xattn.wk"]), cfg.n_heads)
        value_src = pop_proj if cfg.value_source == "population" else enc
        vs = ad.split(ad.matmul(value_src, p["xattn.wv"]), cfg.n_heads)
        temper = 1.0 / math.sqrt(cfg.d_head)
        heads, weights = [], []
        for q, k, v in zip(qs, ks, vs):
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), temper)
            if np.isnan(scores.value).any():
                raise RuntimeError("NaN attention scores")
            att = ad.softmax(scores)
            weights.append(att.value)
            heads.append(ad.matmul(att, v))
        out = ad.add(enc, ad.concat(heads))
        return (out, weights) if return_weights else out

    def decode(self, x: Tensor) -> Tensor:
        """Width-3 convolutions with a gated activation, plus a residual path."""
        p = self.params
        x = self._as_tensor(x)
        f = ad.add(ad.conv1d_same(x, p["dec.wf"]), p["dec.bf"])
        g = ad.add(ad.conv1d_same(x, p["dec.wg"]), p["dec.bg"])
        h = ad.gated(f, g)
        y = ad.add(ad.conv1d_same(h, p["dec.wo"]), p["dec.bo"])
        return ad.add(x, y)

    def denoise(self, e_t, t: int, pop) -> Tensor:
        """Predict the clean embedding from a noisy one at diffusion step t."""
        if t < 1:
            raise ValueError("diffusion step must be at least 1")
        enc = self.encode(e_t, step_embedding(t, self.cfg.step_dim))
        pop_proj = self.project_population(pop)
        mixed = self.cross_attention(enc, pop_proj)
        return self.decode(mixed)

    __call__ = denoise

    # -- persistence ----------------------------------------------------------

    def save(self, path: str, extra_meta: dict[str, str] | None = None) -> None:
        meta = {k: str(v) for k, v in asdict(self.cfg).items()}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str) -> tuple["Denoiser", dict[str, str]]:
        arrays, meta = ad.load_checkpoint(path)
        kwargs = {}
        for f, cast in (("n_cells", int), ("d", int), ("n_heads", int), ("n_layers", int),
                        ("conv_channels", int), ("conv_width", int), ("step_dim", int),
                        ("ff_hidden", int), ("pop_hidden", int), ("value_source", str)):
            if f in meta:
                kwargs[f] = cast(meta.pop(f))
        if "slot_positions" in meta:
            kwargs["slot_positions"] = meta.pop("slot_positions") == "True"
        cfg = DenoiserConfig(**kwargs)
        return cls(cfg, params=ad.param_store_from_arrays(arrays)), meta
