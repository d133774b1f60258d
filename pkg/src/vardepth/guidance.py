"""Classifier-free-guidance depth sampling across the scale schedule.

Each of the K stages produces one token map. The prior branch turns
next-scale logits into a continuous embedding (the probability-weighted
codebook average over the top-k support); the conditional branch predicts the
final latent with the upsampler and re-encodes it down to the current scale.
The two are combined per scale with weight w_k in codebook-embedding space,

    combined = f_c + w_k * (f_c - f_u),

computed in float64 so w=0 returns the conditional branch bitwise and w=-1
the prior branch bitwise, then quantized to the nearest codebook rows. The
base pipeline is deterministic; stochasticity exists only in the ensemble
variant, whose members draw prior-branch tokens categorically and combine by
a per-pixel median.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DependencyError, NonFiniteError, ShapeError
from .prior import VarPrior, sample_scale, topk_probabilities
from .synthdata import denormalize_depth
from .tokenizer import Codebook, MsvqTokenizer, TokenMap, lookup, quantize
from .upsampler import CondUpsampler, reencode

PRESET_NAMES = ("none", "constant", "optimized")
DEFAULT_CONSTANT_WEIGHT = 3.5


@dataclass
class GuidanceConfig:
    weights: tuple[float, ...]
    temperature: float = 1.0
    top_k: int = 16
    seed: int = 0

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if not self.weights:
            raise ConfigError("guidance needs at least one weight")
        if not all(np.isfinite(w) for w in self.weights):
            raise ConfigError(f"non-finite guidance weight in {self.weights}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature {self.temperature} must be positive")
        if int(self.top_k) < 1:
            raise ConfigError(f"top_k {self.top_k} must be at least 1")
        self.top_k = int(self.top_k)

    @property
    def n_scales(self) -> int:
        return len(self.weights)


def make_schedule(preset, n_scales: int = 10, *, temperature: float = 1.0,
                  top_k: int = 16, seed: int = 0,
                  late_weight: float = DEFAULT_CONSTANT_WEIGHT) -> GuidanceConfig:
    """Guidance weights from a named preset or an explicit length-K sequence.

    Presets: "none" (w = -1 everywhere: pure prior), "constant" (one fixed
    weight everywhere), "optimized" (pure prior at early scales, guidance from
    the schedule midpoint on).
    """
    if isinstance(preset, str):
        if preset == "none":
            weights = (-1.0,) * n_scales
        elif preset == "constant":
            weights = (late_weight,) * n_scales
        elif preset == "optimized":
            switch = n_scales // 2  # first guided scale, 0-based
            weights = (-1.0,) * switch + (late_weight,) * (n_scales - switch)
        else:
            raise ConfigError(
                f"unknown guidance preset '{preset}' (known: {', '.join(PRESET_NAMES)})"
            )
    else:
        weights = tuple(float(w) for w in preset)
        if len(weights) != n_scales:
            raise ConfigError(
                f"expected {n_scales} guidance weights, got {len(weights)}"
            )
    return GuidanceConfig(weights=weights, temperature=temperature,
                          top_k=top_k, seed=seed)


def combine_guidance(f_c, f_u, w: float) -> np.ndarray:
    """(1+w)*f_c - w*f_u, evaluated as f_c + w*(f_c - f_u).

    Stays in float64 so the affine-in-w identity is exact and the w=0 / w=-1
    endpoints return the branches without any rounding; quantization happens
    downstream in the same precision.
    """
    a = f_c.data if isinstance(f_c, Tensor) else np.asarray(f_c)
    b = f_u.data if isinstance(f_u, Tensor) else np.asarray(f_u)
    if a.shape != b.shape:
        raise ShapeError(f"combine_guidance: {a.shape} vs {b.shape}")
    if not np.isfinite(w):
        raise ConfigError(f"guidance weight {w} is not finite")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    return a64 + np.float64(w) * (a64 - b64)


def expected_embedding(logits: np.ndarray, codebook: Codebook, temperature: float,
                       top_k: int, hw: tuple[int, int]) -> np.ndarray:
    """Probability-weighted codebook average per position, as a (C, h, w) map."""
    k = min(int(top_k), codebook.vocab_size)
    probs = topk_probabilities(np.asarray(logits), temperature, k)
    emb = probs @ codebook.entries.astype(np.float64)
    h, w = hw
    return np.ascontiguousarray(emb.T.reshape(codebook.channels, h, w)).astype(np.float32)


@dataclass
class SamplerModels:
    depth_tokenizer: MsvqTokenizer
    rgb_tokenizer: MsvqTokenizer
    prior: VarPrior
    upsampler: CondUpsampler
    depth_range: tuple[float, float] = (1.0, 20.0)


@dataclass
class SamplerState:
    tokens: list[TokenMap] = field(default_factory=list)
    latent: np.ndarray | None = None
    stage_ms: list[float] = field(default_factory=list)
    decode_ms: float = 0.0
    total_ms: float = 0.0


def _check_models(models: SamplerModels) -> None:
    for name in ("depth_tokenizer", "rgb_tokenizer", "prior", "upsampler"):
        if getattr(models, name, None) is None:
            raise DependencyError(f"sampler is missing a trained {name}")
    lo, hi = models.depth_range
    if not hi > lo:
        raise ConfigError(f"depth range ({lo}, {hi}) must be increasing")


def _check_config(cfg: GuidanceConfig, models: SamplerModels) -> None:
    k = models.depth_tokenizer.config.n_scales
    if cfg.n_scales != k:
        raise ConfigError(f"{cfg.n_scales} guidance weights for {k} scales")


def _prepare_condition(x, models: SamplerModels):
    """RGB in [0, 1] -> (condition latent (C, h, w), prior condition rows)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"expected RGB (3, H, W), got {data.shape}")
    if not np.isfinite(data).all():
        raise NonFiniteError("RGB input contains non-finite values")
    c_latent = models.rgb_tokenizer.encode_image(
        Tensor(data * np.float32(2.0) - np.float32(1.0))).data
    expect = models.depth_tokenizer.config.schedule[-1]
    if c_latent.shape[1:] != expect:
        raise ShapeError(
            f"input yields a {c_latent.shape[1:]} latent grid, schedule wants {expect}"
        )
    cond_rows = models.prior.project_condition(c_latent)
    return c_latent, cond_rows


def _prior_embedding(models: SamplerModels, state: SamplerState, cond_rows,
                     cfg: GuidanceConfig, k: int) -> np.ndarray:
    logits = models.prior.predict_scale_logits(state.tokens, cond_rows, k).data
    hw = models.depth_tokenizer.config.schedule[k - 1]
    return expected_embedding(logits, models.depth_tokenizer.codebook,
                              cfg.temperature, cfg.top_k, hw)


def _conditional_tokens(models: SamplerModels, state: SamplerState,
                        c_latent: np.ndarray, k: int) -> TokenMap:
    tok = models.depth_tokenizer
    full = tok.config.schedule[-1]
    if state.latent is None:
        partial = np.zeros((tok.config.latent_channels,) + full, dtype=np.float32)
    else:
        partial = ad.resize_bilinear(Tensor(state.latent), full).data
    pred = models.upsampler.predict(partial, c_latent, k).data
    _, tm = reencode(tok, pred, k)
    return tm


def _push_token(models: SamplerModels, state: SamplerState, k: int,
                indices: np.ndarray) -> None:
    state.tokens.append(TokenMap(k, indices))
    state.latent = models.depth_tokenizer.decode_multiscale(state.tokens)


def _decode_depth(models: SamplerModels, state: SamplerState) -> np.ndarray:
    norm = models.depth_tokenizer.decode_image(Tensor(state.latent)).data
    lo, hi = models.depth_range
    return denormalize_depth(norm, lo, hi)


def sample_depth(x, cfg: GuidanceConfig, models: SamplerModels,
                 _prior_tokens=None) -> tuple[np.ndarray, SamplerState]:
    """Full guided pipeline: RGB (3, H, W) in [0, 1] -> depth (1, H, W) meters.

    Runs exactly K scale stages, each recorded with its wall-clock
    milliseconds (the first stage also covers condition encoding), then one
    timed decode. Deterministic for fixed inputs and parameters.
    """
    _check_models(models)
    _check_config(cfg, models)
    codebook = models.depth_tokenizer.codebook
    state = SamplerState()
    t_total = time.perf_counter()
    with ad.no_grad():
        c_latent = cond_rows = None
        for k in range(1, cfg.n_scales + 1):
            t0 = time.perf_counter()
            if k == 1:
                c_latent, cond_rows = _prepare_condition(x, models)
            if _prior_tokens is None:
                f_u = _prior_embedding(models, state, cond_rows, cfg, k)
            else:
                f_u = _prior_tokens(models, state, cond_rows, cfg, k)
            tm_c = _conditional_tokens(models, state, c_latent, k)
            f_c = lookup(tm_c, codebook)
            combined = combine_guidance(f_c, f_u, cfg.weights[k - 1])
            _push_token(models, state, k, quantize(combined, codebook))
            state.stage_ms.append((time.perf_counter() - t0) * 1000.0)
        t1 = time.perf_counter()
        depth = _decode_depth(models, state)
        state.decode_ms = (time.perf_counter() - t1) * 1000.0
    state.total_ms = (time.perf_counter() - t_total) * 1000.0
    return depth, state


def sample_prior_only(x, cfg: GuidanceConfig,
                      models: SamplerModels) -> tuple[np.ndarray, SamplerState]:
    """Prior-branch-only sampler: never invokes the upsampler.

    Quantizes the prior's expected embedding directly at every scale, which is
    exactly what the full pipeline produces under w_k = -1 for all k.
    """
    _check_models(models)
    _check_config(cfg, models)
    codebook = models.depth_tokenizer.codebook
    state = SamplerState()
    t_total = time.perf_counter()
    with ad.no_grad():
        cond_rows = None
        for k in range(1, cfg.n_scales + 1):
            t0 = time.perf_counter()
            if k == 1:
                _, cond_rows = _prepare_condition(x, models)
            f_u = _prior_embedding(models, state, cond_rows, cfg, k)
            _push_token(models, state, k, quantize(f_u, codebook))
            state.stage_ms.append((time.perf_counter() - t0) * 1000.0)
        t1 = time.perf_counter()
        depth = _decode_depth(models, state)
        state.decode_ms = (time.perf_counter() - t1) * 1000.0
    state.total_ms = (time.perf_counter() - t_total) * 1000.0
    return depth, state


def sample_depth_ensemble(x, cfg: GuidanceConfig, models: SamplerModels,
                          n_members: int) -> tuple[np.ndarray, list[SamplerState]]:
    """Median depth over stochastic pipeline runs.

    Each member replaces the prior branch's expected embedding with the
    embedding of categorically sampled tokens (temperature and top_k from the
    config, seeds derived from cfg.seed), so members genuinely differ.
    """
    if n_members < 1:
        raise ConfigError(f"ensemble needs at least 1 member, got {n_members}")
    depths, states = [], []
    for member in range(n_members):
        def sampled_branch(mdl, state, cond_rows, c, k, _m=member):
            logits = mdl.prior.predict_scale_logits(state.tokens, cond_rows, k).data
            idx = sample_scale(logits, c.temperature, c.top_k,
                               seed=(c.seed, _m, k))
            hw = mdl.depth_tokenizer.config.schedule[k - 1]
            return lookup(idx.reshape(hw), mdl.depth_tokenizer.codebook)
        d, s = sample_depth(x, cfg, models, _prior_tokens=sampled_branch)
        depths.append(d)
        states.append(s)
    return np.median(np.stack(depths), axis=0).astype(np.float32), states
