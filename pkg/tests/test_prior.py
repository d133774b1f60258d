"""Next-scale prior: mask structure, loss consistency, sampling, gradients."""

import math

import numpy as np
import pytest

from vardepth.autodiff import Tensor, gradcheck
from vardepth.errors import ConfigError, ContractError, ShapeError
from vardepth.prior import (
    PriorConfig,
    VarPrior,
    block_causal_mask,
    sample_scale,
    scale_offsets,
    topk_probabilities,
    train_prior,
)
from vardepth.tokenizer import DEFAULT_SCHEDULE, TokenMap

TINY_SCHEDULE = ((1, 1), (1, 2), (2, 2), (2, 3))


def tiny_config(**overrides):
    base = dict(
        vocab_size=11,
        cond_channels=3,
        schedule=TINY_SCHEDULE,
        d_model=16,
        n_blocks=2,
        n_heads=2,
        ffn_mult=2,
        cond_dropout=0.0,
    )
    base.update(overrides)
    return PriorConfig(**base)


def make_prior(seed=0, **overrides) -> VarPrior:
    return VarPrior(np.random.default_rng(seed), tiny_config(**overrides))


def random_tokens(rng, cfg) -> list[TokenMap]:
    return [
        TokenMap(k + 1, rng.integers(0, cfg.vocab_size, size=hw).astype(np.int32))
        for k, hw in enumerate(cfg.schedule)
    ]


def random_cond_latent(rng, cfg, h=2, w=2) -> np.ndarray:
    return rng.standard_normal((cfg.cond_channels, h, w)).astype(np.float32)


# -- sequence layout ----------------------------------------------------------


def test_scale_offsets_match_cumulative_counts():
    counts, offsets = scale_offsets(DEFAULT_SCHEDULE)
    expected_counts = [h * w for h, w in DEFAULT_SCHEDULE]
    assert counts.tolist() == expected_counts
    assert offsets.tolist() == list(np.cumsum([0] + expected_counts[:-1]))
    assert int(counts.sum()) == 194


def test_block_causal_mask_matches_scale_comparison_oracle():
    for schedule in (TINY_SCHEDULE, DEFAULT_SCHEDULE):
        mask = block_causal_mask(schedule)
        scale_of = np.concatenate(
            [np.full(h * w, k) for k, (h, w) in enumerate(schedule)]
        )
        n = scale_of.size
        assert mask.shape == (n, n)
        assert mask.dtype == np.bool_
        oracle = scale_of[None, :] <= scale_of[:, None]
        assert np.array_equal(mask, oracle)


def test_mask_allows_full_attention_within_a_scale():
    mask = block_causal_mask(TINY_SCHEDULE)
    counts, offsets = scale_offsets(TINY_SCHEDULE)
    for c, o in zip(counts, offsets):
        assert mask[o : o + c, o : o + c].all()


# -- initial loss -------------------------------------------------------------


def test_initial_teacher_forcing_loss_is_log_vocab():
    # The output head starts at zero, so every position is exactly uniform.
    prior = make_prior(seed=3)
    rng = np.random.default_rng(7)
    tokens = random_tokens(rng, prior.config)
    cond = prior.project_condition(random_cond_latent(rng, prior.config))
    loss = float(prior.teacher_forcing_loss(tokens, cond).data)
    assert loss == pytest.approx(math.log(prior.config.vocab_size), rel=1e-6)


# -- incremental / teacher-forcing agreement ----------------------------------


def test_per_scale_logits_reproduce_teacher_forcing_loss():
    """Scoring scale by scale must agree with the single stacked pass.

    This is the causality check: predict_scale_logits(k) only ever sees the
    prefix, so agreement proves the stacked pass leaks nothing from finer
    scales into coarser rows.
    """
    prior = make_prior(seed=5)
    rng = np.random.default_rng(11)
    # Move off the zero-head init so the comparison is not trivially ln V.
    for p in prior.parameters():
        p.data += rng.standard_normal(p.shape).astype(np.float32) * 0.05
    cfg = prior.config
    tokens = random_tokens(rng, cfg)
    cond = prior.project_condition(random_cond_latent(rng, cfg))

    total_nll = 0.0
    total_positions = 0
    for k in range(1, cfg.n_scales + 1):
        logits = prior.predict_scale_logits(tokens[: k - 1], cond, k).data
        logits = logits.astype(np.float64)
        targets = tokens[k - 1].indices.reshape(-1)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total_nll += -log_probs[np.arange(targets.size), targets].sum()
        total_positions += targets.size

    stacked = float(prior.teacher_forcing_loss(tokens, cond).data)
    assert stacked == pytest.approx(total_nll / total_positions, abs=1e-5)


def test_batch_loss_is_mean_of_single_sample_losses():
    # Every sample contributes the same number of positions, so the pooled
    # mean equals the mean of per-sample means.
    prior = make_prior(seed=9)
    rng = np.random.default_rng(13)
    for p in prior.parameters():
        p.data += rng.standard_normal(p.shape).astype(np.float32) * 0.05
    samples = []
    singles = []
    for _ in range(3):
        tokens = random_tokens(rng, prior.config)
        cond = prior.project_condition(random_cond_latent(rng, prior.config))
        samples.append((tokens, cond))
        singles.append(float(prior.teacher_forcing_loss(tokens, cond).data))
    batched = float(prior.teacher_forcing_batch(samples).data)
    assert batched == pytest.approx(np.mean(singles), abs=1e-5)


def test_batch_rejects_empty_and_mismatched_condition_lengths():
    prior = make_prior()
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        prior.teacher_forcing_batch([])
    a = random_tokens(rng, prior.config)
    b = random_tokens(rng, prior.config)
    cond_a = prior.project_condition(random_cond_latent(rng, prior.config, 2, 2))
    cond_b = prior.project_condition(random_cond_latent(rng, prior.config, 2, 3))
    with pytest.raises(ShapeError):
        prior.teacher_forcing_batch([(a, cond_a), (b, cond_b)])


# -- prefix contract ----------------------------------------------------------


def test_predict_rejects_bad_prefixes():
    prior = make_prior()
    rng = np.random.default_rng(1)
    tokens = random_tokens(rng, prior.config)
    cond = prior.project_condition(random_cond_latent(rng, prior.config))
    with pytest.raises(IndexError):
        prior.predict_scale_logits([], cond, 0)
    with pytest.raises(IndexError):
        prior.predict_scale_logits([], cond, prior.config.n_scales + 1)
    with pytest.raises(ContractError):
        prior.predict_scale_logits(tokens[:2], cond, 2)
    bad = [TokenMap(1, np.zeros((2, 2), dtype=np.int32))]
    with pytest.raises(ShapeError):
        prior.predict_scale_logits(bad, cond, 2)


def test_condition_projection_shapes():
    prior = make_prior()
    rng = np.random.default_rng(2)
    rows = prior.project_condition(random_cond_latent(rng, prior.config, 3, 4))
    assert rows.shape == (12, prior.config.d_model)
    assert prior.null_condition().shape == (1, prior.config.d_model)
    with pytest.raises(ShapeError):
        prior.project_condition(rng.standard_normal((5, 3, 4)).astype(np.float32))
    with pytest.raises(ShapeError):
        prior.project_condition(rng.standard_normal((3, 4)).astype(np.float32))


def test_logit_shapes_follow_schedule():
    prior = make_prior(seed=4)
    rng = np.random.default_rng(6)
    tokens = random_tokens(rng, prior.config)
    cond = prior.project_condition(random_cond_latent(rng, prior.config))
    for k, (h, w) in enumerate(prior.config.schedule, start=1):
        logits = prior.predict_scale_logits(tokens[: k - 1], cond, k)
        assert logits.shape == (h * w, prior.config.vocab_size)


# -- sampling -----------------------------------------------------------------


def test_topk_probabilities_match_plain_softmax_oracle():
    rng = np.random.default_rng(21)
    logits = rng.standard_normal((8, 17))
    temperature = 0.7
    for top_k in (1, 4, 17):
        got = topk_probabilities(logits, temperature, top_k)
        scaled = logits.astype(np.float64) / temperature
        expect = np.zeros_like(scaled)
        for i in range(scaled.shape[0]):
            keep = np.argsort(-scaled[i], kind="stable")[:top_k]
            row = np.exp(scaled[i, keep] - scaled[i, keep].max())
            expect[i, keep] = row / row.sum()
        assert got.shape == expect.shape
        np.testing.assert_allclose(got, expect, atol=1e-12)
        np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_topk_tie_at_the_boundary_keeps_lowest_index():
    logits = np.array([[1.0, 2.0, 2.0, 0.0]])
    probs = topk_probabilities(logits, 1.0, 1)
    assert probs[0, 1] == 1.0
    assert probs[0, 2] == 0.0


def test_sample_scale_argmax_fast_path_ignores_seed_and_temperature():
    rng = np.random.default_rng(31)
    logits = rng.standard_normal((6, 9)).astype(np.float32)
    want = np.argmax(logits, axis=1)
    for seed, temp in ((0, 1.0), (123, 0.01), (7, 50.0)):
        got = sample_scale(logits, temp, 1, seed)
        assert got.dtype == np.int32
        np.testing.assert_array_equal(got, want)


def test_sample_scale_is_seed_deterministic_and_respects_support():
    rng = np.random.default_rng(41)
    logits = rng.standard_normal((40, 12))
    a = sample_scale(logits, 0.9, 3, seed=5)
    b = sample_scale(logits, 0.9, 3, seed=5)
    np.testing.assert_array_equal(a, b)
    c = sample_scale(logits, 0.9, 3, seed=6)
    assert not np.array_equal(a, c)  # 40 rows, 3-way support: collision is ~0
    support = topk_probabilities(logits, 0.9, 3) > 0
    assert support[np.arange(40), a].all()


def test_sample_scale_rejects_bad_arguments():
    logits = np.zeros((2, 4))
    with pytest.raises(ConfigError):
        sample_scale(logits, 0.0, 2, seed=0)
    with pytest.raises(ConfigError):
        sample_scale(logits, -1.0, 2, seed=0)
    with pytest.raises(ConfigError):
        sample_scale(logits, 1.0, 0, seed=0)
    with pytest.raises(ConfigError):
        sample_scale(logits, 1.0, 5, seed=0)
    with pytest.raises(ShapeError):
        sample_scale(np.zeros(4), 1.0, 2, seed=0)


def test_sampled_tokens_cover_the_topk_support_eventually():
    # With temperature 1 and k = 3, all three supported columns of a flat row
    # should appear across enough seeds.
    logits = np.zeros((1, 3))
    seen = {int(sample_scale(logits, 1.0, 3, seed=s)[0]) for s in range(64)}
    assert seen == {0, 1, 2}


# -- configuration ------------------------------------------------------------


def test_config_rejects_bad_heads_and_dropout():
    with pytest.raises(ConfigError):
        tiny_config(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        tiny_config(cond_dropout=1.0)
    with pytest.raises(ConfigError):
        tiny_config(cond_dropout=-0.1)


# -- gradients ----------------------------------------------------------------


def test_full_model_gradient_against_finite_differences():
    # Full transformer stack through the teacher-forcing loss. LayerNorm
    # statistics make the landscape slightly stiffer than the per-op cases,
    # hence the looser 5e-3 budget at h = 1e-3.
    prior = make_prior(seed=17, d_model=8, n_blocks=1, ffn_mult=2)
    rng = np.random.default_rng(19)
    for p in prior.parameters():
        p.data += rng.standard_normal(p.shape).astype(np.float32) * 0.05
    tokens = random_tokens(rng, prior.config)
    c_latent = random_cond_latent(rng, prior.config)

    def loss_fn(*_params):
        cond = prior.project_condition(c_latent)
        return prior.teacher_forcing_loss(tokens, cond)

    err = gradcheck(loss_fn, prior.parameters(), h=1e-3)
    assert err < 5e-3, f"worst relative gradient error {err:.3e}"


# -- training loop ------------------------------------------------------------


def test_training_reduces_loss_from_uniform():
    prior = make_prior(seed=23)
    rng = np.random.default_rng(29)
    dataset = [
        (random_tokens(rng, prior.config), random_cond_latent(rng, prior.config))
        for _ in range(4)
    ]
    stats = train_prior(
        prior, dataset, epochs=25, lr=5e-3, batch_size=2,
        rng=np.random.default_rng(0),
    )
    assert len(stats.epoch_losses) == 25
    assert len(stats.step_losses) == 25 * 2
    assert stats.epoch_losses[0] < math.log(prior.config.vocab_size) + 1e-3
    assert stats.epoch_losses[-1] < stats.epoch_losses[0] * 0.8


def test_training_with_condition_dropout_runs():
    prior = make_prior(seed=23, cond_dropout=0.5)
    rng = np.random.default_rng(29)
    dataset = [
        (random_tokens(rng, prior.config), random_cond_latent(rng, prior.config))
        for _ in range(4)
    ]
    stats = train_prior(
        prior, dataset, epochs=2, lr=1e-3, batch_size=4,
        rng=np.random.default_rng(1),
    )
    assert all(np.isfinite(stats.step_losses))


def test_training_rejects_empty_dataset():
    prior = make_prior()
    with pytest.raises(ConfigError):
        train_prior(prior, [], epochs=1, lr=1e-3, batch_size=1,
                    rng=np.random.default_rng(0))
