import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tape.model import ModelConfig, init_params
from tape.model.params import load_checkpoint
from tape.numcore import Rng, value_and_grad
from tape.tasks import (
    BOS, EOS, EQUALS, PAD, PLUS, VOCAB_SIZE,
    AccuracyGrid, AdamW, AdditionDataset, AdditionSample, TokenError, TrainConfig, TrainingDiverged,
    detokenize, encode_batch, evaluate_grid, gen_addition, gen_cell, lr_at, resume, tokenize, train,
)
from tape.tasks.optim import clip_grad_norm
from tape.tasks.train import batch_indices, loss_fn

TINY = ModelConfig(vocab=VOCAB_SIZE + 1, n_ctx=40, dim=16, heads=2, depth=1)


@pytest.fixture(scope="module")
def data():
    return AdditionDataset.generate(3, 400, seed=0)


# ---------------------------------------------------------------- generation and tokens

def test_single_digit_sums():
    for s in gen_addition(1, 50, Rng(0)):
        assert len(s.operand_a) == len(s.operand_b) == 1
        assert int(s.answer) == int(s.operand_a) + int(s.operand_b)
    assert str(AdditionSample("7", "5")) == "7+5=12"
    assert AdditionSample("12", "34").answer == "46"


def test_no_leading_zeros_and_determinism():
    a = gen_addition(6, 300, Rng(1))
    assert a == gen_addition(6, 300, Rng(1))
    for s in a:
        for op in (s.operand_a, s.operand_b):
            assert len(op) == 1 or op[0] != "0"
    with pytest.raises(ValueError):
        gen_addition(0, 1, Rng(0))


def test_length_histogram_uniform():
    samples = gen_addition(10, 100_000, Rng(2))
    counts = np.bincount([s.lengths[0] for s in samples], minlength=11)[1:]
    expected = 10_000
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 27.9  # 99.9% quantile of chi-square with 9 dof


def test_lsd_first_layout():
    prompt, target = tokenize(AdditionSample("12", "34"))
    assert prompt == [BOS, 2, 1, PLUS, 4, 3, EQUALS]
    assert target == [6, 4, EOS]
    prompt, target = tokenize(AdditionSample("12", "34"), lsd_first=False)
    assert prompt[1:3] == [1, 2] and target == [4, 6, EOS]


@given(st.integers(0, 10**12), st.integers(0, 10**12), st.booleans())
def test_detokenize_roundtrip(a, b, lsd):
    s = AdditionSample(str(a), str(b))
    p, t = tokenize(s, lsd)
    assert detokenize(p + t, lsd) == str(s)


def test_token_errors():
    with pytest.raises(TokenError):
        detokenize([99])
    with pytest.raises(TokenError):
        tokenize(AdditionSample("1a", "2"))


def test_batch_loss_mask():
    samples = gen_addition(5, 64, Rng(3))
    b = encode_batch(samples)
    assert not np.any(b.weights[b.targets == PAD])
    for r, s in enumerate(samples):
        _, target = tokenize(s)
        assert b.weights[r].sum() == len(target)
        np.testing.assert_array_equal(b.targets[r][b.weights[r] == 1], target)


def test_prompt_positions_get_zero_gradient(data):
    # perturbing logits at non-answer positions must not change the loss
    batch = data.batch(np.arange(8))
    p = init_params(TINY, Rng(4))
    from tape.numcore import tensor as T

    def f(leaves):
        return T.cross_entropy(leaves["z"], batch.targets, batch.weights)

    z = Rng(5).normal(batch.targets.shape + (TINY.vocab,))
    _, g = value_and_grad(f, {"z": z})
    assert np.all(g["z"][batch.weights == 0] == 0.0)


def test_dataset_cache_roundtrip(tmp_path, data):
    data.save(tmp_path / "d.tapa")
    back = AdditionDataset.load(tmp_path / "d.tapa")
    np.testing.assert_array_equal(back.tokens, data.tokens)
    assert (back.max_len, back.seed, back.lsd_first) == (3, 0, True)
    b = back.batch(np.array([0, 1]))
    assert b.inputs.shape[1] == b.targets.shape[1]


# ---------------------------------------------------------------- optimizer

def test_lr_schedule():
    assert lr_at(0, 1.0, 10, 100) == pytest.approx(0.1)
    assert lr_at(10, 1.0, 10, 100) == pytest.approx(1.0)
    assert lr_at(100, 1.0, 10, 100) == pytest.approx(0.1)


def test_adamw_first_step_and_decay():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    g = {"w": np.full((2, 2), 3.0), "b": np.full(2, -3.0)}
    AdamW(lr=0.1, weight_decay=0.5).step(p, g)
    # bias-corrected first step moves by lr * sign(g); matrices decay first
    np.testing.assert_allclose(p["w"], 1.0 * (1 - 0.05) - 0.1, atol=1e-7)
    np.testing.assert_allclose(p["b"], 1.1, atol=1e-7)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(np.linalg.norm(g["a"]), 1.0)


# ---------------------------------------------------------------- training

def test_zero_steps_checkpoint_equals_init(tmp_path, data):
    res = train(TINY, data, TrainConfig(steps=0), tmp_path)
    init = init_params(TINY, Rng(TINY.seed, 0))
    _, params, header = load_checkpoint(tmp_path / "checkpoint.tapa")
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])
    assert header["train.step"] == "0" and res.steps_done == 0


def test_training_is_deterministic(data):
    tc = TrainConfig(lr=1e-3, steps=6, batch_size=8)
    a = train(TINY, data, tc)
    b = train(TINY, data, tc)
    assert a.losses == b.losses
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_resume_reproduces_next_step(tmp_path, data):
    tc = TrainConfig(lr=1e-3, steps=6, batch_size=8, checkpoint_every=3)
    full = train(TINY, data, tc)
    part = train(TINY, data, TrainConfig(lr=1e-3, steps=6, batch_size=8, checkpoint_every=3, time_budget=1e-9),
                 tmp_path / "a")
    assert part.stopped_early and part.steps_done < 6
    cont = resume(tmp_path / "a" / "checkpoint.tapa", data, tc, tmp_path / "b")
    assert cont.losses == full.losses[part.steps_done:]
    # CPU time accumulates across the resume
    before = float(load_checkpoint(tmp_path / "a" / "checkpoint.tapa")[2]["train.cpu_seconds"])
    after = float(load_checkpoint(tmp_path / "b" / "checkpoint.tapa")[2]["train.cpu_seconds"])
    assert 0 < before < after


def test_loss_curve_written(tmp_path, data):
    train(TINY, data, TrainConfig(steps=3, batch_size=4), tmp_path)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4


def test_divergence_reports_last_checkpoint(tmp_path, data):
    class Poisoned:
        """Batches turn non-finite from step 3 on."""

        calls = 0

        def __len__(self):
            return len(data)

        def batch(self, idx):
            b = data.batch(idx)
            Poisoned.calls += 1
            if Poisoned.calls > 3:
                b.weights = b.weights * np.nan
            return b

    tc = TrainConfig(lr=1e-3, steps=10, batch_size=8, checkpoint_every=2)
    with pytest.raises(TrainingDiverged) as info:
        train(TINY, Poisoned(), tc, tmp_path)
    assert info.value.step == 3
    assert info.value.checkpoint == tmp_path / "checkpoint.tapa" and info.value.checkpoint.exists()
    _, _, header = load_checkpoint(info.value.checkpoint)
    assert header["train.step"] == "2"


def test_overfit_single_batch():
    data = AdditionDataset.generate(2, 8, seed=1)
    tc = TrainConfig(lr=3e-3, steps=500, batch_size=8, warmup=20, weight_decay=0.0)
    losses = []

    class Fixed:
        def __len__(self):
            return 8

        def batch(self, idx):
            return data.batch(np.arange(8))

    res = train(TINY.replace(dim=32), Fixed(), tc, callback=lambda s, l, p: losses.append(l))
    assert min(losses) < 0.01, losses[-5:]


def test_batch_indices_depend_on_seed_and_step():
    a = batch_indices(0, 5, 100, 8)
    np.testing.assert_array_equal(a, batch_indices(0, 5, 100, 8))
    assert not np.array_equal(a, batch_indices(0, 6, 100, 8))


# ---------------------------------------------------------------- evaluation

def test_untrained_model_scores_near_zero():
    grid = evaluate_grid(TINY, init_params(TINY, Rng(6)), 3, 10, Rng(7), train_len=2)
    assert grid.acc.shape == (3, 3) and grid.mean < 0.1


def test_accuracy_grid_regions_and_csv(tmp_path):
    acc = np.arange(16, dtype=float).reshape(4, 4) / 16
    g = AccuracyGrid(acc, train_len=2)
    assert g.in_distribution == pytest.approx(acc[:2, :2].mean())
    mask = g.region_mask(3, 4)
    assert mask.sum() == 12 and not mask[:2, :2].any()
    g.to_csv(tmp_path / "g.csv", tag="x")
    back = AccuracyGrid.from_csv(tmp_path / "g.csv", 2)
    np.testing.assert_allclose(back.acc, acc, atol=1e-6)
    assert g.mean == pytest.approx(acc.mean())


def test_evaluate_grid_rejects_zero_samples():
    with pytest.raises(ValueError):
        evaluate_grid(TINY, init_params(TINY), 2, 0, Rng(0))


def test_exact_match_needs_eos():
    from tape.tasks.evaluate import exact_match
    # a model that always predicts digit 0 can only be right on 0+0 if it also stops
    cfg, params = TINY, init_params(TINY, Rng(8))
    params["embed"][:] = 0.0
    hits = exact_match(cfg, params, gen_cell(1, 1, 5, Rng(9)))
    assert set(np.unique(hits)) <= {0.0, 1.0}


def test_float32_training_tracks_float64(data):
    a = train(TINY, data, TrainConfig(lr=1e-3, steps=4, batch_size=8))
    b = train(TINY, data, TrainConfig(lr=1e-3, steps=4, batch_size=8, precision="float32"))
    np.testing.assert_allclose([l for _, l in b.losses], [l for _, l in a.losses], rtol=1e-4)
    assert all(v.dtype == np.float64 for v in b.params.values())
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")
