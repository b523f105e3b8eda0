import json
import math

import numpy as np
import pytest
import torch

import maskfuse as mf
from maskfuse.training import (_batch_loss, _build_cache, freeze_non_trainable,
                            make_optimizer, prior_token_mask)


def build_models(small_dims, seed=0, variant="sim_affine"):
    enc = mf.init_encoder(small_dims, seed=seed)
    psm = mf.PsmHead(variant, embed_dim=small_dims.embed_dim, hidden=24, seed=seed)
    return enc, psm


# ---------------------------------------------------------------------------
# Trainable set
# ---------------------------------------------------------------------------


def test_trainable_set_names(small_dims):
    enc, psm = build_models(small_dims)
    names = set(mf.trainable_set(enc, psm))
    expected = {"encoder.log_alpha", "psm.w1", "psm.b1", "psm.w2", "psm.b2",
                "psm.log_logit_scale"}
    for i in range(small_dims.layers):
        for proj in ("q", "v"):
            expected.add(f"encoder.blocks.{i}.{proj}.weight")
            expected.add(f"encoder.blocks.{i}.{proj}.bias")
    assert names == expected
    assert not any(".k." in n or ".o." in n or "fc" in n or "ln" in n
                   or "patch_embed" in n or "pos_embed" in n for n in names)


def test_trainable_set_counts_for_four_layers():
    dims = mf.EncoderDims(layers=4, extractor_layers=2, width=32, embed_dim=16,
                          heads=4, grid=(4, 4), patch=4)
    enc = mf.init_encoder(dims, seed=0)
    psm = mf.PsmHead("embed_left", embed_dim=16, seed=0)
    names = mf.trainable_set(enc, psm)
    qv_weights = [n for n in names if n.endswith(".weight")]
    assert len(qv_weights) == 8  # 4 layers x {q, v}
    assert "psm.theta" in names and "encoder.log_alpha" in names


def test_frozen_parameters_do_not_move(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=1)
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    frozen_before = {n: p.detach().clone() for n, p in enc.named_parameters()
                     if f"encoder.{n}" not in mf.trainable_set(enc, psm)}
    cfg = mf.TrainConfig(total_steps=3, batch_size=2, seed=0)
    result = mf.train(cfg, samples, enc, text, psm)
    assert result.steps_run == 3 and not result.aborted
    for n, p in enc.named_parameters():
        if n in frozen_before:
            assert (p.detach() == frozen_before[n]).all(), n


def test_frozen_parameters_have_no_gradients(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=2)
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    freeze_non_trainable(enc, psm)
    cache = _build_cache(samples, enc.dims, "mask")
    loss = _batch_loss(enc, psm, torch.as_tensor(text.values), cache[:2])
    loss.backward()
    assert enc.blocks[0].k.weight.grad is None
    assert enc.patch_embed.grad is None
    assert enc.blocks[0].q.weight.grad is not None


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def test_cosine_schedule_closed_form():
    assert mf.cosine_lr_factor(0, 100) == 1.0
    assert abs(mf.cosine_lr_factor(50, 100) - 0.5) < 1e-15
    assert mf.cosine_lr_factor(100, 100) < 1e-15


def test_optimizer_group_learning_rates(small_dims):
    enc, psm = build_models(small_dims)
    cfg = mf.TrainConfig(base_lr=2e-4, qv_lr_multiplier=50.0)
    opt, scales = make_optimizer(enc, psm, cfg)
    assert scales == [50.0, 50.0, 1.0, 1.0]
    decayed = opt.param_groups[0]
    assert decayed["weight_decay"] == cfg.weight_decay
    assert opt.param_groups[1]["weight_decay"] == 0.0


def test_adamw_zero_grad_is_pure_weight_decay():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    lr, wd = 1e-2, 0.1
    opt = torch.optim.AdamW([{"params": [p], "lr": lr, "weight_decay": wd}],
                            betas=(0.9, 0.999), eps=1e-8)
    p.grad = torch.zeros_like(p)
    before = p.detach().clone()
    opt.step()
    assert torch.allclose(p.detach(), before * (1 - lr * wd), atol=1e-15)


def test_zero_learning_rate_keeps_parameters(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=3)
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    before = {n: p.detach().clone() for n, p in enc.named_parameters()}
    before.update({f"psm.{n}": p.detach().clone() for n, p in psm.named_parameters()})
    cfg = mf.TrainConfig(base_lr=0.0, total_steps=4, batch_size=2, seed=1)
    mf.train(cfg, samples, enc, text, psm)
    for n, p in enc.named_parameters():
        assert (p.detach() == before[n]).all(), n
    for n, p in psm.named_parameters():
        assert (p.detach() == before[f"psm.{n}"]).all(), n


# ---------------------------------------------------------------------------
# Training behaviour
# ---------------------------------------------------------------------------


def test_fixed_batch_loss_strictly_decreases(small_dims, tiny_samples):
    # a uniform 1e-4 step is small enough for monotone descent from init
    samples, vocab = tiny_samples
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    for seed in range(3):
        enc, psm = build_models(small_dims, seed=seed)
        freeze_non_trainable(enc, psm)
        cfg = mf.TrainConfig(base_lr=1e-4, qv_lr_multiplier=1.0)
        opt, scales = make_optimizer(enc, psm, cfg)
        cache = _build_cache(samples, enc.dims, "mask")
        batch = cache[:4]
        e_t = torch.as_tensor(text.values)
        losses = []
        for _ in range(11):
            loss = _batch_loss(enc, psm, e_t, batch)
            losses.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        diffs = np.diff(losses[:11])
        assert (diffs < 0).all(), f"seed {seed}: {losses}"


def test_single_sample_memorization(tiny_samples):
    dims = mf.EncoderDims(layers=2, extractor_layers=1, width=32, embed_dim=16,
                          heads=4, grid=(4, 4), patch=4)
    samples, vocab = tiny_samples
    enc = mf.init_encoder(dims, seed=0)
    psm = mf.PsmHead("sim_affine", embed_dim=16, hidden=24, seed=0)
    text = mf.toy_encode(vocab, 16, seed=0)
    cfg = mf.TrainConfig(total_steps=200, batch_size=1, base_lr=1e-3, seed=0)
    result = mf.train(cfg, samples[:1], enc, text, psm)
    assert result.metrics[-1]["loss"] < 0.05


def test_train_determinism(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    logs = []
    for _ in range(2):
        enc, psm = build_models(small_dims, seed=4)
        cfg = mf.TrainConfig(total_steps=5, batch_size=2, seed=7)
        result = mf.train(cfg, samples, enc, text, psm)
        logs.append([(m["step"], m["lr"], m["loss"]) for m in result.metrics])
    assert logs[0] == logs[1]


def test_train_nan_abort_restores_last_good(small_dims, tiny_samples, monkeypatch):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=5)
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)

    calls = {"n": 0}
    import maskfuse.training as train_mod
    real = train_mod._batch_loss

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        loss = real(*args, **kwargs)
        if calls["n"] >= 4:
            return loss * float("nan")
        return loss

    monkeypatch.setattr(train_mod, "_batch_loss", poisoned)
    cfg = mf.TrainConfig(total_steps=10, batch_size=2, seed=2)
    with pytest.warns(UserWarning, match="non-finite"):
        result = mf.train(cfg, samples, enc, text, psm)
    assert result.aborted
    assert result.steps_run == 3
    assert all(np.isfinite(m["loss"]) for m in result.metrics)
    for p in list(enc.parameters()) + list(psm.parameters()):
        assert torch.isfinite(p).all()


def test_seen_category_filter_restricts_instances(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    cache = _build_cache(samples, small_dims, "mask", category_filter=(0, 1))
    labels = np.concatenate([c.labels for c in cache])
    assert set(labels.tolist()) <= {0, 1}
    full = _build_cache(samples, small_dims, "mask")
    assert sum(len(c.labels) for c in full) > len(labels)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def test_prior_box_is_bounding_rectangle(small_dims):
    mask = np.zeros((16, 16))
    mask[2:6, 3:9] = 1.0  # spans grid rows 0..1, cols 0..2 on the 4x4 grid
    row_mask = prior_token_mask(mask, "mask", small_dims.grid)
    row_box = prior_token_mask(mask, "box", small_dims.grid)
    assert row_box.sum() >= row_mask.sum() - 1e-12
    rect = np.zeros((16, 16))
    rect[2:6, 3:9] = 1.0
    assert np.allclose(row_box, mf.mask_to_token_grid(rect, small_dims.grid))


def test_prior_box_covers_mask_support():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mask = np.zeros((20, 20))
        y, x = rng.integers(0, 12, 2)
        h, w = rng.integers(3, 8, 2)
        mask[y:y + h, x:x + w] = 1.0
        box = prior_token_mask(mask, "box", (5, 5))
        raw = prior_token_mask(mask, "mask", (5, 5))
        assert (box >= raw - 1e-12).all()


def test_prior_pixel_is_one_hot(small_dims):
    mask = np.zeros((16, 16))
    mask[4:12, 4:12] = 1.0
    row = prior_token_mask(mask, "pixel", small_dims.grid)
    assert row.sum() == 1.0
    assert (row == 1.0).sum() == 1
    full = prior_token_mask(mask, "mask", small_dims.grid)
    assert row.argmax() == full.argmax()


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------


def test_grad_check_linear_model_is_exact():
    w = torch.tensor([1.5, -0.5, 2.0], dtype=torch.float64, requires_grad=True)
    x = torch.tensor([0.3, 0.7, -0.2], dtype=torch.float64)

    def loss_fn():
        return (w * x).sum()

    assert mf.grad_check(loss_fn, {"w": w}, n_coords=3) <= 1e-8


def test_grad_check_flags_wrong_gradient():
    w = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, value):
            return (value * value).sum()

        @staticmethod
        def backward(ctx, grad):
            return grad * torch.tensor([1.0, 1.0], dtype=torch.float64)

    def loss_fn():
        return Wrong.apply(w)

    assert mf.grad_check(loss_fn, {"w": w}, n_coords=2) > 0.1


def test_grad_check_full_pipeline(small_dims, tiny_samples):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=6)
    psm = mf.PsmHead("sim_affine", embed_dim=small_dims.embed_dim, hidden=24,
                     seed=6, log_logit_scale=math.log(10.0))
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    cache = _build_cache(samples[:2], enc.dims, "mask")
    e_t = torch.as_tensor(text.values)

    def loss_fn():
        return _batch_loss(enc, psm, e_t, cache)

    err = mf.grad_check(loss_fn, mf.trainable_set(enc, psm), n_coords=4, seed=0)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bytes_and_outputs(small_dims, tiny_samples, tmp_path):
    samples, vocab = tiny_samples
    enc, psm = build_models(small_dims, seed=8)
    text = mf.toy_encode(vocab, small_dims.embed_dim, seed=0)
    cfg = mf.TrainConfig(total_steps=2, batch_size=2, seed=0)
    mf.train(cfg, samples, enc, text, psm)

    first = tmp_path / "ckpt_a"
    mf.save_checkpoint(first, enc, psm, cfg, step=2, text_embeddings=text, vocab=vocab)
    loaded = mf.load_checkpoint(first, config=cfg)
    second = tmp_path / "ckpt_b"
    mf.save_checkpoint(second, loaded.encoder, loaded.psm,
                       mf.TrainConfig.from_json(loaded.config), loaded.step,
                       text_embeddings=loaded.text_embeddings, vocab=loaded.vocab)
    files_a = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel

    patches = mf.patchify(samples[0].image, small_dims)
    masks, _ = mf.build_token_masks(samples[0].masks, small_dims.grid)
    with torch.no_grad():
        out_orig = enc.fuse(enc.extract(patches), masks)
        out_loaded = loaded.encoder.fuse(loaded.encoder.extract(patches), masks)
    assert (out_orig == out_loaded).all()


def test_checkpoint_truncated_tensor_names_tensor(small_dims, tmp_path):
    enc, psm = build_models(small_dims, seed=9)
    cfg = mf.TrainConfig()
    mf.save_checkpoint(tmp_path / "c", enc, psm, cfg, step=0)
    victim = tmp_path / "c" / "tensors" / "encoder.log_alpha.mcpp"
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(mf.DataFormatError, match="log_alpha"):
        mf.load_checkpoint(tmp_path / "c")


def test_checkpoint_digest_guard(small_dims, tmp_path):
    enc, psm = build_models(small_dims, seed=10)
    cfg = mf.TrainConfig(seed=1)
    mf.save_checkpoint(tmp_path / "c", enc, psm, cfg, step=5)
    other = mf.TrainConfig(seed=2)
    with pytest.raises(ValueError, match="different config"):
        mf.load_checkpoint(tmp_path / "c", config=other)
    with pytest.warns(UserWarning, match="digest mismatch"):
        loaded = mf.load_checkpoint(tmp_path / "c", config=other, override=True)
    assert loaded.step == 5


def test_train_config_json_round_trip():
    cfg = mf.TrainConfig(base_lr=3e-4, seen_category_filter=(0, 2), prior="box")
    back = mf.TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_train_config_validation():
    with pytest.raises(ValueError):
        mf.TrainConfig(base_lr=-1.0)
    with pytest.raises(ValueError):
        mf.TrainConfig(total_steps=0)
    with pytest.raises(ValueError):
        mf.TrainConfig(qv_lr_multiplier=0.5)
    with pytest.raises(ValueError):
        mf.TrainConfig(prior="nonsense")
