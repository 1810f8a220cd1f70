import math
import warnings

import numpy as np
import pytest
import torch

from conftest import SMALL_ENC
from stvlp.corpus import load_corpus
from stvlp.encoders import EncoderConfig
from stvlp.spatial import global_alignment_loss, local_alignment_loss
from stvlp.temporal import temporal_loss
from stvlp.trainer import (
    DivergenceError,
    METRICS_HEADER,
    PairStore,
    PretrainModel,
    TrainConfig,
    compose_batches,
    forward_features,
    grad_check,
    load_model,
    lr_at_step,
    model_state_arrays,
    save_model,
    total_loss,
    train,
)


# --- learning-rate schedule -----------------------------------------------------


def test_lr_warmup_then_cosine_shape():
    total, warmup, lr, init_lr = 40, 8, 1e-3, 1e-8
    values = [lr_at_step(s, total, warmup, lr, init_lr) for s in range(total)]
    for a, b in zip(values[: warmup - 1], values[1 : warmup]):
        assert b > a
    assert abs(values[warmup - 1] - lr) < 1e-18  # warmup lands exactly on lr
    for a, b in zip(values[warmup:], values[warmup + 1 :]):
        assert b <= a
    assert values[-1] < lr * 0.02  # nearly annealed at the last step


def test_lr_first_step_leaves_init():
    first = lr_at_step(0, 100, 10, 1e-3, 1e-8)
    assert first == pytest.approx(1e-8 + (1e-3 - 1e-8) / 10)


def test_lr_no_warmup_starts_at_peak():
    assert lr_at_step(0, 10, 0, 1e-3, 1e-8) == pytest.approx(1e-3)


def test_lr_clamps_past_schedule_end():
    assert lr_at_step(500, 100, 10, 1e-3, 1e-8) == pytest.approx(0.0)


# --- batch composition ------------------------------------------------------------


def test_compose_batches_partitions(tiny_corpus):
    sequences = tiny_corpus.sequences()
    rng = np.random.default_rng(4)
    batches = compose_batches(sequences, 5, rng)
    sizes = [len(b) for b in batches]
    assert sum(sizes) == len(sequences)
    assert all(s == 5 for s in sizes[:-1])
    assert 1 <= sizes[-1] <= 5
    seen = [s.sequence_id for batch in batches for s in batch]
    assert sorted(seen) == sorted(s.sequence_id for s in sequences)


def test_compose_batches_seeded(tiny_corpus):
    sequences = tiny_corpus.sequences()
    a = compose_batches(sequences, 3, np.random.default_rng(7))
    b = compose_batches(sequences, 3, np.random.default_rng(7))
    assert [[s.sequence_id for s in batch] for batch in a] == [
        [s.sequence_id for s in batch] for batch in b
    ]


def test_compose_batches_validation(tiny_corpus):
    with pytest.raises(ValueError, match="batch_sequences"):
        compose_batches(tiny_corpus.sequences(), 0, np.random.default_rng(0))


# --- batching and features ---------------------------------------------------------


def test_pair_store_batch_layout(tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = [s for s in tiny_corpus.sequences() if s.length == 4][:2]
    batch = store.batch(seqs)
    assert batch.n_pairs == 8
    assert batch.seq_slices == [(0, 4), (4, 4)]
    assert batch.frontal.shape == (8, 16, 16)
    assert batch.tokens.shape == (8, SMALL_ENC.max_text_len)
    assert batch.tokens.dtype == torch.int64
    assert batch.pad_mask.dtype == torch.bool


def test_forward_features_trims(small_model, tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = tiny_corpus.sequences()[:3]
    batch = store.batch(seqs)
    xg, rg, image_locals, text_locals = forward_features(small_model, batch)
    n_p = SMALL_ENC.n_patches
    assert xg.shape == (batch.n_pairs, SMALL_ENC.proj_dim)
    assert rg.shape == (batch.n_pairs, SMALL_ENC.proj_dim)
    for i in range(batch.n_pairs):
        expected_rows = 2 * n_p if bool(batch.has_lateral[i]) else n_p
        assert image_locals[i].shape == (expected_rows, SMALL_ENC.proj_dim)
        n_real = int((~batch.pad_mask[i]).sum())
        assert text_locals[i].shape == (n_real, SMALL_ENC.proj_dim)


def test_forward_features_zero_lateral_rows_dropped(small_model, tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = tiny_corpus.sequences()[:1]
    batch = store.batch(seqs)
    batch.has_lateral[0] = False  # pretend the first study lost its lateral
    _, _, image_locals, _ = forward_features(small_model, batch)
    assert image_locals[0].shape[0] == SMALL_ENC.n_patches


# --- combined objective ---------------------------------------------------------------


def test_total_loss_breakdown_identity(small_model, tiny_corpus):
    cfg = TrainConfig(lambda1=0.7, lambda2=1.3)
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = [s for s in tiny_corpus.sequences() if s.length == 4][:2]
    batch = store.batch(seqs)
    breakdown, loss = total_loss(small_model, batch, cfg)
    combined = (
        breakdown.global_loss
        + cfg.lambda1 * (breakdown.vla + breakdown.tla)
        + cfg.lambda2 * (breakdown.fmc_image + breakdown.rmr_image
                         + breakdown.fmc_text + breakdown.rmr_text)
    )
    assert abs(breakdown.total - combined) < 1e-12
    assert abs(float(loss.detach()) - breakdown.total) < 1e-15
    assert 0.0 <= breakdown.cycle_back <= 1.0


def test_total_loss_components_match_direct_calls(small_model, tiny_corpus):
    cfg = TrainConfig()
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = [s for s in tiny_corpus.sequences() if s.length == 4][:2]
    batch = store.batch(seqs)
    breakdown, _ = total_loss(small_model, batch, cfg)
    with torch.no_grad():
        xg, rg, il, tl = forward_features(small_model, batch)
        g = float(global_alignment_loss(xg, rg, cfg.tau1))
        vla, tla = local_alignment_loss(il, tl, small_model.token_weighter,
                                        small_model.patch_weighter, cfg.tau2)
        parts = [temporal_loss(xg[s : s + n], rg[s : s + n], cfg.temporal_params())
                 for s, n in batch.seq_slices]
        fmc_i = sum(float(p.fmc_image) for p in parts) / len(parts)
    assert abs(breakdown.global_loss - g) < 1e-12
    assert abs(breakdown.vla - float(vla)) < 1e-12
    assert abs(breakdown.tla - float(tla)) < 1e-12
    assert abs(breakdown.fmc_image - fmc_i) < 1e-12


def test_total_loss_lambda2_zero_removes_temporal(small_model, tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    seqs = [s for s in tiny_corpus.sequences() if s.length == 4][:2]
    batch = store.batch(seqs)
    breakdown, _ = total_loss(small_model, batch, TrainConfig(lambda2=0.0))
    expected = breakdown.global_loss + breakdown.vla + breakdown.tla
    assert abs(breakdown.total - expected) < 1e-12
    # the components are still reported for the log
    assert breakdown.fmc_image > 0.0


def test_total_loss_singletons_have_no_temporal(small_model, tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    singles = [s for s in tiny_corpus.sequences() if s.length == 1]
    batch = store.batch(singles)
    breakdown, _ = total_loss(small_model, batch, TrainConfig())
    assert breakdown.fmc_image == 0.0
    assert breakdown.rmr_text == 0.0
    assert math.isnan(breakdown.cycle_back)


def test_total_loss_raises_named_divergence(small_model, tiny_corpus):
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    batch = store.batch(tiny_corpus.sequences()[:2])
    with torch.no_grad():
        small_model.image_encoder.proj.weight.fill_(float("nan"))
    with pytest.raises(DivergenceError, match="global"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            total_loss(small_model, batch, TrainConfig())


# --- training loop -----------------------------------------------------------------


def test_zero_epochs_checkpoint_equals_initialization(tmp_path, tiny_corpus_dir):
    cfg = TrainConfig(epochs=0, seed=5)
    result = train(cfg, tiny_corpus_dir, tmp_path, enc_cfg=SMALL_ENC)
    assert result.steps == 0
    model, _, _, meta = load_model(result.checkpoint_path)
    assert meta["step"] == 0
    torch.manual_seed(cfg.seed)
    reference = PretrainModel(SMALL_ENC)
    got = model_state_arrays(model)
    want = model_state_arrays(reference)
    assert set(got) == set(want)
    for name in got:
        np.testing.assert_array_equal(got[name], want[name])


def test_two_runs_are_byte_identical(tmp_path, tiny_corpus_dir):
    cfg = TrainConfig(epochs=1, batch_sequences=6, lr=1e-3, seed=11)
    a = train(cfg, tiny_corpus_dir, tmp_path / "a", enc_cfg=SMALL_ENC)
    b = train(cfg, tiny_corpus_dir, tmp_path / "b", enc_cfg=SMALL_ENC)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()


def test_metrics_csv_shape_and_lr_column(tiny_run, tiny_corpus):
    lines = tiny_run.metrics_path.read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + tiny_run.steps
    n_seq = len(tiny_corpus.sequences())
    steps_per_epoch = math.ceil(n_seq / 4)
    total = 2 * steps_per_epoch
    for row in lines[1:]:
        cells = row.split(",")
        assert len(cells) == len(METRICS_HEADER.split(","))
        step = int(cells[0])
        logged_lr = float(cells[9])
        assert logged_lr == pytest.approx(
            lr_at_step(step, total, steps_per_epoch, 1e-3, 1e-8), abs=0, rel=0
        )
        assert math.isfinite(float(cells[8]))


def test_checkpoint_cadence(tmp_path, tiny_corpus_dir):
    cfg = TrainConfig(epochs=2, batch_sequences=8, lr=1e-4, seed=2, checkpoint_every=2)
    result = train(cfg, tiny_corpus_dir, tmp_path, enc_cfg=SMALL_ENC)
    cadence = sorted(p.name for p in tmp_path.glob("checkpoint_step*.stvc"))
    assert cadence == [f"checkpoint_step{s:06d}.stvc" for s in range(2, result.steps + 1, 2)]


def test_divergence_aborts_but_saves(tmp_path, tiny_corpus_dir):
    cfg = TrainConfig(epochs=3, batch_sequences=4, lr=1e8, seed=0)
    with pytest.raises(DivergenceError, match="non-finite"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train(cfg, tiny_corpus_dir, tmp_path, enc_cfg=SMALL_ENC)
    assert (tmp_path / "checkpoint_final.stvc").exists()
    load_model(tmp_path / "checkpoint_final.stvc")  # file is loadable


def test_save_load_round_trip_reproduces_outputs(tmp_path, tiny_corpus, small_model):
    cfg = TrainConfig(seed=1)
    path = tmp_path / "m.stvc"
    save_model(path, small_model, cfg, tiny_corpus.vocab, step=17)
    loaded, loaded_cfg, vocab, meta = load_model(path)
    assert loaded_cfg == cfg
    assert vocab.tokens == tiny_corpus.vocab.tokens
    assert meta["step"] == 17
    store = PairStore(tiny_corpus, SMALL_ENC.max_text_len)
    batch = store.batch(tiny_corpus.sequences()[:2])
    with torch.no_grad():
        g1, p1 = small_model.image_encoder(batch.frontal, batch.lateral)
        g2, p2 = loaded.image_encoder(batch.frontal, batch.lateral)
    np.testing.assert_array_equal(g1.numpy(), g2.numpy())
    np.testing.assert_array_equal(p1.numpy(), p2.numpy())


# --- gradient checking ----------------------------------------------------------------


def test_grad_check_fmc_and_rmr_tight():
    for name in ("fmc", "rmr"):
        result = grad_check(name, seed=1)
        assert result.max_rel_err < 1e-4
        assert result.n_elements == 64


def test_grad_check_unknown_loss():
    with pytest.raises(ValueError, match="unknown loss"):
        grad_check("nope")


def test_whole_model_sampled_finite_differences(tiny_corpus):
    # end-to-end backprop through both encoders, sampled parameter coordinates
    enc = EncoderConfig(image_size=16, patch_size=8, embed_dim=16, proj_dim=8,
                        n_heads=2, n_blocks=1, vocab_size=25, max_text_len=8,
                        n_text_blocks=1)
    torch.manual_seed(3)
    model = PretrainModel(enc)
    cfg = TrainConfig()
    store = PairStore(tiny_corpus, enc.max_text_len)
    seqs = [s for s in tiny_corpus.sequences() if s.length == 4][:1]
    batch = store.batch(seqs)

    def loss_value() -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, loss = total_loss(model, batch, cfg)
        return float(loss.detach())

    _, loss = total_loss(model, batch, cfg)
    model.zero_grad()
    loss.backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    names = sorted(params)
    eps = 1e-5
    checked = 0
    for _ in range(30):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = p.data.reshape(-1)
        idx = int(rng.integers(flat.numel()))
        original = float(flat[idx])
        flat[idx] = original + eps
        f_plus = loss_value()
        flat[idx] = original - eps
        f_minus = loss_value()
        flat[idx] = original
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = float(p.grad.reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
        assert rel < 1e-4, f"{name}[{idx}]: analytic={analytic} numeric={numeric}"
        checked += 1
    assert checked == 30
