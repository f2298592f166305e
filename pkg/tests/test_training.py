"""Schedules, masking, checkpoint round trips, resume equivalence, finetuning."""

import numpy as np
import pytest

from minimod import training as tr
from minimod.data import TaskDataset, TaskExample, generate_source_corpus
from minimod.model import ModelConfig, TransformerModel
from minimod.surgery import FreezeSpec, body_checksum, params_checksum

BASE = dict(batch_size=8, seq_len=32, mask_prob=0.15)


def small_config(U=200, **kw):
    d = dict(BASE, total_updates=U, warmup_updates=min(20, U), peak_lr=3e-4, seed=3,
             checkpoint_schedule=None)
    d.update(kw)
    return tr.TrainConfig(**d)


@pytest.fixture(scope="module")
def corpus_rows():
    corpus, vocab = generate_source_corpus(7, 40_000, 256)
    return tr.pack_corpus(corpus, 32), vocab


def tiny_model(**kw):
    cfg = ModelConfig(**{**dict(l=2, h=32, a=2, V=256, s_max=32, dropout=0.0,
                                dtype="float64"), **kw})
    return TransformerModel.init(cfg, seed=1)


# -- lr schedule ---------------------------------------------------------------


def test_lr_schedule_paper_points():
    cfg = tr.TrainConfig(total_updates=125_000, batch_size=2048, seq_len=512,
                         peak_lr=7e-4, warmup_updates=10_000)
    assert tr.lr_schedule(cfg, 10_000) == pytest.approx(7e-4)
    assert tr.lr_schedule(cfg, 5_000) == pytest.approx(3.5e-4)
    assert tr.lr_schedule(cfg, 125_000) == 0.0
    assert tr.lr_schedule(cfg, 0) == 0.0
    mid = (125_000 + 10_000) // 2
    assert tr.lr_schedule(cfg, mid) == pytest.approx(7e-4 / 2, rel=1e-4)


def test_lr_schedule_step_beyond_total_rejected():
    cfg = small_config()
    with pytest.raises(ValueError, match="outside"):
        tr.lr_schedule(cfg, cfg.total_updates + 1)


def test_lr_schedule_warmup_ratio_mode():
    cfg = tr.TrainConfig(total_updates=1000, batch_size=4, seq_len=16,
                         peak_lr=1e-5, warmup_ratio=0.06)
    assert cfg.warmup() == 60
    assert tr.lr_schedule(cfg, 60) == pytest.approx(1e-5)
    assert tr.lr_schedule(cfg, 30) == pytest.approx(5e-6)


def test_config_validation():
    with pytest.raises(ValueError, match="warmup"):
        tr.TrainConfig(total_updates=10, batch_size=1, seq_len=8, warmup_updates=11)
    with pytest.raises(ValueError, match="sorted"):
        tr.TrainConfig(total_updates=10, batch_size=1, seq_len=8, warmup_updates=0,
                       checkpoint_schedule=[5, 3, 10])
    with pytest.raises(ValueError, match="end at"):
        tr.TrainConfig(total_updates=10, batch_size=1, seq_len=8, warmup_updates=0,
                       checkpoint_schedule=[5])


def test_default_checkpoint_schedule():
    assert tr.default_checkpoint_schedule(125_000)[:3] == [5000, 10_000, 15_000]
    assert tr.default_checkpoint_schedule(12_000, dense_early=True)[:5] == [1000, 2000, 3000, 4000, 5000]
    assert tr.default_checkpoint_schedule(7_200)[-1] == 7_200
    assert tr.default_checkpoint_schedule(0) == []


# -- masking -------------------------------------------------------------------


def test_masked_fraction_statistics():
    rng = np.random.default_rng(11)
    batch = rng.integers(4, 256, size=(100, 1000)).astype(np.int32)
    mb = tr.mask_batch(np.random.default_rng(0), batch, 0.15, 256)
    frac = mb.n_masked / batch.size
    assert abs(frac - 0.15) < 0.01


def test_mask_split_80_10_10():
    rng = np.random.default_rng(2)
    batch = rng.integers(4, 256, size=(100, 1000)).astype(np.int32)
    mb = tr.mask_batch(np.random.default_rng(1), batch, 0.15, 256)
    vals = mb.ids.reshape(-1)[mb.mask_rows]
    n = mb.n_masked
    mask_frac = np.mean(vals == 1)
    keep_frac = np.mean(vals == mb.labels)
    assert abs(mask_frac - 0.8) < 0.02
    # unchanged = the 10% keep branch plus random draws that hit the label
    assert abs(keep_frac - 0.1) < 0.02
    assert np.all(mb.labels >= 4)


def test_mask_determinism():
    batch = np.random.default_rng(5).integers(4, 64, size=(4, 16)).astype(np.int32)
    a = tr.mask_batch(np.random.default_rng(9), batch, 0.2, 64)
    b = tr.mask_batch(np.random.default_rng(9), batch, 0.2, 64)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.mask_rows, b.mask_rows)


def test_mask_reserved_only_sequence_errors():
    batch = np.zeros((2, 8), dtype=np.int32)  # all [PAD]
    with pytest.raises(tr.MaskingError, match="reserved"):
        tr.mask_batch(np.random.default_rng(0), batch, 0.15, 64)


def test_mask_p_to_zero_limit_errors():
    batch = np.full((1, 8), 10, dtype=np.int32)
    with pytest.raises(tr.MaskingError, match="zero positions"):
        tr.mask_batch(np.random.default_rng(0), batch, 1e-9, 64)


def test_mask_respects_attention_mask():
    batch = np.full((2, 8), 10, dtype=np.int32)
    attn = np.zeros((2, 8), dtype=np.int8)
    attn[:, :3] = 1
    mb = tr.mask_batch(np.random.default_rng(3), batch, 0.9, 64, attn_mask=attn)
    assert np.all((mb.mask_rows % 8) < 3)


# -- packing -------------------------------------------------------------------


def test_pack_and_heldout_split(corpus_rows):
    rows, _ = corpus_rows
    assert rows.shape[1] == 32
    train, held = tr.split_heldout(rows)
    assert len(held) == max(1, int(len(rows) * 0.02))
    assert len(train) + len(held) == len(rows)
    assert np.array_equal(np.vstack([train, held]), rows)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_save_load_save_bitwise(tmp_path):
    m = tiny_model()
    opt = __import__("minimod.autodiff", fromlist=["Adam"]).Adam()
    rng = np.random.default_rng(4)
    rng.random(10)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    tr.save_checkpoint(p1, m, opt, rng, step=17, flops=123.5)
    ck = tr.load_checkpoint(p1)
    m2 = tr.restore_model(ck)
    opt2 = __import__("minimod.autodiff", fromlist=["Adam"]).Adam()
    rng2 = np.random.default_rng(0)
    tr.apply_checkpoint(ck, m2, opt2, rng2)
    tr.save_checkpoint(p2, m2, opt2, rng2, step=17, flops=123.5)
    assert p1.read_bytes() == p2.read_bytes()
    assert rng2.random() == rng.random()


def test_checkpoint_corruption_detected(tmp_path):
    m = tiny_model()
    path = tmp_path / "c.bin"
    tr.save_checkpoint(path, m, None, None, step=1, flops=0.0)
    raw = bytearray(path.read_bytes())
    raw[100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(tr.CheckpointError, match="checksum"):
        tr.load_checkpoint(path)


def test_checkpoint_mismatched_model_rejected(tmp_path):
    m = tiny_model()
    path = tmp_path / "c.bin"
    tr.save_checkpoint(path, m, None, None, step=1, flops=0.0)
    other = tiny_model(h=64, a=2)
    with pytest.raises(tr.CheckpointError, match="fingerprint"):
        tr.apply_checkpoint(tr.load_checkpoint(path), other)


# -- training loop ---------------------------------------------------------------


def test_zero_updates_single_curve_point(corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    res = tr.train_mlm(m, rows, small_config(U=0, warmup_updates=0))
    assert len(res.curve.records) == 1
    assert res.curve.records[0].step == 0


def test_desk_run_loss_decreases(corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    cfg = small_config(U=300, checkpoint_schedule=[150, 300])
    res = tr.train_mlm(m, rows, cfg)
    pts = res.curve.points("mlm_loss")
    assert pts[0].step == 0 and pts[-1].step == 300
    assert pts[-1].value < pts[0].value
    assert all(b.eflops > a.eflops for a, b in zip(pts, pts[1:]))


def test_frozen_body_checksum_constant(corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    before = body_checksum(m)
    emb_before = params_checksum(m, ["emb.tok"])
    cfg = small_config(U=100, checkpoint_schedule=[50, 100], cost_model="adapt")
    tr.train_mlm(m, rows, cfg, freeze=FreezeSpec.adaptation())
    assert body_checksum(m) == before
    assert params_checksum(m, ["emb.tok"]) != emb_before


def test_resume_bit_equivalent(tmp_path, corpus_rows):
    rows, _ = corpus_rows
    cfg = small_config(U=120, checkpoint_schedule=[60, 120], seed=13)
    m_full = tiny_model(dropout=0.1)
    out = tmp_path / "full"
    out.mkdir()
    tr.train_mlm(m_full, rows, cfg, out_dir=out)

    m_resumed = tiny_model(dropout=0.1)
    out2 = tmp_path / "resumed"
    out2.mkdir()
    tr.train_mlm(m_resumed, rows, cfg, out_dir=out2, resume_from=out / "ckpt_00000060.bin")
    assert params_checksum(m_full) == params_checksum(m_resumed)
    # the step-120 checkpoints themselves are byte-identical
    a = (out / "ckpt_00000120.bin").read_bytes()
    b = (out2 / "ckpt_00000120.bin").read_bytes()
    assert a == b


def test_seed_determinism(corpus_rows):
    rows, _ = corpus_rows
    cfg = small_config(U=60, checkpoint_schedule=[60])
    m1, m2 = tiny_model(), tiny_model()
    tr.train_mlm(m1, rows, cfg)
    tr.train_mlm(m2, rows, cfg)
    assert params_checksum(m1) == params_checksum(m2)


def test_divergence_aborts_with_step(corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    m.param("emb.tok").data[5, :] = np.nan
    with pytest.raises(tr.DivergenceError, match="update 1"):
        tr.train_mlm(m, rows, small_config(U=10, checkpoint_schedule=[10]))


def test_dual_objective_requires_secondary(corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    with pytest.raises(tr.TrainingError, match="secondary"):
        tr.train_mlm(m, rows, small_config(U=10, objective="mlm_dual",
                                           checkpoint_schedule=[10]))


def test_curve_csv_roundtrip(tmp_path, corpus_rows):
    rows, _ = corpus_rows
    m = tiny_model()
    res = tr.train_mlm(m, rows, small_config(U=40, checkpoint_schedule=[20, 40]))
    path = tmp_path / "curve.csv"
    res.curve.to_csv(path)
    back = tr.TrainingCurve.from_csv(path)
    assert [r.step for r in back.records] == [r.step for r in res.curve.records]
    for a, b in zip(back.records, res.curve.records):
        assert a.metrics == b.metrics and a.eflops == b.eflops


# -- classifier finetuning -------------------------------------------------------


def indicator_task(vocab_size=256, n=1200, seed=0):
    """Single-segment task: label 1 iff the indicator token appears."""
    rng = np.random.default_rng(seed)
    indicator = 17
    examples = []
    for i in range(n):
        seq = rng.integers(18, vocab_size, size=12).astype(np.int32)
        label = i % 2
        if label == 1:
            seq[rng.integers(0, 12)] = indicator
        examples.append(TaskExample(seq1=seq, seq2=None, label=label))
    return TaskDataset(kind="marker_parity", train=examples[:1000],
                       dev=examples[1000:1100], test=examples[1100:])


def test_zero_epoch_finetune_is_chance():
    task = indicator_task()
    m = tiny_model()
    cfg = tr.FinetuneConfig(epochs=0, batch_size=32, seq_len=16, seed=2)
    metrics = tr.finetune_classifier(m, task, cfg)
    assert abs(metrics["test_acc"] - 0.5) < 0.2  # 100-example split noise


def test_zero_epoch_chance_large_sample():
    task = indicator_task(n=2400)
    task.test = task.train[:1000]  # >= 1000 examples for a tight chance bound
    m = tiny_model()
    cfg = tr.FinetuneConfig(epochs=0, batch_size=32, seq_len=16, seed=2)
    metrics = tr.finetune_classifier(m, task, cfg)
    assert abs(metrics["test_acc"] - 0.5) < 0.05


def test_indicator_task_learned_above_95():
    task = indicator_task()
    m = tiny_model()
    emb_before = params_checksum(m, ["emb.tok", "emb.pos"])
    cfg = tr.FinetuneConfig(epochs=3, batch_size=16, seq_len=16, peak_lr=1e-3, seed=3)
    metrics = tr.finetune_classifier(m, task, cfg)
    assert metrics["test_acc"] > 0.95
    assert params_checksum(m, ["emb.tok", "emb.pos"]) == emb_before


def test_finetune_label_out_of_range():
    task = indicator_task(n=100)
    task.train[0].label = 7
    m = tiny_model()
    with pytest.raises(tr.TrainingError, match="label"):
        tr.finetune_classifier(m, task, tr.FinetuneConfig(epochs=1, seq_len=16))
