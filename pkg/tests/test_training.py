import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import micro_config

from masknet.checkpoint import load_checkpoint
from masknet.errors import ContractError, ModeError, NonFiniteError, TrainingDiverged
from masknet.synth import build_dataset
from masknet.training import (
    Adam,
    SGD,
    MetricsReport,
    Trainer,
    evaluate,
    length_batches,
    split_train_validation,
    train,
)
from masknet.autodiff import Tensor


@pytest.fixture(scope="module")
def baseline_run():
    return train(micro_config("baseline", epochs=40))


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([0.5, -3.0], dtype=np.float32)
    Adam({"p": p}, lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)


def test_sgd_momentum():
    p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.5)
    for _ in range(2):
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
    np.testing.assert_allclose(p.data, [-0.1 - 0.15], rtol=1e-6)


def test_batches_share_length_and_cover_everything():
    ds = build_dataset(micro_config().data)
    exs = ds["train"]
    batches = length_batches(exs, 8, np.random.default_rng(0))
    seen = np.concatenate(batches)
    assert sorted(seen.tolist()) == list(range(len(exs)))
    for b in batches:
        assert len({exs[i].features.shape[1] for i in b}) == 1 and len(b) <= 8


def test_validation_split_is_disjoint():
    exs = build_dataset(micro_config().data)["train"]
    tr, va = split_train_validation(exs, 0.1, 0)
    assert len(va) == round(0.1 * len(exs)) and len(tr) + len(va) == len(exs)
    assert not {e.id for e in tr} & {e.id for e in va}


def test_micro_baseline_is_learnable(baseline_run):
    _, report = baseline_run
    assert report.wer["train"] < 20
    assert report.wer["train"] < report.wer["test_in"]


def test_report_ranges_and_records(baseline_run):
    ckpt, report = baseline_run
    assert all(v >= 0 for v in report.wer.values())
    assert all(0 <= v <= 100 for v in report.probe_accuracy.values())
    rows = report.records()
    assert all(len(r) == 5 for r in rows)
    assert ("baseline-s0", "baseline", "test_in", "wer", report.wer["test_in"]) in rows
    assert not any(r[3] == "step_seconds" for r in rows)
    assert report.timing_records()[0][3] == "step_seconds"
    assert len(ckpt.curves["task_loss"]) == 40


def test_training_is_deterministic():
    a, ra = train(micro_config("masknet", epochs=3))
    b, rb = train(micro_config("masknet", epochs=3))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert ra.records() == rb.records()


def test_baseline_unaffected_by_adversarial_code_paths():
    # the discriminator weight has no effect on a baseline run
    a, _ = train(micro_config("baseline", epochs=3))
    b, _ = train(micro_config("baseline", epochs=3, extra="model.adversarial_weight = 7.0\n"))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_masknet_task_loss_falls_while_adversary_does_not_collapse():
    ckpt, report = train(micro_config("masknet", epochs=30))
    task = ckpt.curves["task_loss"]
    adv = ckpt.curves["adversarial_loss"]
    assert task[-1] < 0.5 * task[0]
    assert min(adv) > 0.1 * math.log(micro_config().data.num_accents - 1)


def test_evaluate_is_deterministic_and_guards(baseline_run, tmp_path):
    ckpt, _ = baseline_run
    a = evaluate(ckpt, "test_in")
    b = evaluate(ckpt, "test_in")
    assert a == b
    with pytest.raises(ContractError):
        evaluate(ckpt, "dev")
    with pytest.raises(ModeError, match="baseline"):
        evaluate(ckpt, "test_in", require_mode="masknet")


def test_outputs_written(tmp_path):
    train(micro_config("grl", epochs=2), out_dir=tmp_path)
    for name in ("final.ckpt", "best.ckpt", "metrics.tsv", "timing.tsv"):
        assert (tmp_path / name).exists()
    best = load_checkpoint(tmp_path / "best.ckpt")
    assert best.config.model.mode == "grl"
    with pytest.raises(ModeError):
        evaluate(best, "test_in", require_mode="masknet")


def test_metric_files_are_bitwise_reproducible(tmp_path):
    for d in ("a", "b"):
        train(micro_config("masknet", epochs=3), out_dir=tmp_path / d)
    for name in ("metrics.tsv", "final.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    tr = Trainer(micro_config("baseline", epochs=3))
    tr.run_epoch()
    calls = {"n": 0}
    real = tr.train_step

    def flaky(examples, idx):
        calls["n"] += 1
        if calls["n"] > 2:
            raise NonFiniteError("loss is nan")
        return real(examples, idx)

    monkeypatch.setattr(tr, "train_step", flaky)
    with pytest.raises(TrainingDiverged) as info:
        tr.fit(tmp_path)
    good = info.value.last_good_checkpoint
    assert good.epoch == 1
    assert load_checkpoint(tmp_path / "last_good.ckpt").epoch == 1


def test_dataset_config_mismatch():
    cfg = micro_config()
    other = build_dataset(replace(cfg.data, seed=9))
    with pytest.raises(ContractError):
        Trainer(cfg, other)


def test_metrics_report_fields():
    r = MetricsReport("r", "masknet", 0, wer={"test_in": 1.0})
    assert r.records() == [("r", "masknet", "test_in", "wer", 1.0)]
