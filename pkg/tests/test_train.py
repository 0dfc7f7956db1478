import numpy as np
import pytest

from aslkit.data_io import RunConfig
from aslkit.synth import SynthSpec, synth_generate
from aslkit.train import (
    compute_loss,
    decode_all,
    evaluate,
    load_samples,
    loss_config_from,
    model_from_params,
    predict_dense,
    sensitivity_from,
    train,
)

SMALL = {
    "model.embed_dim": 16,
    "model.heads": 2,
    "model.depth": 1,
    "model.levels": 3,
    "train.epochs": 2,
    "train.batch": 4,
    "train.lr": 3e-3,
}


@pytest.fixture(scope="module")
def mq(tmp_path_factory):
    spec = SynthSpec(n_videos=8, n_val=2, T=64, D=6, C=3, instances_per_video=2, max_len=20)
    return synth_generate(0, spec, tmp_path_factory.mktemp("mq"))


@pytest.fixture(scope="module")
def nlq(tmp_path_factory):
    spec = SynthSpec(n_videos=6, n_val=2, T=64, D=6, C=3, instances_per_video=2, max_len=20, mode="nlq", text_dim=5)
    return synth_generate(0, spec, tmp_path_factory.mktemp("nlq"))


def test_training_runs_and_logs(mq):
    result = train(mq, RunConfig(SMALL))
    assert len(result.history) == 2
    rec = result.history[-1]
    assert np.isfinite(rec.loss) and rec.n_pos > 0
    assert len(rec.row().split("\t")) == len(rec.COLUMNS)
    assert all(0.0 <= m <= 1.0 for m in rec.mu_cls)
    assert abs(rec.h_cls_mean - 1.0) < 1e-9


def test_training_is_bit_identical(mq):
    a = train(mq, RunConfig(SMALL)).parameters()
    b = train(mq, RunConfig(SMALL)).parameters()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_seed_changes_result(mq):
    a = train(mq, RunConfig({**SMALL, "train.epochs": 1})).parameters()
    b = train(mq, RunConfig({**SMALL, "train.epochs": 1, "train.seed": 9})).parameters()
    assert not np.array_equal(a["head.cls.out.w"], b["head.cls.out.w"])


def test_asl_off_keeps_sensitivity_flat(mq):
    result = train(mq, RunConfig({**SMALL, "train.epochs": 1, "loss.asl": False}))
    assert result.history[-1].h_cls_std < 1e-6  # frozen at sigma_max, flat to within 1e-6
    assert result.history[-1].mu_cls == [0.5] * 3


def test_loss_decreases_on_tiny_set(mq):
    result = train(mq, RunConfig({**SMALL, "train.epochs": 8}))
    assert result.history[-1].loss < result.history[0].loss


def test_predict_and_evaluate_round_trip(mq):
    run = RunConfig(SMALL)
    result = train(mq, run)
    model, sens = model_from_params(result.model.config, result.parameters())
    np.testing.assert_array_equal(sens.mu_cls.data, result.sensitivity.mu_cls.data)
    samples = load_samples(mq, "val")
    dense = predict_dense(model, samples)
    again = predict_dense(result.model, samples)
    np.testing.assert_array_equal(dense[0].cls_logits, again[0].cls_logits)
    preds = decode_all(dense, run, "mq")
    report = evaluate(preds, samples, run, "mq")
    assert 0.0 <= report.average_map <= 1.0


def test_model_from_params_rejects_missing(mq):
    result = train(mq, RunConfig({**SMALL, "train.epochs": 1}))
    params = result.parameters()
    params.pop("head.cls.out.w")
    with pytest.raises(ValueError):
        model_from_params(result.model.config, params)


def test_nlq_training_and_eval(nlq):
    run = RunConfig(SMALL)
    samples = load_samples(nlq, "train")
    assert len(samples) == 8  # one sample per query
    assert samples[0].tokens is not None
    result = train(nlq, run)
    assert result.history[-1].nce > 0
    val = load_samples(nlq, "val")
    preds = decode_all(predict_dense(result.model, val), run, "nlq")
    assert max(sum(p.video_id == s.sample_id for p in preds) for s in val) <= 5
    report = evaluate(preds, val, run, "nlq")
    assert set(report.as_dict()) >= {"R@1@0.3", "R@5@0.5"}


def test_loss_weights_reach_sensitivity_gradients(mq):
    run = RunConfig(SMALL)
    samples = load_samples(mq, "train")[:2]
    from aslkit.network import Model
    from aslkit.data_io import model_config_from

    model = Model.init(model_config_from(run, mq), seed=0)
    sens = sensitivity_from(run, 3)
    parts = compute_loss(model, sens, samples, loss_config_from(run))
    parts.total.backward()
    assert np.any(sens.mu_cls.grad != 0) and np.any(sens.sigma_loc.grad != 0)
