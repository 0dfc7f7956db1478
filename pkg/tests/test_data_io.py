import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aslkit.core import TimeSegment
from aslkit.data_io import (
    ConfigError,
    FormatError,
    RunConfig,
    load_checkpoint,
    load_features,
    load_manifest,
    load_predictions,
    model_config_from,
    save_checkpoint,
    save_features,
    save_predictions,
)
from aslkit.network import Model, ModelConfig
from aslkit.postprocess import SegmentPrediction
from aslkit.synth import SynthSpec, synth_generate


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=st.floats(-1e6, 1e6)))
def test_feature_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("f") / "x.aslf"
    save_features(path, data)
    np.testing.assert_array_equal(load_features(path), data)


def test_feature_header_is_little_endian(tmp_path):
    p = tmp_path / "x.aslf"
    save_features(p, np.zeros((3, 2)))
    raw = p.read_bytes()
    assert raw[:4] == b"ASLF"
    assert struct.unpack("<III", raw[4:16]) == (1, 3, 2)
    assert len(raw) == 16 + 3 * 2 * 8


def test_feature_errors_carry_offsets(tmp_path):
    p = tmp_path / "x.aslf"
    save_features(p, np.ones((4, 2)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="payload length"):
        load_features(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        load_features(p)
    assert info.value.offset == 0
    p.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="version 2"):
        load_features(p)
    bad = bytearray(raw)
    bad[16 + 8 * 3 : 16 + 8 * 4] = struct.pack("<d", float("nan"))
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError) as info:
        load_features(p)
    assert info.value.offset == 16 + 24
    p.write_bytes(b"AS")
    with pytest.raises(FormatError, match="truncated"):
        load_features(p)


@pytest.fixture
def dataset(tmp_path):
    spec = SynthSpec(n_videos=4, n_val=1, T=64, D=6, C=3, instances_per_video=2, max_len=20)
    return synth_generate(3, spec, tmp_path / "ds"), tmp_path / "ds"


def test_manifest_round_trip(dataset):
    manifest, root = dataset
    again = load_manifest(root / "manifest.json")
    assert [v.video_id for v in again.videos] == [v.video_id for v in manifest.videos]
    assert again.videos[0].instances == manifest.videos[0].instances
    assert [v.video_id for v in again.split("val")] == ["v0003"]
    assert again.meta["seed"] == 3


def test_manifest_missing_feature_file(dataset):
    _, root = dataset
    (root / "features" / "v0001_s0.aslf").unlink()
    with pytest.raises(FormatError, match="does not exist"):
        load_manifest(root / "manifest.json")


def test_manifest_dimension_mismatch(dataset):
    _, root = dataset
    save_features(root / "features" / "v0002_s0.aslf", np.zeros((64, 5)))
    with pytest.raises(FormatError, match="dim"):
        load_manifest(root / "manifest.json")


def test_manifest_bad_label(dataset):
    _, root = dataset
    doc = json.loads((root / "manifest.json").read_text())
    doc["videos"][0]["instances"][0]["label"] = 7
    (root / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="label"):
        load_manifest(root / "manifest.json")


def test_manifest_invalid_json(tmp_path):
    (tmp_path / "m.json").write_text("{nope")
    with pytest.raises(FormatError) as info:
        load_manifest(tmp_path / "m.json")
    assert info.value.offset == 1


def test_nlq_manifest_round_trip(tmp_path):
    spec = SynthSpec(n_videos=2, T=64, D=4, C=3, instances_per_video=2, max_len=20, mode="nlq", text_dim=5)
    synth_generate(0, spec, tmp_path)
    m = load_manifest(tmp_path / "manifest.json")
    assert m.num_classes == 1 and m.text_dim == 5
    assert len(m.videos[0].queries) == 2


def test_run_config_parsing_and_overrides():
    cfg = RunConfig.loads("# comment\ntrain.lr = 0.01\nloss.asl=false\neval.thresholds=0.3,0.5\n")
    assert cfg["train.lr"] == 0.01 and cfg["loss.asl"] is False
    assert cfg["eval.thresholds"] == (0.3, 0.5)
    cfg.apply_overrides(["train.epochs=3"])
    assert cfg["train.epochs"] == 3
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize(
    "text",
    ["bogus.key=1", "train.lr=-1", "train.lr=abc", "loss.asl=maybe", "train.epochs=0", "loss.mu_init=2", "train.lr"],
)
def test_run_config_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)


def test_model_config_from_splits_embedding(dataset):
    manifest, _ = dataset
    manifest.source_dims = [6, 4, 3]
    cfg = model_config_from(RunConfig({"model.embed_dim": 32}), manifest)
    assert cfg.proj_dims == (12, 10, 10)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(input_dims=(3,), proj_dims=(8,), embed_dim=8, heads=2, depth=1, levels=2, num_classes=2)
    params = {k: v.data for k, v in Model.init(cfg).params.items()}
    params["sens.mu_cls"] = np.array([0.2, 0.4])
    save_checkpoint(tmp_path / "m.aslm", cfg, params)
    cfg2, params2 = load_checkpoint(tmp_path / "m.aslm")
    assert cfg2 == cfg
    assert params2.keys() == params.keys()
    for k in params:
        np.testing.assert_array_equal(params2[k], params[k])


def test_checkpoint_corruption(tmp_path):
    cfg = ModelConfig(input_dims=(3,), proj_dims=(8,), embed_dim=8, heads=2, depth=1, levels=2, num_classes=2)
    save_checkpoint(tmp_path / "m.aslm", cfg, {"a": np.ones(3)})
    raw = (tmp_path / "m.aslm").read_bytes()
    (tmp_path / "m.aslm").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "m.aslm")
    (tmp_path / "m.aslm").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(tmp_path / "m.aslm")


def test_predictions_round_trip(tmp_path):
    preds = [SegmentPrediction("v1", TimeSegment(0.5, 2.25), 3, 0.875), SegmentPrediction("v2", TimeSegment(1.0, 4.0), 0, 0.125)]
    save_predictions(tmp_path / "p.tsv", preds)
    text = (tmp_path / "p.tsv").read_text().splitlines()
    assert text[0] == "video_id\tlabel\tstart_s\tend_s\tscore"
    assert text[1] == "v1\t3\t0.500000\t2.250000\t0.875000"
    assert load_predictions(tmp_path / "p.tsv") == preds


def test_predictions_bad_line(tmp_path):
    (tmp_path / "p.tsv").write_text("video_id\tlabel\tstart_s\tend_s\tscore\nv\t0\t3.0\t1.0\t0.5\n")
    with pytest.raises(FormatError, match="line 2"):
        load_predictions(tmp_path / "p.tsv")
